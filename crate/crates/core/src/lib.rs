// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod error;
pub mod feature_field;
pub mod flow_field;
pub mod geometry;
pub mod io;
pub mod maskops;
pub mod matching;
pub mod metrics;
pub mod numerics;
mod parallel;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result, Stage};
pub use geometry::Canvas;
pub use scalar::Scalar;

pub type SirenNet = numerics::SirenNet<f64>;
pub type SirenNet32 = numerics::SirenNet<f32>;
pub type FeatureField = feature_field::FeatureField<f64>;
pub type FeatureField32 = feature_field::FeatureField<f32>;
pub type DisplacementField = flow_field::DisplacementField<f64>;
