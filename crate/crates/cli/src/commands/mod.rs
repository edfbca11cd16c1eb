pub mod eval;
pub mod fit;
pub mod propagate;
pub mod synth;
