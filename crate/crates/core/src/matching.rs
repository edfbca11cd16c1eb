//! Flow-guided point correspondence.
//!
//! A source point is matched to the lattice point of the target canvas that
//! maximizes `cos(f_src(p), f_tgt(q)) * exp(-|q - c|^2 / (2 sigma^2))`, where
//! `c` is the flow-predicted position. Ties go to the lowest row-major index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_field::FeatureSource;
use crate::flow_field::{DisplacementField, Pair};
use crate::geometry::Canvas;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Prior width in pixels; `None` means 5% of the longer canvas side.
    pub sigma: Option<f64>,
    /// Spacing of the search lattice in pixels.
    pub search_stride: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            sigma: None,
            search_stride: 1.0,
        }
    }
}

impl MatchConfig {
    pub fn sigma_for(&self, canvas: Canvas) -> f64 {
        self.sigma.unwrap_or(0.05 * canvas.max_side() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        if !(self.search_stride.is_finite() && self.search_stride > 0.0) {
            return Err(Error::Config("search_stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub source: [f64; 2],
    pub predicted: [f64; 2],
    /// Combined objective at the match.
    pub score: f64,
    /// Raw cosine similarity at the match.
    pub cosine: f64,
    pub flow_center: [f64; 2],
}

/// Search lattice `{0, s, 2s, ...}` per axis, row-major.
pub fn search_lattice(canvas: Canvas, stride: f64) -> Vec<[f64; 2]> {
    let axis = |n: usize| -> Vec<f64> {
        let last = n.saturating_sub(1) as f64;
        (0..)
            .map(|i| i as f64 * stride)
            .take_while(|&v| v <= last)
            .collect()
    };
    let xs = axis(canvas.width);
    axis(canvas.height)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| [x, y]))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Target-frame features on the search lattice, computed once per pair and
/// shared by every point.
pub struct Matcher {
    lattice: Vec<[f64; 2]>,
    features: Vec<f64>,
    dim: usize,
    sigma: f64,
}

impl Matcher {
    pub fn new<T: Scalar, S: FeatureSource<T>>(pair: &Pair<'_, S>, cfg: &MatchConfig) -> Result<Self> {
        cfg.validate()?;
        let canvas = pair.tgt.canvas();
        let lattice = search_lattice(canvas, cfg.search_stride);
        if lattice.is_empty() {
            return Err(Error::Contract("search lattice is empty".into()));
        }
        let pts: Vec<[T; 2]> = lattice.iter().map(|p| [T::of(p[0]), T::of(p[1])]).collect();
        let features = pair
            .tgt
            .features(&pts, T::of_usize(pair.tgt_t))
            .into_iter()
            .map(|v| v.f64())
            .collect();
        Ok(Matcher {
            lattice,
            features,
            dim: pair.tgt.feature_dim(),
            sigma: cfg.sigma_for(canvas),
        })
    }

    /// Drops the spatial prior.
    pub fn unguided(mut self) -> Self {
        self.sigma = f64::INFINITY;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lattice(&self) -> &[[f64; 2]] {
        &self.lattice
    }

    /// Exhaustive argmax for a source feature and a prior centre.
    pub fn best(&self, source: [f64; 2], feature: &[f64], center: [f64; 2]) -> Result<MatchResult> {
        if feature.len() != self.dim {
            return Err(Error::Contract(format!(
                "source feature has {} channels, target has {}",
                feature.len(),
                self.dim
            )));
        }
        if !(center[0].is_finite() && center[1].is_finite()) {
            return Err(Error::Contract("flow-predicted position is not finite".into()));
        }
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let mut best: Option<MatchResult> = None;
        for (q, f) in self.lattice.iter().zip(self.features.chunks_exact(self.dim)) {
            let c = cosine(feature, f);
            let d2 = (q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2);
            let score = c * (-d2 / two_s2).exp();
            if best.is_none_or(|b| score > b.score) {
                best = Some(MatchResult {
                    source,
                    predicted: *q,
                    score,
                    cosine: c,
                    flow_center: center,
                });
            }
        }
        Ok(best.expect("lattice is nonempty"))
    }
}

fn source_features<T: Scalar, S: FeatureSource<T>>(pair: &Pair<'_, S>, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    for (i, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Contract("source point is not finite".into()).at_item(i));
        }
    }
    let pts: Vec<[T; 2]> = points.iter().map(|p| [T::of(p[0]), T::of(p[1])]).collect();
    Ok(pair
        .src
        .features(&pts, T::of_usize(pair.src_t))
        .into_iter()
        .map(|v| v.f64())
        .collect())
}

fn run<T: Scalar, S: FeatureSource<T>>(
    matcher: &Matcher,
    pair: &Pair<'_, S>,
    points: &[[f64; 2]],
    centers: &[[f64; 2]],
) -> Result<Vec<MatchResult>> {
    let feats = source_features(pair, points)?;
    let d = matcher.dim;
    points
        .par_iter()
        .zip(centers)
        .enumerate()
        .map(|(i, (p, c))| matcher.best(*p, &feats[i * d..(i + 1) * d], *c).map_err(|e| e.at_item(i)))
        .collect()
}

/// Flow-predicted positions `p + g(p)` for each point.
pub fn flow_centers<T: Scalar>(disp: &DisplacementField<T>, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let pts: Vec<[T; 2]> = points.iter().map(|p| [T::of(p[0]), T::of(p[1])]).collect();
    disp.displacements(&pts)
        .into_iter()
        .zip(points)
        .map(|(d, p)| [p[0] + d[0].f64(), p[1] + d[1].f64()])
        .collect()
}

fn check_disp<T: Scalar, S: FeatureSource<T>>(pair: &Pair<'_, S>, disp: &DisplacementField<T>) -> Result<()> {
    if disp.meta != pair.meta::<T>() {
        return Err(Error::Contract(
            "displacement field was fitted for a different pair".into(),
        ));
    }
    Ok(())
}

/// Matches each point with the flow prior; order is preserved.
pub fn match_points<T: Scalar, S: FeatureSource<T>>(
    points: &[[f64; 2]],
    pair: &Pair<'_, S>,
    disp: &DisplacementField<T>,
    cfg: &MatchConfig,
) -> Result<Vec<MatchResult>> {
    check_disp(pair, disp)?;
    let matcher = Matcher::new(pair, cfg)?;
    run(&matcher, pair, points, &flow_centers(disp, points))
}

pub fn match_point<T: Scalar, S: FeatureSource<T>>(
    p: [f64; 2],
    pair: &Pair<'_, S>,
    disp: &DisplacementField<T>,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    Ok(match_points(&[p], pair, disp, cfg)?.remove(0))
}

/// Pure cosine argmax, ignoring any flow.
pub fn match_points_unguided<T: Scalar, S: FeatureSource<T>>(
    points: &[[f64; 2]],
    pair: &Pair<'_, S>,
    cfg: &MatchConfig,
) -> Result<Vec<MatchResult>> {
    let matcher = Matcher::new(pair, cfg)?.unguided();
    run(&matcher, pair, points, points)
}

pub fn match_point_unguided<T: Scalar, S: FeatureSource<T>>(
    p: [f64; 2],
    pair: &Pair<'_, S>,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    Ok(match_points_unguided(&[p], pair, cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_field::{FlowFitConfig, PairMeta};
    use crate::numerics::SirenNet;
    use crate::synth::{AnalyticSource, Pattern, SynthSpec, Warp};

    fn source(pattern: Pattern, side: usize) -> AnalyticSource {
        AnalyticSource::new(&SynthSpec {
            frames: 2,
            height: side,
            width: side,
            dim: 4,
            pattern,
            warp: Warp::None,
            seed: 1,
        })
        .unwrap()
    }

    fn zero_disp(s: &AnalyticSource) -> DisplacementField<f64> {
        let pair = Pair::new(s, 0, s, 1);
        DisplacementField {
            net: SirenNet::zeros(FlowFitConfig::default().net_config()).unwrap(),
            meta: pair.meta::<f64>(),
            trace: vec![],
        }
    }

    #[test]
    fn lattice_is_row_major_and_strided() {
        let l = search_lattice(Canvas::new(5, 3), 2.0);
        assert_eq!(l, vec![[0.0, 0.0], [2.0, 0.0], [4.0, 0.0], [0.0, 2.0], [2.0, 2.0], [4.0, 2.0]]);
        assert_eq!(search_lattice(Canvas::new(4, 4), 1.0).len(), 16);
    }

    #[test]
    fn default_sigma_tracks_canvas() {
        assert_eq!(MatchConfig::default().sigma_for(Canvas::new(112, 80)), 0.05 * 112.0);
    }

    #[test]
    fn uniform_features_follow_the_prior() {
        let s = source(Pattern::Constant, 20);
        let pair = Pair::new(&s, 0, &s, 1);
        let m = Matcher::new::<f64, _>(&pair, &MatchConfig::default()).unwrap();
        let r = m.best([3.0, 3.0], &[0.5; 4], [10.0, 10.0]).unwrap();
        assert_eq!(r.predicted, [10.0, 10.0]);
        let r = m.best([3.0, 3.0], &[0.5; 4], [10.4, 9.7]).unwrap();
        assert_eq!(r.predicted, [10.0, 10.0]);
        // exact tie between 4 and 5: the lower index wins
        let r = m.best([3.0, 3.0], &[0.5; 4], [4.5, 0.0]).unwrap();
        assert_eq!(r.predicted, [4.0, 0.0]);
    }

    #[test]
    fn unguided_uniform_match_is_first_lattice_point() {
        let s = source(Pattern::Constant, 12);
        let r = match_point_unguided::<f64, _>([7.0, 7.0], &Pair::new(&s, 0, &s, 1), &MatchConfig::default()).unwrap();
        assert_eq!(r.predicted, [0.0, 0.0]);
        assert_eq!(r.score, r.cosine);
    }

    #[test]
    fn spike_is_found_with_flat_prior() {
        let s = source(
            Pattern::Spike {
                locations: vec![[5.0, 7.0]],
                width: 0.35,
            },
            16,
        );
        let pair = Pair::new(&s, 0, &s, 1);
        let cfg = MatchConfig {
            sigma: Some(16.0 * 2f64.sqrt()),
            ..Default::default()
        };
        let r = match_point([5.0, 7.0], &pair, &zero_disp(&s), &cfg).unwrap();
        assert_eq!(r.predicted, [5.0, 7.0]);
        assert!((r.cosine - 1.0).abs() < 1e-12);
        let u = match_point_unguided::<f64, _>([5.0, 7.0], &pair, &cfg).unwrap();
        assert_eq!(u.predicted, [5.0, 7.0]);
    }

    #[test]
    fn zero_vectors_have_zero_cosine() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine(&[2.0, 0.0], &[3.0, 0.0]), 1.0);
    }

    #[test]
    fn points_keep_order_and_empty_is_empty() {
        let s = source(
            Pattern::Spike {
                locations: vec![[2.0, 2.0], [9.0, 4.0]],
                width: 0.35,
            },
            12,
        );
        let pair = Pair::new(&s, 0, &s, 1);
        let d = zero_disp(&s);
        let cfg = MatchConfig::default();
        assert!(match_points(&[], &pair, &d, &cfg).unwrap().is_empty());
        let pts = [[9.0, 4.0], [2.0, 2.0]];
        let r = match_points(&pts, &pair, &d, &cfg).unwrap();
        assert_eq!(r[0].predicted, [9.0, 4.0]);
        assert_eq!(r[1].predicted, [2.0, 2.0]);
        assert_eq!(r[1], match_point(pts[1], &pair, &d, &cfg).unwrap());
    }

    #[test]
    fn errors_carry_point_index() {
        let s = source(Pattern::Constant, 8);
        let pair = Pair::new(&s, 0, &s, 1);
        let err = match_points(&[[1.0, 1.0], [f64::NAN, 0.0]], &pair, &zero_disp(&s), &MatchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Item { index: 1, .. }));
    }

    #[test]
    fn disp_for_other_pair_is_rejected() {
        let s = source(Pattern::Constant, 8);
        let mut d = zero_disp(&s);
        d.meta = PairMeta { tgt_t: 0, ..d.meta };
        let err = match_point([1.0, 1.0], &Pair::new(&s, 0, &s, 1), &d, &MatchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = MatchConfig {
            search_stride: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MatchConfig {
            sigma: Some(-1.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
