//! Per-pair displacement fields fitted by aligning queried features.
//!
//! A [`DisplacementField`] is a small sine network `g(x, y) -> (dx, dy)`. It
//! takes normalized canvas coordinates and returns a normalized displacement
//! that is scaled to pixels by the canvas half-extent. Fitting minimizes
//!
//! ```text
//! mean_p |f_tgt(clamp(p + d(p)), t_tgt) - f_src(p, t_src)|^2
//!   + lambda_tv * TV(d) + lambda_l1 * mean_p (|dx| + |dy|)
//! ```
//!
//! over a fixed regular lattice, with the feature fields frozen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, Stage};
use crate::feature_field::FeatureSource;
use crate::geometry::{to_unit, Canvas};
use crate::numerics::{AdamConfig, AdamState, SirenConfig, SirenNet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowFitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_tv: f64,
    pub lambda_l1: f64,
    /// Lattice points per axis for the feature and L1 terms.
    pub sample_grid: usize,
    /// Lattice points per axis for the smoothness term.
    pub tv_grid: usize,
    /// Base seed; each pair derives its own from this and its content.
    pub seed: u64,
    pub hidden_dim: usize,
    pub omega0: f64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        FlowFitConfig {
            epochs: 1000,
            lr: 1e-4,
            lambda_tv: 10.0,
            lambda_l1: 0.01,
            sample_grid: 64,
            tv_grid: 32,
            seed: 0,
            hidden_dim: 128,
            omega0: 30.0,
        }
    }
}

impl FlowFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.sample_grid == 0 || self.tv_grid < 2 {
            return Err(Error::Config(
                "epochs and sample_grid must be positive and tv_grid at least 2".into(),
            ));
        }
        for (name, v) in [("lambda_tv", self.lambda_tv), ("lambda_l1", self.lambda_l1)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        self.net_config().validate()?;
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn net_config(&self) -> SirenConfig {
        SirenConfig {
            omega0: self.omega0,
            ..SirenConfig::sine(2, self.hidden_dim, 1, 2)
        }
    }
}

/// A source frame and a target frame to align, possibly from different videos.
#[derive(Debug)]
pub struct Pair<'a, S> {
    pub src: &'a S,
    pub src_t: usize,
    pub tgt: &'a S,
    pub tgt_t: usize,
}

impl<S> Clone for Pair<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Pair<'_, S> {}

impl<'a, S> Pair<'a, S> {
    pub fn new(src: &'a S, src_t: usize, tgt: &'a S, tgt_t: usize) -> Self {
        Pair {
            src,
            src_t,
            tgt,
            tgt_t,
        }
    }

    /// Source and target are the same frame of the same video.
    pub fn identity(field: &'a S, t: usize) -> Self {
        Pair::new(field, t, field, t)
    }

    pub fn validate<T: Scalar>(&self) -> Result<()>
    where
        S: FeatureSource<T>,
    {
        if self.src.canvas() != self.tgt.canvas() {
            return Err(Error::Contract(format!(
                "source canvas {:?} differs from target canvas {:?}",
                self.src.canvas(),
                self.tgt.canvas()
            )));
        }
        if self.src.feature_dim() != self.tgt.feature_dim() {
            return Err(Error::Contract("source and target feature dims differ".into()));
        }
        for (which, t, n) in [
            ("source", self.src_t, self.src.frame_count()),
            ("target", self.tgt_t, self.tgt.frame_count()),
        ] {
            if t >= n {
                return Err(Error::Contract(format!(
                    "{which} frame {t} out of range for {n} frames"
                )));
            }
        }
        Ok(())
    }

    pub fn meta<T: Scalar>(&self) -> PairMeta
    where
        S: FeatureSource<T>,
    {
        PairMeta {
            src_video: self.src.source_id().to_owned(),
            src_t: self.src_t,
            tgt_video: self.tgt.source_id().to_owned(),
            tgt_t: self.tgt_t,
            canvas: self.src.canvas(),
        }
    }
}

/// Serializable identity of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairMeta {
    pub src_video: String,
    pub src_t: usize,
    pub tgt_video: String,
    pub tgt_t: usize,
    pub canvas: Canvas,
}

impl PairMeta {
    /// Seed for this pair's network, a function of the pair and `base` only,
    /// so a pair fits identically alone or inside any batch.
    pub fn derive_seed(&self, base: u64) -> u64 {
        let mut h = Sha256::new();
        for part in [&self.src_video, &self.tgt_video] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update((self.src_t as u64).to_le_bytes());
        h.update((self.tgt_t as u64).to_le_bytes());
        h.update(base.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T> {
    pub net: SirenNet<T>,
    pub meta: PairMeta,
    pub trace: Vec<f64>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn canvas(&self) -> Canvas {
        self.meta.canvas
    }

    /// Displacement in pixels at each canvas point.
    pub fn displacements(&self, points: &[[T; 2]]) -> Vec<[T; 2]> {
        let c = self.canvas();
        let coords = unit_coords(points, c);
        let out = self.net.forward(&coords).expect("two coordinates per point");
        let (hx, hy) = c.half_extent();
        out.chunks_exact(2)
            .map(|u| [u[0] * T::of(hx), u[1] * T::of(hy)])
            .collect()
    }

    pub fn displacement(&self, p: [T; 2]) -> [T; 2] {
        self.displacements(&[p])[0]
    }

    /// `p + g(p)`.
    pub fn displace(&self, p: [T; 2]) -> [T; 2] {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1]]
    }
}

fn unit_coords<T: Scalar>(points: &[[T; 2]], c: Canvas) -> Vec<T> {
    let mut out = Vec::with_capacity(points.len() * 2);
    for p in points {
        out.push(T::of(to_unit(p[0].f64(), c.width)));
        out.push(T::of(to_unit(p[1].f64(), c.height)));
    }
    out
}

/// `g x g` regular lattice spanning the canvas, row-major.
pub fn lattice<T: Scalar>(canvas: Canvas, g: usize) -> Vec<[T; 2]> {
    let axis = |n: usize| -> Vec<T> {
        if g == 1 {
            vec![T::of((n - 1) as f64 / 2.0)]
        } else {
            (0..g)
                .map(|i| T::of(i as f64 * (n - 1) as f64 / (g - 1) as f64))
                .collect()
        }
    };
    let xs = axis(canvas.width);
    let ys = axis(canvas.height);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect()
}

/// Loss breakdown for one evaluation of the flow objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowLoss {
    pub feature: f64,
    pub tv: f64,
    pub l1: f64,
    pub total: f64,
}

/// The flow objective for one pair, with everything that does not depend on
/// the displacement network precomputed.
pub struct FlowObjective<'a, T, S> {
    pair: Pair<'a, S>,
    cfg: FlowFitConfig,
    canvas: Canvas,
    points: Vec<[T; 2]>,
    coords: Vec<T>,
    tv_coords: Vec<T>,
    src_features: Vec<T>,
}

impl<'a, T: Scalar, S: FeatureSource<T>> FlowObjective<'a, T, S> {
    pub fn new(pair: Pair<'a, S>, cfg: &FlowFitConfig) -> Result<Self> {
        cfg.validate()?;
        pair.validate::<T>()?;
        let canvas = pair.src.canvas();
        let points = lattice::<T>(canvas, cfg.sample_grid);
        let coords = unit_coords(&points, canvas);
        let tv_coords = unit_coords(&lattice::<T>(canvas, cfg.tv_grid), canvas);
        let src_features = pair.src.features(&points, T::of_usize(pair.src_t));
        Ok(FlowObjective {
            pair,
            cfg: *cfg,
            canvas,
            points,
            coords,
            tv_coords,
            src_features,
        })
    }

    pub fn lattice(&self) -> &[[T; 2]] {
        &self.points
    }

    /// Loss value only.
    pub fn loss(&self, net: &SirenNet<T>) -> Result<FlowLoss> {
        self.run(net, None)
    }

    /// Loss and its gradient with respect to every parameter of `net`.
    pub fn loss_and_grad(&self, net: &SirenNet<T>) -> Result<(FlowLoss, Vec<T>)> {
        let mut g = vec![T::zero(); net.param_count()];
        let loss = self.run(net, Some(&mut g))?;
        Ok((loss, g))
    }

    fn run(&self, net: &SirenNet<T>, grad: Option<&mut [T]>) -> Result<FlowLoss> {
        let m = self.points.len();
        let d = self.pair.src.feature_dim();
        let inv_m = T::one() / T::of_usize(m);
        let (hx, hy) = self.canvas.half_extent();
        let half = [T::of(hx), T::of(hy)];
        let max = [
            T::of_usize(self.canvas.width - 1),
            T::of_usize(self.canvas.height - 1),
        ];

        let tape = net.forward_tape(&self.coords)?;
        let u = tape.output();
        let mut queries = Vec::with_capacity(m);
        let mut active = Vec::with_capacity(m);
        let mut l1 = T::zero();
        for (p, ui) in self.points.iter().zip(u.chunks_exact(2)) {
            let mut q = [T::zero(); 2];
            let mut a = [false; 2];
            for k in 0..2 {
                let delta = ui[k] * half[k];
                l1 += delta.abs();
                let raw = p[k] + delta;
                q[k] = raw.max(T::zero()).min(max[k]);
                a[k] = raw > T::zero() && raw < max[k];
            }
            queries.push(q);
            active.push(a);
        }
        l1 *= inv_m;

        let src = &self.src_features;
        let two_over_m = T::of(2.0) * inv_m;
        let (feats, gq) = self.pair.tgt.pullback(&queries, T::of_usize(self.pair.tgt_t), |i, f, up| {
            for ((o, &fv), &sv) in up.iter_mut().zip(f).zip(&src[i * d..(i + 1) * d]) {
                *o = two_over_m * (fv - sv);
            }
        });
        let feature: T = feats
            .iter()
            .zip(src)
            .map(|(&f, &s)| (f - s) * (f - s))
            .sum::<T>()
            * inv_m;

        let tv_tape = net.forward_tape(&self.tv_coords)?;
        let (tv, tv_up) = tv_term(tv_tape.output(), self.cfg.tv_grid);

        let lambda_tv = T::of(self.cfg.lambda_tv);
        let lambda_l1 = T::of(self.cfg.lambda_l1);
        let total = feature + lambda_tv * tv + lambda_l1 * l1;
        let loss = FlowLoss {
            feature: feature.f64(),
            tv: tv.f64(),
            l1: l1.f64(),
            total: total.f64(),
        };

        if let Some(g) = grad {
            let mut up = vec![T::zero(); m * 2];
            for i in 0..m {
                for k in 0..2 {
                    let delta = u[i * 2 + k] * half[k];
                    let mut v = lambda_l1 * inv_m * sign(delta);
                    if active[i][k] {
                        v += gq[i][k];
                    }
                    up[i * 2 + k] = v * half[k];
                }
            }
            net.backward(&tape, &up, Some(&mut *g), false)?;
            let tv_up: Vec<T> = tv_up.into_iter().map(|v| v * lambda_tv).collect();
            net.backward(&tv_tape, &tv_up, Some(g), false)?;
        }
        Ok(loss)
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute neighbour difference over the `g x g` lattice (both axes,
/// both components) and its subgradient with respect to each output.
fn tv_term<T: Scalar>(u: &[T], g: usize) -> (T, Vec<T>) {
    let edges = 2 * g * (g - 1);
    let inv_e = T::one() / T::of_usize(edges);
    let mut tv = T::zero();
    let mut up = vec![T::zero(); u.len()];
    let mut edge = |a: usize, b: usize| {
        for k in 0..2 {
            let diff = u[a * 2 + k] - u[b * 2 + k];
            tv += diff.abs();
            let s = sign(diff) * inv_e;
            up[a * 2 + k] += s;
            up[b * 2 + k] -= s;
        }
    };
    for r in 0..g {
        for c in 0..g {
            let i = r * g + c;
            if c + 1 < g {
                edge(i, i + 1);
            }
            if r + 1 < g {
                edge(i, i + g);
            }
        }
    }
    (tv * inv_e, up)
}

pub fn fit_displacement<T: Scalar, S: FeatureSource<T>>(
    pair: Pair<'_, S>,
    cfg: &FlowFitConfig,
) -> Result<DisplacementField<T>> {
    fit_displacement_with(pair, cfg, |_, _| {})
}

/// Fits one pair, reporting `(epoch, loss)` after every epoch.
pub fn fit_displacement_with<T: Scalar, S: FeatureSource<T>>(
    pair: Pair<'_, S>,
    cfg: &FlowFitConfig,
    mut progress: impl FnMut(usize, FlowLoss),
) -> Result<DisplacementField<T>> {
    fit_inner(pair, cfg, &mut progress).map_err(|e| e.at_stage(Stage::FlowFit))
}

fn fit_inner<T: Scalar, S: FeatureSource<T>>(
    pair: Pair<'_, S>,
    cfg: &FlowFitConfig,
    progress: &mut dyn FnMut(usize, FlowLoss),
) -> Result<DisplacementField<T>> {
    let objective = FlowObjective::new(pair, cfg)?;
    let meta = pair.meta::<T>();
    let mut net = SirenNet::<T>::init(cfg.net_config(), meta.derive_seed(cfg.seed))?;
    let mut opt = AdamState::new(net.param_count(), AdamConfig::with_lr(cfg.lr))?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (loss, grad) = objective.loss_and_grad(&net)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "flow loss is not finite".into(),
            });
        }
        opt.step(net.params_mut(), &grad).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { epoch, reason },
            other => other,
        })?;
        trace.push(loss.total);
        progress(epoch, loss);
    }
    Ok(DisplacementField { net, meta, trace })
}

/// Fits every pair independently. Results keep input order and each equals
/// the corresponding single fit; a failed pair does not stop the others.
pub fn fit_displacements_batch<T: Scalar, S: FeatureSource<T>>(
    pairs: &[Pair<'_, S>],
    cfg: &FlowFitConfig,
) -> Vec<Result<DisplacementField<T>>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, &pair)| fit_displacement(pair, cfg).map_err(|e| e.at_item(i)))
        .collect()
}
