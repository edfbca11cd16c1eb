//! Spatiotemporal feature field: a sine MLP `f(x, y, t) -> R^D` fitted so that,
//! after a learned weighted-average downsampler, it reproduces a grid of frozen
//! unit-norm features.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_unit, Canvas};
use crate::numerics::{Activation, AdamConfig, AdamState, SirenConfig, SirenNet};
use crate::parallel::{chunks, map_lanes};
use crate::scalar::Scalar;

const SAMPLER_STREAM: u64 = 0x5A4D_504C;
const EVALS_PER_CHUNK: usize = 256;

/// A `frames x height x width x dim` grid of unit-norm feature vectors,
/// row-major in `(t, y, x, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
    source_tag: String,
}

impl FeatureVolume {
    /// Allowed deviation of a feature norm from 1.
    pub const NORM_TOLERANCE: f64 = 1e-3;

    /// Strict constructor: every vector must be finite and unit-norm.
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let vol = Self::unchecked(frames, height, width, dim, data, source_tag.into())?;
        for (i, v) in vol.data.chunks_exact(dim).enumerate() {
            let norm = vector_norm(v);
            if !norm.is_finite() {
                return Err(Error::Contract(format!("feature vector {i} is not finite")));
            }
            if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(Error::Contract(format!(
                    "feature vector {i} has norm {norm:.6}, expected 1"
                )));
            }
        }
        Ok(vol)
    }

    /// Builds a volume from raw features, scaling every vector to unit norm.
    pub fn normalized(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        mut data: Vec<f32>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        renormalize(&mut data, dim.max(1), 0.0, f64::INFINITY)?;
        Self::new(frames, height, width, dim, data, source_tag)
    }

    fn unchecked(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
        source_tag: String,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || dim == 0 {
            return Err(Error::Contract(format!(
                "volume dims must be positive, got {frames}x{height}x{width}x{dim}"
            )));
        }
        let expected = frames * height * width * dim;
        if data.len() != expected {
            return Err(Error::Contract(format!(
                "volume data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(FeatureVolume {
            frames,
            height,
            width,
            dim,
            data,
            source_tag,
        })
    }

    /// `(frames, height, width, dim)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.dim)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn set_source_tag(&mut self, tag: impl Into<String>) {
        self.source_tag = tag.into();
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * self.dim;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn feature(&self, t: usize, y: usize, x: usize) -> &[f32] {
        let i = ((t * self.height + y) * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }
}

fn vector_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Rescales feature vectors whose norm is off by more than `tolerance` and
/// returns how many were touched. A vector off by more than `reject`, a zero
/// vector, or a non-finite one is an error.
pub fn renormalize(data: &mut [f32], dim: usize, tolerance: f64, reject: f64) -> Result<usize> {
    let mut fixed = 0;
    for (i, v) in data.chunks_exact_mut(dim).enumerate() {
        let norm = vector_norm(v);
        if !norm.is_finite() {
            return Err(Error::Contract(format!("feature vector {i} is not finite")));
        }
        if norm == 0.0 {
            return Err(Error::Contract(format!("feature vector {i} is zero")));
        }
        let off = (norm - 1.0).abs();
        if off > reject {
            return Err(Error::Contract(format!(
                "feature vector {i} has norm {norm:.6}, too far from 1 to repair"
            )));
        }
        if off > tolerance {
            for x in v.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
            fixed += 1;
        }
    }
    Ok(fixed)
}

/// Stride and kernel size that take `hr` samples down to `lr` samples.
pub fn downsampler_geometry(hr: usize, lr: usize) -> Result<(usize, usize)> {
    if lr == 0 || hr < lr {
        return Err(Error::Config(format!(
            "high-resolution size {hr} must be at least the feature grid size {lr}"
        )));
    }
    let stride = hr / lr;
    let kernel = stride + usize::from(!hr.is_multiple_of(lr));
    Ok((stride, kernel))
}

/// Depthwise weighted average with one kernel shared by every channel. The
/// effective kernel is `|raw| / sum(|raw|)`, so it always lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsampler<T> {
    kernel_h: usize,
    kernel_w: usize,
    stride_y: usize,
    stride_x: usize,
    raw: Vec<T>,
}

impl<T: Scalar> Downsampler<T> {
    /// Uniform kernel sized for a `hr -> lr` reduction on each axis.
    pub fn for_resolution(hr: Canvas, lr: Canvas) -> Result<Self> {
        let (stride_y, kernel_h) = downsampler_geometry(hr.height, lr.height)?;
        let (stride_x, kernel_w) = downsampler_geometry(hr.width, lr.width)?;
        let raw = vec![T::one(); kernel_h * kernel_w];
        Self::from_raw(kernel_h, kernel_w, stride_y, stride_x, raw)
    }

    pub fn from_raw(
        kernel_h: usize,
        kernel_w: usize,
        stride_y: usize,
        stride_x: usize,
        raw: Vec<T>,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride_y == 0 || stride_x == 0 {
            return Err(Error::Config("downsampler sizes must be positive".into()));
        }
        if raw.len() != kernel_h * kernel_w {
            return Err(Error::Contract(format!(
                "raw kernel has {} entries, expected {}",
                raw.len(),
                kernel_h * kernel_w
            )));
        }
        let d = Downsampler {
            kernel_h,
            kernel_w,
            stride_y,
            stride_x,
            raw,
        };
        d.check_simplex()?;
        Ok(d)
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn stride(&self) -> (usize, usize) {
        (self.stride_y, self.stride_x)
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    fn mass(&self) -> T {
        self.raw.iter().map(|r| r.abs()).sum()
    }

    pub fn effective_kernel(&self) -> Vec<T> {
        let s = self.mass();
        self.raw.iter().map(|r| r.abs() / s).collect()
    }

    pub fn check_simplex(&self) -> Result<()> {
        let s = self.mass();
        if !(s.is_finite() && s > T::zero()) {
            return Err(Error::Contract(format!(
                "downsampler kernel mass must be positive and finite, got {s}"
            )));
        }
        let k = self.effective_kernel();
        let total: T = k.iter().copied().sum();
        if k.iter().any(|&w| w < T::zero()) || (total - T::one()).abs() > T::of(1e-6) {
            return Err(Error::Contract("downsampler kernel left the simplex".into()));
        }
        Ok(())
    }

    /// Weighted average of a `kernel_h x kernel_w x dim` patch.
    pub fn downsample(&self, patch: &[T], dim: usize) -> Result<Vec<T>> {
        let taps = self.kernel_h * self.kernel_w;
        if dim == 0 || patch.len() != taps * dim {
            return Err(Error::Contract(format!(
                "patch has {} values, expected {taps} x {dim}",
                patch.len()
            )));
        }
        let k = self.effective_kernel();
        let mut out = vec![T::zero(); dim];
        for (w, px) in k.iter().zip(patch.chunks_exact(dim)) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += *w * v;
            }
        }
        Ok(out)
    }

    // Chain rule from the effective kernel back to the raw weights.
    fn raw_gradient(&self, grad_effective: &[T]) -> Vec<T> {
        let s = self.mass();
        let k = self.effective_kernel();
        let mean: T = k.iter().zip(grad_effective).map(|(&w, &g)| w * g).sum();
        self.raw
            .iter()
            .zip(grad_effective)
            .map(|(&r, &g)| sign(r) * (g - mean) / s)
            .collect()
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldFitConfig {
    /// Optimizer steps; each step draws one frame.
    pub epochs: usize,
    /// Feature-grid cells per step, each evaluated over its full receptive field.
    pub cells_per_step: usize,
    pub lr: f64,
    /// Height of the high-resolution canvas; the width follows the grid aspect.
    pub hr_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub n_hidden_layers: usize,
    pub omega0: f64,
    pub activation: Activation,
}

impl Default for FieldFitConfig {
    fn default() -> Self {
        FieldFitConfig {
            epochs: 500,
            cells_per_step: 1024,
            lr: 1e-4,
            hr_size: 224,
            seed: 0,
            hidden_dim: 256,
            n_hidden_layers: 2,
            omega0: 30.0,
            activation: Activation::Sine,
        }
    }
}

impl FieldFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.cells_per_step == 0 {
            return Err(Error::Config("cells_per_step must be at least 1".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }

    pub fn net_config(&self, out_dim: usize) -> SirenConfig {
        SirenConfig {
            in_dim: 3,
            hidden_dim: self.hidden_dim,
            n_hidden_layers: self.n_hidden_layers,
            out_dim,
            omega0: self.omega0,
            activation: self.activation,
        }
    }

    /// High-resolution canvas for a feature grid.
    pub fn hr_canvas(&self, grid: Canvas) -> Canvas {
        let width = (self.hr_size as f64 * grid.width as f64 / grid.height as f64).round() as usize;
        Canvas::new(width.max(1), self.hr_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitProgress {
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
}

/// Anything that can be queried for features at continuous canvas positions.
pub trait FeatureSource<T: Scalar>: Sync {
    fn canvas(&self) -> Canvas;
    fn feature_dim(&self) -> usize;
    fn frame_count(&self) -> usize;
    /// Stable identifier of the underlying video.
    fn source_id(&self) -> &str;

    /// `n x D` features at canvas points `(x, y)` of frame `t`.
    fn features(&self, points: &[[T; 2]], t: T) -> Vec<T>;

    /// Features plus the gradient of `sum_i <f_i, u_i>` with respect to each
    /// point, where `upstream(i, f_i, u_i)` fills `u_i` from the feature `f_i`.
    fn pullback<G>(&self, points: &[[T; 2]], t: T, upstream: G) -> (Vec<T>, Vec<[T; 2]>)
    where
        G: Fn(usize, &[T], &mut [T]) + Sync;
}

/// Result of a single feature query.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQuery<T> {
    pub values: Vec<T>,
    /// The query fell outside the canvas or the frame range; the value is an
    /// extrapolation.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T> {
    pub net: SirenNet<T>,
    pub downsampler: Downsampler<T>,
    canvas: Canvas,
    grid: Canvas,
    frames: usize,
    video_id: String,
    source_tag: String,
}

impl<T: Scalar> FeatureField<T> {
    pub fn from_parts(
        net: SirenNet<T>,
        downsampler: Downsampler<T>,
        canvas: Canvas,
        grid: Canvas,
        frames: usize,
    ) -> Result<Self> {
        let cfg = net.config();
        if cfg.in_dim != 3 {
            return Err(Error::Contract(format!(
                "feature field network must take 3 inputs, got {}",
                cfg.in_dim
            )));
        }
        if frames == 0 || canvas.pixel_count() == 0 || grid.pixel_count() == 0 {
            return Err(Error::Contract("feature field dims must be positive".into()));
        }
        Ok(FeatureField {
            net,
            downsampler,
            canvas,
            grid,
            frames,
            video_id: "video".to_owned(),
            source_tag: String::new(),
        })
    }

    pub fn with_video_id(mut self, id: impl Into<String>) -> Self {
        self.video_id = id.into();
        self
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Feature grid the field was supervised on.
    pub fn grid(&self) -> Canvas {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `(scale, offset)` such that grid cell `i` is centred on canvas pixel
    /// `offset + scale * i`, along x.
    pub fn cell_to_canvas(&self) -> (f64, f64) {
        let (_, stride_x) = self.downsampler.stride();
        let (_, kernel_w) = self.downsampler.kernel_size();
        (stride_x as f64, (kernel_w - 1) as f64 / 2.0)
    }

    /// Network input for canvas position `(x, y)` on frame `t`.
    pub fn unit_coords(&self, x: T, y: T, t: T) -> [T; 3] {
        [
            T::of(to_unit(x.f64(), self.canvas.width)),
            T::of(to_unit(y.f64(), self.canvas.height)),
            T::of(to_unit(t.f64(), self.frames)),
        ]
    }

    pub fn query(&self, x: T, y: T, t: T) -> FeatureQuery<T> {
        let values = self
            .net
            .forward(&self.unit_coords(x, y, t))
            .expect("three coordinates always form one batch row");
        let tf = t.f64();
        let extrapolated = !self.canvas.contains(x.f64(), y.f64())
            || !(0.0..=(self.frames - 1) as f64).contains(&tf);
        FeatureQuery {
            values,
            extrapolated,
        }
    }

    fn batch_coords(&self, points: &[[T; 2]], t: T) -> Vec<T> {
        let mut c = Vec::with_capacity(points.len() * 3);
        for p in points {
            c.extend_from_slice(&self.unit_coords(p[0], p[1], t));
        }
        c
    }
}

impl<T: Scalar> FeatureSource<T> for FeatureField<T> {
    fn canvas(&self) -> Canvas {
        self.canvas
    }

    fn feature_dim(&self) -> usize {
        self.net.config().out_dim
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn source_id(&self) -> &str {
        &self.video_id
    }

    fn features(&self, points: &[[T; 2]], t: T) -> Vec<T> {
        let parts = map_lanes(points.len(), |lane| {
            let mut out = Vec::with_capacity(lane.len() * self.feature_dim());
            for c in chunks(lane, EVALS_PER_CHUNK) {
                let coords = self.batch_coords(&points[c], t);
                out.extend(self.net.forward(&coords).expect("well-formed batch"));
            }
            out
        });
        parts.concat()
    }

    fn pullback<G>(&self, points: &[[T; 2]], t: T, upstream: G) -> (Vec<T>, Vec<[T; 2]>)
    where
        G: Fn(usize, &[T], &mut [T]) + Sync,
    {
        let d = self.feature_dim();
        let (hx, hy) = self.canvas.half_extent();
        let (sx, sy) = (T::of(1.0 / hx), T::of(1.0 / hy));
        let parts = map_lanes(points.len(), |lane| {
            let mut feats = Vec::with_capacity(lane.len() * d);
            let mut grads = Vec::with_capacity(lane.len());
            for c in chunks(lane, EVALS_PER_CHUNK) {
                let coords = self.batch_coords(&points[c.clone()], t);
                let tape = self.net.forward_tape(&coords).expect("well-formed batch");
                let mut up = vec![T::zero(); c.len() * d];
                for (k, i) in c.clone().enumerate() {
                    upstream(i, &tape.output()[k * d..(k + 1) * d], &mut up[k * d..(k + 1) * d]);
                }
                let g = self
                    .net
                    .backward(&tape, &up, None, true)
                    .expect("upstream sized to batch")
                    .expect("input gradient requested");
                for row in g.chunks_exact(3) {
                    grads.push([row[0] * sx, row[1] * sy]);
                }
                feats.extend_from_slice(tape.output());
            }
            (feats, grads)
        });
        let mut feats = Vec::with_capacity(points.len() * d);
        let mut grads = Vec::with_capacity(points.len());
        for (f, g) in parts {
            feats.extend(f);
            grads.extend(g);
        }
        (feats, grads)
    }
}

/// Trained field and its per-epoch loss.
#[derive(Debug, Clone)]
pub struct FieldFit<T> {
    pub field: FeatureField<T>,
    pub trace: Vec<f64>,
}

// Receptive-field geometry shared by training and evaluation.
struct Receptive<T> {
    grid: Canvas,
    kernel_h: usize,
    kernel_w: usize,
    stride_y: usize,
    stride_x: usize,
    unit_x: Vec<T>,
    unit_y: Vec<T>,
}

impl<T: Scalar> Receptive<T> {
    fn new(canvas: Canvas, grid: Canvas, d: &Downsampler<T>) -> Self {
        let (kernel_h, kernel_w) = d.kernel_size();
        let (stride_y, stride_x) = d.stride();
        Receptive {
            grid,
            kernel_h,
            kernel_w,
            stride_y,
            stride_x,
            unit_x: (0..canvas.width)
                .map(|x| T::of(to_unit(x as f64, canvas.width)))
                .collect(),
            unit_y: (0..canvas.height)
                .map(|y| T::of(to_unit(y as f64, canvas.height)))
                .collect(),
        }
    }

    fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    // Network inputs for every tap of `cell`, clamped to the canvas edge.
    fn push_coords(&self, cell: usize, t_unit: T, out: &mut Vec<T>) {
        let (cy, cx) = (cell / self.grid.width, cell % self.grid.width);
        for a in 0..self.kernel_h {
            let y = (cy * self.stride_y + a).min(self.unit_y.len() - 1);
            for b in 0..self.kernel_w {
                let x = (cx * self.stride_x + b).min(self.unit_x.len() - 1);
                out.extend_from_slice(&[self.unit_x[x], self.unit_y[y], t_unit]);
            }
        }
    }
}

struct LaneResult<T> {
    loss: T,
    grad: Vec<T>,
    grad_kernel: Vec<T>,
}

// Squared-error sum and gradients of one step over `cells` of one frame.
fn reconstruction_step<T: Scalar>(
    net: &SirenNet<T>,
    kernel: &[T],
    rf: &Receptive<T>,
    frame: &[f32],
    t_unit: T,
    cells: &[usize],
    scale: T,
    want_grad: bool,
) -> LaneResult<T> {
    let d = net.config().out_dim;
    let taps = rf.taps();
    let cells_per_chunk = (EVALS_PER_CHUNK / taps).max(1);
    let parts = map_lanes(cells.len(), |lane| {
        let mut res = LaneResult {
            loss: T::zero(),
            grad: if want_grad { vec![T::zero(); net.param_count()] } else { Vec::new() },
            grad_kernel: vec![T::zero(); taps],
        };
        let mut coords = Vec::new();
        for c in chunks(lane, cells_per_chunk) {
            coords.clear();
            for &cell in &cells[c.clone()] {
                rf.push_coords(cell, t_unit, &mut coords);
            }
            let tape = net.forward_tape(&coords).expect("well-formed batch");
            let out = tape.output();
            let mut upstream = vec![T::zero(); out.len()];
            let mut pred = vec![T::zero(); d];
            for (ci, &cell) in cells[c].iter().enumerate() {
                pred.iter_mut().for_each(|p| *p = T::zero());
                let base = ci * taps;
                for (k, &w) in kernel.iter().enumerate() {
                    let o = &out[(base + k) * d..(base + k + 1) * d];
                    for (p, &v) in pred.iter_mut().zip(o) {
                        *p += w * v;
                    }
                }
                let target = &frame[cell * d..(cell + 1) * d];
                for (p, &f) in pred.iter_mut().zip(target) {
                    let r = *p - T::of(f as f64);
                    res.loss += r * r;
                    // pred now holds dL/dpred
                    *p = T::of(2.0) * r * scale;
                }
                if want_grad {
                    for (k, &w) in kernel.iter().enumerate() {
                        let o = &out[(base + k) * d..(base + k + 1) * d];
                        let u = &mut upstream[(base + k) * d..(base + k + 1) * d];
                        let mut dot = T::zero();
                        for ((ui, &g), &v) in u.iter_mut().zip(&pred).zip(o) {
                            *ui = w * g;
                            dot += g * v;
                        }
                        res.grad_kernel[k] += dot;
                    }
                }
            }
            if want_grad {
                net.backward(&tape, &upstream, Some(&mut res.grad), false)
                    .expect("upstream sized to batch");
            }
        }
        res
    });
    let mut total = LaneResult {
        loss: T::zero(),
        grad: if want_grad { vec![T::zero(); net.param_count()] } else { Vec::new() },
        grad_kernel: vec![T::zero(); taps],
    };
    for p in parts {
        total.loss += p.loss;
        for (a, b) in total.grad.iter_mut().zip(&p.grad) {
            *a += *b;
        }
        for (a, b) in total.grad_kernel.iter_mut().zip(&p.grad_kernel) {
            *a += *b;
        }
    }
    total
}

pub fn fit_feature_field<T: Scalar>(volume: &FeatureVolume, cfg: &FieldFitConfig) -> Result<FieldFit<T>> {
    fit_feature_field_with(volume, cfg, |_| {})
}

/// Fits a field, calling `progress` after every epoch.
pub fn fit_feature_field_with<T: Scalar>(
    volume: &FeatureVolume,
    cfg: &FieldFitConfig,
    mut progress: impl FnMut(FitProgress),
) -> Result<FieldFit<T>> {
    cfg.validate()?;
    let (frames, _, _, dim) = volume.dims();
    let grid = volume.grid();
    let canvas = cfg.hr_canvas(grid);
    let mut downsampler = Downsampler::<T>::for_resolution(canvas, grid)?;
    let mut net = SirenNet::<T>::init(cfg.net_config(dim), cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut net_opt = AdamState::new(net.param_count(), adam)?;
    let mut kernel_opt = AdamState::new(downsampler.raw.len(), adam)?;
    let rf = Receptive::new(canvas, grid, &downsampler);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM);
    let n_cells = grid.pixel_count();
    let per_step = cfg.cells_per_step.min(n_cells);
    let scale = T::one() / T::of_usize(per_step * dim);

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t = rng.random_range(0..frames);
        let cells: Vec<usize> = if per_step == n_cells {
            (0..n_cells).collect()
        } else {
            index::sample(&mut rng, n_cells, per_step).into_vec()
        };
        let t_unit = T::of(to_unit(t as f64, frames));
        let kernel = downsampler.effective_kernel();
        let step = reconstruction_step(&net, &kernel, &rf, volume.frame(t), t_unit, &cells, scale, true);
        let loss = (step.loss * scale).f64();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "reconstruction loss is not finite".into(),
            }
            .at_stage(crate::error::Stage::FieldFit));
        }
        let diverged = |e: Error| match e {
            Error::Divergence { reason, .. } => Error::Divergence { epoch, reason },
            other => other,
        };
        net_opt.step(net.params_mut(), &step.grad).map_err(diverged)?;
        let raw_grad = downsampler.raw_gradient(&step.grad_kernel);
        kernel_opt.step(&mut downsampler.raw, &raw_grad).map_err(diverged)?;
        downsampler.check_simplex().map_err(|e| Error::Divergence {
            epoch,
            reason: e.to_string(),
        })?;
        trace.push(loss);
        progress(FitProgress {
            epoch,
            epochs: cfg.epochs,
            loss,
        });
    }

    let field = FeatureField::from_parts(net, downsampler, canvas, grid, frames)?
        .with_source_tag(volume.source_tag());
    Ok(FieldFit { field, trace })
}

/// Mean squared error over every cell of every frame and every channel.
pub fn reconstruction_mse<T: Scalar>(field: &FeatureField<T>, volume: &FeatureVolume) -> Result<f64> {
    let (frames, _, _, dim) = volume.dims();
    if volume.grid() != field.grid || frames != field.frames || dim != field.feature_dim() {
        return Err(Error::Contract("volume does not match the field's supervision grid".into()));
    }
    let rf = Receptive::new(field.canvas, field.grid, &field.downsampler);
    let kernel = field.downsampler.effective_kernel();
    let cells: Vec<usize> = (0..field.grid.pixel_count()).collect();
    let scale = T::one() / T::of_usize(cells.len() * dim);
    let mut total = 0.0;
    for t in 0..frames {
        let t_unit = T::of(to_unit(t as f64, frames));
        let step = reconstruction_step(&field.net, &kernel, &rf, volume.frame(t), t_unit, &cells, scale, false);
        total += step.loss.f64();
    }
    Ok(total / (frames * cells.len() * dim) as f64)
}

/// One row of an architecture comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRow {
    pub activation: Activation,
    /// Loss of the last training step.
    pub final_loss: f64,
    /// Root mean squared error over the whole volume after training.
    pub rmse: f64,
    pub param_count: usize,
}

/// Fits one field per activation under an identical budget, seed and
/// sampling schedule.
pub fn compare_architectures<T: Scalar>(
    volume: &FeatureVolume,
    cfg: &FieldFitConfig,
    activations: &[Activation],
) -> Result<Vec<ArchitectureRow>> {
    activations
        .iter()
        .map(|&activation| {
            let cfg = FieldFitConfig { activation, ..*cfg };
            let fit = fit_feature_field::<T>(volume, &cfg)?;
            let mse = reconstruction_mse(&fit.field, volume)?;
            Ok(ArchitectureRow {
                activation,
                final_loss: *fit.trace.last().expect("at least one epoch"),
                rmse: mse.sqrt(),
                param_count: fit.field.net.param_count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(frames: usize, side: usize, dim: usize) -> FeatureVolume {
        let v: Vec<f32> = (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let data = v.iter().copied().cycle().take(frames * side * side * dim).collect();
        FeatureVolume::normalized(frames, side, side, dim, data, "const").unwrap()
    }

    fn small_cfg(hr: usize, epochs: usize) -> FieldFitConfig {
        FieldFitConfig {
            epochs,
            hr_size: hr,
            hidden_dim: 32,
            n_hidden_layers: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn geometry_for_default_resolution() {
        assert_eq!(downsampler_geometry(224, 28).unwrap(), (8, 8));
        assert_eq!(downsampler_geometry(230, 28).unwrap(), (8, 9));
        assert_eq!(downsampler_geometry(112, 28).unwrap(), (4, 4));
        assert!(downsampler_geometry(20, 28).is_err());
    }

    #[test]
    fn effective_kernel_is_normalized_magnitude() {
        let d = Downsampler::from_raw(1, 2, 1, 1, vec![-1.0f64, 3.0]).unwrap();
        assert_eq!(d.effective_kernel(), vec![0.25, 0.75]);
        assert_eq!(d.downsample(&[0.0, 4.0], 1).unwrap(), vec![3.0]);
    }

    #[test]
    fn uniform_kernel_averages() {
        let d = Downsampler::<f64>::for_resolution(Canvas::square(4), Canvas::square(2)).unwrap();
        let patch = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 6.0, 60.0];
        assert_eq!(d.downsample(&patch, 2).unwrap(), vec![3.0, 30.0]);
    }

    #[test]
    fn constant_patch_passes_through() {
        let d = Downsampler::from_raw(2, 2, 2, 2, vec![0.1f64, -5.0, 2.0, 0.3]).unwrap();
        let out = d.downsample(&[0.7; 8], 2).unwrap();
        for v in out {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_rejects_bad_patch() {
        let d = Downsampler::<f64>::for_resolution(Canvas::square(4), Canvas::square(2)).unwrap();
        assert!(d.downsample(&[0.0; 7], 2).is_err());
    }

    #[test]
    fn zero_kernel_is_rejected() {
        assert!(Downsampler::from_raw(1, 2, 1, 1, vec![0.0f64, 0.0]).is_err());
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let raw = vec![0.4f64, -1.3, 0.9, 2.2];
        let g_eff = [0.3, -0.2, 0.7, 0.1];
        let d = Downsampler::from_raw(2, 2, 2, 2, raw.clone()).unwrap();
        let analytic = d.raw_gradient(&g_eff);
        let objective = |r: &[f64]| {
            let d = Downsampler::from_raw(2, 2, 2, 2, r.to_vec()).unwrap();
            d.effective_kernel().iter().zip(&g_eff).map(|(a, b)| a * b).sum::<f64>()
        };
        for j in 0..4 {
            let h = 1e-6;
            let mut p = raw.clone();
            p[j] += h;
            let mut m = raw.clone();
            m[j] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-8, "{j}: {fd} vs {}", analytic[j]);
        }
    }

    #[test]
    fn rejects_off_norm_volume() {
        let err = FeatureVolume::new(1, 1, 1, 2, vec![1.0, 1.0], "x").unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn renormalize_counts_and_rejects() {
        let mut d = vec![1.05f32, 0.0, 0.0, 1.0];
        assert_eq!(renormalize(&mut d, 2, 1e-3, 0.1).unwrap(), 1);
        assert!((d[0] - 1.0).abs() < 1e-7);
        let mut bad = vec![2.0f32, 0.0];
        assert!(renormalize(&mut bad, 2, 1e-3, 0.1).is_err());
        let mut zero = vec![0.0f32, 0.0];
        assert!(renormalize(&mut zero, 2, 1e-3, 0.1).is_err());
    }

    #[test]
    fn constant_volume_is_fitted() {
        let vol = constant_volume(2, 8, 6);
        let fit = fit_feature_field::<f64>(&vol, &small_cfg(16, 150)).unwrap();
        let last = *fit.trace.last().unwrap();
        assert!(last < 1e-3, "final loss {last}");
        assert!(reconstruction_mse(&fit.field, &vol).unwrap() < 1e-3);

        let a = fit.field.query(3.0, 4.0, 0.0).values;
        let b = fit.field.query(12.5, 0.5, 1.0).values;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn fit_is_deterministic() {
        let vol = constant_volume(3, 4, 3);
        let cfg = FieldFitConfig {
            cells_per_step: 5,
            ..small_cfg(8, 10)
        };
        let a = fit_feature_field::<f64>(&vol, &cfg).unwrap();
        let b = fit_feature_field::<f64>(&vol, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn kernel_stays_on_simplex_during_fit() {
        let vol = constant_volume(1, 4, 3);
        let mut checked = 0;
        let cfg = small_cfg(10, 20);
        let fit = fit_feature_field_with::<f64>(&vol, &cfg, |_| checked += 1).unwrap();
        assert_eq!(checked, 20);
        let k = fit.field.downsampler.effective_kernel();
        assert_eq!(fit.field.downsampler.kernel_size(), (3, 3));
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn query_flags_extrapolation() {
        let vol = constant_volume(2, 4, 3);
        let fit = fit_feature_field::<f64>(&vol, &small_cfg(8, 1)).unwrap();
        assert!(!fit.field.query(1.0, 1.0, 0.5).extrapolated);
        assert!(fit.field.query(8.0, 1.0, 0.0).extrapolated);
        assert!(fit.field.query(1.0, 1.0, 2.0).extrapolated);
        assert_eq!(fit.field.query(1.0, 1.0, 0.5), fit.field.query(1.0, 1.0, 0.5));
    }

    #[test]
    fn single_frame_volume_maps_time_to_origin() {
        let vol = constant_volume(1, 4, 3);
        let fit = fit_feature_field::<f64>(&vol, &small_cfg(4, 1)).unwrap();
        assert_eq!(fit.field.unit_coords(0.0, 3.0, 0.0), [-1.0, 1.0, 0.0]);
    }
}
