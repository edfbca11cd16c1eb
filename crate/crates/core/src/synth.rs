//! Synthetic feature volumes with known structure and known motion.
//!
//! Patterns are continuous functions of the grid position, so a warped frame
//! is sampled exactly: frame `t` is `F_t(q) = F_0(W^-t(q))` where `W(p) = p + w(p)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_field::{FeatureSource, FeatureVolume};
use crate::flow_field::{lattice, DisplacementField};
use crate::geometry::Canvas;
use crate::scalar::Scalar;

/// Source tags of synthetic volumes are this prefix followed by the spec as JSON.
pub const SYNTH_TAG_PREFIX: &str = "synth:";

/// Largest displacement a synthetic warp may produce, in grid cells.
pub const MAX_WARP: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// The same unit vector everywhere.
    Constant,
    /// Per-channel mixture of plane waves with wavelengths in
    /// `[min_wavelength, 4 * min_wavelength]`.
    SmoothRandom {
        #[serde(default = "default_min_wavelength")]
        min_wavelength: f64,
        #[serde(default = "default_components")]
        components: usize,
    },
    /// A background vector with narrow bumps, each pulling toward its own
    /// basis vector.
    Spike {
        locations: Vec<[f64; 2]>,
        #[serde(default = "default_spike_width")]
        width: f64,
    },
    /// Channel pairs `(cos, sin)` of waves along x and y in turn; pair `k` has
    /// `frequency * (1 + 0.37 k)` cycles per cell.
    Stripes { frequency: f64 },
}

fn default_min_wavelength() -> f64 {
    8.0
}

fn default_components() -> usize {
    6
}

fn default_spike_width() -> f64 {
    0.35
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warp {
    None,
    RigidShift { dx: f64, dy: f64 },
    /// `w(x, y) = (A sin(2 pi y / wavelength), A sin(2 pi x / wavelength))`.
    SmoothSine { amplitude: f64, wavelength: f64 },
}

impl Warp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Warp::None => Ok(()),
            Warp::RigidShift { dx, dy } => {
                if !(dx.is_finite() && dy.is_finite()) || dx.hypot(dy) > MAX_WARP {
                    return Err(Error::Config(format!("shift must be at most {MAX_WARP} cells")));
                }
                Ok(())
            }
            Warp::SmoothSine {
                amplitude,
                wavelength,
            } => {
                if !(amplitude.is_finite() && amplitude.abs() <= MAX_WARP) {
                    return Err(Error::Config(format!(
                        "amplitude must be at most {MAX_WARP} cells"
                    )));
                }
                if !(wavelength.is_finite() && wavelength > 0.0) {
                    return Err(Error::Config("wavelength must be positive".into()));
                }
                if std::f64::consts::TAU * amplitude.abs() >= wavelength {
                    return Err(Error::Config(format!(
                        "amplitude {amplitude} is too large for wavelength {wavelength}: the warp folds"
                    )));
                }
                Ok(())
            }
        }
    }

    /// `w(p)`.
    pub fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            Warp::None => [0.0, 0.0],
            Warp::RigidShift { dx, dy } => [dx, dy],
            Warp::SmoothSine {
                amplitude,
                wavelength,
            } => {
                let k = std::f64::consts::TAU / wavelength;
                [amplitude * (k * p[1]).sin(), amplitude * (k * p[0]).sin()]
            }
        }
    }

    // Jacobian of w as [[dwx/dx, dwx/dy], [dwy/dx, dwy/dy]].
    fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        match *self {
            Warp::SmoothSine {
                amplitude,
                wavelength,
            } => {
                let k = std::f64::consts::TAU / wavelength;
                [
                    [0.0, amplitude * k * (k * p[1]).cos()],
                    [amplitude * k * (k * p[0]).cos(), 0.0],
                ]
            }
            _ => [[0.0; 2]; 2],
        }
    }

    /// `W(p) = p + w(p)`.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1]]
    }

    /// `W^-1(q)` by Newton iteration.
    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        match *self {
            Warp::None => q,
            Warp::RigidShift { dx, dy } => [q[0] - dx, q[1] - dy],
            Warp::SmoothSine { .. } => {
                let d = self.displacement(q);
                let mut p = [q[0] - d[0], q[1] - d[1]];
                for _ in 0..50 {
                    let w = self.apply(p);
                    let r = [w[0] - q[0], w[1] - q[1]];
                    if r[0].abs().max(r[1].abs()) < 1e-13 {
                        break;
                    }
                    let j = self.jacobian(p);
                    let (a, b, c, d) = (1.0 + j[0][0], j[0][1], j[1][0], 1.0 + j[1][1]);
                    let det = a * d - b * c;
                    p[0] -= (d * r[0] - b * r[1]) / det;
                    p[1] -= (a * r[1] - c * r[0]) / det;
                }
                p
            }
        }
    }

    /// Where `p` on frame 0 sits on frame `steps`.
    pub fn forward(&self, p: [f64; 2], steps: usize) -> [f64; 2] {
        (0..steps).fold(p, |q, _| self.apply(q))
    }

    /// Displacement from frame 0 to frame `steps` at `p`.
    pub fn motion(&self, p: [f64; 2], steps: usize) -> [f64; 2] {
        let q = self.forward(p, steps);
        [q[0] - p[0], q[1] - p[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub pattern: Pattern,
    #[serde(default = "default_warp")]
    pub warp: Warp,
    #[serde(default)]
    pub seed: u64,
}

fn default_warp() -> Warp {
    Warp::None
}

impl SynthSpec {
    /// Recovers the spec of a volume made by [`make_volume`] from its source tag.
    pub fn from_source_tag(tag: &str) -> Option<SynthSpec> {
        serde_json::from_str(tag.strip_prefix(SYNTH_TAG_PREFIX)?).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic volume dims must be positive".into()));
        }
        self.warp.validate()?;
        match &self.pattern {
            Pattern::SmoothRandom {
                min_wavelength,
                components,
            } => {
                if !(*min_wavelength >= 8.0) || *components == 0 {
                    return Err(Error::Config(
                        "smooth_random needs min_wavelength >= 8 and at least one component".into(),
                    ));
                }
            }
            Pattern::Spike { locations, width } => {
                if locations.len() + 1 > self.dim {
                    return Err(Error::Config(format!(
                        "{} spikes need at least {} channels",
                        locations.len(),
                        locations.len() + 1
                    )));
                }
                if !(*width > 0.0) {
                    return Err(Error::Config("spike width must be positive".into()));
                }
            }
            Pattern::Stripes { frequency } => {
                if !(frequency.is_finite() && *frequency > 0.0) {
                    return Err(Error::Config("stripe frequency must be positive".into()));
                }
            }
            Pattern::Constant => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
}

/// A continuous, unit-norm feature pattern over grid coordinates.
#[derive(Debug, Clone)]
pub struct PatternFn {
    dim: usize,
    kind: PatternKind,
}

#[derive(Debug, Clone)]
enum PatternKind {
    Constant,
    Waves(Vec<Vec<Wave>>),
    Spike { locations: Vec<[f64; 2]>, width: f64 },
    Stripes { frequency: f64 },
}

impl PatternFn {
    pub fn new(pattern: &Pattern, dim: usize, seed: u64) -> Self {
        let kind = match pattern {
            Pattern::Constant => PatternKind::Constant,
            Pattern::SmoothRandom {
                min_wavelength,
                components,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let waves = (0..dim)
                    .map(|_| {
                        (0..*components)
                            .map(|_| {
                                let wavelength = rng.random_range(*min_wavelength..4.0 * min_wavelength);
                                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                                let k = std::f64::consts::TAU / wavelength;
                                Wave {
                                    kx: k * angle.cos(),
                                    ky: k * angle.sin(),
                                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                                    amplitude: rng.random_range(0.5..1.0),
                                }
                            })
                            .collect()
                    })
                    .collect();
                PatternKind::Waves(waves)
            }
            Pattern::Spike { locations, width } => PatternKind::Spike {
                locations: locations.clone(),
                width: *width,
            },
            Pattern::Stripes { frequency } => PatternKind::Stripes {
                frequency: *frequency,
            },
        };
        PatternFn { dim, kind }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm feature at grid position `p`, written into `out`.
    pub fn eval(&self, p: [f64; 2], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            PatternKind::Constant => out.fill(1.0),
            PatternKind::Waves(waves) => {
                for (o, ws) in out.iter_mut().zip(waves) {
                    *o = ws
                        .iter()
                        .map(|w| w.amplitude * (w.kx * p[0] + w.ky * p[1] + w.phase).sin())
                        .sum();
                }
            }
            PatternKind::Spike { locations, width } => {
                out.fill(0.0);
                let mut background = 1.0;
                for (k, loc) in locations.iter().enumerate() {
                    let r2 = (p[0] - loc[0]).powi(2) + (p[1] - loc[1]).powi(2);
                    let a = (-r2 / (2.0 * width * width)).exp();
                    out[k + 1] = a;
                    background -= a;
                }
                out[0] = background.max(0.0);
            }
            PatternKind::Stripes { frequency } => {
                for k in 0..d / 2 {
                    let f = frequency * (1.0 + 0.37 * k as f64);
                    let c = if k % 2 == 0 { p[0] } else { p[1] };
                    let theta = std::f64::consts::TAU * f * c;
                    out[2 * k] = theta.cos();
                    out[2 * k + 1] = theta.sin();
                }
                if d % 2 == 1 {
                    out[d - 1] = 1.0;
                }
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.iter_mut().for_each(|v| *v /= norm);
        } else {
            out.fill(0.0);
            out[0] = 1.0;
        }
    }
}

/// Exact feature source for a synthetic video, defined on the grid itself
/// (one canvas pixel per cell).
#[derive(Debug, Clone)]
pub struct AnalyticSource {
    pattern: PatternFn,
    warp: Warp,
    grid: Canvas,
    frames: usize,
    id: String,
}

impl AnalyticSource {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        Ok(AnalyticSource {
            pattern: PatternFn::new(&spec.pattern, spec.dim, spec.seed),
            warp: spec.warp,
            grid: Canvas::new(spec.width, spec.height),
            frames: spec.frames,
            id: format!("synth-{}", spec.seed),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn warp(&self) -> Warp {
        self.warp
    }

    /// Feature of frame `t` at grid position `q`.
    pub fn eval(&self, q: [f64; 2], t: usize, out: &mut [f64]) {
        let p = (0..t).fold(q, |q, _| self.warp.invert(q));
        self.pattern.eval(p, out);
    }

    fn frame_index(&self, t: f64) -> usize {
        (t.round().max(0.0) as usize).min(self.frames - 1)
    }
}

impl<T: Scalar> FeatureSource<T> for AnalyticSource {
    fn canvas(&self) -> Canvas {
        self.grid
    }

    fn feature_dim(&self) -> usize {
        self.pattern.dim
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn source_id(&self) -> &str {
        &self.id
    }

    fn features(&self, points: &[[T; 2]], t: T) -> Vec<T> {
        let t = self.frame_index(t.f64());
        let d = self.pattern.dim;
        let mut buf = vec![0.0; d];
        let mut out = Vec::with_capacity(points.len() * d);
        for p in points {
            self.eval([p[0].f64(), p[1].f64()], t, &mut buf);
            out.extend(buf.iter().map(|&v| T::of(v)));
        }
        out
    }

    /// Spatial gradients by central differences.
    fn pullback<G>(&self, points: &[[T; 2]], t: T, upstream: G) -> (Vec<T>, Vec<[T; 2]>)
    where
        G: Fn(usize, &[T], &mut [T]) + Sync,
    {
        const H: f64 = 1e-5;
        let tf = self.frame_index(t.f64());
        let d = self.pattern.dim;
        let feats = <Self as FeatureSource<T>>::features(self, points, t);
        let mut up = vec![T::zero(); d];
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        let grads = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                upstream(i, &feats[i * d..(i + 1) * d], &mut up);
                let p = [p[0].f64(), p[1].f64()];
                let mut g = [T::zero(); 2];
                for (axis, gk) in g.iter_mut().enumerate() {
                    let mut hi = p;
                    let mut lo = p;
                    hi[axis] += H;
                    lo[axis] -= H;
                    self.eval(hi, tf, &mut a);
                    self.eval(lo, tf, &mut b);
                    let s: f64 = up
                        .iter()
                        .zip(a.iter().zip(&b))
                        .map(|(u, (x, y))| u.f64() * (x - y))
                        .sum();
                    *gk = T::of(s / (2.0 * H));
                }
                g
            })
            .collect();
        (feats, grads)
    }
}

/// Explicit per-pixel features, bilinear between pixels and clamped at the
/// border. Frames are addressed by nearest index.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSource {
    canvas: Canvas,
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    id: String,
}

impl TableSource {
    /// `data` is row-major `(t, y, x, d)`.
    pub fn new(canvas: Canvas, frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if canvas.pixel_count() == 0 || frames == 0 || dim == 0 {
            return Err(Error::Contract("table dims must be positive".into()));
        }
        if data.len() != frames * canvas.pixel_count() * dim {
            return Err(Error::Contract(format!(
                "table has {} values, expected {}",
                data.len(),
                frames * canvas.pixel_count() * dim
            )));
        }
        Ok(TableSource {
            canvas,
            frames,
            dim,
            data,
            id: "table".to_owned(),
        })
    }

    pub fn from_fn(canvas: Canvas, frames: usize, dim: usize, f: impl Fn(usize, usize, usize, &mut [f64])) -> Self {
        let mut data = vec![0.0; frames * canvas.pixel_count() * dim];
        for (i, v) in data.chunks_exact_mut(dim).enumerate() {
            let (t, rest) = (i / canvas.pixel_count(), i % canvas.pixel_count());
            f(t, rest % canvas.width, rest / canvas.width, v);
        }
        TableSource::new(canvas, frames, dim, data).expect("sizes are consistent")
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn pixel(&self, t: usize, x: usize, y: usize) -> &[f64] {
        let i = (t * self.canvas.pixel_count() + y * self.canvas.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    fn frame_of(&self, t: f64) -> usize {
        (t.round().max(0.0) as usize).min(self.frames - 1)
    }

    /// Bilinear sample into `out`, plus the interpolation derivative when asked.
    fn sample(&self, t: usize, p: [f64; 2], out: &mut [f64], grad: Option<(&mut [f64], &mut [f64])>) {
        let axis = |v: f64, n: usize| {
            let v = v.clamp(0.0, (n - 1) as f64);
            let i0 = (v.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, v - i0 as f64)
        };
        let (x0, x1, fx) = axis(p[0], self.canvas.width);
        let (y0, y1, fy) = axis(p[1], self.canvas.height);
        let (a, b, c, e) = (self.pixel(t, x0, y0), self.pixel(t, x1, y0), self.pixel(t, x0, y1), self.pixel(t, x1, y1));
        for k in 0..self.dim {
            let top = a[k] + fx * (b[k] - a[k]);
            let bottom = c[k] + fx * (e[k] - c[k]);
            out[k] = top + fy * (bottom - top);
        }
        if let Some((gx, gy)) = grad {
            let inside = |v: f64, n: usize| v > 0.0 && v < (n - 1) as f64;
            let (ix, iy) = (inside(p[0], self.canvas.width), inside(p[1], self.canvas.height));
            for k in 0..self.dim {
                let top = a[k] + fx * (b[k] - a[k]);
                let bottom = c[k] + fx * (e[k] - c[k]);
                gx[k] = if ix { (b[k] - a[k]) * (1.0 - fy) + (e[k] - c[k]) * fy } else { 0.0 };
                gy[k] = if iy { bottom - top } else { 0.0 };
            }
        }
    }
}

impl<T: Scalar> FeatureSource<T> for TableSource {
    fn canvas(&self) -> Canvas {
        self.canvas
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn source_id(&self) -> &str {
        &self.id
    }

    fn features(&self, points: &[[T; 2]], t: T) -> Vec<T> {
        let t = self.frame_of(t.f64());
        let mut buf = vec![0.0; self.dim];
        let mut out = Vec::with_capacity(points.len() * self.dim);
        for p in points {
            self.sample(t, [p[0].f64(), p[1].f64()], &mut buf, None);
            out.extend(buf.iter().map(|&v| T::of(v)));
        }
        out
    }

    fn pullback<G>(&self, points: &[[T; 2]], t: T, upstream: G) -> (Vec<T>, Vec<[T; 2]>)
    where
        G: Fn(usize, &[T], &mut [T]) + Sync,
    {
        let tf = self.frame_of(t.f64());
        let d = self.dim;
        let mut feats = Vec::with_capacity(points.len() * d);
        let mut grads = Vec::with_capacity(points.len());
        let (mut f, mut gx, mut gy) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut fi = vec![T::zero(); d];
        let mut up = vec![T::zero(); d];
        for (i, p) in points.iter().enumerate() {
            self.sample(tf, [p[0].f64(), p[1].f64()], &mut f, Some((&mut gx, &mut gy)));
            for (o, v) in fi.iter_mut().zip(&f) {
                *o = T::of(*v);
            }
            upstream(i, &fi, &mut up);
            let dot = |g: &[f64]| T::of(up.iter().zip(g).map(|(u, v)| u.f64() * v).sum());
            grads.push([dot(&gx), dot(&gy)]);
            feats.extend_from_slice(&fi);
        }
        (feats, grads)
    }
}

/// The motion baked into a synthetic volume, in grid cells between
/// consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthWarp {
    pub warp: Warp,
    /// Canvas pixels per grid cell.
    pub scale: f64,
    /// Canvas position of grid cell 0.
    pub offset: f64,
}

impl GroundTruthWarp {
    pub fn new(warp: Warp) -> Self {
        GroundTruthWarp {
            warp,
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// The same motion expressed on a canvas where cell `i` is centred at
    /// `offset + scale * i`.
    pub fn on_canvas(self, scale: f64, offset: f64) -> Self {
        GroundTruthWarp {
            scale,
            offset,
            ..self
        }
    }

    /// Canvas displacement of canvas point `p` from frame 0 to frame `steps`.
    pub fn motion(&self, p: [f64; 2], steps: usize) -> [f64; 2] {
        let g = [(p[0] - self.offset) / self.scale, (p[1] - self.offset) / self.scale];
        let m = self.warp.motion(g, steps);
        [m[0] * self.scale, m[1] * self.scale]
    }
}

/// Samples a synthetic video on its grid and returns it with its motion.
pub fn make_volume(spec: &SynthSpec) -> Result<(FeatureVolume, GroundTruthWarp)> {
    let source = AnalyticSource::new(spec)?;
    let d = spec.dim;
    let mut data = Vec::with_capacity(spec.frames * spec.height * spec.width * d);
    let mut buf = vec![0.0; d];
    for t in 0..spec.frames {
        for y in 0..spec.height {
            for x in 0..spec.width {
                source.eval([x as f64, y as f64], t, &mut buf);
                data.extend(buf.iter().map(|&v| v as f32));
            }
        }
    }
    let tag = format!("{SYNTH_TAG_PREFIX}{}", serde_json::to_string(spec).expect("spec serializes"));
    let volume = FeatureVolume::normalized(spec.frames, spec.height, spec.width, d, data, tag)?;
    Ok((volume, GroundTruthWarp::new(spec.warp)))
}

/// Mean endpoint error of `displacements` against `truth` over a `g x g`
/// lattice, skipping points within `margin` pixels of the border.
pub fn endpoint_error_with(
    canvas: Canvas,
    g: usize,
    margin: f64,
    truth: &GroundTruthWarp,
    steps: usize,
    displacements: impl Fn(&[[f64; 2]]) -> Vec<[f64; 2]>,
) -> Result<f64> {
    let (xmax, ymax) = ((canvas.width - 1) as f64, (canvas.height - 1) as f64);
    let interior: Vec<[f64; 2]> = lattice::<f64>(canvas, g)
        .into_iter()
        .filter(|p| p[0] >= margin && p[1] >= margin && p[0] <= xmax - margin && p[1] <= ymax - margin)
        .collect();
    if interior.is_empty() {
        return Err(Error::Contract("no lattice points inside the margin".into()));
    }
    let pred = displacements(&interior);
    let total: f64 = interior
        .iter()
        .zip(&pred)
        .map(|(p, d)| {
            let m = truth.motion(*p, steps);
            (d[0] - m[0]).hypot(d[1] - m[1])
        })
        .sum();
    Ok(total / interior.len() as f64)
}

/// Mean endpoint error of a fitted field against the baked-in motion over its
/// own frame gap, on a `g x g` lattice with a 4 px margin.
pub fn oracle_endpoint_error<T: Scalar>(
    disp: &DisplacementField<T>,
    truth: &GroundTruthWarp,
    g: usize,
) -> Result<f64> {
    let m = &disp.meta;
    if m.tgt_t < m.src_t || m.src_t != 0 {
        return Err(Error::Contract("oracle motion is defined from frame 0 forward".into()));
    }
    endpoint_error_with(disp.canvas(), g, 4.0, truth, m.tgt_t, |pts| {
        let pts_t: Vec<[T; 2]> = pts.iter().map(|p| [T::of(p[0]), T::of(p[1])]).collect();
        disp.displacements(&pts_t)
            .into_iter()
            .map(|d| [d[0].f64(), d[1].f64()])
            .collect()
    })
}
