//! Mask propagation through interior points: an exact distance transform picks
//! points well inside the mask, each is matched independently, and a Gaussian
//! density of the matches is thresholded back into a mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::feature_field::FeatureSource;
use crate::flow_field::{DisplacementField, Pair};
use crate::geometry::Canvas;
use crate::matching::{match_points, MatchConfig, MatchResult};
use crate::scalar::Scalar;

/// Row-major boolean image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract("mask dims must be positive".into()));
        }
        if bits.len() != width * height {
            return Err(Error::Contract(format!(
                "mask has {} pixels, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(canvas: Canvas) -> Self {
        BinaryMask {
            width: canvas.width,
            height: canvas.height,
            bits: vec![false; canvas.pixel_count()],
        }
    }

    pub fn from_fn(canvas: Canvas, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..canvas.height)
            .flat_map(|y| (0..canvas.width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        BinaryMask {
            width: canvas.width,
            height: canvas.height,
            bits,
        }
    }

    /// Filled disc of pixels within `radius` of `center`.
    pub fn disc(canvas: Canvas, center: [f64; 2], radius: f64) -> Self {
        Self::from_fn(canvas, |x, y| {
            (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2) <= radius * radius
        })
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> Vec<[usize; 2]> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| [i % self.width, i / self.width])
            .collect()
    }

    /// Whether every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Per-pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityField {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Contract("probability field dims do not match its data".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("probability values must lie in [0, 1]".into()));
        }
        Ok(ProbabilityField {
            width,
            height,
            values,
        })
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixels with value `>= tau`.
    pub fn threshold(&self, tau: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&v| v >= tau).collect(),
        }
    }
}

const FAR: f64 = 1e20;

// Lower envelope of parabolas: squared distance transform of one row.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let p = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            // z[0] is -inf, so this never steps below zero
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel; zero on background. A mask with no background measures distance
/// to just outside the canvas.
pub fn edt(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    if !mask.bits.contains(&false) {
        return (0..h)
            .flat_map(|y| (0..w).map(move |x| (x + 1).min(w - x).min(y + 1).min(h - y) as f64))
            .collect();
    }
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut d2 = vec![0.0; w * h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if mask.get(x, y) { FAR } else { 0.0 };
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            d2[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &mut d2[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    d2.into_iter().map(f64::sqrt).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteriorConfig {
    /// Minimum distance from the mask boundary in pixels.
    pub d_min: f64,
}

impl Default for InteriorConfig {
    fn default() -> Self {
        InteriorConfig { d_min: 2.0 }
    }
}

/// Which rung of the fallback ladder produced the interior points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteriorLevel {
    Requested,
    UnitDistance,
    AllForeground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteriorPoints {
    pub points: Vec<[f64; 2]>,
    pub level: InteriorLevel,
}

/// Pixels at distance `>= d_min` from the background, falling back to
/// `d_min = 1` and then to every foreground pixel when the set is empty.
pub fn interior_points(mask: &BinaryMask, cfg: &InteriorConfig) -> Result<InteriorPoints> {
    if !(cfg.d_min >= 0.0) {
        return Err(Error::Config(format!("d_min must be nonnegative, got {}", cfg.d_min)));
    }
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::DegenerateMask("mask has no foreground pixels".into()));
    }
    let dist = edt(mask);
    let pick = |d_min: f64| -> Vec<[f64; 2]> {
        fg.iter()
            .filter(|p| dist[p[1] * mask.width + p[0]] >= d_min)
            .map(|p| [p[0] as f64, p[1] as f64])
            .collect()
    };
    let ladder = [
        (cfg.d_min, InteriorLevel::Requested),
        (1.0, InteriorLevel::UnitDistance),
        (0.0, InteriorLevel::AllForeground),
    ];
    for (d_min, level) in ladder {
        let points = pick(d_min);
        if !points.is_empty() {
            if level != InteriorLevel::Requested {
                log::warn!("no pixels at distance {} from the mask boundary; using {level:?}", cfg.d_min);
            }
            return Ok(InteriorPoints { points, level });
        }
    }
    Err(Error::DegenerateMask("no interior points at any fallback level".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    pub sigma_kde: f64,
    pub tau: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            sigma_kde: 6.0,
            tau: 0.25,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_kde.is_finite() && self.sigma_kde > 0.0) {
            return Err(Error::Config(format!("sigma_kde must be positive, got {}", self.sigma_kde)));
        }
        validate_tau(self.tau)
    }
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

/// Nearest pixel, halves rounding up, clamped to the canvas.
pub fn pixel_of(p: [f64; 2], canvas: Canvas) -> [usize; 2] {
    let r = |v: f64, n: usize| ((v + 0.5).floor().max(0.0) as usize).min(n - 1);
    [r(p[0], canvas.width), r(p[1], canvas.height)]
}

/// Gaussian-smoothed hit map of `points`, scaled so its maximum is 1.
pub fn kde_field(points: &[[f64; 2]], canvas: Canvas, sigma: f64) -> Result<ProbabilityField> {
    if points.is_empty() {
        return Err(Error::Contract("density reconstruction needs at least one point".into()));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Contract("propagated point is not finite".into()));
    }
    let (w, h) = (canvas.width, canvas.height);
    let mut hits = vec![0.0; w * h];
    for p in points {
        let [x, y] = pixel_of(*p, canvas);
        hits[y * w + x] += 1.0;
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur = |src: &[f64], len: usize, at: &dyn Fn(usize) -> usize, out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate().take(len) {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(len - 1);
            *o = (lo..=hi).map(|j| kernel[i.abs_diff(j)] * src[at(j)]).sum();
        }
    };
    let mut tmp = vec![0.0; w * h];
    let mut row = vec![0.0; w];
    for y in 0..h {
        blur(&hits, w, &|j| y * w + j, &mut row);
        tmp[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut out = vec![0.0; w * h];
    let mut col = vec![0.0; h];
    for x in 0..w {
        blur(&tmp, h, &|j| j * w + x, &mut col);
        for y in 0..h {
            out[y * w + x] = col[y];
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    for v in &mut out {
        *v /= max;
    }
    ProbabilityField::new(w, h, out)
}

pub fn kde_reconstruct(
    points: &[[f64; 2]],
    canvas: Canvas,
    cfg: &KdeConfig,
) -> Result<(ProbabilityField, BinaryMask)> {
    cfg.validate()?;
    let field = kde_field(points, canvas, cfg.sigma_kde)?;
    let mask = field.threshold(cfg.tau);
    Ok((field, mask))
}

/// Everything a mask propagation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPropagation {
    pub mask: BinaryMask,
    pub probability: ProbabilityField,
    pub interior: InteriorPoints,
    pub matches: Vec<MatchResult>,
}

pub fn propagate_mask<T: Scalar, S: FeatureSource<T>>(
    mask: &BinaryMask,
    pair: &Pair<'_, S>,
    disp: &DisplacementField<T>,
    match_cfg: &MatchConfig,
    interior_cfg: &InteriorConfig,
    kde_cfg: &KdeConfig,
) -> Result<MaskPropagation> {
    kde_cfg.validate().map_err(|e| e.at_stage(Stage::Kde))?;
    if mask.canvas() != pair.src.canvas() {
        return Err(Error::Contract(format!(
            "mask is {}x{} but the source canvas is {}x{}",
            mask.width,
            mask.height,
            pair.src.canvas().width,
            pair.src.canvas().height
        ))
        .at_stage(Stage::Interior));
    }
    let interior = interior_points(mask, interior_cfg).map_err(|e| e.at_stage(Stage::Interior))?;
    let matches =
        match_points(&interior.points, pair, disp, match_cfg).map_err(|e| e.at_stage(Stage::Matching))?;
    let predicted: Vec<[f64; 2]> = matches.iter().map(|m| m.predicted).collect();
    let (probability, out) =
        kde_reconstruct(&predicted, pair.tgt.canvas(), kde_cfg).map_err(|e| e.at_stage(Stage::Kde))?;
    Ok(MaskPropagation {
        mask: out,
        probability,
        interior,
        matches,
    })
}
