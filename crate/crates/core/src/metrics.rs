//! Point accuracy (PCK, threshold-averaged accuracy) and mask overlap (Dice).
//!
//! Point errors are measured after scaling each axis to a 256-pixel canvas,
//! and a point counts as correct when its error is strictly below the
//! threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Canvas;
use crate::maskops::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub canvas_norm: f64,
    pub pck_thresholds: Vec<f64>,
    pub delta_thresholds: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            canvas_norm: 256.0,
            pck_thresholds: vec![4.0, 8.0, 16.0],
            delta_thresholds: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.canvas_norm > 0.0) {
            return Err(Error::Config("canvas_norm must be positive".into()));
        }
        for (name, t) in [("pck_thresholds", &self.pck_thresholds), ("delta_thresholds", &self.delta_thresholds)] {
            if t.is_empty() || t[0] <= 0.0 || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be positive and ascending")));
            }
        }
        Ok(())
    }
}

/// Distance between two points after per-axis scaling to the normalized canvas.
pub fn normalized_error(pred: [f64; 2], gt: [f64; 2], canvas: Canvas, norm: f64) -> f64 {
    let sx = norm / canvas.width as f64;
    let sy = norm / canvas.height as f64;
    ((pred[0] - gt[0]) * sx).hypot((pred[1] - gt[1]) * sy)
}

fn check_points(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predicted points but {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("no points to score".into()));
    }
    Ok(())
}

/// Fraction of points within each PCK threshold, in threshold order.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], canvas: Canvas, cfg: &MetricsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_points(pred, gt)?;
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| normalized_error(*p, *g, canvas, cfg.canvas_norm))
        .collect();
    Ok(cfg
        .pck_thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64)
        .collect())
}

/// Accuracy averaged over the delta thresholds, across every frame and point.
/// With `visible`, only points flagged visible are scored.
pub fn delta_avg(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    canvas: Canvas,
    cfg: &MetricsConfig,
    visible: Option<&[Vec<bool>]>,
) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predicted frames but {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(v) = visible {
        if v.len() != gt.len() || v.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Validation("visibility flags do not match the points".into()));
        }
    }
    let mut errors = Vec::new();
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Validation(format!("frame {f}: point counts differ")));
        }
        for (i, (a, b)) in p.iter().zip(g).enumerate() {
            if visible.is_none_or(|v| v[f][i]) {
                errors.push(normalized_error(*a, *b, canvas, cfg.canvas_norm));
            }
        }
    }
    if errors.is_empty() {
        return Err(Error::Validation("no points to score".into()));
    }
    let n = errors.len() as f64;
    let per_threshold: f64 = cfg
        .delta_thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n)
        .sum();
    Ok(per_threshold / cfg.delta_thresholds.len() as f64)
}

/// `2 |A & B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.canvas() != b.canvas() {
        return Err(Error::Validation(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.bits().iter().zip(b.bits()).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub value: f64,
    /// Number of scored items (points or masks).
    pub count: usize,
}

/// Records plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricsConfig,
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], canvas: Canvas, cfg: &MetricsConfig) -> Result<Self> {
        let values = pck(pred, gt, canvas, cfg)?;
        let records = cfg
            .pck_thresholds
            .iter()
            .zip(values)
            .map(|(&t, value)| MetricRecord {
                metric: "pck".into(),
                threshold: Some(t),
                value,
                count: pred.len(),
            })
            .collect();
        Ok(MetricReport {
            config: cfg.clone(),
            records,
        })
    }

    pub fn delta_avg(
        pred: &[Vec<[f64; 2]>],
        gt: &[Vec<[f64; 2]>],
        canvas: Canvas,
        cfg: &MetricsConfig,
        visible: Option<&[Vec<bool>]>,
    ) -> Result<Self> {
        let value = delta_avg(pred, gt, canvas, cfg, visible)?;
        let count = match visible {
            Some(v) => v.iter().flatten().filter(|&&b| b).count(),
            None => gt.iter().map(Vec::len).sum(),
        };
        Ok(MetricReport {
            config: cfg.clone(),
            records: vec![MetricRecord {
                metric: "delta_avg".into(),
                threshold: None,
                value,
                count,
            }],
        })
    }

    pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        Ok(MetricReport {
            config: MetricsConfig::default(),
            records: vec![MetricRecord {
                metric: "dice".into(),
                threshold: None,
                value: dice(pred, gt)?,
                count: 1,
            }],
        })
    }
}
