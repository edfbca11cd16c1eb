use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use inrprop::io::{self, AnnotationDoc, PropagationDoc};
use inrprop::maskops::BinaryMask;
use inrprop::metrics::{MetricRecord, MetricReport};
use inrprop::{Canvas, Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{print_json, resolve_ref, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Pck,
    Delta,
    Dice,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Propagation or annotation document, or a JSON array of them (one per frame).
    #[arg(long, value_name = "JSON")]
    pub pred: PathBuf,
    /// Annotation document or array, aligned with `--pred`.
    #[arg(long, value_name = "JSON")]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Also write the records as CSV.
    #[arg(long, value_name = "CSV")]
    pub csv: Option<PathBuf>,
}

/// A prediction: either a propagation result or a plain annotation.
#[derive(Debug, Clone)]
pub enum PredDoc {
    Propagation(PropagationDoc),
    Annotation(AnnotationDoc),
}

impl PredDoc {
    pub fn points(&self) -> Vec<[f64; 2]> {
        match self {
            PredDoc::Propagation(d) => d.results.iter().map(|r| r.predicted).collect(),
            PredDoc::Annotation(d) => d.point_coords(),
        }
    }

    pub fn mask_ref(&self) -> Option<&str> {
        match self {
            PredDoc::Propagation(d) => d.mask.as_ref().map(|m| m.mask_ref.as_str()),
            PredDoc::Annotation(d) => d.mask_ref.as_deref(),
        }
    }
}

fn elements(path: &Path) -> Result<Vec<Value>> {
    let bytes = io::read_file(path)?;
    let value: Value = io::from_json(&bytes).map_err(|e| e.in_file(path))?;
    Ok(match value {
        Value::Array(items) => items,
        single => vec![single],
    })
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, index: usize) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::schema(format!("[{index}]"), e.to_string()))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredDoc>> {
    elements(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.get("results").is_some() {
                let d: PropagationDoc = parse(v, i)?;
                d.validate()?;
                Ok(PredDoc::Propagation(d))
            } else {
                let d: AnnotationDoc = parse(v, i)?;
                d.validate()?;
                Ok(PredDoc::Annotation(d))
            }
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_file(path))
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<AnnotationDoc>> {
    elements(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let d: AnnotationDoc = parse(v, i)?;
            d.validate()?;
            Ok(d)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_file(path))
}

/// Per-point `visible` flags from annotation extras; absent means visible.
fn visibility(gt: &AnnotationDoc) -> Result<Vec<bool>> {
    gt.points
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, p)| match p.extra.get("visible") {
            None => Ok(true),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => Err(Error::schema(format!("points[{i}].visible"), "expected a boolean")),
        })
        .collect()
}

fn common_canvas(gt: &[AnnotationDoc]) -> Result<Canvas> {
    let c = gt[0].canvas;
    if gt.iter().any(|d| d.canvas != c) {
        return Err(Error::Validation("ground-truth documents disagree on the canvas".into()));
    }
    Ok(c)
}

fn read_mask_ref(reference: Option<&str>, doc: &Path, what: &str) -> Result<BinaryMask> {
    let r = reference.ok_or_else(|| Error::Validation(format!("{what} has no mask")))?;
    io::read_mask(resolve_ref(r, doc))
}

/// Scores `pred` against `gt` with the given metric.
pub fn evaluate(pred_path: &Path, gt_path: &Path, metric: Metric, cfg: &RunConfig) -> Result<MetricReport> {
    let pred = load_predictions(pred_path)?;
    let gt = load_ground_truth(gt_path)?;
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} ground-truth documents",
            pred.len(),
            gt.len()
        )));
    }
    let canvas = common_canvas(&gt)?;
    match metric {
        Metric::Pck => {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for (i, (a, b)) in pred.iter().zip(&gt).enumerate() {
                let (pa, gb) = (a.points(), b.point_coords());
                if pa.len() != gb.len() {
                    return Err(Error::Validation(format!(
                        "document {i}: {} predicted points but {} ground-truth points",
                        pa.len(),
                        gb.len()
                    )));
                }
                p.extend(pa);
                g.extend(gb);
            }
            MetricReport::pck(&p, &g, canvas, &cfg.metrics)
        }
        Metric::Delta => {
            let p: Vec<_> = pred.iter().map(PredDoc::points).collect();
            let g: Vec<_> = gt.iter().map(AnnotationDoc::point_coords).collect();
            let vis = gt.iter().map(visibility).collect::<Result<Vec<_>>>()?;
            let vis = vis.iter().any(|v| v.contains(&false)).then_some(vis);
            MetricReport::delta_avg(&p, &g, canvas, &cfg.metrics, vis.as_deref())
        }
        Metric::Dice => {
            let mut total = 0.0;
            for (a, b) in pred.iter().zip(&gt) {
                let pm = read_mask_ref(a.mask_ref(), pred_path, "prediction")?;
                let gm = read_mask_ref(b.mask_ref.as_deref(), gt_path, "ground truth")?;
                total += inrprop::metrics::dice(&pm, &gm)?;
            }
            Ok(MetricReport {
                config: cfg.metrics.clone(),
                records: vec![MetricRecord {
                    metric: "dice".into(),
                    threshold: None,
                    value: total / pred.len() as f64,
                    count: pred.len(),
                }],
            })
        }
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    run_config: Map<String, Value>,
}

fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("cannot encode report: {e}"));
    w.write_record(["metric", "threshold", "value", "count"]).map_err(csv_err)?;
    for r in &report.records {
        let t = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([r.metric.clone(), t, r.value.to_string(), r.count.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    io::write_atomic(path, &bytes)
}

pub fn eval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let report = evaluate(&args.pred, &args.gt, args.metric, cfg)?;
    if let Some(path) = &args.csv {
        write_csv(&report, path)?;
    }
    print_json(&EvalOutput {
        report: &report,
        run_config: cfg.echo(),
    });
    Ok(())
}
