use std::path::{Path, PathBuf};

use clap::Args;
use inrprop::feature_field::fit_feature_field_with;
use inrprop::flow_field::{fit_displacement_with, fit_displacements_batch, lattice, Pair};
use inrprop::io;
use inrprop::synth::{oracle_endpoint_error, GroundTruthWarp, SynthSpec};
use inrprop::{DisplacementField, Error, FeatureField, Result, Stage};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{print_json, FrameSpec, Progress, RunConfig};

/// Lattice points per axis for reported displacement statistics.
const REPORT_GRID: usize = 32;

#[derive(Debug, Args)]
pub struct FitFeaturesArgs {
    #[arg(long, value_name = "FVOL")]
    pub fvol: PathBuf,
    /// Output field checkpoint.
    #[arg(long, value_name = "FIELD")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Height of the high-resolution canvas.
    #[arg(long)]
    pub hr: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the volume file stem.
    #[arg(long)]
    pub video_id: Option<String>,
    /// Loss-trace CSV; defaults to the output path with a `.loss.csv` suffix.
    #[arg(long, value_name = "CSV")]
    pub trace: Option<PathBuf>,
}

impl FitFeaturesArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(e) = self.epochs {
            cfg.field.epochs = e;
        }
        if let Some(h) = self.hr {
            cfg.field.hr_size = h;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
    }
}

#[derive(Debug, Args)]
pub struct FitFlowArgs {
    /// Source field and frame, `FIELD[:t]` (frame defaults to 0).
    #[arg(long, required_unless_present = "pairs", requires = "tgt", requires = "out")]
    pub src: Option<FrameSpec>,
    /// Target field and frame, `FIELD[:t]` (frame defaults to 0).
    #[arg(long)]
    pub tgt: Option<FrameSpec>,
    /// Output displacement checkpoint.
    #[arg(long, value_name = "DFLD")]
    pub out: Option<PathBuf>,
    /// JSON list of `{src, tgt, out}` entries fitted as one batch; paths are
    /// relative to the manifest.
    #[arg(long, value_name = "JSON", conflicts_with_all = ["src", "tgt", "out"])]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl FitFlowArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(e) = self.epochs {
            cfg.flow.epochs = e;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
    }
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("cannot encode loss trace: {e}"));
    w.write_record(["epoch", "loss"]).map_err(csv_err)?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    io::write_atomic(path, &bytes)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

#[derive(Serialize)]
struct FieldSummary<'a> {
    out: String,
    trace: String,
    video_id: &'a str,
    epochs: usize,
    final_loss: f64,
    renormalized_vectors: usize,
    config: Map<String, Value>,
}

pub fn fit_features(args: &FitFeaturesArgs, cfg: &RunConfig) -> Result<()> {
    let loaded = io::read_fvol(&args.fvol)?;
    if loaded.renormalized > 0 {
        log::warn!("{}: renormalized {} feature vectors", args.fvol.display(), loaded.renormalized);
    }
    let video_id = match &args.video_id {
        Some(id) => id.clone(),
        None => args
            .fvol
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut progress = Progress::new("fit-features", cfg.field.epochs);
    let fit = fit_feature_field_with::<f64>(&loaded.volume, &cfg.field, |p| {
        progress.tick(p.epoch, format_args!("loss {:.6e}", p.loss))
    })
    .map_err(|e| e.at_stage(Stage::FieldFit))?;
    let field = fit.field.with_video_id(video_id);
    let trace = args.trace.clone().unwrap_or_else(|| with_suffix(&args.out, ".loss.csv"));
    io::write_feature_field(&field, &args.out)?;
    write_trace(&trace, &fit.trace)?;
    print_json(&FieldSummary {
        out: args.out.display().to_string(),
        trace: trace.display().to_string(),
        video_id: field.video_id(),
        epochs: fit.trace.len(),
        final_loss: *fit.trace.last().expect("at least one epoch"),
        renormalized_vectors: loaded.renormalized,
        config: cfg.echo(),
    });
    Ok(())
}

/// One line of a batch manifest.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    src: String,
    tgt: String,
    out: PathBuf,
}

struct Job {
    src: (usize, usize),
    tgt: (usize, usize),
    out: PathBuf,
    label: (String, String),
}

#[derive(Debug, Serialize)]
pub struct FlowSummary {
    pub src: String,
    pub tgt: String,
    pub out: String,
    pub final_loss: f64,
    /// Mean displacement magnitude over the report lattice, in pixels.
    pub mean_abs_displacement: f64,
    /// Mean endpoint error against the known motion of a synthetic video.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<f64>,
}

#[derive(Serialize)]
struct FlowReport {
    pairs: Vec<FlowSummary>,
    config: Map<String, Value>,
}

/// Loads each distinct field file once.
#[derive(Default)]
struct FieldStore {
    paths: Vec<PathBuf>,
    fields: Vec<FeatureField>,
}

impl FieldStore {
    fn index(&mut self, path: &Path) -> Result<usize> {
        if let Some(i) = self.paths.iter().position(|p| p == path) {
            return Ok(i);
        }
        self.fields.push(io::read_feature_field::<f64>(path)?);
        self.paths.push(path.to_owned());
        Ok(self.fields.len() - 1)
    }
}

pub fn mean_abs_displacement(disp: &DisplacementField) -> f64 {
    let pts = lattice::<f64>(disp.canvas(), REPORT_GRID);
    let d = disp.displacements(&pts);
    d.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / d.len() as f64
}

/// Endpoint error when both frames come from the same synthetic video and
/// the pair runs forward from frame 0.
pub fn synthetic_endpoint_error(src: &FeatureField, tgt: &FeatureField, disp: &DisplacementField) -> Option<f64> {
    if src.source_tag() != tgt.source_tag() || src.video_id() != tgt.video_id() {
        return None;
    }
    let spec = SynthSpec::from_source_tag(src.source_tag())?;
    let (scale, offset) = src.cell_to_canvas();
    let truth = GroundTruthWarp::new(spec.warp).on_canvas(scale, offset);
    oracle_endpoint_error(disp, &truth, REPORT_GRID).ok()
}

fn summarize(job: &Job, store: &FieldStore, disp: &DisplacementField) -> FlowSummary {
    FlowSummary {
        src: job.label.0.clone(),
        tgt: job.label.1.clone(),
        out: job.out.display().to_string(),
        final_loss: disp.trace.last().copied().unwrap_or(f64::NAN),
        mean_abs_displacement: mean_abs_displacement(disp),
        endpoint_error: synthetic_endpoint_error(&store.fields[job.src.0], &store.fields[job.tgt.0], disp),
    }
}

pub fn fit_flow(args: &FitFlowArgs, cfg: &RunConfig) -> Result<()> {
    let mut store = FieldStore::default();
    let mut jobs = Vec::new();
    let mut add = |store: &mut FieldStore, src: &FrameSpec, tgt: &FrameSpec, out: PathBuf| -> Result<()> {
        jobs.push(Job {
            src: (store.index(&src.path)?, src.frame.unwrap_or(0)),
            tgt: (store.index(&tgt.path)?, tgt.frame.unwrap_or(0)),
            out,
            label: (src.to_string(), tgt.to_string()),
        });
        Ok(())
    };
    match &args.pairs {
        Some(manifest) => {
            let bytes = io::read_file(manifest)?;
            let entries: Vec<ManifestEntry> = io::docs::from_json(&bytes).map_err(|e| e.in_file(manifest))?;
            if entries.is_empty() {
                return Err(Error::Validation("pair manifest is empty".into()).in_file(manifest));
            }
            let base = manifest.parent().unwrap_or(Path::new(""));
            for (i, e) in entries.iter().enumerate() {
                let parse = |s: &str| -> Result<FrameSpec> {
                    let mut f: FrameSpec = s.parse().map_err(|m| Error::schema(format!("[{i}]"), m))?;
                    f.path = base.join(f.path);
                    Ok(f)
                };
                add(&mut store, &parse(&e.src)?, &parse(&e.tgt)?, base.join(&e.out))?;
            }
        }
        None => {
            let (src, tgt, out) = match (&args.src, &args.tgt, &args.out) {
                (Some(s), Some(t), Some(o)) => (s, t, o),
                _ => return Err(Error::Config("--src, --tgt and --out are required without --pairs".into())),
            };
            add(&mut store, src, tgt, out.clone())?;
        }
    }

    let pairs: Vec<Pair<'_, FeatureField>> = jobs
        .iter()
        .map(|j| Pair::new(&store.fields[j.src.0], j.src.1, &store.fields[j.tgt.0], j.tgt.1))
        .collect();
    let results = if pairs.len() == 1 {
        let mut progress = Progress::new("fit-flow", cfg.flow.epochs);
        vec![fit_displacement_with(pairs[0], &cfg.flow, |epoch, loss| {
            progress.tick(epoch, format_args!("loss {:.6e}", loss.total))
        })]
    } else {
        eprintln!("fit-flow: fitting {} pairs", pairs.len());
        fit_displacements_batch(&pairs, &cfg.flow)
    };

    let mut summaries = Vec::new();
    let mut first_err = None;
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(disp) => {
                io::write_displacement(&disp, &job.out)?;
                summaries.push(summarize(job, &store, &disp));
            }
            Err(e) => {
                eprintln!("error: {} -> {}: {e}", job.label.0, job.label.1);
                first_err.get_or_insert(e);
            }
        }
    }
    print_json(&FlowReport {
        pairs: summaries,
        config: cfg.echo(),
    });
    first_err.map_or(Ok(()), Err)
}
