use std::path::PathBuf;

use clap::Args;
use inrprop::feature_field::compare_architectures;
use inrprop::io;
use inrprop::numerics::Activation;
use inrprop::synth::{make_volume, SynthSpec};
use inrprop::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{print_json, RunConfig};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic volume spec.
    #[arg(long, value_name = "JSON")]
    pub spec: PathBuf,
    #[arg(long, value_name = "FVOL")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArchArgs {
    #[arg(long, value_name = "FVOL")]
    pub fvol: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Comma-separated: `sine`, `relu`, `relu_pe` or `relu_pe:N`.
    #[arg(long, value_delimiter = ',', default_value = "sine,relu_pe:3,relu")]
    pub activations: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hr: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CompareArchArgs {
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

#[derive(Serialize)]
struct SynthSummary {
    out: String,
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    config: Map<String, Value>,
}

pub fn synth(args: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let bytes = io::read_file(&args.spec)?;
    let spec: SynthSpec = io::from_json(&bytes).map_err(|e| e.in_file(&args.spec))?;
    spec.validate().map_err(|e| e.in_file(&args.spec))?;
    let (volume, _) = make_volume(&spec)?;
    io::write_fvol(&volume, &args.out)?;
    let (frames, height, width, dim) = volume.dims();
    print_json(&SynthSummary {
        out: args.out.display().to_string(),
        frames,
        height,
        width,
        dim,
        config: cfg.echo(),
    });
    Ok(())
}

#[derive(Serialize)]
struct ArchRow {
    activation: String,
    final_loss: f64,
    rmse: f64,
    param_count: usize,
}

pub fn compare_arch(args: &CompareArchArgs, cfg: &RunConfig) -> Result<()> {
    let activations = args
        .activations
        .iter()
        .map(|s| s.trim().parse::<Activation>())
        .collect::<Result<Vec<_>>>()?;
    if activations.is_empty() {
        return Err(Error::Config("no activations to compare".into()));
    }
    let volume = io::read_fvol(&args.fvol)?.volume;
    let rows: Vec<ArchRow> = compare_architectures::<f64>(&volume, &cfg.field, &activations)?
        .into_iter()
        .map(|r| {
            eprintln!("compare-arch: {} final loss {:.6e}", r.activation.name(), r.final_loss);
            ArchRow {
                activation: r.activation.name(),
                final_loss: r.final_loss,
                rmse: r.rmse,
                param_count: r.param_count,
            }
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Validation(format!("cannot encode row: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    io::write_atomic(&args.out, &bytes)?;
    print_json(&serde_json::json!({ "out": args.out.display().to_string(), "rows": rows, "config": cfg.echo() }));
    Ok(())
}
