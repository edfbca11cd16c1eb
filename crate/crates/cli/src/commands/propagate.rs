use std::path::PathBuf;

use clap::{Args, ValueEnum};
use inrprop::feature_field::FeatureSource;
use inrprop::flow_field::Pair;
use inrprop::io::{self, AnnotationDoc, FrameRef, MaskOutputs, PropagationDoc, PropagationMode, SourceRef};
use inrprop::maskops::propagate_mask;
use inrprop::matching::match_points;
use inrprop::{DisplacementField, Error, FeatureField, Result, Stage};
use serde_json::Map;

use crate::{relative_ref, resolve_ref, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Points,
    Mask,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Source annotation document.
    #[arg(long, value_name = "JSON")]
    pub annotation: PathBuf,
    #[arg(long, value_name = "FIELD")]
    pub src_field: PathBuf,
    #[arg(long, value_name = "FIELD")]
    pub tgt_field: PathBuf,
    /// Displacement checkpoint fitted for this source and target frame.
    #[arg(long, value_name = "DFLD")]
    pub disp: PathBuf,
    #[arg(long, value_enum, default_value = "points")]
    pub mode: Mode,
    /// Matching prior width in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Minimum boundary distance of interior points.
    #[arg(long)]
    pub d_min: Option<f64>,
    #[arg(long)]
    pub kde_sigma: Option<f64>,
    #[arg(long)]
    pub kde_tau: Option<f64>,
    /// Output propagation document.
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Mask PGM; defaults to the output path with a `.mask.pgm` suffix.
    #[arg(long, value_name = "PGM")]
    pub mask_out: Option<PathBuf>,
    /// Also write the 16-bit probability field here.
    #[arg(long, value_name = "PGM")]
    pub prob_out: Option<PathBuf>,
}

impl PropagateArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.sigma.is_some() {
            cfg.matching.sigma = self.sigma;
        }
        if let Some(d) = self.d_min {
            cfg.interior.d_min = d;
        }
        if let Some(s) = self.kde_sigma {
            cfg.kde.sigma_kde = s;
        }
        if let Some(t) = self.kde_tau {
            cfg.kde.tau = t;
        }
    }
}

/// Checks that the annotation sits on the pair's source frame.
pub fn check_annotation(ann: &AnnotationDoc, src: &FeatureField, disp: &DisplacementField) -> Result<()> {
    let m = &disp.meta;
    if ann.video_id != m.src_video || ann.frame != m.src_t {
        return Err(Error::Validation(format!(
            "annotation is on frame {} of `{}` but the displacement field starts at frame {} of `{}`",
            ann.frame, ann.video_id, m.src_t, m.src_video
        )));
    }
    if ann.canvas != src.canvas() {
        return Err(Error::Validation(format!(
            "annotation canvas is {}x{} but the field canvas is {}x{}",
            ann.canvas.width,
            ann.canvas.height,
            src.canvas().width,
            src.canvas().height
        )));
    }
    Ok(())
}

pub fn propagate(args: &PropagateArgs, cfg: &RunConfig) -> Result<()> {
    let ann = io::read_annotation(&args.annotation)?;
    let src = io::read_feature_field::<f64>(&args.src_field)?;
    let tgt = io::read_feature_field::<f64>(&args.tgt_field)?;
    let disp = io::read_displacement::<f64>(&args.disp)?;
    check_annotation(&ann, &src, &disp).map_err(|e| e.in_file(&args.annotation))?;
    let pair = Pair::new(&src, disp.meta.src_t, &tgt, disp.meta.tgt_t);

    let (mode, results, mask) = match args.mode {
        Mode::Points => {
            let points = ann.point_coords();
            if points.is_empty() {
                return Err(Error::Validation("annotation has no points".into()).in_file(&args.annotation));
            }
            let results =
                match_points(&points, &pair, &disp, &cfg.matching).map_err(|e| e.at_stage(Stage::Matching))?;
            (PropagationMode::Points, results, None)
        }
        Mode::Mask => {
            let Some(mask_ref) = &ann.mask_ref else {
                return Err(Error::Validation("annotation has no mask_ref".into()).in_file(&args.annotation));
            };
            let source_mask = io::read_mask(resolve_ref(mask_ref, &args.annotation))?;
            let prop = propagate_mask(&source_mask, &pair, &disp, &cfg.matching, &cfg.interior, &cfg.kde)?;
            let mask_out = args.mask_out.clone().unwrap_or_else(|| {
                let mut s = args.out.as_os_str().to_owned();
                s.push(".mask.pgm");
                s.into()
            });
            io::write_mask(&prop.mask, &mask_out)?;
            if let Some(p) = &args.prob_out {
                io::write_probability(&prop.probability, p)?;
            }
            let outputs = MaskOutputs {
                mask_ref: relative_ref(&mask_out, &args.out),
                probability_ref: args.prob_out.as_deref().map(|p| relative_ref(p, &args.out)),
                interior_level: prop.interior.level,
                interior_count: prop.interior.points.len(),
                foreground_count: prop.mask.count(),
            };
            (PropagationMode::Mask, prop.matches, Some(outputs))
        }
    };

    let doc = PropagationDoc {
        engine_version: io::ENGINE_VERSION.to_owned(),
        seed: Some(cfg.effective_seed()),
        configs: Some(cfg.echo()),
        source: SourceRef {
            video_id: ann.video_id.clone(),
            frame: ann.frame,
            path: Some(args.annotation.display().to_string()),
        },
        target: FrameRef {
            video_id: tgt.video_id().to_owned(),
            frame: disp.meta.tgt_t,
        },
        mode,
        results,
        mask,
        extra: Map::new(),
    };
    io::write_propagation(&doc, &args.out)
}
