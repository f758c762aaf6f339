//! Subcommand implementations. Each returns the JSON it prints.

use std::path::Path;

use anyhow::{bail, Context};
use iris_gate::cascade::{assess as run_cascade, hierarchical_eval_with, CascadeError};
use iris_gate::imaging::DEFAULT_SIDE;
use iris_gate::protocol::{
    evaluate_detector, load_image_tensor, read_binary_manifest, read_hier_manifest, run_experiment,
    Backend, ExperimentConfig,
};
use iris_gate::synthgen::{gen_dataset, GenConfig};
use serde_json::json;

use crate::config::TierBackend;
use crate::models::{common_side, detector_from_path};

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn check_tier(tier: u8, backend: TierBackend) -> anyhow::Result<()> {
    match tier {
        1 if backend == TierBackend::Heuristic => {
            bail!("the heuristic backend only judges lighting (tier 2)")
        }
        1 | 2 => Ok(()),
        other => bail!("tier must be 1 or 2, got {other}"),
    }
}

pub fn synth(config: &Path, out: &Path) -> anyhow::Result<String> {
    let cfg = GenConfig::load(config)?;
    let m = gen_dataset(&cfg, out)?;
    Ok(pretty(&json!({
        "samples": m.rows.len(),
        "manifest": m.manifest,
        "tier1": m.tier1,
        "tier2": m.tier2,
    })))
}

/// Runs the configured experiment and saves the first run's model.
pub fn train(
    config: &Path,
    tier: u8,
    manifest: Option<&Path>,
    out: &Path,
) -> anyhow::Result<String> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = manifest {
        cfg.manifest = Some(m.to_path_buf());
    }
    let backend = match cfg.backend {
        Backend::Logistic => TierBackend::Logistic,
        Backend::Heuristic => TierBackend::Heuristic,
    };
    check_tier(tier, backend)?;
    let manifest = cfg
        .manifest
        .clone()
        .context("no manifest: pass --manifest or set `manifest` in the config")?;
    let samples = read_binary_manifest(&manifest)?;
    let (report, model) = run_experiment(&cfg, &samples)?;
    match model {
        Some(m) => m
            .save(out)
            .with_context(|| format!("cannot write {}", out.display()))?,
        None => eprintln!(
            "heuristic backend has no trained model; {} not written",
            out.display()
        ),
    }
    Ok(report.to_json())
}

pub fn eval(tier: u8, model: &str, manifest: &Path) -> anyhow::Result<String> {
    let d = detector_from_path(model)?;
    check_tier(tier, d.backend)?;
    let samples = read_binary_manifest(manifest)?;
    let side = d.input_side.unwrap_or(DEFAULT_SIDE);
    let (_, report) = evaluate_detector(&*d.detector, &samples, side)?;
    Ok(pretty(&report))
}

pub fn cascade_eval(tier1: &str, tier2: &str, manifest: &Path) -> anyhow::Result<String> {
    let (t1, t2) = (detector_from_path(tier1)?, detector_from_path(tier2)?);
    check_tier(1, t1.backend)?;
    let side = common_side(&t1, &t2, DEFAULT_SIDE)?;
    let records = read_hier_manifest(manifest)?;
    let eval = hierarchical_eval_with(
        &records,
        |r| {
            let t = load_image_tensor(&r.path, side).map_err(|e| CascadeError::Input {
                id: r.id.clone(),
                message: e.to_string(),
            })?;
            Ok((t, r.label))
        },
        &*t1.detector,
        &*t2.detector,
    )?;
    Ok(pretty(&eval))
}

pub fn assess(tier1: &str, tier2: &str, image: &Path) -> anyhow::Result<String> {
    let (t1, t2) = (detector_from_path(tier1)?, detector_from_path(tier2)?);
    check_tier(1, t1.backend)?;
    let side = common_side(&t1, &t2, DEFAULT_SIDE)?;
    let t = load_image_tensor(image, side)?;
    Ok(pretty(&run_cascade(&t, &*t1.detector, &*t2.detector)?))
}
