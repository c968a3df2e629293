use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use odp_core::disentangle::{disentangle as run_disentangle, DisentangleOptions};
use odp_core::formats::{decode_dataset, decode_model, encode_model, load_subspaces};
use odp_core::model::ModelParams;
use odp_core::synthgen::Dataset;
use odp_core::trainer::{check_loss_gradient, evaluate, ortho_projection, train as run_train, Batch, TrainConfig};

use crate::manifest::Run;
use crate::synth::read_config;
use crate::{DisentangleArgs, EvalArgs, TrainArgs, VerifyCommand};

pub const MODEL_FILE: &str = "model.odpm";
pub const HISTORY_CSV: &str = "history.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DISENTANGLE_JSON: &str = "disentangle.json";
pub const DISENTANGLE_CSV: &str = "disentangle.csv";
pub const GRAD_JSON: &str = "grad.json";
pub const ORTHO_JSON: &str = "ortho.json";

/// Checkpoint file for the parameters after `epoch` epochs (0 = initial).
pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.odpm")
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_dataset(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_model(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.mask_mode {
        cfg.mask_mode = v;
    }
    if let Some(v) = a.purification_mode {
        cfg.purification_mode = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;

    let mut run = Run::start("train", &a.out, cfg.seed, &cfg)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    run.input(&a.data)?;
    let out = run_train(&cfg, &ds)?;
    run.write(MODEL_FILE, &encode_model(&out.params))?;
    run.write(&checkpoint_name(0), &encode_model(&out.initial))?;
    for (epoch, p) in &out.checkpoints {
        run.write(&checkpoint_name(*epoch), &encode_model(p))?;
    }
    run.write(HISTORY_CSV, out.history.epoch_csv().as_bytes())?;
    run.write(STEPS_CSV, out.history.step_csv().as_bytes())?;
    run.write_json(HISTORY_JSON, &out.history)?;
    run.finish()?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = serde_json::json!({ "model": a.model, "data": a.data, "mask_mode": a.mask_mode });
    let mut run = Run::start("eval", &a.out, 0, &cfg)?;
    run.input(&a.model)?;
    run.input(&a.data)?;
    let params = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let report = evaluate(&params, &ds, a.mask_mode)?;
    run.write_json(METRICS_JSON, &report)?;
    let csv = format!("{}\n{}\n", odp_core::metrics::MetricsReport::CSV_HEADER, report.csv_row());
    run.write(METRICS_CSV, csv.as_bytes())?;
    run.finish()?;
    Ok(())
}

pub fn disentangle(a: DisentangleArgs) -> Result<()> {
    let cfg = serde_json::json!({
        "model": a.model, "data": a.data, "subspaces": a.subspaces, "mask_mode": a.mask_mode,
        "k": a.k, "max_samples": a.max_samples,
    });
    let mut run = Run::start("disentangle", &a.out, a.seed, &cfg)?;
    run.input(&a.model)?;
    run.input(&a.data)?;
    let params = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let truth = match &a.subspaces {
        Some(p) => {
            run.input(p)?;
            Some(load_subspaces(p, ds.dim).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let opts = DisentangleOptions {
        mode: a.mask_mode,
        k: a.k,
        max_samples: a.max_samples,
        seed: a.seed,
    };
    let report = run_disentangle(&params, &ds, truth.as_ref(), &opts)?;
    run.write_json(DISENTANGLE_JSON, &report)?;
    run.write(DISENTANGLE_CSV, report.to_csv().as_bytes())?;
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct OrthoReport {
    projection: Option<f64>,
    before: Option<f64>,
    after: Option<f64>,
    /// `after / before`; absent when `before` is zero.
    ratio: Option<f64>,
}

pub fn verify(cmd: VerifyCommand) -> Result<()> {
    match cmd {
        VerifyCommand::Grad {
            model,
            data,
            config,
            out,
            batch,
            eps,
            max_entries,
            seed,
        } => {
            let train_cfg: TrainConfig = match &config {
                Some(p) => read_config(p)?,
                None => TrainConfig::default(),
            };
            let cfg = serde_json::json!({
                "model": model, "data": data, "train": train_cfg, "batch": batch, "eps": eps,
                "max_entries": max_entries,
            });
            let mut run = Run::start("verify grad", &out, seed, &cfg)?;
            run.input(&model)?;
            run.input(&data)?;
            let params = load_model(&model)?;
            let ds = load_dataset(&data)?;
            if batch < 2 || ds.len() < 2 {
                anyhow::bail!(odp_core::Error::Config {
                    field: "batch".into(),
                    reason: "need at least two samples".into(),
                });
            }
            let idx: Vec<usize> = (0..batch.min(ds.len())).collect();
            let b = Batch::from_indices(&ds, &idx);
            let report = check_loss_gradient(&params, &b, &train_cfg, eps, max_entries, seed)?;
            println!("max relative error {:.3e}", report.max_rel_error);
            run.write_json(GRAD_JSON, &report)?;
            run.finish()?;
        }
        VerifyCommand::Ortho {
            model,
            before,
            after,
            data,
            out,
            mask_mode,
            seed,
        } => {
            let cfg = serde_json::json!({
                "model": model, "before": before, "after": after, "data": data, "mask_mode": mask_mode,
            });
            let mut run = Run::start("verify ortho", &out, seed, &cfg)?;
            run.input(&data)?;
            let ds = load_dataset(&data)?;
            let measure = |p: &Path, run: &mut Run| -> Result<f64> {
                run.input(p)?;
                Ok(ortho_projection(&load_model(p)?, &ds, mask_mode, seed)?)
            };
            let report = match (model, before, after) {
                (Some(m), _, _) => OrthoReport {
                    projection: Some(measure(&m, &mut run)?),
                    before: None,
                    after: None,
                    ratio: None,
                },
                (None, Some(b), Some(a)) => {
                    let vb = measure(&b, &mut run)?;
                    let va = measure(&a, &mut run)?;
                    OrthoReport {
                        projection: None,
                        before: Some(vb),
                        after: Some(va),
                        ratio: (vb > 0.0).then(|| va / vb),
                    }
                }
                _ => unreachable!("clap enforces --model or --before/--after"),
            };
            run.write_json(ORTHO_JSON, &report)?;
            run.finish()?;
        }
    }
    Ok(())
}
