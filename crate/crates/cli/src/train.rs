use std::path::Path;

use mmseq::detok::{run_detok, DetokRunConfig};
use mmseq::mllm::EvalMetrics;
use mmseq::trainer::{finetune as run_finetune, pretrain as run_pretrain, TrainConfig, TrainOutcome};
use serde_json::{json, Value};

use crate::emit;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

fn load(config: &Path, resume: bool, stop_at: Option<usize>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.resume |= resume;
    if stop_at.is_some() {
        cfg.stop_at = stop_at;
    }
    Ok(cfg)
}

fn eval_json(e: &EvalMetrics) -> Value {
    json!({
        "token_accuracy": e.token_accuracy(),
        "lm_correct": e.lm_correct,
        "lm_total": e.lm_total,
        "min_cosine": e.min_cosine,
        "mean_cosine": e.mean_cosine,
        "query_rows": e.query_rows,
    })
}

fn outcome_json(cfg: &TrainConfig, out: &TrainOutcome) -> Value {
    json!({
        "steps_run": out.rows.len(),
        "first": out.rows.first(),
        "last": out.rows.last(),
        "eval": eval_json(&out.eval),
        "checkpoint": out.checkpoint,
        "metrics": cfg.out_dir.join("metrics.csv"),
    })
}

pub fn pretrain(config: &Path, resume: bool, stop_at: Option<usize>) -> CliResult {
    let cfg = load(config, resume, stop_at)?;
    RunManifest::new("pretrain", &cfg, Some(cfg.seed))?
        .input(config)?
        .input(&cfg.corpus)?
        .output(cfg.out_dir.join("checkpoint"))
        .output(cfg.out_dir.join("metrics.csv"))
        .write(&cfg.out_dir)?;
    let out = run_pretrain(&cfg)?;
    emit(&outcome_json(&cfg, &out))
}

/// Fails verification if any frozen tensor changed.
pub fn finetune(config: &Path, resume: bool, stop_at: Option<usize>) -> CliResult {
    let cfg = load(config, resume, stop_at)?;
    let mut run = RunManifest::new("finetune", &cfg, Some(cfg.seed))?
        .input(config)?
        .input(&cfg.corpus)?;
    if let Some(base) = &cfg.base {
        run = run.input(base)?;
    }
    run.output(cfg.out_dir.join("adapter"))
        .output(cfg.out_dir.join("metrics.csv"))
        .write(&cfg.out_dir)?;
    let out = run_finetune(&cfg)?;
    let (before, after) = out.frozen_checksums.clone().unwrap_or_default();
    let mut report = outcome_json(&cfg, &out);
    report["frozen_checksum_before"] = json!(before);
    report["frozen_checksum_after"] = json!(after);
    emit(&report)?;
    if before != after {
        return Err(CliError::Verification(
            "frozen base tensors changed during fine-tuning".into(),
        ));
    }
    Ok(())
}

pub fn train_detok(config: &Path) -> CliResult {
    let cfg = DetokRunConfig::load(config)?;
    let mut run = RunManifest::new("train-detok", &cfg, Some(cfg.seed))?
        .input(config)?
        .input(&cfg.corpus)?;
    for dir in &cfg.images {
        run = run.input(dir)?;
    }
    run.output(cfg.out_dir.join("stage1"))
        .output(cfg.out_dir.join("stage2"))
        .output(cfg.out_dir.join("metrics.csv"))
        .output(cfg.out_dir.join("report.json"))
        .write(&cfg.out_dir)?;
    let report = run_detok(&cfg)?;
    emit(&report)
}
