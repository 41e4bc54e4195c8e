//! Training loops and on-disk run layout.
//!
//! ```text
//! <out_dir>/metrics.csv            step,lr,ce,mse,total
//! <out_dir>/checkpoint/            pre-training: full model
//! <out_dir>/adapter/               fine-tuning: trainable tensors only
//!     manifest.json, tensors/, vocab.tsv     model tensors (MMT1)
//!     optimizer/                             Adam moments
//!     state.json                             step, base checkpoint
//!     tokenizer.json, vit_projection.mmt     visual tokenizer
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, AdamConfig, AdamState};
use super::config::TrainConfig;
use super::lora::{attach_lora, LoraSpec};
use crate::error::{Error, Result};
use crate::mllm::{evaluate, loss_and_grad, EvalMetrics, ModelParams, ParamGroup};
use crate::seqpack::{collate, PackedCorpus, PackedSequence};
use crate::vitsim::{VisualTokenizer, VisualTokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

impl MetricRow {
    fn csv(&self) -> String {
        // `{:?}` prints the shortest round-tripping form.
        format!(
            "{},{:?},{:?},{:?},{:?}\n",
            self.step, self.lr, self.ce, self.mse, self.total
        )
    }
}

pub fn write_metrics_header(path: &Path) -> Result<()> {
    fs::write(path, "step,lr,ce,mse,total\n")?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("metrics line {}: bad number {s:?}", n + 1)))
        };
        if f.len() != 5 {
            return Err(Error::Format(format!("metrics line {} has {} fields", n + 1, f.len())));
        }
        rows.push(MetricRow {
            step: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("metrics line {}: bad step", n + 1)))?,
            lr: parse(f[1])?,
            ce: parse(f[2])?,
            mse: parse(f[3])?,
            total: parse(f[4])?,
        });
    }
    Ok(rows)
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct Session {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed steps.
    pub step: usize,
}

/// Predicate selecting the members of `groups`.
pub fn trainable_predicate(groups: &[ParamGroup]) -> impl Fn(&str) -> bool + Sync + '_ {
    move |name: &str| groups.iter().any(|g| g.contains(name))
}

/// Runs steps until `session.step` reaches `cfg.steps` (or `cfg.stop_at`). Batch `k` holds sequences
/// `[k·B, (k+1)·B)`; step `s` uses batch `s mod ⌈N/B⌉`, padded to its
/// longest member.
pub fn run_steps(
    session: &mut Session,
    seqs: &[PackedSequence],
    cfg: &TrainConfig,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    on_step: &mut dyn FnMut(&MetricRow, &Session) -> Result<()>,
) -> Result<()> {
    let chunks: Vec<&[PackedSequence]> = seqs.chunks(cfg.batch_size).collect();
    if chunks.is_empty() {
        return Err(Error::Ingest("corpus has no sequences".into()));
    }
    let end = cfg.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    while session.step < end {
        let chunk = chunks[session.step % chunks.len()];
        let pad_to = chunk.iter().map(PackedSequence::total_len).max().unwrap_or(1);
        let batch = collate(chunk, pad_to)?;
        let lr = cosine_lr(session.step, cfg.steps, cfg.lr, cfg.lr_min);
        let (parts, grads) = loss_and_grad(&session.params, &batch, cfg.lambda, trainable)?;
        if !parts.total.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", session.step)));
        }
        session.adam.update(&mut session.params, &grads, lr)?;
        let row = MetricRow {
            step: session.step,
            lr,
            ce: parts.ce,
            mse: parts.mse,
            total: parts.total,
        };
        session.step += 1;
        on_step(&row, session)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub params: ModelParams,
    /// Teacher-forced metrics on the training corpus after the last step.
    pub eval: EvalMetrics,
    /// Checksum of the frozen tensors before and after fine-tuning.
    pub frozen_checksums: Option<(String, String)>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    kind: String,
    base: Option<PathBuf>,
}

fn load_corpus(cfg: &TrainConfig) -> Result<PackedCorpus> {
    let corpus = PackedCorpus::read(&cfg.corpus)
        .map_err(|e| Error::Ingest(format!("cannot read corpus {}: {e}", cfg.corpus.display())))?;
    for (i, v) in corpus.violations().iter().enumerate() {
        if let Some(first) = v.first() {
            return Err(Error::Ingest(format!(
                "sequence {} violates corpus invariants: {}",
                i + 1,
                first.message
            )));
        }
    }
    Ok(corpus)
}

fn save_tokenizer(dir: &Path, vit: &VisualTokenizer) -> Result<()> {
    fs::write(dir.join("tokenizer.json"), serde_json::to_string_pretty(vit.config())?)?;
    vit.save_projection(dir.join("vit_projection.mmt"))
}

/// Loads the visual tokenizer stored with a checkpoint.
pub fn load_tokenizer(dir: &Path) -> Result<VisualTokenizer> {
    let cfg: VisualTokenizerConfig = serde_json::from_str(&fs::read_to_string(dir.join("tokenizer.json"))?)?;
    VisualTokenizer::load(cfg, dir.join("vit_projection.mmt"))
}

fn save_session(
    dir: &Path,
    s: &Session,
    kind: &str,
    base: Option<&Path>,
    select: &dyn Fn(&str) -> bool,
    vit: &VisualTokenizer,
) -> Result<()> {
    s.params.save(dir, kind, select)?;
    s.adam.save(dir.join("optimizer"))?;
    save_tokenizer(dir, vit)?;
    let state = StateFile {
        step: s.step,
        kind: kind.into(),
        base: base.map(Path::to_path_buf),
    };
    fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
    Ok(())
}

fn read_state(dir: &Path) -> Result<StateFile> {
    let text = fs::read_to_string(dir.join("state.json"))
        .map_err(|e| Error::Config(format!("no checkpoint state at {}: {e}", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a pre-training checkpoint, or a fine-tuning adapter overlaid on
/// its base, plus the stored visual tokenizer.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(ModelParams, VisualTokenizer)> {
    let dir = dir.as_ref();
    let (params, kind) = ModelParams::load(dir)?;
    let vit = load_tokenizer(dir)?;
    if kind != "adapter" {
        return Ok((params, vit));
    }
    let base = read_state(dir)?
        .base
        .ok_or_else(|| Error::Config(format!("adapter at {} names no base checkpoint", dir.display())))?;
    let (mut full, _) = ModelParams::load(&base)?;
    full.overlay(&params)?;
    Ok((full, vit))
}

fn metrics_sink<'a>(
    path: &'a Path,
    rows: &'a mut Vec<MetricRow>,
    mut checkpoint: impl FnMut(&Session) -> Result<()> + 'a,
    every: usize,
) -> impl FnMut(&MetricRow, &Session) -> Result<()> + 'a {
    move |row, session| {
        let mut f = fs::OpenOptions::new().append(true).open(path)?;
        f.write_all(row.csv().as_bytes())?;
        rows.push(*row);
        if every > 0 && session.step % every == 0 {
            checkpoint(session)?;
        }
        Ok(())
    }
}

/// Next-token plus feature-regression training of every base parameter.
pub fn pretrain(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let ckpt = cfg.out_dir.join("checkpoint");
    let metrics = cfg.out_dir.join("metrics.csv");
    fs::create_dir_all(&cfg.out_dir)?;
    let mut session = if cfg.resume && ckpt.join("state.json").is_file() {
        let (params, _) = ModelParams::load(&ckpt)?;
        let state = read_state(&ckpt)?;
        Session {
            params,
            adam: AdamState::load(ckpt.join("optimizer"))?,
            step: state.step,
        }
    } else {
        let params = ModelParams::init(cfg.model_config(corpus.visual_dim()), cfg.seed)?;
        let adam = AdamState::new(AdamConfig::default(), params.iter().map(|(n, t)| (n, t.shape())));
        write_metrics_header(&metrics)?;
        Session { params, adam, step: 0 }
    };
    if session.params.config != cfg.model_config(corpus.visual_dim()) {
        return Err(Error::Config(
            "checkpoint model config differs from the run config".into(),
        ));
    }
    let vit = corpus.tokenizer.clone();
    let all = |_: &str| true;
    let mut rows = Vec::new();
    {
        let save = |s: &Session| save_session(&ckpt, s, "base", None, &all, &vit);
        let mut sink = metrics_sink(&metrics, &mut rows, save, cfg.checkpoint_every);
        run_steps(&mut session, &corpus.sequences, cfg, &all, &mut sink)?;
    }
    save_session(&ckpt, &session, "base", None, &all, &vit)?;
    let eval = evaluate(&session.params, &corpus.sequences)?;
    Ok(TrainOutcome {
        rows,
        params: session.params,
        eval,
        frozen_checksums: None,
        checkpoint: ckpt,
    })
}

/// LoRA fine-tuning on top of a base checkpoint; only the configured groups
/// train and only they are written to the adapter checkpoint.
pub fn finetune(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let groups = cfg.groups()?;
    let base_dir = cfg
        .base
        .clone()
        .ok_or_else(|| Error::Config("fine-tuning needs a base checkpoint".into()))?;
    let (base, kind) = ModelParams::load(&base_dir)?;
    if kind != "base" {
        return Err(Error::Config(format!(
            "{} is a {kind} checkpoint, not a base",
            base_dir.display()
        )));
    }
    let corpus = load_corpus(cfg)?;
    if base.config.visual_dim != corpus.visual_dim() {
        return Err(Error::Config(
            "corpus tokenizer width differs from the base model".into(),
        ));
    }
    let trainable = trainable_predicate(&groups);
    let frozen = |n: &str| !trainable(n);
    let out = cfg.out_dir.join("adapter");
    let metrics = cfg.out_dir.join("metrics.csv");
    fs::create_dir_all(&cfg.out_dir)?;

    let mut session = if cfg.resume && out.join("state.json").is_file() {
        let (params, _) = load_model(&out)?;
        let state = read_state(&out)?;
        Session {
            params,
            adam: AdamState::load(out.join("optimizer"))?,
            step: state.step,
        }
    } else {
        let mut params = base.clone();
        if groups.contains(&ParamGroup::Lora) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4c6f_5241);
            let spec = LoraSpec {
                rank: cfg.lora_rank,
                alpha: cfg.lora_alpha,
            };
            attach_lora(&mut params, spec, &mut rng)?;
        }
        let adam = AdamState::new(
            AdamConfig::default(),
            params.iter().filter(|(n, _)| trainable(n)).map(|(n, t)| (n, t.shape())),
        );
        write_metrics_header(&metrics)?;
        Session { params, adam, step: 0 }
    };
    let before = base.checksum(|n| !trainable(n));
    let vit = corpus.tokenizer.clone();
    let mut rows = Vec::new();
    {
        let save = |s: &Session| save_session(&out, s, "adapter", Some(&base_dir), &trainable, &vit);
        let mut sink = metrics_sink(&metrics, &mut rows, save, cfg.checkpoint_every);
        run_steps(&mut session, &corpus.sequences, cfg, &trainable, &mut sink)?;
    }
    save_session(&out, &session, "adapter", Some(&base_dir), &trainable, &vit)?;
    let after = session.params.checksum(|n| frozen(n) && base.contains(n));
    let eval = evaluate(&session.params, &corpus.sequences)?;
    Ok(TrainOutcome {
        rows,
        params: session.params,
        eval,
        frozen_checksums: Some((before, after)),
        checkpoint: out,
    })
}
