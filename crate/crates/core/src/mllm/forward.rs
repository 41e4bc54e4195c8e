use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rayon::prelude::*;

use super::{ModelConfig, ModelParams};
use crate::error::{contract, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::seqpack::{Batch, PackedSequence, Segment, QUERY_SLOTS};

const LN_EPS: f64 = 1e-5;

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    lora_scale: f64,
}

impl Bound {
    /// Registers every parameter as a leaf; `trainable` decides which ones
    /// receive gradients.
    pub fn new(params: &ModelParams, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Self {
            vars,
            lora_scale: params.lora.map_or(0.0, |l| l.scale()),
        }
    }

    /// Binds already-registered leaves, one per parameter in
    /// [`ModelParams::names`] order.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        let names: Vec<&str> = params.names().collect();
        if names.len() != vars.len() {
            return Err(contract(format!("{} vars for {} parameters", vars.len(), names.len())));
        }
        Ok(Self {
            vars: names.into_iter().map(String::from).zip(vars.iter().copied()).collect(),
            lora_scale: params.lora.map_or(0.0, |l| l.scale()),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract(format!("parameter {name} not bound")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

fn linear(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"))?;
    let mut y = t.matmul_nt(x, w)?;
    if let Some(bias) = b.opt(&format!("{prefix}.bias")) {
        y = t.add_row(y, bias)?;
    }
    if let (Some(a), Some(up)) = (b.opt(&format!("{prefix}.lora_a")), b.opt(&format!("{prefix}.lora_b"))) {
        let down = t.matmul_nt(x, a)?;
        let delta = t.matmul_nt(down, up)?;
        let delta = t.scale(delta, b.lora_scale);
        y = t.add(y, delta)?;
    }
    Ok(y)
}

/// Single-head cross-attention of `queries` over `context`, including the
/// output projection.
fn cross_attention(t: &mut Tape, b: &Bound, prefix: &str, queries: Var, context: Var) -> Result<Var> {
    let q = linear(t, b, &format!("{prefix}.q"), queries)?;
    let k = linear(t, b, &format!("{prefix}.k"), context)?;
    let v = linear(t, b, &format!("{prefix}.v"), context)?;
    let d = t.shape(q)[1] as f64;
    let s = t.matmul_nt(q, k)?;
    let s = t.scale(s, 1.0 / d.sqrt());
    let p = t.softmax(s, 1)?;
    let a = t.matmul(p, v)?;
    linear(t, b, &format!("{prefix}.o"), a)
}

fn causal_mask(n: usize) -> Arc<[bool]> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn self_attention(t: &mut Tape, b: &Bound, cfg: &ModelConfig, prefix: &str, x: Var, mask: &Arc<[bool]>) -> Result<Var> {
    let q = linear(t, b, &format!("{prefix}.q"), x)?;
    let k = linear(t, b, &format!("{prefix}.k"), x)?;
    let v = linear(t, b, &format!("{prefix}.v"), x)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = t.slice_cols(q, h * dh, dh)?;
        let kh = t.slice_cols(k, h * dh, dh)?;
        let vh = t.slice_cols(v, h * dh, dh)?;
        let s = t.matmul_nt(qh, kh)?;
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let p = t.masked_softmax(s, mask.clone())?;
        heads.push(t.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)?
    };
    linear(t, b, &format!("{prefix}.o"), cat)
}

fn block(t: &mut Tape, b: &Bound, cfg: &ModelConfig, i: usize, x: Var, mask: &Arc<[bool]>) -> Result<Var> {
    let p = format!("blocks.{i}");
    let h = t.layer_norm(
        x,
        b.var(&format!("{p}.ln1.gain"))?,
        b.var(&format!("{p}.ln1.bias"))?,
        LN_EPS,
    )?;
    let a = self_attention(t, b, cfg, &format!("{p}.attn"), h, mask)?;
    let x = t.add(x, a)?;
    let h = t.layer_norm(
        x,
        b.var(&format!("{p}.ln2.gain"))?,
        b.var(&format!("{p}.ln2.bias"))?,
        LN_EPS,
    )?;
    let up = linear(t, b, &format!("{p}.mlp.up"), h)?;
    let act = t.gelu(up);
    let down = linear(t, b, &format!("{p}.mlp.down"), act)?;
    t.add(x, down)
}

/// `x_c·l + (1−x_c)·r + y_c·t + (1−y_c)·b` on the tape.
fn tile_position(t: &mut Tape, b: &Bound, x: f64, y: f64) -> Result<Var> {
    let w = crate::dynres::PositionEmbeddingParams::weights(x, y)?;
    let mut acc = None;
    for (side, wi) in ["left", "right", "top", "bottom"].into_iter().zip(w) {
        let s = t.scale(b.var(&format!("posemb.{side}"))?, wi);
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s)?,
        });
    }
    Ok(acc.expect("four terms"))
}

fn embed_inputs(t: &mut Tape, b: &Bound, cfg: &ModelConfig, seq: &PackedSequence) -> Result<Var> {
    let total = seq.total_len();
    if total == 0 {
        return Err(contract("empty sequence"));
    }
    if total > cfg.max_len {
        return Err(contract(format!(
            "sequence length {total} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let mut parts = Vec::new();
    for seg in &seq.segments {
        match seg {
            Segment::Tokens(ids) => {
                let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                parts.push(t.gather_rows(b.var("tok_emb")?, &ids)?);
            }
            Segment::Visual(v) => {
                if v.features.last_dim() != cfg.visual_dim {
                    return Err(contract(format!(
                        "visual features of width {} for a model with visual_dim {}",
                        v.features.last_dim(),
                        cfg.visual_dim
                    )));
                }
                let latents = b.var("adapter.latents")?;
                for (tile, &(x, y)) in v.centers.iter().enumerate() {
                    let feats = t.constant(v.tile_features(tile)?);
                    let pos = tile_position(t, b, x, y)?;
                    let ctx = t.add_row(feats, pos)?;
                    let att = cross_attention(t, b, "adapter", latents, ctx)?;
                    parts.push(t.add(latents, att)?);
                }
            }
            Segment::Query { slots } => {
                if *slots != QUERY_SLOTS {
                    return Err(contract(format!("query segment arity {slots}, expected {QUERY_SLOTS}")));
                }
                parts.push(b.var("queries")?);
            }
        }
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)?
    };
    let pos = t.slice_rows(b.var("pos_emb")?, 0, total)?;
    t.add(x, pos)
}

/// Final-norm hidden states `[T × D]`.
pub(super) fn hidden_states(t: &mut Tape, b: &Bound, cfg: &ModelConfig, seq: &PackedSequence) -> Result<Var> {
    let mut x = embed_inputs(t, b, cfg, seq)?;
    let mask = causal_mask(seq.total_len());
    for i in 0..cfg.n_layers {
        x = block(t, b, cfg, i, x, &mask)?;
    }
    t.layer_norm(x, b.var("ln_f.gain")?, b.var("ln_f.bias")?, LN_EPS)
}

/// Output head over one query segment's hidden states `[64 × D]`.
pub(super) fn regress(t: &mut Tape, b: &Bound, hq: Var) -> Result<Var> {
    let att = cross_attention(t, b, "head", b.var("head.latents")?, hq)?;
    let r = t.add(hq, att)?;
    linear(t, b, "head.proj", r)
}

pub(super) fn lm_logits(t: &mut Tape, b: &Bound, rows: Var) -> Result<Var> {
    t.matmul_nt(rows, b.var("lm_head.weight")?)
}

fn segment_starts(seq: &PackedSequence) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.segments.len());
    let mut pos = 0;
    for s in &seq.segments {
        out.push(pos);
        pos += s.len();
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
}

/// `total = ce + λ·mse` for one sequence. `ce` is the mean over LM target
/// positions, `mse` the mean over query segments; each is 0 when absent.
pub fn sequence_loss(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    lambda: f64,
) -> Result<LossVars> {
    let h = hidden_states(t, b, cfg, seq)?;
    let targets: Vec<(usize, usize)> = seq
        .lm_targets
        .iter()
        .enumerate()
        .filter_map(|(i, tgt)| tgt.map(|id| (i, id as usize)))
        .collect();
    let ce = if targets.is_empty() {
        t.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = targets.iter().map(|&(i, _)| i).collect();
        let sel = t.gather_rows(h, &rows)?;
        let logits = lm_logits(t, b, sel)?;
        let local: Vec<(usize, usize)> = targets.iter().enumerate().map(|(k, &(_, id))| (k, id)).collect();
        t.cross_entropy(logits, &local)?
    };
    let starts = segment_starts(seq);
    let mut mse = None;
    for r in &seq.regression_targets {
        let hq = t.slice_rows(h, starts[r.segment], QUERY_SLOTS)?;
        let pred = regress(t, b, hq)?;
        let target = t.constant(r.target.clone());
        let m = t.mse(pred, target)?;
        mse = Some(match mse {
            None => m,
            Some(acc) => t.add(acc, m)?,
        });
    }
    let mse = match mse {
        None => t.constant(Tensor::scalar(0.0)),
        Some(sum) => t.scale(sum, 1.0 / seq.regression_targets.len() as f64),
    };
    let weighted = t.scale(mse, lambda);
    let total = t.add(ce, weighted)?;
    Ok(LossVars { total, ce, mse })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
}

impl LossParts {
    fn read(t: &Tape, v: &LossVars) -> Self {
        Self {
            total: t.value(v.total).item(),
            ce: t.value(v.ce).item(),
            mse: t.value(v.mse).item(),
        }
    }

    fn mean(parts: &[LossParts]) -> Self {
        let n = parts.len().max(1) as f64;
        let mut acc = LossParts::default();
        for p in parts {
            acc.total += p.total;
            acc.ce += p.ce;
            acc.mse += p.mse;
        }
        LossParts {
            total: acc.total / n,
            ce: acc.ce / n,
            mse: acc.mse / n,
        }
    }
}

/// Batch loss: the mean of per-sequence losses.
pub fn loss(params: &ModelParams, batch: &Batch, lambda: f64) -> Result<LossParts> {
    let parts = batch
        .items
        .par_iter()
        .map(|seq| {
            let mut t = Tape::new();
            let b = Bound::new(params, &mut t, &|_| false);
            let v = sequence_loss(&mut t, &b, &params.config, seq, lambda)?;
            Ok(LossParts::read(&t, &v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossParts::mean(&parts))
}

/// Batch loss and its gradient with respect to every parameter selected by
/// `trainable`. Items run on separate tapes in parallel; gradients are
/// summed in item order so the result is deterministic.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    lambda: f64,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(LossParts, IndexMap<String, Tensor>)> {
    let n = batch.items.len();
    if n == 0 {
        return Err(contract("empty batch"));
    }
    let per_item = batch
        .items
        .par_iter()
        .map(|seq| {
            let mut t = Tape::new();
            let b = Bound::new(params, &mut t, trainable);
            let v = sequence_loss(&mut t, &b, &params.config, seq, lambda)?;
            let root = t.scale(v.total, 1.0 / n as f64);
            t.backward(root)?;
            let grads: Vec<Option<Tensor>> = params
                .names()
                .filter(|name| trainable(name))
                .map(|name| b.var(name).map(|var| t.grad(var).cloned()))
                .collect::<Result<_>>()?;
            Ok((LossParts::read(&t, &v), grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads: IndexMap<String, Tensor> = params
        .iter()
        .filter(|(name, _)| trainable(name))
        .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
        .collect();
    for (_, item) in &per_item {
        for (acc, g) in grads.values_mut().zip(item) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
    }
    let parts: Vec<LossParts> = per_item.iter().map(|(p, _)| *p).collect();
    Ok((LossParts::mean(&parts), grads))
}

/// Full-sequence outputs without gradient tracking.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T × V]`
    pub logits: Tensor,
    /// One `[64 × d_v]` block per query segment, in order.
    pub regressed: Vec<Tensor>,
}

pub fn forward_sequence(params: &ModelParams, seq: &PackedSequence) -> Result<ForwardOutput> {
    let mut t = Tape::new();
    let b = Bound::new(params, &mut t, &|_| false);
    let h = hidden_states(&mut t, &b, &params.config, seq)?;
    let logits = lm_logits(&mut t, &b, h)?;
    let starts = segment_starts(seq);
    let mut regressed = Vec::new();
    for q in seq.query_segments() {
        let hq = t.slice_rows(h, starts[q], QUERY_SLOTS)?;
        let r = regress(&mut t, &b, hq)?;
        regressed.push(t.value(r).clone());
    }
    Ok(ForwardOutput {
        logits: t.value(logits).clone(),
        regressed,
    })
}

/// Batch forward: one output per item.
pub fn forward_batch(params: &ModelParams, batch: &Batch) -> Result<Vec<ForwardOutput>> {
    batch.items.par_iter().map(|s| forward_sequence(params, s)).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Teacher-forced accuracy and regression quality over a set of sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub lm_correct: usize,
    pub lm_total: usize,
    /// Minimum and mean cosine between regressed and target rows.
    pub min_cosine: f64,
    pub mean_cosine: f64,
    pub query_rows: usize,
}

impl EvalMetrics {
    pub fn token_accuracy(&self) -> f64 {
        if self.lm_total == 0 {
            return 1.0;
        }
        self.lm_correct as f64 / self.lm_total as f64
    }
}

pub fn evaluate(params: &ModelParams, seqs: &[PackedSequence]) -> Result<EvalMetrics> {
    let outs = seqs
        .par_iter()
        .map(|s| forward_sequence(params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut m = EvalMetrics {
        min_cosine: f64::INFINITY,
        ..Default::default()
    };
    let mut cos_sum = 0.0;
    for (seq, out) in seqs.iter().zip(&outs) {
        for (i, tgt) in seq.lm_targets.iter().enumerate() {
            if let Some(id) = tgt {
                m.lm_total += 1;
                if argmax(out.logits.row(i)) == *id as usize {
                    m.lm_correct += 1;
                }
            }
        }
        let queries = seq.query_segments();
        for r in &seq.regression_targets {
            let k = queries
                .iter()
                .position(|&q| q == r.segment)
                .expect("validated sequence");
            for row in 0..QUERY_SLOTS {
                let c = cosine(out.regressed[k].row(row), r.target.row(row));
                m.min_cosine = m.min_cosine.min(c);
                cos_sum += c;
                m.query_rows += 1;
            }
        }
    }
    if m.query_rows == 0 {
        m.min_cosine = 1.0;
        m.mean_cosine = 1.0;
    } else {
        m.mean_cosine = cos_sum / m.query_rows as f64;
    }
    Ok(m)
}
