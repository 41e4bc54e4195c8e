use std::collections::HashMap;

use super::latent::{from_tokens, to_tokens};
use super::{DetokParams, Stage};
use crate::error::{contract, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::vitsim::POOLED_COUNT;

/// Parameters placed on a tape; `trainable` ones are gradient leaves.
pub(super) struct Bound(HashMap<String, Var>);

impl Bound {
    pub(super) fn new(params: &DetokParams, t: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Self {
        Self(
            params
                .iter()
                .map(|(n, v)| (n.to_string(), t.leaf(v.clone(), trainable(n))))
                .collect(),
        )
    }

    pub(super) fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| contract(format!("no de-tokenizer parameter named {name}")))
    }

    pub(super) fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn linear(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = t.matmul_nt(x, b.var(&format!("{prefix}.weight"))?)?;
    t.add_row(y, b.var(&format!("{prefix}.bias"))?)
}

fn cross_attention(t: &mut Tape, b: &Bound, prefix: &str, x: Var, context: Var) -> Result<Var> {
    let q = linear(t, b, &format!("{prefix}.q"), x)?;
    let k = linear(t, b, &format!("{prefix}.k"), context)?;
    let v = linear(t, b, &format!("{prefix}.v"), context)?;
    let s = t.matmul_nt(q, k)?;
    let s = t.scale(s, 1.0 / (t.shape(q)[1] as f64).sqrt());
    let p = t.softmax(s, 1)?;
    let a = t.matmul(p, v)?;
    linear(t, b, &format!("{prefix}.o"), a)
}

/// Conditioning module: slots refined by cross-attention over the projected
/// embeddings, `[64 × d_v] → [64 × D]`.
pub(super) fn condition(t: &mut Tape, b: &Bound, layers: usize, features: Var) -> Result<Var> {
    let ctx = linear(t, b, "cond.in", features)?;
    let mut s = b.var("cond.slots")?;
    for l in 0..layers {
        let a = cross_attention(t, b, &format!("cond.layers.{l}"), s, ctx)?;
        s = t.add(s, a)?;
    }
    Ok(s)
}

/// Denoiser: `[hw × C_in]` tokens at step `step` → predicted clean latent
/// tokens `[hw × C]`.
pub(super) fn denoise(t: &mut Tape, b: &Bound, blocks: usize, x: Var, step: usize, cond: Var) -> Result<Var> {
    let h = linear(t, b, "den.in", x)?;
    let h = t.add(h, b.var("den.pos")?)?;
    let time = t.gather_rows(b.var("den.time")?, &[step])?;
    let d = t.shape(time)[1];
    let time = t.reshape(time, &[d])?;
    let mut h = t.add_row(h, time)?;
    for i in 0..blocks {
        let a = cross_attention(t, b, &format!("den.blocks.{i}.attn"), h, cond)?;
        h = t.add(h, a)?;
        let u = linear(t, b, &format!("den.blocks.{i}.mlp.up"), h)?;
        let u = t.gelu(u);
        let u = linear(t, b, &format!("den.blocks.{i}.mlp.down"), u)?;
        h = t.add(h, u)?;
    }
    linear(t, b, "den.out", h)
}

/// Denoiser input: the noisy latent tokens, with the condition tokens
/// appended as extra channels in stage 2.
pub(super) fn assemble(t: &mut Tape, params: &DetokParams, noisy: Var, cond_latent: Option<Var>) -> Result<Var> {
    match (params.stage(), cond_latent) {
        (Stage::Features, None) => Ok(noisy),
        (Stage::Conditioned, Some(c)) => t.concat_cols(&[noisy, c]),
        (Stage::Features, Some(_)) => Err(contract("a stage-1 de-tokenizer takes no condition latent")),
        (Stage::Conditioned, None) => Err(contract(
            "a stage-2 de-tokenizer needs a condition latent (zeros for none)",
        )),
    }
}

pub(super) fn check_features(params: &DetokParams, features: &Tensor) -> Result<()> {
    if features.shape() != [POOLED_COUNT, params.config.visual_dim] {
        return Err(contract(format!(
            "de-tokenizer features must be {POOLED_COUNT}×{}, got {:?}",
            params.config.visual_dim,
            features.shape()
        )));
    }
    Ok(())
}

/// One denoiser evaluation on `[C × h × w]` latents.
pub fn denoise_step(
    params: &DetokParams,
    noisy: &Tensor,
    step: usize,
    features: &Tensor,
    cond_latent: Option<&Tensor>,
) -> Result<Tensor> {
    check_features(params, features)?;
    let side = params.config.side();
    let expected = [params.config.latent_channels, side, side];
    if noisy.shape() != expected || cond_latent.is_some_and(|c| c.shape() != expected) {
        return Err(contract(format!("latents must be {expected:?}")));
    }
    if step >= params.schedule().steps() {
        return Err(contract(format!(
            "step {step} outside a {}-step schedule",
            params.schedule().steps()
        )));
    }
    let mut t = Tape::new();
    let b = Bound::new(params, &mut t, &|_| false);
    let f = t.constant(features.clone());
    let cond = condition(&mut t, &b, params.config.cond_layers, f)?;
    let x = t.constant(to_tokens(noisy)?);
    let c = match cond_latent {
        Some(c) => Some(t.constant(to_tokens(c)?)),
        None => None,
    };
    let input = assemble(&mut t, params, x, c)?;
    let out = denoise(&mut t, &b, params.config.blocks, input, step, cond)?;
    from_tokens(t.value(out), side, side)
}
