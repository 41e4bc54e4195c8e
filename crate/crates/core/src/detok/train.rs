use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latent::{from_tokens, to_tokens};
use super::net::{assemble, check_features, condition, denoise, Bound};
use super::{DetokParams, LatentCodec, Stage};
use crate::dynres::Image;
use crate::error::{contract, Result};
use crate::kernel::{Tape, Tensor};
use crate::trainer::{cosine_lr, AdamConfig, AdamState};

/// One training pair: a tile's embeddings, the tile itself, and for stage 2
/// an optional condition image (absent means an all-zero condition).
#[derive(Clone, Debug)]
pub struct DetokExample {
    pub features: Tensor,
    pub target: Image,
    pub condition: Option<Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetokTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for DetokTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 4,
            lr: 1e-2,
            lr_min: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetokMetric {
    pub step: usize,
    pub loss: f64,
    pub stage: u8,
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[DetokMetric]) -> Result<()> {
    let mut out = String::from("step,loss,stage\n");
    for r in rows {
        writeln!(out, "{},{:?},{}", r.step, r.loss, r.stage).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Latent tokens of the target and of the stage-2 condition.
struct Prepared {
    features: Tensor,
    target: Tensor,
    condition: Option<Tensor>,
}

fn condition_tokens(params: &DetokParams, condition: Option<&Image>) -> Result<Option<Tensor>> {
    let codec = params.codec();
    match (params.stage(), condition) {
        (Stage::Features, None) => Ok(None),
        (Stage::Features, Some(_)) => Err(contract("a stage-1 de-tokenizer takes no condition image")),
        (Stage::Conditioned, Some(img)) => Ok(Some(to_tokens(&codec.encode(img)?)?)),
        (Stage::Conditioned, None) => {
            let n = params.config.side() * params.config.side();
            Ok(Some(Tensor::zeros(&[n, codec.latent_channels()])))
        }
    }
}

fn prepare(params: &DetokParams, data: &[DetokExample]) -> Result<Vec<Prepared>> {
    data.iter()
        .map(|ex| {
            check_features(params, &ex.features)?;
            Ok(Prepared {
                features: ex.features.clone(),
                target: to_tokens(&params.codec().encode(&ex.target)?)?,
                condition: condition_tokens(params, ex.condition.as_ref())?,
            })
        })
        .collect()
}

/// Denoising regression: sample a step and noise per example, predict the
/// clean latent, minimise the batch-mean MSE. Only the stage's trainable
/// parameters move.
pub fn train_detok(
    params: &mut DetokParams,
    data: &[DetokExample],
    cfg: &DetokTrainConfig,
) -> Result<Vec<DetokMetric>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(contract(
            "de-tokenizer training needs examples and a positive batch size",
        ));
    }
    let prepared = prepare(params, data)?;
    let mut adam = AdamState::new(
        AdamConfig::default(),
        params
            .iter()
            .filter(|(n, _)| params.trains(n))
            .map(|(n, t)| (n, t.shape())),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chunks: Vec<&[Prepared]> = prepared.chunks(cfg.batch_size).collect();
    let steps = params.schedule().steps();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = chunks[step % chunks.len()];
        let mut t = Tape::new();
        let b = Bound::new(params, &mut t, &|n| params.trains(n));
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let level = rng.random_range(0..steps);
            let eps = Tensor::randn(ex.target.shape(), 1.0, &mut rng);
            let f = t.constant(ex.features.clone());
            let cond = condition(&mut t, &b, params.config.cond_layers, f)?;
            let x = t.constant(params.schedule().noisy(&ex.target, &eps, level)?);
            let c = ex.condition.as_ref().map(|c| t.constant(c.clone()));
            let input = assemble(&mut t, params, x, c)?;
            let pred = denoise(&mut t, &b, params.config.blocks, input, level, cond)?;
            let target = t.constant(ex.target.clone());
            losses.push(t.mse(pred, target)?);
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = t.add(loss, l)?;
        }
        let loss = t.scale(loss, 1.0 / losses.len() as f64);
        t.backward(loss)?;
        let mut grads = IndexMap::new();
        for (name, v) in b.vars() {
            if params.trains(name) {
                let g = t.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape(v)));
                grads.insert(name.to_string(), g);
            }
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        adam.update(params.tensors_mut(), &grads, lr)?;
        rows.push(DetokMetric {
            step,
            loss: t.value(loss).item(),
            stage: params.stage().number(),
        });
    }
    Ok(rows)
}

/// Stage-2 weights from stage-1 weights: the input projection gains `C`
/// zero columns for the condition latent, everything else is copied.
pub fn surgery(stage1: &DetokParams) -> Result<DetokParams> {
    if stage1.stage() != Stage::Features {
        return Err(contract("weight surgery starts from a stage-1 de-tokenizer"));
    }
    let mut out = stage1.clone();
    let w = stage1.get("den.in.weight")?;
    let (d, c) = w.dims2()?;
    let mut data = Vec::with_capacity(d * 2 * c);
    for r in 0..d {
        data.extend_from_slice(w.row(r));
        data.extend(std::iter::repeat_n(0.0, c));
    }
    out.tensors_mut()
        .insert("den.in.weight".into(), Tensor::new(vec![d, 2 * c], data)?);
    out.stage = Stage::Conditioned;
    Ok(out)
}

/// Deterministic reverse process from seeded Gaussian noise. At each step
/// the predicted clean latent and the implied noise are re-noised to the
/// next lower level; the last step returns the prediction.
pub fn decode_latent(params: &DetokParams, features: &Tensor, cond_image: Option<&Image>, seed: u64) -> Result<Tensor> {
    check_features(params, features)?;
    let cond_tokens = condition_tokens(params, cond_image)?;
    let side = params.config.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[side * side, params.codec().latent_channels()], 1.0, &mut rng);
    let mut t = Tape::new();
    let b = Bound::new(params, &mut t, &|_| false);
    let f = t.constant(features.clone());
    let cond = condition(&mut t, &b, params.config.cond_layers, f)?;
    let schedule = params.schedule();
    for step in (0..schedule.steps()).rev() {
        let xv = t.constant(x.clone());
        let c = cond_tokens.as_ref().map(|c| t.constant(c.clone()));
        let input = assemble(&mut t, params, xv, c)?;
        let pred = denoise(&mut t, &b, params.config.blocks, input, step, cond)?;
        let x0 = t.value(pred).clone();
        if step == 0 {
            return from_tokens(&x0, side, side);
        }
        let a = schedule.level(step);
        let eps = x.sub(&x0.scale((1.0 - a).sqrt()))?.scale(1.0 / a.sqrt());
        let next = schedule.level(step - 1);
        x = x0.scale((1.0 - next).sqrt()).add(&eps.scale(next.sqrt()))?;
    }
    unreachable!("schedules have at least one step")
}

pub fn decode(params: &DetokParams, features: &Tensor, cond_image: Option<&Image>, seed: u64) -> Result<Image> {
    params
        .codec()
        .decode(&decode_latent(params, features, cond_image, seed)?)
}

/// Mean pixel MSE of decoding every example (stage 2 uses each example's
/// condition).
pub fn reconstruction_mse(params: &DetokParams, data: &[DetokExample], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("reconstruction error over an empty dataset"));
    }
    let mut total = 0.0;
    for ex in data {
        let img = decode(params, &ex.features, ex.condition.as_ref(), seed)?;
        total += img.mse(&ex.target)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean pixel MSE of the constant predictor that synthesises the dataset's
/// mean latent.
pub fn mean_latent_baseline(codec: &LatentCodec, data: &[DetokExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(contract("baseline over an empty dataset"));
    }
    let latents: Vec<Tensor> = data.iter().map(|ex| codec.encode(&ex.target)).collect::<Result<_>>()?;
    let mut mean = Tensor::zeros(latents[0].shape());
    for l in &latents {
        mean.add_assign(l);
    }
    let mean = mean.scale(1.0 / latents.len() as f64);
    let img = codec.decode(&mean)?;
    let mut total = 0.0;
    for ex in data {
        total += img.mse(&ex.target)?;
    }
    Ok(total / data.len() as f64)
}
