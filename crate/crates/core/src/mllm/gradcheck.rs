use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss, loss_and_grad, ModelConfig, ModelParams};
use crate::error::Result;
use crate::kernel::relative_error;
use crate::seqpack::{collate, pack_all, Batch, DocItem, ImageRole, MapResolver, MultimodalDocument, Span};
use crate::synth::scene;
use crate::vitsim::{VisualTokenizer, VisualTokenizerConfig};

pub fn probe_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_dim: 16,
        max_len: 320,
        ..ModelConfig::default()
    }
}

/// Probe model with every tensor perturbed off its initial value, so no
/// gradient path is degenerate (zero biases, unit gains, zero LoRA maps).
pub fn probe_params(seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::init(probe_config(), seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in p.iter_mut() {
        let scale = if name.starts_with("lm_head") { 0.5 } else { 0.3 };
        for v in t.data_mut() {
            *v += scale * (r.random::<f64>() - 0.5);
        }
    }
    Ok(p)
}

/// Probe model plus a padded two-sequence batch (an input image, a boxed
/// caption and a target image; plain text) that reaches every parameter.
pub fn probe_setup(seed: u64) -> Result<(ModelParams, Batch)> {
    let input = scene(32, 40, seed)?;
    let output = scene(32, 32, seed + 1)?;
    let resolver = MapResolver(HashMap::from([
        ("in.ppm".to_string(), input.image),
        ("out.ppm".to_string(), output.image),
    ]));
    let image = |path: &str, role| DocItem::Image {
        path: path.into(),
        role,
    };
    let docs = [
        MultimodalDocument {
            items: vec![
                image("in.ppm", ImageRole::Input),
                DocItem::BoxedText {
                    spans: vec![
                        Span::Text { text: "a ".into() },
                        Span::Box {
                            bbox: input.disc.coords(),
                        },
                        Span::Text { text: "b".into() },
                    ],
                },
                image("out.ppm", ImageRole::Target),
                DocItem::Text { text: "z".into() },
            ],
        },
        MultimodalDocument {
            items: vec![DocItem::Text { text: "ok go".into() }],
        },
    ];
    let vit = VisualTokenizer::new(VisualTokenizerConfig::default())?;
    let seqs = pack_all(&docs, &vit, &resolver)?;
    let pad = seqs.iter().map(|s| s.total_len()).max().unwrap_or(1);
    Ok((probe_params(seed)?, collate(&seqs, pad)?))
}

/// Parameter group used for reporting: the leading name component, or
/// `blocks.<i>` for block tensors and `lora` for adapter tensors.
pub fn report_group(name: &str) -> String {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        return "lora".into();
    }
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or(name);
    match (first, parts.next()) {
        ("blocks", Some(i)) => format!("blocks.{i}"),
        _ => first.to_string(),
    }
}

/// Central-difference check of the batch loss against the tape gradient
/// on `samples` random coordinates of every tensor. Returns the relative
/// error per [`report_group`], each computed over the group's sampled
/// coordinates jointly.
pub fn loss_gradcheck<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    lambda: f64,
    h: f64,
    samples: usize,
    rng: &mut R,
) -> Result<IndexMap<String, f64>> {
    let (_, grads) = loss_and_grad(params, batch, lambda, &|_| true)?;
    let mut analytic: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut numeric: IndexMap<String, Vec<f64>> = IndexMap::new();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let n = params.get(name)?.numel();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        let group = report_group(name);
        for idx in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.get_mut(name)?.data_mut()[idx] += delta;
                Ok(loss(&p, batch, lambda)?.total)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            analytic.entry(group.clone()).or_default().push(grads[name].data()[idx]);
            numeric.entry(group.clone()).or_default().push(fd);
        }
    }
    Ok(analytic
        .into_iter()
        .map(|(g, a)| {
            let err = relative_error(&a, &numeric[&g]);
            (g, err)
        })
        .collect())
}
