use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::kernel::Tensor;
use crate::mllm::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl LoraSpec {
    /// `α / r`
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank delta `(α/r)·B·A` with `A: [r × in]`, `B: [out × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub spec: LoraSpec,
}

impl LoraAdapter {
    /// `A` is Gaussian with variance `1/in`; `B` starts at zero so the
    /// adapted map equals the base map.
    pub fn new<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, spec: LoraSpec, rng: &mut R) -> Result<Self> {
        if spec.rank == 0 || spec.rank > out_dim.min(in_dim) {
            return Err(contract(format!(
                "LoRA rank {} must be in 1..={} for a {out_dim}×{in_dim} map",
                spec.rank,
                out_dim.min(in_dim)
            )));
        }
        Ok(Self {
            down: Tensor::randn(&[spec.rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            up: Tensor::zeros(&[out_dim, spec.rank]),
            spec,
        })
    }

    /// `(α/r)·B·A`, shaped like the base weight.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.up.matmul(&self.down)?.scale(self.spec.scale()))
    }
}

/// A frozen linear map `x·Wᵀ + b` with a trainable adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: LoraAdapter,
}

impl LoraLinear {
    pub fn wrap<R: Rng + ?Sized>(weight: Tensor, bias: Option<Tensor>, spec: LoraSpec, rng: &mut R) -> Result<Self> {
        let (out, inp) = weight.dims2()?;
        let adapter = LoraAdapter::new(out, inp, spec, rng)?;
        Ok(Self { weight, bias, adapter })
    }

    /// `x·Wᵀ + b + (α/r)·(x·Aᵀ)·Bᵀ` for `x: [n × in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let base = plain_forward(&self.weight, self.bias.as_ref(), x)?;
        let low = x.matmul(&self.adapter.down.transpose2()?)?;
        let delta = low
            .matmul(&self.adapter.up.transpose2()?)?
            .scale(self.adapter.spec.scale());
        base.add(&delta)
    }

    /// Folds the adapter into the base weight. Consumes the adapter so it
    /// cannot be merged twice.
    pub fn merge(self) -> Result<(Tensor, Option<Tensor>)> {
        Ok((self.weight.add(&self.adapter.delta()?)?, self.bias))
    }
}

/// `x·Wᵀ + b`
pub fn plain_forward(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(&weight.transpose2()?)?;
    if let Some(b) = bias {
        let c = b.numel();
        for row in y.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

/// Adds a fresh adapter to every block linear.
pub fn attach_lora<R: Rng + ?Sized>(params: &mut ModelParams, spec: LoraSpec, rng: &mut R) -> Result<()> {
    if params.lora.is_some() {
        return Err(contract("model already carries LoRA adapters"));
    }
    for prefix in params.config.block_linears() {
        let (out, inp) = params.get(&format!("{prefix}.weight"))?.dims2()?;
        let a = LoraAdapter::new(out, inp, spec, rng)?;
        params.insert(format!("{prefix}.lora_a"), a.down);
        params.insert(format!("{prefix}.lora_b"), a.up);
    }
    params.lora = Some(spec);
    Ok(())
}

/// Folds every adapter into its base weight and removes it.
pub fn merge_lora(params: &mut ModelParams) -> Result<()> {
    let spec = params
        .lora
        .ok_or_else(|| contract("model has no LoRA adapters to merge"))?;
    for prefix in params.config.block_linears() {
        let down = params
            .remove(&format!("{prefix}.lora_a"))
            .ok_or_else(|| contract(format!("{prefix} has no adapter")))?;
        let up = params
            .remove(&format!("{prefix}.lora_b"))
            .ok_or_else(|| contract(format!("{prefix} has no adapter")))?;
        let delta = LoraAdapter { down, up, spec }.delta()?;
        params.get_mut(&format!("{prefix}.weight"))?.add_assign(&delta);
    }
    params.lora = None;
    Ok(())
}
