use indexmap::IndexMap;
use mmseq::kernel::{op_names, op_suite, Tensor};
use mmseq::mllm::gradcheck::{loss_gradcheck, probe_setup};
use mmseq::trainer::{attach_lora, LoraSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::emit;
use crate::error::{CliError, CliResult};

pub const OP_THRESHOLD: f64 = 1e-5;
pub const LOSS_THRESHOLD: f64 = 1e-4;
/// Coordinates sampled per tensor in the end-to-end check.
const SAMPLES: usize = 3;

/// Resolves the hidden fault flag to a known op name.
pub fn fault_op(name: &str) -> CliResult<&'static str> {
    op_names().into_iter().find(|&op| op == name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown op {name:?}; expected one of {}",
            op_names().join(", ")
        ))
    })
}

/// End-to-end loss check for one seed. Odd seeds also carry LoRA adapters
/// with non-zero up maps so both factors receive gradient.
fn end_to_end(seed: u64) -> CliResult<IndexMap<String, f64>> {
    let (mut params, batch) = probe_setup(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if seed % 2 == 1 {
        attach_lora(&mut params, LoraSpec { rank: 2, alpha: 4.0 }, &mut rng)?;
        let ups: Vec<(String, Vec<usize>)> = params
            .iter()
            .filter(|(n, _)| n.ends_with(".lora_b"))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in ups {
            params.insert(name, Tensor::randn(&shape, 0.3, &mut rng));
        }
    }
    Ok(loss_gradcheck(&params, &batch, 1.0, 1e-5, SAMPLES, &mut rng)?)
}

/// Worst relative error per kernel op and per parameter group over
/// `seeds` draws; exit 1 naming every entry over its threshold.
pub fn gradcheck(seeds: u64, fault: Option<&'static str>) -> CliResult {
    let ops = op_suite(seeds, fault)?;
    let mut groups: IndexMap<String, f64> = IndexMap::new();
    for seed in 0..seeds {
        for (g, e) in end_to_end(seed)? {
            let w = groups.entry(g).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let mut failed: Vec<String> = ops
        .iter()
        .filter(|r| !(r.rel_err < OP_THRESHOLD))
        .map(|r| r.op.to_string())
        .collect();
    failed.extend(
        groups
            .iter()
            .filter(|(_, &e)| !(e < LOSS_THRESHOLD))
            .map(|(g, _)| format!("loss:{g}")),
    );
    let worst_op = ops.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let worst_loss = groups.values().copied().fold(0.0, f64::max);
    emit(&json!({
        "seeds": seeds,
        "ops": ops.iter().map(|r| (r.op, r.rel_err)).collect::<IndexMap<_, _>>(),
        "end_to_end": groups,
        "worst_op": worst_op,
        "worst_end_to_end": worst_loss,
        "op_threshold": OP_THRESHOLD,
        "end_to_end_threshold": LOSS_THRESHOLD,
        "failed": failed,
        "pass": failed.is_empty(),
    }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}
