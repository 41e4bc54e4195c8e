//! Central finite differences, the independent oracle for every backward rule.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, and 0 when both vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// Builds `build(tape, inputs)` with every input as a parameter, runs
/// `backward`, and compares each input's gradient with finite differences.
/// Returns the worst relative error across inputs.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_on(Tape::new(), build, inputs, h)
}

fn check_on<F>(mut tape: Tape, build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let eval = |x: &Tensor| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| t.constant(if j == idx { x.clone() } else { orig.clone() }))
                .collect();
            let r = build(&mut t, &vs).expect("graph built once already");
            t.value(r).item()
        };
        let numeric = finite_diff_grad(eval, input, h);
        worst = worst.max(relative_error(analytic[idx].data(), numeric.data()));
    }
    Ok(worst)
}

/// Worst relative error of one op's backward rule over the suite's seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub rel_err: f64,
}

type Case = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces `y` to a scalar through a fixed, non-uniform weighting so every
/// element of the upstream gradient differs.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let w = Tensor::new(
        t.shape(y).to_vec(),
        (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect(),
    )?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Case)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        ("scale", vec![vec![3, 4]], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y)
        }),
        ("softmax", vec![vec![3, 4]], |t, v| {
            let a = t.softmax(v[0], 1)?;
            let b = t.softmax(v[0], 0)?;
            let y = t.add(a, b)?;
            project(t, y)
        }),
        ("masked_softmax", vec![vec![4, 4]], |t, v| {
            let mask: Arc<[bool]> = (0..16).map(|i| i % 4 <= i / 4).collect();
            let y = t.masked_softmax(v[0], mask)?;
            project(t, y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }),
        ("gelu", vec![vec![3, 4]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y)
        }),
        ("gather_rows", vec![vec![5, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            project(t, y)
        }),
        ("slice_rows", vec![vec![5, 3]], |t, v| {
            let y = t.slice_rows(v[0], 1, 3)?;
            project(t, y)
        }),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| {
            let y = t.concat_rows(&[v[1], v[0]])?;
            project(t, y)
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| {
            let y = t.slice_cols(v[0], 2, 2)?;
            project(t, y)
        }),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            project(t, y)
        }),
        ("transpose", vec![vec![3, 4]], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y)
        }),
        ("reshape", vec![vec![3, 4]], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            project(t, y)
        }),
        ("sum", vec![vec![3, 4]], |t, v| {
            let y = t.sum(v[0]);
            Ok(t.scale(y, 0.5))
        }),
        ("mean", vec![vec![3, 4]], |t, v| {
            let y = t.mean(v[0]);
            Ok(t.scale(y, 0.5))
        }),
        ("cross_entropy", vec![vec![4, 6]], |t, v| {
            t.cross_entropy(v[0], &[(0, 1), (2, 5), (3, 0)])
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], |t, v| t.mse(v[0], v[1])),
    ]
}

/// Gradient check of every tape op over `seeds` random input draws. With
/// `fault`, the named op's backward rule is distorted.
pub fn op_suite(seeds: u64, fault: Option<&'static str>) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (op, shapes, build) in cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let tape = fault.map_or_else(Tape::new, Tape::with_fault);
            worst = worst.max(check_on(tape, build, &inputs, 1e-5)?);
        }
        reports.push(OpReport { op, rel_err: worst });
    }
    Ok(reports)
}

/// Names accepted by [`op_suite`]'s fault hook.
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}
