//! Record-on-execute reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to compute vector-Jacobian products. Nodes are appended in execution order,
//! so a reverse scan from the root is a valid topological order.

use std::sync::Arc;

use super::tensor::{mm, mm_nt, mm_tn, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose backward rule for `op` returns a distorted gradient. Only
    /// for exercising the gradient checker.
    #[doc(hidden)]
    pub fn with_fault(op: &'static str) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(op),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| self.shape_err("add", a, b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| self.shape_err("sub", a, b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a vector along the last axis of `x` (leading-axes broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(row) != [c] {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(contract(format!(
                "mask length {} does not match tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let c = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (r, row) in v.data().chunks(c).enumerate() {
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&a, _)| a)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for k in 0..c {
                if m[k] {
                    o[k] = (row[k] - max).exp();
                    z += o[k];
                }
            }
            for val in o.iter_mut() {
                *val /= z;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax(x), rg))
    }

    /// Normalises each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gain) != [c] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [c] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let h = (row[k] - mean) * rs;
                xhat[r * c + k] = h;
                out[r * c + k] = h * g[k] + b[k];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Selects rows of a `[n×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(contract("gather of zero rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(contract(format!("row id {bad} out of range for table of {n} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(contract(format!(
                "column slice {start}..{} out of range for {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if rp != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` (row, class) under a
    /// row-wise softmax of `logits: [T×V]`. Rows not listed are ignored. With
    /// no targets the loss is 0 and contributes a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        for &(pos, id) in targets {
            if pos >= t || id >= v {
                return Err(contract(format!(
                    "target ({pos}, {id}) out of range for logits [{t}×{v}]"
                )));
            }
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut total = 0.0;
        for &(pos, id) in targets {
            let row = &src[pos * v..(pos + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&a| (a - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[id];
            probs.extend(row.iter().map(|&a| (a - lse).exp()));
        }
        let loss = if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.shape_err("mse", pred, target));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), rg))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d root / d leaf` into every reachable leaf that requires
    /// a gradient. Calling it twice without [`zero_grad`](Self::zero_grad)
    /// doubles the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            let faulty = self.fault.is_some_and(|f| f == self.nodes[i].op.name());
            for (input, mut contribution) in self.vjp(i, &g)? {
                if faulty {
                    contribution = contribution.scale(1.25);
                }
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                let mut r = Vec::new();
                if self.requires_grad(*a) {
                    let da = mm_nt(gd, self.value(*b).data(), m, n, k);
                    r.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(self.value(*a).data(), gd, m, k, n);
                    r.push((*b, Tensor::new(vec![k, n], db)?));
                }
                r
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.0;
                let mut r = Vec::new();
                if self.requires_grad(*a) {
                    let da = mm(gd, self.value(*b).data(), m, n, k);
                    r.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(gd, self.value(*a).data(), m, n, k);
                    r.push((*b, Tensor::new(vec![n, k], db)?));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                )?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::AddRow(x, row) => {
                let c = self.value(*row).numel();
                let mut dr = vec![0.0; c];
                for chunk in gd.chunks(c) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*row, Tensor::vector(dr))]
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| y[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(node.value.shape().to_vec(), dx)?)]
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &gd[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dx[r * c + k] = ys[k] * (gs[k] - dot);
                    }
                }
                vec![(*x, Tensor::new(node.value.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = gd.len() / c;
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    let go = &gd[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for k in 0..c {
                        let dh = go[k] * gv[k];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[k];
                        dg[k] += go[k] * xh[k];
                        db[k] += go[k];
                    }
                    mean_dh /= c as f64;
                    mean_dh_xh /= c as f64;
                    for k in 0..c {
                        let dh = go[k] * gv[k];
                        dx[r * c + k] = rstd[r] * (dh - mean_dh - xh[k] * mean_dh_xh);
                    }
                }
                vec![
                    (*x, Tensor::new(g.shape().to_vec(), dx)?),
                    (*gain, Tensor::vector(dg)),
                    (*bias, Tensor::vector(db)),
                ]
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&a, &b)| gelu_grad(a) * b).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), dx)?)]
            }
            Op::GatherRows { table, ids } => {
                let (n, d) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; n * d];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt[id * d + k] += gd[r * d + k];
                    }
                }
                vec![(*table, Tensor::new(vec![n, d], dt)?)]
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut r = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    r.push((p, Tensor::new(pv.shape().to_vec(), gd[off..off + n].to_vec())?));
                    off += n;
                }
                r
            }
            Op::SliceCols { x, start } => {
                let (rows, c) = self.value(*x).dims2()?;
                let w = g.last_dim();
                let mut dx = vec![0.0; rows * c];
                for i in 0..rows {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                vec![(*x, Tensor::new(vec![rows, c], dx)?)]
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut off = 0;
                let mut r = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    r.push((p, Tensor::new(vec![rows, w], dp)?));
                    off += w;
                }
                r
            }
            Op::Transpose(x) => vec![(*x, g.transpose2()?)],
            Op::Reshape(x) => vec![(*x, g.reshape(self.shape(*x))?)],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                vec![(*x, Tensor::full(self.shape(*x), gd[0] / n))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (t, v) = self.value(*logits).dims2()?;
                let mut dl = vec![0.0; t * v];
                if !targets.is_empty() {
                    let w = gd[0] / targets.len() as f64;
                    for (j, &(pos, id)) in targets.iter().enumerate() {
                        let p = &probs[j * v..(j + 1) * v];
                        let row = &mut dl[pos * v..(pos + 1) * v];
                        for k in 0..v {
                            row[k] += w * p[k];
                        }
                        row[id] -= w;
                    }
                }
                vec![(*logits, Tensor::new(vec![t, v], dl)?)]
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let w = 2.0 * gd[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| w * (a - b)).collect();
                let dt = dp.iter().map(|v| -v).collect();
                let shape = self.shape(*pred).to_vec();
                vec![
                    (*pred, Tensor::new(shape.clone(), dp)?),
                    (*target, Tensor::new(shape, dt)?),
                ]
            }
        };
        Ok(out)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
