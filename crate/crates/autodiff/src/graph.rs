//! Tape of tensor operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    GroupMatMul { a: usize, b: usize, groups: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    LogNormalSf(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    SumCols(usize),
    GroupSumRows { a: usize, groups: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, index: Vec<usize> },
    LayerNormRows { a: usize, eps: f64 },
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass: values, the ops that produced them, and after
/// [`Graph::backward`], their gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::eval()
    }
}

fn shape_err(op: &'static str, node: usize, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail: format!("node {node}: {detail}") }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Φ(−z)`, the log survivor function of a standard normal.
pub fn log_normal_sf(z: f64) -> f64 {
    if z > 20.0 {
        // asymptotic Mills-ratio expansion; erfc underflows past ~38
        let z2 = z * z;
        let w = 1.0 / z2;
        let series = 1.0 + w * (-1.0 + w * (3.0 + w * (-15.0 + w * 105.0)));
        -0.5 * z2 - LN_SQRT_2PI - z.ln() + series.ln()
    } else {
        (0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)).ln()
    }
}

/// `φ(z) / Φ(−z)`, the inverse Mills ratio; derivative of `−ln Φ(−z)`.
pub fn inverse_mills(z: f64) -> f64 {
    let log_pdf = -0.5 * z * z - LN_SQRT_2PI;
    (log_pdf - log_normal_sf(z)).exp()
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    pub fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that records its gradient (used for input attributions).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter once per graph; repeated calls return the same node,
    /// so uses across time steps accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", self.len(), format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Per-group products: `a` stacks `groups` blocks of `m×k`; `b` stacks
    /// blocks of `k×n` (or `n×k` when `trans_b`, multiplying by the transpose).
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (ar, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(shape_err("group_matmul", self.len(), format!("{ar} and {br} rows over {groups} groups")));
        }
        let m = ar / groups;
        let (kb, n) = if trans_b { (bc, br / groups) } else { (br / groups, bc) };
        if kb != k {
            return Err(shape_err("group_matmul", self.len(), format!("inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bsz = br / groups * bc;
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * bsz..(g + 1) * bsz],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_vec(groups * m, n, out)?, Op::GroupMatMul { a: a.0, b: b.0, groups, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.len(), format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(r, c, data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("add_row", a, row, |x, y| x + y, Op::AddRow(a.0, row.0))
    }

    /// `a (n×m) ⊙ row (1×m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("mul_row", a, row, |x, y| x * y, Op::MulRow(a.0, row.0))
    }

    fn broadcast_row(&mut self, name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(shape_err(name, self.len(), format!("{n}x{m} with {:?}", self.shape(row))));
        }
        let rv = self.value(row).data();
        let data = self.value(a).data().chunks(m.max(1)).flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y))).collect::<Vec<_>>();
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(Tensor::from_vec(n, m, data)?, op, rg))
    }

    /// `a (n×m) + col (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast_col("add_col", a, col, |x, y| x + y, Op::AddCol(a.0, col.0))
    }

    /// `a (n×m) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.broadcast_col("mul_col", a, col, |x, y| x * y, Op::MulCol(a.0, col.0))
    }

    fn broadcast_col(&mut self, name: &'static str, a: Var, col: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(col) != (n, 1) {
            return Err(shape_err(name, self.len(), format!("{n}x{m} with {:?}", self.shape(col))));
        }
        let cv = self.value(col).data();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(f(av[i * m + j], cv[i]));
            }
        }
        let rg = self.rg(a.0) || self.rg(col.0);
        Ok(self.push(Tensor::from_vec(n, m, data)?, op, rg))
    }

    // ---- unary ops ----------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    /// Elementwise `ln Φ(−z)`.
    pub fn log_normal_sf(&mut self, a: Var) -> Var {
        self.unary(a, log_normal_sf, Op::LogNormalSf(a.0))
    }

    // ---- row-wise ops -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a.0);
        self.push(out, Op::SoftmaxRows(a.0), rg)
    }

    /// `ln Σ_j exp(a_ij)` per row, shape `n×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = self.value(a).data();
        let data = (0..n)
            .map(|r| {
                let row = &av[r * m..(r + 1) * m];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    mx
                } else {
                    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
                }
            })
            .collect();
        let rg = self.rg(a.0);
        self.push(Tensor::from_vec(n, 1, data).expect("shape"), Op::LogSumExpRows(a.0), rg)
    }

    /// Zero-mean, unit-variance normalization of each row.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let rg = self.rg(a.0);
        self.push(out, Op::LayerNormRows { a: a.0, eps }, rg)
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 };
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), rg)
    }

    /// Row sums, `n×m → n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let data = self.value(a).data().chunks(m.max(1)).map(|r| r.iter().sum()).take(n).collect::<Vec<f64>>();
        let data = if m == 0 { vec![0.0; n] } else { data };
        let rg = self.rg(a.0);
        self.push(Tensor::from_vec(n, 1, data).expect("shape"), Op::SumRows(a.0), rg)
    }

    /// Column sums, `n×m → 1×m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = self.value(a).data();
        let mut data = vec![0.0; m];
        for r in 0..n {
            for (c, d) in data.iter_mut().enumerate() {
                *d += av[r * m + c];
            }
        }
        let rg = self.rg(a.0);
        self.push(Tensor::from_vec(1, m, data).expect("shape"), Op::SumCols(a.0), rg)
    }

    /// Sums consecutive blocks of rows: `(G·L)×m → G×m`.
    pub fn group_sum_rows(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if groups == 0 || n % groups != 0 {
            return Err(shape_err("group_sum_rows", self.len(), format!("{n} rows over {groups} groups")));
        }
        let l = n / groups;
        let av = self.value(a).data();
        let mut data = vec![0.0; groups * m];
        for g in 0..groups {
            for r in 0..l {
                let src = &av[(g * l + r) * m..(g * l + r + 1) * m];
                for (d, s) in data[g * m..(g + 1) * m].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_vec(groups, m, data)?, Op::GroupSumRows { a: a.0, groups }, rg))
    }

    // ---- structural ops -----------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(shape_err("concat_cols", self.len(), "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(Tensor::from_vec(n, total, data)?, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.shape(p).1);
        if parts.iter().any(|&p| self.shape(p).1 != m) {
            return Err(shape_err("concat_rows", self.len(), "column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            n += self.shape(p).0;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(Tensor::from_vec(n, m, data)?, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if start + len > m {
            return Err(shape_err("slice_cols", self.len(), format!("[{start}, {}) of {m} columns", start + len)));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&av[r * m + start..r * m + start + len]);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_vec(n, len, data)?, Op::SliceCols { a: a.0, start }, rg))
    }

    /// Row lookup (`out[i] = a[index[i]]`); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", self.len(), format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::from_vec(index.len(), m, data)?, Op::GatherRows { a: a.0, index: index.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let av = self.value(a).data();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                data[c * n + r] = av[r * m + c];
            }
        }
        let rg = self.rg(a.0);
        self.push(Tensor::from_vec(m, n, data).expect("shape"), Op::Transpose(a.0), rg)
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(AutodiffError::Layer(format!("dropout rate {rate} must be < 1")));
        }
        let (n, m) = self.shape(a);
        let keep = 1.0 - rate;
        let mask = (0..n * m).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mask = self.constant(Tensor::from_vec(n, m, mask)?);
        self.mul(a, mask)
    }

    // ---- reverse sweep ---------------------------------------------------------

    /// Reverse-mode sweep from a `1×1` loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::NoForward(loss.0));
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: r, cols: c });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [f64], &Self)) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let (r, c) = self.nodes[target].value.shape();
        let mut buf = self.grads[target].take().unwrap_or_else(|| Tensor::zeros(r, c));
        f(buf.data_mut(), self);
        self.grads[target] = Some(buf);
    }

    fn acc_elementwise(&mut self, target: usize, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        self.acc(target, |buf, _| {
            for (k, (b, &gv)) in buf.iter_mut().zip(g.data()).enumerate() {
                *b += f(k, gv);
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.shape();
                let n = self.nodes[b].value.cols();
                self.acc(a, |buf, s| gemm(m, n, k, gd, false, s.nodes[b].value.data(), true, buf, 1.0));
                self.acc(b, |buf, s| gemm(k, m, n, s.nodes[a].value.data(), true, gd, false, buf, 1.0));
            }
            Op::GroupMatMul { a, b, groups, trans_b } => {
                let (ar, k) = self.nodes[a].value.shape();
                let (br, bc) = self.nodes[b].value.shape();
                let m = ar / groups;
                let n = g.cols();
                let bsz = br / groups * bc;
                self.acc(a, |buf, s| {
                    let bv = s.nodes[b].value.data();
                    for q in 0..groups {
                        // dA = dC · Bᵀ
                        gemm(m, n, k, &gd[q * m * n..(q + 1) * m * n], false, &bv[q * bsz..(q + 1) * bsz], !trans_b, &mut buf[q * m * k..(q + 1) * m * k], 1.0);
                    }
                });
                self.acc(b, |buf, s| {
                    let av = s.nodes[a].value.data();
                    for q in 0..groups {
                        let ag = &av[q * m * k..(q + 1) * m * k];
                        let dc = &gd[q * m * n..(q + 1) * m * n];
                        let out = &mut buf[q * bsz..(q + 1) * bsz];
                        if trans_b {
                            gemm(n, m, k, dc, true, ag, false, out, 1.0);
                        } else {
                            gemm(k, m, n, ag, true, dc, false, out, 1.0);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_elementwise(a, g, |_, v| v);
                self.acc_elementwise(b, g, |_, v| v);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(a, g, |_, v| v);
                self.acc_elementwise(b, g, |_, v| -v);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b].value.data().to_vec();
                let av = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * bv[k]);
                self.acc_elementwise(b, g, |k, v| v * av[k]);
            }
            Op::AddRow(a, row) => {
                let m = g.cols();
                self.acc_elementwise(a, g, |_, v| v);
                self.acc(row, |buf, _| {
                    for (k, v) in gd.iter().enumerate() {
                        buf[k % m] += v;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let m = g.cols();
                let rv = self.nodes[row].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * rv[k % m]);
                self.acc(row, |buf, s| {
                    let av = s.nodes[a].value.data();
                    for (k, v) in gd.iter().enumerate() {
                        buf[k % m] += v * av[k];
                    }
                });
            }
            Op::AddCol(a, col) => {
                let m = g.cols();
                self.acc_elementwise(a, g, |_, v| v);
                self.acc(col, |buf, _| {
                    for (k, v) in gd.iter().enumerate() {
                        buf[k / m] += v;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let m = g.cols();
                let cv = self.nodes[col].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * cv[k / m]);
                self.acc(col, |buf, s| {
                    let av = s.nodes[a].value.data();
                    for (k, v) in gd.iter().enumerate() {
                        buf[k / m] += v * av[k];
                    }
                });
            }
            Op::Scale(a, s) => self.acc_elementwise(a, g, |_, v| v * s),
            Op::AddScalar(a) => self.acc_elementwise(a, g, |_, v| v),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * y[k] * (1.0 - y[k]));
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * (1.0 - y[k] * y[k]));
            }
            Op::Relu(a) => {
                let x = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| if x[k] > 0.0 { v } else { 0.0 });
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * y[k]);
            }
            Op::Log(a) => {
                let x = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v / x[k]);
            }
            Op::Softplus(a) => {
                let x = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| v * sigmoid(x[k]));
            }
            Op::Square(a) => {
                let x = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| 2.0 * v * x[k]);
            }
            Op::LogNormalSf(a) => {
                let x = self.nodes[a].value.data().to_vec();
                self.acc_elementwise(a, g, |k, v| -v * inverse_mills(x[k]));
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = g.shape();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, |buf, _| {
                    for r in 0..n {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &gd[r * m..(r + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            buf[r * m + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let m = self.nodes[a].value.cols();
                self.acc(a, |buf, s| {
                    let x = s.nodes[a].value.data();
                    for (k, b) in buf.iter_mut().enumerate() {
                        let r = k / m;
                        if y[r].is_finite() {
                            *b += gd[r] * (x[k] - y[r]).exp();
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.acc(a, |buf, _| buf.iter_mut().for_each(|b| *b += s));
            }
            Op::MeanAll(a) => {
                let len = self.nodes[a].value.len().max(1) as f64;
                let s = gd[0] / len;
                self.acc(a, |buf, _| buf.iter_mut().for_each(|b| *b += s));
            }
            Op::SumRows(a) => {
                let m = self.nodes[a].value.cols();
                self.acc(a, |buf, _| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gd[k / m];
                    }
                });
            }
            Op::SumCols(a) => {
                let m = self.nodes[a].value.cols();
                self.acc(a, |buf, _| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gd[k % m];
                    }
                });
            }
            Op::GroupSumRows { a, groups } => {
                let (n, m) = self.nodes[a].value.shape();
                let l = n / groups;
                self.acc(a, |buf, _| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        let row = k / m;
                        *b += gd[(row / l) * m + k % m];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.shape();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    self.acc(p, |buf, _| {
                        for r in 0..n {
                            for c in 0..w {
                                buf[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(p, |buf, _| {
                        for (b, v) in buf.iter_mut().zip(&gd[offset..offset + len]) {
                            *b += v;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (n, len) = g.shape();
                let m = self.nodes[a].value.cols();
                self.acc(a, |buf, _| {
                    for r in 0..n {
                        for c in 0..len {
                            buf[r * m + start + c] += gd[r * len + c];
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let m = self.nodes[a].value.cols();
                self.acc(a, |buf, _| {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..m {
                            buf[src * m + c] += gd[r * m + c];
                        }
                    }
                });
            }
            Op::LayerNormRows { a, eps } => {
                let (n, m) = g.shape();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, |buf, s| {
                    let x = s.nodes[a].value.data();
                    for r in 0..n {
                        let xr = &x[r * m..(r + 1) * m];
                        let mean = xr.iter().sum::<f64>() / m as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &gd[r * m..(r + 1) * m];
                        let gmean = gr.iter().sum::<f64>() / m as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for c in 0..m {
                            buf[r * m + c] += inv * (gr[c] - gmean - yr[c] * gy);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = self.nodes[a].value.shape();
                self.acc(a, |buf, _| {
                    for r in 0..n {
                        for c in 0..m {
                            buf[r * m + c] += gd[c * n + r];
                        }
                    }
                });
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>> {
        if !self.backward_done {
            return Err(AutodiffError::NoForward(v.0));
        }
        Ok(self.grads.get(v.0).and_then(Option::as_ref))
    }

    /// Parameter gradients aligned with `store`; unbound parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Result<Gradients> {
        if !self.backward_done {
            return Err(AutodiffError::NoForward(self.nodes.len()));
        }
        let mut out = Gradients::zeros_like(store);
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grads[v.0].as_ref() {
                out.tensors[id.0] = g.clone();
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::eval();
        let w = g.leaf(Tensor::scalar(3.0));
        let y = g.square(w);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap().unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_parameter_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::eval();
        let w = g.param(&store, id);
        let c = g.constant(Tensor::scalar(5.0));
        let zero = g.scale(w, 0.0);
        let y = g.add(c, zero).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads(&store).unwrap().get(id).item(), 0.0);
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut g = Graph::eval();
        let w = g.leaf(Tensor::scalar(1.0));
        assert!(g.grad(w).is_err());
        let store = ParamStore::new();
        assert!(g.param_grads(&store).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::eval();
        let w = g.leaf(Tensor::zeros(2, 1));
        assert!(matches!(g.backward(w), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("node 2"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(2, 4));
        let s = g.softmax_rows(a);
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::eval();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap(); // w² → 2w
        let z = g.add(y, w1).unwrap(); // + w → 2w + 1
        g.backward(z).unwrap();
        assert_eq!(g.param_grads(&store).unwrap().get(id).item(), 5.0);
    }

    #[test]
    fn log_normal_sf_is_continuous_across_branch() {
        let a = log_normal_sf(20.0 - 1e-9);
        let b = log_normal_sf(20.0 + 1e-9);
        assert!((a - b).abs() < 1e-9 * a.abs(), "{a} {b}");
        assert!((log_normal_sf(0.0) - 0.5f64.ln()).abs() < 1e-14);
        assert!(log_normal_sf(40.0).is_finite());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::filled(3, 3, 1.0));
        let d = g.dropout(a, 0.6).unwrap();
        assert_eq!(a, d);
        let mut t = Graph::train(7);
        let a = t.constant(Tensor::filled(50, 50, 1.0));
        let d = t.dropout(a, 0.5).unwrap();
        let kept = t.value(d).data().iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 1000 && kept < 1500);
    }
}
