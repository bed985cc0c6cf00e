//! Layers built on [`Graph`] ops. Each layer owns only [`ParamId`]s; values
//! live in the [`ParamStore`] passed to `forward`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architecture descriptor for a single layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Embedding { vocab: usize, dim: usize },
    Gru { input: usize, hidden: usize },
    Lstm { input: usize, hidden: usize },
    AdditiveAttention { hidden: usize, attention: usize },
    Dropout { rate: f64 },
    Softmax,
    LayerNorm { dim: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AutodiffError::Layer(msg));
        match *self {
            LayerSpec::Dense { input, output } if input == 0 || output == 0 => bad(format!("dense {input}->{output}")),
            LayerSpec::Embedding { vocab, dim } if vocab == 0 || dim == 0 => bad(format!("embedding {vocab}x{dim}")),
            LayerSpec::Gru { hidden, .. } | LayerSpec::Lstm { hidden, .. } if hidden == 0 => bad("recurrent hidden size 0".into()),
            LayerSpec::AdditiveAttention { hidden, attention } if hidden == 0 || attention == 0 => {
                bad(format!("attention {hidden}/{attention}"))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => bad(format!("dropout rate {rate}")),
            LayerSpec::LayerNorm { dim } if dim == 0 => bad("layer norm over 0 features".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        LayerSpec::Dense { input, output }.validate()?;
        let w = store.add_uniform(format!("{name}.w"), input, output, input, rng)?;
        let b = store.add_uniform(format!("{name}.b"), 1, output, input, rng)?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Result<Self> {
        LayerSpec::Embedding { vocab, dim }.validate()?;
        let table = store.add_uniform(format!("{name}.table"), vocab, dim, dim, rng)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, index: &[usize]) -> Result<Var> {
        let t = g.param(p, self.table);
        g.gather_rows(t, index)
    }
}

/// Stack of dense layers with a shared hidden activation and dropout.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub dropout: f64,
    /// Applied after the final layer.
    pub output_activation: Activation,
}

impl Mlp {
    /// `sizes` = [input, hidden..., output]; a single entry pair is one linear map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(AutodiffError::Layer(format!("mlp `{name}` needs at least input and output sizes")));
        }
        LayerSpec::Dropout { rate: dropout }.validate()?;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation, dropout, output_activation: Activation::Identity })
    }

    pub fn with_output_activation(mut self, a: Activation) -> Self {
        self.output_activation = a;
        self
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = self.activation.apply(g, x);
                x = g.dropout(x, self.dropout)?;
            }
        }
        Ok(self.output_activation.apply(g, x))
    }
}

/// GRU cell with PyTorch gate layout `[r | z | n]`:
/// `h' = (1 − z) ⊙ n + z ⊙ h`, `n = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        LayerSpec::Gru { input, hidden }.validate()?;
        let wx = store.add_uniform(format!("{name}.wx"), input, 3 * hidden, hidden, rng)?;
        let wh = store.add_uniform(format!("{name}.wh"), hidden, 3 * hidden, hidden, rng)?;
        let bx = store.add_uniform(format!("{name}.bx"), 1, 3 * hidden, hidden, rng)?;
        let bh = store.add_uniform(format!("{name}.bh"), 1, 3 * hidden, hidden, rng)?;
        Ok(Self { wx, wh, bx, bh, input, hidden })
    }

    pub fn step(&self, g: &mut Graph, p: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let (wx, wh, bx, bh) = (g.param(p, self.wx), g.param(p, self.wh), g.param(p, self.bx), g.param(p, self.bh));
        let gx = g.matmul(x, wx)?;
        let gx = g.add_row(gx, bx)?;
        let gh = g.matmul(h, wh)?;
        let gh = g.add_row(gh, bh)?;
        let (xr, xz, xn) = (g.slice_cols(gx, 0, hs)?, g.slice_cols(gx, hs, hs)?, g.slice_cols(gx, 2 * hs, hs)?);
        let (hr, hz, hn) = (g.slice_cols(gh, 0, hs)?, g.slice_cols(gh, hs, hs)?, g.slice_cols(gh, 2 * hs, hs)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// LSTM cell with gate layout `[i | f | g | o]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        LayerSpec::Lstm { input, hidden }.validate()?;
        let wx = store.add_uniform(format!("{name}.wx"), input, 4 * hidden, hidden, rng)?;
        let wh = store.add_uniform(format!("{name}.wh"), hidden, 4 * hidden, hidden, rng)?;
        let b = store.add_uniform(format!("{name}.b"), 1, 4 * hidden, hidden, rng)?;
        Ok(Self { wx, wh, b, input, hidden })
    }

    /// Returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, p: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let (wx, wh, b) = (g.param(p, self.wx), g.param(p, self.wh), g.param(p, self.b));
        let gx = g.matmul(x, wx)?;
        let gh = g.matmul(h, wh)?;
        let pre = g.add(gx, gh)?;
        let pre = g.add_row(pre, b)?;
        let i = g.slice_cols(pre, 0, hs)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(pre, hs, hs)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(pre, 2 * hs, hs)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(pre, 3 * hs, hs)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c2 = g.add(fc, ic)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RnnKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone)]
enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

/// Multi-layer recurrent encoder over right-aligned, masked sequences.
#[derive(Debug, Clone)]
pub struct Rnn {
    cells: Vec<Cell>,
    pub kind: RnnKind,
    pub hidden: usize,
    /// Dropout between stacked layers.
    pub dropout: f64,
}

impl Rnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: RnnKind,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(AutodiffError::Layer("rnn needs at least one layer".into()));
        }
        LayerSpec::Dropout { rate: dropout }.validate()?;
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            let n = format!("{name}.{l}");
            cells.push(match kind {
                RnnKind::Gru => Cell::Gru(GruCell::new(store, &n, inp, hidden, rng)?),
                RnnKind::Lstm => Cell::Lstm(LstmCell::new(store, &n, inp, hidden, rng)?),
            });
        }
        Ok(Self { cells, kind, hidden, dropout })
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Runs all layers; returns top-layer states per step.
    ///
    /// `masks[t]` is a `B×1` constant of 0/1: where 0, the state is carried
    /// through unchanged (left padding).
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, steps: &[Var], masks: &[Var]) -> Result<Vec<Var>> {
        if steps.len() != masks.len() {
            return Err(AutodiffError::Shape { op: "rnn", detail: format!("{} steps, {} masks", steps.len(), masks.len()) });
        }
        let batch = steps.first().map_or(0, |&s| g.shape(s).0);
        let mut inputs = steps.to_vec();
        for (l, cell) in self.cells.iter().enumerate() {
            if l > 0 {
                inputs = inputs.iter().map(|&x| g.dropout(x, self.dropout)).collect::<Result<_>>()?;
            }
            let mut h = g.constant(Tensor::zeros(batch, self.hidden));
            let mut c = h;
            let mut outs = Vec::with_capacity(inputs.len());
            for (&x, &m) in inputs.iter().zip(masks) {
                let (h_new, c_new) = match cell {
                    Cell::Gru(cell) => (cell.step(g, p, x, h)?, c),
                    Cell::Lstm(cell) => cell.step(g, p, x, h, c)?,
                };
                h = masked_update(g, h, h_new, m)?;
                if matches!(cell, Cell::Lstm(_)) {
                    c = masked_update(g, c, c_new, m)?;
                }
                outs.push(h);
            }
            inputs = outs;
        }
        Ok(inputs)
    }
}

fn masked_update(g: &mut Graph, old: Var, new: Var, mask: Var) -> Result<Var> {
    let d = g.sub(new, old)?;
    let d = g.mul_col(d, mask)?;
    g.add(old, d)
}

/// Additive (Bahdanau) attention: `e_t = vᵀ tanh(W_k h_t + W_q q + b)`,
/// softmax over valid steps.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub wk: ParamId,
    pub wq: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, attention: usize, rng: &mut R) -> Result<Self> {
        LayerSpec::AdditiveAttention { hidden, attention }.validate()?;
        Ok(Self {
            wk: store.add_uniform(format!("{name}.wk"), hidden, attention, hidden, rng)?,
            wq: store.add_uniform(format!("{name}.wq"), hidden, attention, hidden, rng)?,
            b: store.add_uniform(format!("{name}.b"), 1, attention, hidden, rng)?,
            v: store.add_uniform(format!("{name}.v"), attention, 1, attention, rng)?,
        })
    }

    /// Returns `(context B×H, weights B×T)`. `valid` is `B×T` of 0/1 and every
    /// row must contain at least one valid step.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, states: &[Var], query: Var, valid: &Tensor) -> Result<(Var, Var)> {
        let (wk, wq, b, v) = (g.param(p, self.wk), g.param(p, self.wq), g.param(p, self.b), g.param(p, self.v));
        let q = g.matmul(query, wq)?;
        let q = g.add_row(q, b)?;
        let mut scores = Vec::with_capacity(states.len());
        for &h in states {
            let k = g.matmul(h, wk)?;
            let e = g.add(k, q)?;
            let e = g.tanh(e);
            scores.push(g.matmul(e, v)?);
        }
        let s = g.concat_cols(&scores)?;
        if g.shape(s) != valid.shape() {
            return Err(AutodiffError::Shape { op: "attention", detail: format!("scores {:?} vs mask {:?}", g.shape(s), valid.shape()) });
        }
        let penalty = g.constant(valid.map(|m| if m > 0.0 { 0.0 } else { -1e9 }));
        let s = g.add(s, penalty)?;
        let a = g.softmax_rows(s);
        let mut ctx = None;
        for (t, &h) in states.iter().enumerate() {
            let at = g.slice_cols(a, t, 1)?;
            let term = g.mul_col(h, at)?;
            ctx = Some(match ctx {
                None => term,
                Some(c) => g.add(c, term)?,
            });
        }
        let ctx = ctx.ok_or_else(|| AutodiffError::Layer("attention over zero steps".into()))?;
        Ok((ctx, a))
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        LayerSpec::LayerNorm { dim }.validate()?;
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.eps);
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product self-attention over token blocks.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AutodiffError::Layer(format!("embedding size {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Dense::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Dense::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Dense::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `x` stacks `batch` blocks of `tokens` rows; attention stays within a block.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.group_matmul(qh, kh, batch, true)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.group_matmul(a, vh, batch, false)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, p, cat)
    }
}

/// A layer instantiated from a [`LayerSpec`].
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Embedding(Embedding),
    Gru(GruCell),
    Lstm(LstmCell),
    AdditiveAttention(AdditiveAttention),
    Dropout(f64),
    Softmax,
    LayerNorm(LayerNorm),
}

impl Layer {
    pub fn build<R: Rng + ?Sized>(spec: &LayerSpec, store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Dense { input, output } => Layer::Dense(Dense::new(store, name, input, output, rng)?),
            LayerSpec::Embedding { vocab, dim } => Layer::Embedding(Embedding::new(store, name, vocab, dim, rng)?),
            LayerSpec::Gru { input, hidden } => Layer::Gru(GruCell::new(store, name, input, hidden, rng)?),
            LayerSpec::Lstm { input, hidden } => Layer::Lstm(LstmCell::new(store, name, input, hidden, rng)?),
            LayerSpec::AdditiveAttention { hidden, attention } => {
                Layer::AdditiveAttention(AdditiveAttention::new(store, name, hidden, attention, rng)?)
            }
            LayerSpec::Dropout { rate } => Layer::Dropout(rate),
            LayerSpec::Softmax => Layer::Softmax,
            LayerSpec::LayerNorm { dim } => Layer::LayerNorm(LayerNorm::new(store, name, dim)?),
        })
    }

    /// Single-input application. Recurrent cells run one step from a zero
    /// state; embeddings and attention need their dedicated entry points.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(d) => d.forward(g, p, x),
            Layer::Dropout(rate) => g.dropout(x, *rate),
            Layer::Softmax => Ok(g.softmax_rows(x)),
            Layer::LayerNorm(l) => l.forward(g, p, x),
            Layer::Gru(c) => {
                let h = g.constant(Tensor::zeros(g.shape(x).0, c.hidden));
                c.step(g, p, x, h)
            }
            Layer::Lstm(c) => {
                let h = g.constant(Tensor::zeros(g.shape(x).0, c.hidden));
                Ok(c.step(g, p, x, h, h)?.0)
            }
            Layer::Embedding(_) | Layer::AdditiveAttention(_) => {
                Err(AutodiffError::Layer("layer needs index or sequence input".into()))
            }
        }
    }
}
