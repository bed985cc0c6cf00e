//! Finite-difference checks for every differentiable op and recurrent cell.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use survbench_autodiff::{
    check_gradients, AdditiveAttention, Graph, GruCell, LayerNorm, LstmCell, MultiHeadSelfAttention, ParamStore,
    Result, Rnn, RnnKind, Tensor, Var,
};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

/// Reduces any output to a scalar with fixed, non-uniform weights so that
/// gradients of shift-invariant ops do not vanish.
fn project(g: &mut Graph, v: Var) -> Result<Var> {
    let (r, c) = g.shape(v);
    let w = (0..r * c).map(|i| (i as f64 * 1.3 + 0.7).sin()).collect();
    let w = g.constant(Tensor::from_vec(r, c, w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn tensor(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

fn assert_close(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> std::result::Result<(), TestCaseError> {
    let r = check_gradients(inputs, H, f).unwrap();
    prop_assert!(r.max_rel_error < TOL, "relative error {}", r.max_rel_error);
    Ok(())
}

macro_rules! unary {
    ($name:ident, $lo:expr, $hi:expr, |$g:ident, $x:ident| $body:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn $name(x in tensor(3, 4, $lo, $hi)) {
                assert_close(&[x], |$g, v| { let $x = v[0]; let y = $body; project($g, y) })?;
            }
        }
    };
}

unary!(sigmoid, -4.0, 4.0, |g, x| g.sigmoid(x));
unary!(tanh, -3.0, 3.0, |g, x| g.tanh(x));
unary!(exp, -2.0, 2.0, |g, x| g.exp(x));
unary!(ln, 0.2, 5.0, |g, x| g.ln(x));
unary!(softplus, -6.0, 6.0, |g, x| g.softplus(x));
unary!(square, -3.0, 3.0, |g, x| g.square(x));
unary!(neg, -3.0, 3.0, |g, x| g.neg(x));
unary!(scale, -3.0, 3.0, |g, x| g.scale(x, -2.5));
unary!(add_scalar, -3.0, 3.0, |g, x| g.add_scalar(x, 0.7));
unary!(log_normal_sf, -5.0, 25.0, |g, x| g.log_normal_sf(x));
unary!(softmax_rows, -3.0, 3.0, |g, x| g.softmax_rows(x));
unary!(logsumexp_rows, -3.0, 3.0, |g, x| g.logsumexp_rows(x));
unary!(layer_norm_rows, -3.0, 3.0, |g, x| g.layer_norm_rows(x, 1e-5));
unary!(sum_rows, -3.0, 3.0, |g, x| g.sum_rows(x));
unary!(sum_cols, -3.0, 3.0, |g, x| g.sum_cols(x));
unary!(transpose, -3.0, 3.0, |g, x| g.transpose(x));
unary!(mean, -3.0, 3.0, |g, x| g.mean(x));
unary!(slice_cols, -3.0, 3.0, |g, x| g.slice_cols(x, 1, 2).unwrap());
unary!(gather_rows, -3.0, 3.0, |g, x| g.gather_rows(x, &[2, 0, 2, 1]).unwrap());
unary!(group_sum_rows, -3.0, 3.0, |g, x| g.group_sum_rows(x, 3).unwrap());

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relu(x in tensor(3, 4, -3.0, 3.0)) {
        // keep away from the kink
        let x = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        assert_close(&[x], |g, v| { let y = g.relu(v[0]); project(g, y) })?;
    }

    #[test]
    fn matmul(a in tensor(3, 4, -2.0, 2.0), b in tensor(4, 2, -2.0, 2.0)) {
        assert_close(&[a, b], |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y) })?;
    }

    #[test]
    fn group_matmul(a in tensor(6, 3, -2.0, 2.0), b in tensor(6, 3, -2.0, 2.0), trans in any::<bool>()) {
        // with trans: 2 groups of (3x3)·(3x3)^T; without: (3x3)·(3x3)
        assert_close(&[a, b], |g, v| { let y = g.group_matmul(v[0], v[1], 2, trans)?; project(g, y) })?;
    }

    #[test]
    fn elementwise_binary(a in tensor(3, 4, -2.0, 2.0), b in tensor(3, 4, -2.0, 2.0)) {
        assert_close(&[a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1])?; project(g, y) })?;
        assert_close(&[a.clone(), b.clone()], |g, v| { let y = g.sub(v[0], v[1])?; project(g, y) })?;
        assert_close(&[a, b], |g, v| { let y = g.mul(v[0], v[1])?; project(g, y) })?;
    }

    #[test]
    fn broadcasts(a in tensor(3, 4, -2.0, 2.0), row in tensor(1, 4, -2.0, 2.0), col in tensor(3, 1, -2.0, 2.0)) {
        assert_close(&[a.clone(), row.clone()], |g, v| { let y = g.add_row(v[0], v[1])?; project(g, y) })?;
        assert_close(&[a.clone(), row], |g, v| { let y = g.mul_row(v[0], v[1])?; project(g, y) })?;
        assert_close(&[a.clone(), col.clone()], |g, v| { let y = g.add_col(v[0], v[1])?; project(g, y) })?;
        assert_close(&[a, col], |g, v| { let y = g.mul_col(v[0], v[1])?; project(g, y) })?;
    }

    #[test]
    fn concatenation(a in tensor(3, 2, -2.0, 2.0), b in tensor(3, 3, -2.0, 2.0), c in tensor(2, 2, -2.0, 2.0)) {
        assert_close(&[a.clone(), b], |g, v| { let y = g.concat_cols(&[v[0], v[1], v[0]])?; project(g, y) })?;
        assert_close(&[a, c], |g, v| { let y = g.concat_rows(&[v[0], v[1]])?; project(g, y) })?;
    }

    #[test]
    fn composite_loss(x in tensor(4, 3, -2.0, 2.0)) {
        // cross-entropy style: -mean(log softmax) on a fixed label pattern
        assert_close(&[x], |g, v| {
            let s = g.softmax_rows(v[0]);
            let l = g.ln(s);
            let picked = g.gather_rows(l, &[0, 1, 2, 3])?;
            let y = g.mean(picked);
            Ok(g.neg(y))
        })?;
    }
}

fn store_params(store: &ParamStore) -> Vec<Tensor> {
    store.tensors().to_vec()
}

/// Checks parameter gradients of a model closure by perturbing the store.
fn check_param_grads(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> f64 {
    let mut g = Graph::eval();
    let out = f(&mut g, store).unwrap();
    g.backward(out).unwrap();
    let grads = g.param_grads(store).unwrap();
    let mut worst: f64 = 0.0;
    let base = store_params(store);
    let mut work = store.clone();
    for (i, t) in base.iter().enumerate() {
        for k in 0..t.len() {
            let mut vals = base.clone();
            vals[i].data_mut()[k] += H;
            work.set_all(vals.clone()).unwrap();
            let mut gp = Graph::eval();
            let o = f(&mut gp, &work).unwrap();
            let up = gp.value(o).item();
            vals[i].data_mut()[k] -= 2.0 * H;
            work.set_all(vals).unwrap();
            let mut gm = Graph::eval();
            let o = f(&mut gm, &work).unwrap();
            let down = gm.value(o).item();
            let num = (up - down) / (2.0 * H);
            let a = grads.tensors[i].data()[k];
            worst = worst.max((a - num).abs() / 1f64.max(a.abs()).max(num.abs()));
        }
    }
    worst
}

fn seq(batch: usize, steps: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    (0..steps)
        .map(|_| Tensor::from_vec(batch, dim, (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

#[test]
fn gru_and_lstm_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
    let lstm = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
    let xs = seq(2, 3, 3, 5);
    let err = check_param_grads(&store, |g, p| {
        let mut h = g.constant(Tensor::zeros(2, 4));
        let mut hl = g.constant(Tensor::zeros(2, 4));
        let mut c = g.constant(Tensor::zeros(2, 4));
        for x in &xs {
            let xv = g.constant(x.clone());
            h = gru.step(g, p, xv, h)?;
            let (a, b) = lstm.step(g, p, xv, hl, c)?;
            hl = a;
            c = b;
        }
        let both = g.concat_cols(&[h, hl])?;
        project(g, both)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn masked_rnn_with_attention() {
    for kind in [RnnKind::Gru, RnnKind::Lstm] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let rnn = Rnn::new(&mut store, "rnn", kind, 3, 4, 2, 0.0, &mut rng).unwrap();
        let att = AdditiveAttention::new(&mut store, "att", 4, 5, &mut rng).unwrap();
        let xs = seq(2, 4, 3, 7);
        // first subject has only its last two steps observed
        let valid = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        let err = check_param_grads(&store, |g, p| {
            let steps: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let masks: Vec<Var> = (0..4)
                .map(|t| g.constant(Tensor::from_vec(2, 1, vec![valid.get(0, t), valid.get(1, t)]).unwrap()))
                .collect();
            let hs = rnn.forward(g, p, &steps, &masks)?;
            let last = *hs.last().unwrap();
            let (ctx, _) = att.forward(g, p, &hs, last, &valid)?;
            project(g, ctx)
        });
        assert!(err < TOL, "{kind:?}: {err}");
    }
}

#[test]
fn transformer_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let mhsa = MultiHeadSelfAttention::new(&mut store, "mhsa", 4, 2, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let x = seq(6, 1, 4, 17).remove(0); // 2 subjects x 3 tokens
    let err = check_param_grads(&store, |g, p| {
        let xv = g.constant(x.clone());
        let a = mhsa.forward(g, p, xv, 2)?;
        let r = g.add(a, xv)?;
        let y = ln.forward(g, p, r)?;
        project(g, y)
    });
    assert!(err < TOL, "{err}");
}
