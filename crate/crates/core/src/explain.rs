//! Integrated-gradients attributions of sequence models and their
//! attention-weighted aggregation over time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use survbench_autodiff::{Graph, Tensor, Var};

use crate::deep::ddh::DynamicDeepHit;
use crate::deep::drsm::Drsm;
use crate::design::{Layout, ModelData};
use crate::error::{CoreError, Result};

/// A model whose scalar output per record is differentiable in its step inputs.
pub trait SequenceExplainable: Sync {
    /// Width of a step row.
    fn n_input(&self) -> usize;

    /// `B × 1` explained output for a 1-based cause.
    fn target(&self, g: &mut Graph, steps: &[Var], masks: &[Var], valid: &Tensor, cause: usize) -> Result<Var>;

    /// Attention of each record over its own steps; uniform by default.
    fn attention(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(idx.iter().map(|&i| {
            let t = data.seq[i].len();
            vec![1.0 / t as f64; t]
        }).collect())
    }
}

impl SequenceExplainable for DynamicDeepHit {
    fn n_input(&self) -> usize {
        self.n_input
    }

    /// Incidence `F̂_c(t_K)` at the last grid point.
    fn target(&self, g: &mut Graph, steps: &[Var], masks: &[Var], valid: &Tensor, cause: usize) -> Result<Var> {
        let out = self.forward(g, steps, masks, valid)?;
        let cif = self.cif_var(g, out.pmf, cause)?;
        Ok(g.slice_cols(cif, self.grid.len() - 1, 1)?)
    }

    fn attention(&self, data: &ModelData, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.attention_weights(data, idx)
    }
}

impl SequenceExplainable for Drsm {
    fn n_input(&self) -> usize {
        self.n_input
    }

    /// Latent incidence `1 − S_c(t_K)` of the cause mixture at the last grid point.
    fn target(&self, g: &mut Graph, steps: &[Var], masks: &[Var], _valid: &Tensor, cause: usize) -> Result<Var> {
        let z = self.encode(g, steps, masks)?;
        self.latent_incidence(g, z, cause, self.grid.last())
    }
}

/// Attributions of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// `T × p` attribution per step and input column.
    pub values: Vec<Vec<f64>>,
    pub baseline: Vec<Vec<f64>>,
    pub steps: usize,
    pub output: f64,
    pub baseline_output: f64,
    /// `|Σ values − (output − baseline_output)| / |output − baseline_output|`
    /// (absolute when the difference is zero).
    pub residual: f64,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// Right-aligned step tensors and masks for sequences of possibly different lengths.
fn pack(seqs: &[&[Vec<f64>]], p: usize) -> (Vec<Tensor>, Vec<Tensor>, Tensor) {
    let b = seqs.len();
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut steps = vec![Tensor::zeros(b, p); t_max];
    let mut masks = vec![Tensor::zeros(b, 1); t_max];
    let mut valid = Tensor::zeros(b, t_max);
    for (r, s) in seqs.iter().enumerate() {
        let off = t_max - s.len();
        for (k, row) in s.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                steps[off + k].set(r, j, v);
            }
            masks[off + k].set(r, 0, 1.0);
            valid.set(r, off + k, 1.0);
        }
    }
    (steps, masks, valid)
}

fn outputs<M: SequenceExplainable + ?Sized>(
    model: &M,
    steps: &[Tensor],
    masks: &[Tensor],
    valid: &Tensor,
    cause: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::eval();
    let s: Vec<Var> = steps.iter().map(|t| g.constant(t.clone())).collect();
    let m: Vec<Var> = masks.iter().map(|t| g.constant(t.clone())).collect();
    let y = model.target(&mut g, &s, &m, valid, cause)?;
    Ok(g.value(y).data().to_vec())
}

/// Integrated gradients of a batch of records along the straight path from
/// `baselines` to `inputs`, with the right Riemann sum over `α = 1/steps..1`.
pub fn integrated_gradients<M: SequenceExplainable + ?Sized>(
    model: &M,
    inputs: &[&[Vec<f64>]],
    baselines: &[&[Vec<f64>]],
    cause: usize,
    steps: usize,
) -> Result<Vec<Attribution>> {
    if steps == 0 {
        return Err(CoreError::Config("integrated gradients needs at least one step".into()));
    }
    if inputs.len() != baselines.len() {
        return Err(CoreError::Data(format!("{} inputs but {} baselines", inputs.len(), baselines.len())));
    }
    let p = model.n_input();
    for (r, (x, x0)) in inputs.iter().zip(baselines).enumerate() {
        if x.is_empty() {
            return Err(CoreError::Data(format!("record {r} has an empty sequence")));
        }
        let bad = x.len() != x0.len() || x.iter().chain(x0.iter()).any(|row| row.len() != p);
        if bad {
            return Err(CoreError::Data(format!("record {r}: input and baseline must both be T × {p}")));
        }
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let (x, masks, valid) = pack(inputs, p);
    let (x0, _, _) = pack(baselines, p);
    let diff: Vec<Tensor> = x
        .iter()
        .zip(&x0)
        .map(|(a, b)| Tensor::from_vec(a.rows(), p, a.data().iter().zip(b.data()).map(|(u, v)| u - v).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let mut acc: Vec<Tensor> = x.iter().map(|t| Tensor::zeros(t.rows(), p)).collect();
    for m in 1..=steps {
        let alpha = m as f64 / steps as f64;
        let mut g = Graph::eval();
        let leaves: Vec<Var> = x0
            .iter()
            .zip(&diff)
            .map(|(b, d)| {
                let v = b.data().iter().zip(d.data()).map(|(u, w)| u + alpha * w).collect();
                Tensor::from_vec(b.rows(), p, v).map(|t| g.leaf(t))
            })
            .collect::<std::result::Result<_, _>>()?;
        let mvars: Vec<Var> = masks.iter().map(|t| g.constant(t.clone())).collect();
        let y = model.target(&mut g, &leaves, &mvars, &valid, cause)?;
        let total = g.sum(y);
        g.backward(total)?;
        for (a, &l) in acc.iter_mut().zip(&leaves) {
            if let Some(gr) = g.grad(l)? {
                for (s, v) in a.data_mut().iter_mut().zip(gr.data()) {
                    *s += v;
                }
            }
        }
    }
    let y1 = outputs(model, &x, &masks, &valid, cause)?;
    let y0 = outputs(model, &x0, &masks, &valid, cause)?;
    let t_max = x.len();
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(r, seq)| {
            let off = t_max - seq.len();
            let values: Vec<Vec<f64>> = (off..t_max)
                .map(|t| (0..p).map(|j| diff[t].get(r, j) * acc[t].get(r, j) / steps as f64).collect())
                .collect();
            let sum: f64 = values.iter().flatten().sum();
            let delta = y1[r] - y0[r];
            let err = (sum - delta).abs();
            Attribution {
                values,
                baseline: baselines[r].to_vec(),
                steps,
                output: y1[r],
                baseline_output: y0[r],
                residual: if delta != 0.0 { err / delta.abs() } else { err },
            }
        })
        .collect())
}

/// Attributions of records `idx` against the all-zero baseline (the
/// standardized population mean), in parallel chunks.
pub fn explain_records<M: SequenceExplainable + ?Sized>(
    model: &M,
    data: &ModelData,
    idx: &[usize],
    cause: usize,
    steps: usize,
) -> Result<Vec<Attribution>> {
    let chunks: Vec<&[usize]> = idx.chunks(64).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let inputs: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| data.seq[i].as_slice()).collect();
            let zeros: Vec<Vec<Vec<f64>>> =
                chunk.iter().map(|&i| vec![vec![0.0; data.n_step()]; data.seq[i].len()]).collect();
            let baselines: Vec<&[Vec<f64>]> = zeros.iter().map(Vec::as_slice).collect();
            integrated_gradients(model, &inputs, &baselines, cause, steps)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Tolerance on the attention sum.
const SIMPLEX_TOL: f64 = 1e-6;

/// `score_f = Σ_records Σ_t a_t·|attr_{t,f}|`, normalized to sum one.
pub fn attention_weighted_importance(attributions: &[Attribution], attention: &[Vec<f64>]) -> Result<Vec<f64>> {
    if attributions.len() != attention.len() {
        return Err(CoreError::Data(format!(
            "{} attributions but {} attention vectors",
            attributions.len(),
            attention.len()
        )));
    }
    let p = attributions.first().and_then(|a| a.values.first()).map_or(0, Vec::len);
    let mut score = vec![0.0; p];
    for (r, (attr, a)) in attributions.iter().zip(attention).enumerate() {
        if a.len() != attr.values.len() {
            return Err(CoreError::Data(format!("record {r}: {} attention weights for {} steps", a.len(), attr.values.len())));
        }
        let sum: f64 = a.iter().sum();
        if a.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::Data(format!("record {r}: attention weights are not a probability vector")));
        }
        for (w, row) in a.iter().zip(&attr.values) {
            if row.len() != p {
                return Err(CoreError::Data(format!("record {r}: attribution rows must have {p} columns")));
            }
            for (s, v) in score.iter_mut().zip(row) {
                *s += w * v.abs();
            }
        }
    }
    let total: f64 = score.iter().sum();
    if total > 0.0 {
        score.iter_mut().for_each(|s| *s /= total);
    }
    Ok(score)
}

/// Folds step-column scores onto named inputs: the encoded columns of each
/// longitudinal feature are summed under the feature's name; the remaining
/// columns keep their own names. Sorted by descending score, then name.
pub fn group_by_feature(scores: &[f64], layout: &Layout) -> Vec<(String, f64)> {
    let names = layout.step_names();
    let q = layout.n_encoded();
    let mut out: Vec<(String, f64)> = layout.features.iter().map(|f| (f.name.clone(), 0.0)).collect();
    for (c, &s) in scores.iter().enumerate() {
        if c < q {
            out[layout.column_feature[c]].1 += s;
        } else {
            out.push((names[c].clone(), s));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = Σ_t w·x_t` on the last step only.
    struct Linear(Vec<f64>);

    impl SequenceExplainable for Linear {
        fn n_input(&self) -> usize {
            self.0.len()
        }

        fn target(&self, g: &mut Graph, steps: &[Var], _: &[Var], _: &Tensor, _: usize) -> Result<Var> {
            let w = g.constant(Tensor::from_vec(self.0.len(), 1, self.0.clone()).unwrap());
            let last = *steps.last().unwrap();
            Ok(g.matmul(last, w)?)
        }
    }

    #[test]
    fn linear_model_is_exact_for_any_steps() {
        let m = Linear(vec![2.0, -1.0, 0.5]);
        let x = vec![vec![9.0, 9.0, 9.0], vec![1.0, 3.0, -2.0]];
        let zero = vec![vec![0.0; 3]; 2];
        for steps in [1, 7] {
            let a = integrated_gradients(&m, &[x.as_slice()], &[zero.as_slice()], 1, steps).unwrap();
            assert_eq!(a[0].values[1], vec![2.0, -3.0, -1.0]);
            assert_eq!(a[0].values[0], vec![0.0; 3]);
            assert!(a[0].residual < 1e-12);
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let m = Linear(vec![1.0, 1.0]);
        let x = vec![vec![0.3, -0.4]];
        let a = integrated_gradients(&m, &[x.as_slice()], &[x.as_slice()], 1, 16).unwrap();
        assert!(a[0].values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = Linear(vec![1.0, 1.0]);
        let x = vec![vec![0.3, -0.4]];
        let b = vec![vec![0.0; 3]];
        assert!(integrated_gradients(&m, &[x.as_slice()], &[b.as_slice()], 1, 4).is_err());
    }

    fn attr(values: Vec<Vec<f64>>) -> Attribution {
        Attribution { baseline: vec![], steps: 1, output: 0.0, baseline_output: 0.0, residual: 0.0, values }
    }

    #[test]
    fn delta_attention_picks_one_step() {
        let a = attr(vec![vec![5.0, 5.0], vec![1.0, -3.0]]);
        let s = attention_weighted_importance(&[a], &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(s, vec![0.25, 0.75]);
    }

    #[test]
    fn uniform_attention_is_mean_absolute_attribution() {
        let a = attr(vec![vec![2.0, 0.0], vec![-2.0, 4.0]]);
        let s = attention_weighted_importance(&[a], &[vec![0.5, 0.5]]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn non_simplex_attention_is_rejected() {
        let a = attr(vec![vec![1.0], vec![1.0]]);
        assert!(attention_weighted_importance(&[a.clone()], &[vec![0.5, 0.6]]).is_err());
        assert!(attention_weighted_importance(&[a], &[vec![1.5, -0.5]]).is_err());
    }
}
