//! Central finite-difference checks against reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error `|a - n| / max(1, |a|, |n|)` over all entries.
    pub max_rel_error: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares gradients of a scalar function of several input tensors.
///
/// `f` must build the same computation for every call; it receives the graph
/// and the input leaves and returns the scalar output.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::eval();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| Ok(g.grad(v)?.cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))))
        .collect::<Result<_>>()?;

    let eval_at = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::eval();
        let leaves: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for k in 0..inputs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let up = eval_at(&xs)?;
            xs[i].data_mut()[k] = orig - h;
            let down = eval_at(&xs)?;
            xs[i].data_mut()[k] = orig;
            let n = (up - down) / (2.0 * h);
            num.data_mut()[k] = n;
            let a = analytic[i].data()[k];
            let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
            worst = worst.max(rel);
        }
        numeric.push(num);
    }
    Ok(GradCheck { max_rel_error: worst, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient() {
        let x = Tensor::from_vec(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-5, |g, v| {
            let s = g.tanh(v[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }
}
