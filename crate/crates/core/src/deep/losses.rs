//! Discrete-time survival losses shared by the neural models.
//!
//! A joint pmf row has `C·K + 1` entries: column `c·K + k` is the
//! probability of cause `c + 1` in bin `k`, the last column is the mass
//! beyond the final grid point.

use survbench_autodiff::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;

/// Bin of an observed event, or `None` when it is censored or falls past the grid.
pub fn event_bin(grid: &TimeGrid, time: f64, cause: u8) -> Option<usize> {
    if cause == 0 {
        None
    } else {
        grid.bin(time)
    }
}

/// Selection matrix of the likelihood terms: an event selects its own cell,
/// a subject censored in bin `k*` selects the survival mass and every cell of later bins.
pub fn nll_targets(grid: &TimeGrid, time: &[f64], cause: &[u8], n_causes: usize) -> Tensor {
    let k = grid.len();
    let width = n_causes * k + 1;
    let mut m = Tensor::zeros(time.len(), width);
    for (i, (&t, &c)) in time.iter().zip(cause).enumerate() {
        match event_bin(grid, t, c) {
            Some(b) => m.set(i, (c as usize - 1) * k + b, 1.0),
            None => {
                m.set(i, width - 1, 1.0);
                if let Some(b) = grid.bin(t) {
                    for cc in 0..n_causes {
                        for kk in b + 1..k {
                            m.set(i, cc * k + kk, 1.0);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Mean negative log-likelihood of a batch of joint pmfs.
pub fn nll_discrete(g: &mut Graph, pmf: Var, targets: &Tensor) -> Result<Var> {
    let sel = g.constant(targets.clone());
    let picked = g.mul(pmf, sel)?;
    let lik = g.sum_rows(picked);
    let ll = g.ln(lik);
    let m = g.mean(ll);
    Ok(g.neg(m))
}

/// Negative log-likelihood of one subject's joint pmf.
pub fn nll_discrete_value(pmf: &[f64], grid: &TimeGrid, n_causes: usize, time: f64, cause: u8) -> Result<f64> {
    if pmf.len() != n_causes * grid.len() + 1 {
        return Err(CoreError::Data(format!("pmf has {} entries, expected {}", pmf.len(), n_causes * grid.len() + 1)));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > 1e-9 || pmf.iter().any(|&p| p < 0.0) {
        return Err(CoreError::Numeric(format!("pmf is not normalized (total {total})")));
    }
    let sel = nll_targets(grid, &[time], &[cause], n_causes);
    let lik: f64 = pmf.iter().zip(sel.row(0)).map(|(p, s)| p * s).sum();
    Ok(-lik.ln())
}

/// Cumulative-sum operator mapping a joint pmf to the incidence of one cause: `(C·K+1) × K`.
pub fn cumulative_operator(n_causes: usize, k: usize, cause: usize) -> Tensor {
    let mut m = Tensor::zeros(n_causes * k + 1, k);
    for j in 0..k {
        for kk in j..k {
            m.set((cause - 1) * k + j, kk, 1.0);
        }
    }
    m
}

/// Pairwise ranking penalty for one cause.
///
/// `cif` is `B × K` incidence of the cause. Acceptable pairs are `(i, j)`
/// with `i` having the cause in bin `k_i` and `T_j > T_i`; the loss is the
/// mean of `exp(−(F_i(t_{k_i}) − F_j(t_{k_i}))/σ)` over them, 0 if none.
pub fn ranking_loss(
    g: &mut Graph,
    cif: Var,
    grid: &TimeGrid,
    time: &[f64],
    cause: &[u8],
    target: u8,
    sigma: f64,
) -> Result<Var> {
    let b = time.len();
    let k = grid.len();
    let mut onehot = Tensor::zeros(b, k);
    let mut acceptable = Tensor::zeros(b, b);
    let mut pairs = 0usize;
    for i in 0..b {
        if cause[i] != target {
            continue;
        }
        let Some(bin) = event_bin(grid, time[i], cause[i]) else { continue };
        onehot.set(i, bin, 1.0);
        for j in 0..b {
            if j != i && time[j] > time[i] {
                acceptable.set(j, i, 1.0);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let e = g.constant(onehot);
    // at_event[j, i] = F_j(t_{k_i}); own[i] = F_i(t_{k_i}).
    let et = g.transpose(e);
    let at_event = g.matmul(cif, et)?;
    let own = g.mul(cif, e)?;
    let own = g.sum_rows(own);
    let own_row = g.transpose(own);
    let neg_own = g.neg(own_row);
    let diff = g.add_row(at_event, neg_own)?;
    let scaled = g.scale(diff, 1.0 / sigma);
    let kernel = g.exp(scaled);
    let a = g.constant(acceptable);
    let masked = g.mul(kernel, a)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / pairs as f64))
}

/// Masked one-step-ahead squared error: mean over observed next-step entries, 0 if there are none.
pub fn reconstruction_loss(g: &mut Graph, preds: &[Var], targets: &[Tensor], observed: &[Tensor]) -> Result<Var> {
    let count: f64 = observed.iter().map(Tensor::sum).sum();
    if count == 0.0 || preds.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut total = None;
    for ((&p, y), m) in preds.iter().zip(targets).zip(observed) {
        if m.sum() == 0.0 {
            continue;
        }
        let y = g.constant(y.clone());
        let d = g.sub(p, y)?;
        let d2 = g.square(d);
        let mc = g.constant(m.clone());
        let dm = g.mul(d2, mc)?;
        let s = g.sum(dm);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("at least one observed entry");
    Ok(g.scale(total, 1.0 / count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_reference_values() {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let uniform = [0.25, 0.25, 0.25, 0.25, 0.0];
        assert!((nll_discrete_value(&uniform, &grid, 2, 0.5, 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(nll_discrete_value(&sure, &grid, 2, 1.0, 1).unwrap(), 0.0);
        let tail = [0.1, 0.1, 0.2, 0.1, 0.5];
        assert!((nll_discrete_value(&tail, &grid, 2, 5.0, 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(nll_discrete_value(&[0.5, 0.5, 0.5, 0.0, 0.0], &grid, 2, 1.0, 1).is_err());
    }

    #[test]
    fn ranking_plug_in_values() {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let mut g = Graph::eval();
        let cif = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let l = ranking_loss(&mut g, cif, &grid, &[1.0, 2.0], &[1, 0], 1, 0.1).unwrap();
        assert!((g.value(l).item() - (-10f64).exp()).abs() < 1e-15);
        let same = g.constant(Tensor::from_rows(&[vec![0.3, 0.6], vec![0.3, 0.6]]).unwrap());
        let l = ranking_loss(&mut g, same, &grid, &[1.0, 2.0], &[1, 0], 1, 0.1).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn reconstruction_ignores_unobserved_targets() {
        let mut g = Graph::eval();
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 5.0]]).unwrap());
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = reconstruction_loss(&mut g, &[p], &[y.clone()], &[m]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let none = reconstruction_loss(&mut g, &[p], &[y], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }
}
