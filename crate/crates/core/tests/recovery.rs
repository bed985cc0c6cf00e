//! Known-answer checks for the nonparametric and regression estimators.

use proptest::prelude::*;
use survbench_core::estimators::{censoring_survival, AalenJohansen};
use survbench_core::linear::{cox_partial_loglik, fine_gray_loglik, fit_cs_cox, fit_fine_gray, FitConfig};
use survbench_core::simulate::{simulate_cohort, SimConfig};

fn first_events(cfg: &SimConfig) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u8>) {
    let c = simulate_cohort(cfg).unwrap();
    let x = c.sequences.iter().map(|s| s.statics.clone()).collect();
    let t = c.sequences.iter().map(|s| s.outcome.time).collect();
    let e = c.sequences.iter().map(|s| s.outcome.cause).collect();
    (x, t, e)
}

#[test]
fn competing_exponentials_incidence() {
    let (_, t, e) = first_events(&SimConfig::constant_hazards(0.1, 0.05, 100_000, 11));
    let aj = AalenJohansen::fit(&t, &e, 2).unwrap();
    let exact = (0.1 / 0.15) * (1.0 - (-0.15f64 * 10.0).exp());
    assert!((exact - 0.5179).abs() < 1e-4);
    let got = aj.cif_at(1, 10.0);
    assert!((got - exact).abs() < 0.01, "CIF1(10) = {got}, expected {exact}");
}

#[test]
fn cox_recovers_simulated_coefficients() {
    let mut cfg = SimConfig::constant_hazards(0.1, 0.05, 10_000, 5);
    cfg.h01.beta = vec![0.5, -0.5];
    let (x, t, e) = first_events(&cfg);
    let m = fit_cs_cox(&x, &t, &e, 1, None, &FitConfig::default()).unwrap();
    assert!((m.beta[0] - 0.5).abs() < 0.1, "{:?}", m.beta);
    assert!((m.beta[1] + 0.5).abs() < 0.1, "{:?}", m.beta);
    // cause 2 has no covariate effect
    let m2 = fit_cs_cox(&x, &t, &e, 2, None, &FitConfig::default()).unwrap();
    assert!(m2.beta.iter().all(|b| b.abs() < 0.1), "{:?}", m2.beta);
}

#[test]
fn three_point_toy_dataset() {
    let x = vec![vec![1.0], vec![0.0], vec![1.0]];
    let m = fit_cs_cox(&x, &[1.0, 2.0, 3.0], &[1, 1, 1], 1, None, &FitConfig::default()).unwrap();
    assert!((m.beta[0] + 2f64.ln() / 2.0).abs() < 1e-6, "{}", m.beta[0]);
}

/// Kaplan–Meier of censoring just before `t`.
fn g_left(time: &[f64], cause: &[u8], t: f64) -> f64 {
    let mut g = 1.0;
    let mut distinct: Vec<f64> = time.iter().copied().filter(|&s| s < t).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    for s in distinct {
        let n = time.iter().filter(|&&u| u >= s).count() as f64;
        let d = time.iter().zip(cause).filter(|(&u, &c)| u == s && c != 0).count() as f64;
        let c = time.iter().zip(cause).filter(|(&u, &c)| u == s && c == 0).count() as f64;
        if c > 0.0 {
            g *= 1.0 - c / (n - d);
        }
    }
    g
}

/// Weighted partial likelihood written out subject by subject (no tied event times).
fn fine_gray_naive(beta: f64, x: &[f64], time: &[f64], cause: &[u8]) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.len() {
        if cause[i] != 1 {
            continue;
        }
        let ti = time[i];
        let mut den = 0.0;
        for j in 0..x.len() {
            let w = if time[j] >= ti {
                1.0
            } else if cause[j] == 2 {
                g_left(time, cause, ti) / g_left(time, cause, time[j])
            } else {
                continue;
            };
            den += w * (beta * x[j]).exp();
        }
        ll += beta * x[i] - den.ln();
    }
    ll
}

#[test]
fn fine_gray_matches_grid_search() {
    let x = [0.3, -1.2, 0.8, 1.5, -0.4, 0.0, 2.1, -0.9];
    let time = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let cause = [1, 0, 2, 1, 0, 1, 1, 0];
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    let g = censoring_survival(&time, &cause).unwrap();
    for b in [-1.0, 0.0, 0.7] {
        let v = fine_gray_loglik(&[b], &rows, &time, &cause, 1, &g).unwrap().value;
        assert!((v - fine_gray_naive(b, &x, &time, &cause)).abs() < 1e-12);
    }
    let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
    for k in -5000..=5000 {
        let b = k as f64 * 1e-3;
        let ll = fine_gray_naive(b, &x, &time, &cause);
        if ll > best_ll {
            best = b;
            best_ll = ll;
        }
    }
    let m = fit_fine_gray(&rows, &time, &cause, 1, None, &FitConfig::default()).unwrap();
    assert!((m.beta[0] - best).abs() <= 1e-3, "fit {} grid {best}", m.beta[0]);
}

fn design() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<u8>, Vec<f64>)> {
    (6usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), n),
            prop::collection::vec(1u32..15, n),
            prop::collection::vec(0u8..3, n),
            prop::collection::vec(-1.0f64..1.0, 2),
        )
            .prop_map(|(x, t, c, b)| (x, t.into_iter().map(f64::from).collect(), c, b))
    })
}

/// Central differences of `f` at `beta`, relative error against `grad`.
fn fd_error(f: impl Fn(&[f64]) -> f64, beta: &[f64], grad: &[f64]) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..beta.len() {
        let mut up = beta.to_vec();
        let mut down = beta.to_vec();
        up[k] += h;
        down[k] -= h;
        let n = (f(&up) - f(&down)) / (2.0 * h);
        worst = worst.max((n - grad[k]).abs() / 1f64.max(n.abs()).max(grad[k].abs()));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partial_likelihood_gradients_match_differences((x, t, c, b) in design()) {
        prop_assume!(c.contains(&1));
        let ll = cox_partial_loglik(&b, &x, &t, &c, 1).unwrap();
        prop_assert!(fd_error(|v| cox_partial_loglik(v, &x, &t, &c, 1).unwrap().value, &b, &ll.grad) < 1e-6);
        for k in 0..2 {
            let row: Vec<f64> = ll.hess[k].clone();
            let gk = |v: &[f64]| cox_partial_loglik(v, &x, &t, &c, 1).unwrap().grad[k];
            prop_assert!(fd_error(gk, &b, &row) < 1e-6);
        }
        let g = censoring_survival(&t, &c).unwrap();
        let fg = fine_gray_loglik(&b, &x, &t, &c, 1, &g).unwrap();
        prop_assert!(fd_error(|v| fine_gray_loglik(v, &x, &t, &c, 1, &g).unwrap().value, &b, &fg.grad) < 1e-6);
    }

    #[test]
    fn competing_events_enter_cause_one_fit_as_censoring((x, t, c, _) in design()) {
        prop_assume!(c.contains(&1));
        let cfg = FitConfig::default();
        let Ok(base) = fit_cs_cox(&x, &t, &c, 1, None, &cfg) else { return Ok(()) };
        let censored: Vec<u8> = c.iter().map(|&v| if v == 2 { 0 } else { v }).collect();
        let other = fit_cs_cox(&x, &t, &censored, 1, None, &cfg).unwrap();
        for (u, v) in base.beta.iter().zip(&other.beta) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
