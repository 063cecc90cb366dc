mod common;

use common::{model_rows, rng};
use fhsae::fh::{self, AreaModelRow};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Data {
    y: Vec<f64>,
    s2: Vec<f64>,
    x: Vec<Vec<f64>>,
}

/// FH data with an intercept and `k` covariates.
fn simulate(seed: u64, d: usize, k: usize, s2u: f64) -> Data {
    let mut r = rng(seed);
    let beta: Vec<f64> = (0..=k).map(|j| if j == 0 { 0.1 } else { 0.5 / j as f64 }).collect();
    let mut y = Vec::with_capacity(d);
    let mut s2 = Vec::with_capacity(d);
    let mut x = Vec::with_capacity(d);
    for _ in 0..d {
        let row: Vec<f64> = std::iter::once(1.0)
            .chain((0..k).map(|_| r.random_range(0.0..0.5)))
            .collect();
        let sd: f64 = r.random_range(0.0005..0.02);
        let z1: f64 = StandardNormal.sample(&mut r);
        let z2: f64 = StandardNormal.sample(&mut r);
        let mean: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        y.push(mean + s2u.sqrt() * z1 + sd.sqrt() * z2);
        s2.push(sd);
        x.push(row);
    }
    Data { y, s2, x }
}

fn rows(d: &Data) -> Vec<AreaModelRow> {
    model_rows(&d.y, &d.s2, &d.x)
}

fn between(v: f64, a: f64, b: f64) -> bool {
    a.min(b) <= v && v <= a.max(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eblup_is_convex_combination_and_mse_decomposes(
        seed in any::<u64>(), d in 8usize..120, k in 0usize..3, s2u in 0.0f64..0.01,
    ) {
        let data = simulate(seed, d, k, s2u);
        let rows = rows(&data);
        let fit = fh::reml_fit(&rows).unwrap();
        for (row, p) in rows.iter().zip(fh::predict_all(&fit, &rows).unwrap()) {
            prop_assert!((0.0..=1.0).contains(&p.gamma));
            prop_assert!(between(p.eblup, row.direct, p.synthetic));
            prop_assert!(p.g1 >= 0.0 && p.g2 >= 0.0 && p.g3 >= 0.0);
            prop_assert_eq!(p.mse, p.g1 + p.g2 + 2.0 * p.g3);
            prop_assert!(p.mse >= p.g1);
        }
    }

    #[test]
    fn reml_trace_is_nondecreasing(seed in any::<u64>(), d in 8usize..200, s2u in 0.0f64..0.01) {
        let data = simulate(seed, d, 1, s2u);
        let fit = fh::reml_fit(&rows(&data)).unwrap();
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", fit.loglik_trace);
        }
    }

    #[test]
    fn gls_matches_brute_force(seed in any::<u64>(), d in 4usize..=20, s2u in 0.0f64..0.05) {
        let data = simulate(seed, d, 2, 0.002);
        let beta = fh::gls_beta(&rows(&data), s2u).unwrap();
        let w: Vec<f64> = data.s2.iter().map(|s| 1.0 / (s2u + s)).collect();
        let want = common::weighted_ls(&data.x, &w, &data.y);
        prop_assert!(common::rel_err(&beta, &want) <= 1e-10);
    }

    #[test]
    fn equal_totals_reduce_to_ols(seed in any::<u64>(), d in 4usize..40, c in 0.001f64..0.1, frac in 0.0f64..0.99) {
        let mut data = simulate(seed, d, 2, 0.002);
        let s2u = frac * c;
        data.s2 = vec![c - s2u; d];
        let beta = fh::gls_beta(&rows(&data), s2u).unwrap();
        let ols = common::weighted_ls(&data.x, &vec![1.0; d], &data.y);
        prop_assert!(common::rel_err(&beta, &ols) <= 1e-10);
    }

    #[test]
    fn column_scaling_is_equivariant(seed in any::<u64>(), d in 10usize..100, a in 0.1f64..10.0, neg in any::<bool>()) {
        let a = if neg { -a } else { a };
        let data = simulate(seed, d, 2, 0.003);
        let mut scaled = Data { y: data.y.clone(), s2: data.s2.clone(), x: data.x.clone() };
        for row in &mut scaled.x {
            row[1] *= a;
        }
        let (r0, r1) = (rows(&data), rows(&scaled));
        let (f0, f1) = (fh::reml_fit(&r0).unwrap(), fh::reml_fit(&r1).unwrap());
        prop_assert!((f1.beta_hat[1] * a - f0.beta_hat[1]).abs() <= 1e-10 * f0.beta_hat[1].abs().max(1e-3));
        let (p0, p1) = (fh::predict_all(&f0, &r0).unwrap(), fh::predict_all(&f1, &r1).unwrap());
        for (u, v) in p0.iter().zip(&p1) {
            prop_assert!((u.eblup - v.eblup).abs() <= 1e-10 * u.eblup.abs().max(1.0));
        }
    }

    #[test]
    fn shrinking_error_variance_moves_eblup_to_direct(seed in any::<u64>(), area in 0usize..30) {
        let data = simulate(seed, 30, 1, 0.002);
        let rows = rows(&data);
        let fit = fh::reml_fit(&rows).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let mut row = rows[area].clone();
            row.error_variance = 10f64.powi(-k);
            let gap = (fh::eblup(&fit, &row).eblup - row.direct).abs();
            prop_assert!(gap <= prev);
            prev = gap;
        }
    }

    #[test]
    fn avar_closed_form(c in 1e-4f64..10.0, d in 2usize..400, frac in 0.0f64..0.99) {
        let s2u = frac * c;
        let x = vec![vec![1.0]; d];
        let rows = model_rows(&vec![0.0; d], &vec![c - s2u; d], &x);
        let fit = fh::fit_at(&rows, s2u).unwrap();
        let avar = fh::avar_sigma_u(&fit, &rows);
        let want = 2.0 * c * c / d as f64;
        prop_assert!((avar - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn refit_with_tiny_error_variance_tracks_direct() {
    let data = simulate(5, 40, 1, 0.002);
    let mut prev = f64::INFINITY;
    for k in [2, 4, 6, 8, 10, 12] {
        let mut d = Data { y: data.y.clone(), s2: data.s2.clone(), x: data.x.clone() };
        d.s2[3] = 10f64.powi(-k);
        let rows = rows(&d);
        let fit = fh::reml_fit(&rows).unwrap();
        let gap = (fh::eblup(&fit, &rows[3]).eblup - rows[3].direct).abs();
        assert!(gap <= prev, "k={k}: {gap} > {prev}");
        prev = gap;
    }
    assert!(prev <= 1e-6 * data.y[3].abs().max(1e-3));
}

#[test]
fn unsampled_mse_decreases_to_sigma_u2() {
    let mut last = f64::INFINITY;
    for d in [20, 80, 320, 1280] {
        let data = simulate(9, d, 1, 0.002);
        let rows = rows(&data);
        let fit = fh::fit_at(&rows, 0.002).unwrap();
        let p = fh::predict_unsampled(&fit, "new", &[1.0, 0.25]).unwrap();
        assert!(p.mse > 0.002);
        assert!(p.mse < last);
        last = p.mse;
    }
    assert!(last - 0.002 < 1e-5);
}

#[test]
fn training_row_covariates_give_synthetic_part() {
    let data = simulate(2, 30, 2, 0.002);
    let rows = rows(&data);
    let fit = fh::reml_fit(&rows).unwrap();
    let p = fh::predict_unsampled(&fit, "x", &rows[4].covariates).unwrap();
    assert_eq!(p.eblup, fh::eblup(&fit, &rows[4]).synthetic);
}

#[test]
fn stronger_covariate_lowers_aic() {
    let mut r = rng(3);
    let d = 200;
    let mut y = Vec::new();
    let mut x_full = Vec::new();
    let mut x_small = Vec::new();
    let s2 = vec![0.002; d];
    for _ in 0..d {
        let x1: f64 = r.random_range(0.0..0.3);
        let x2: f64 = r.random_range(0.0..1.0);
        let e: f64 = StandardNormal.sample(&mut r);
        y.push(0.02 + 1.6 * x1 - 0.02 * x2 + 0.05 * e);
        x_full.push(vec![1.0, x1, x2]);
        x_small.push(vec![1.0, x2]);
    }
    let full = fh::reml_fit(&model_rows(&y, &s2, &x_full)).unwrap();
    let small = fh::reml_fit(&model_rows(&y, &s2, &x_small)).unwrap();
    assert!(full.aic < small.aic);
    assert_eq!(fh::fh_aic(&full), full.aic);
}
