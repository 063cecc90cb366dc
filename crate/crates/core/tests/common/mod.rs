#![allow(dead_code)]

use fhsae::direct::AreaDirect;
use fhsae::fh::AreaModelRow;
use fhsae::AreaId;

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        let pivot_row = a[c].clone();
        for r in c + 1..n {
            let f = a[r][c] / pivot_row[c];
            for (ark, ack) in a[r][c..].iter_mut().zip(&pivot_row[c..]) {
                *ark -= f * ack;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// `(X'WX, X'Wy)` with plain loops.
pub fn normal_equations(x: &[Vec<f64>], w: &[f64], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for d in 0..x.len() {
        for i in 0..p {
            b[i] += w[d] * x[d][i] * y[d];
            for j in 0..p {
                a[i][j] += w[d] * x[d][i] * x[d][j];
            }
        }
    }
    (a, b)
}

pub fn weighted_ls(x: &[Vec<f64>], w: &[f64], y: &[f64]) -> Vec<f64> {
    let (a, b) = normal_equations(x, w, y);
    solve(a, b)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

pub fn area(i: usize, estimate: f64, n: usize, variance: f64) -> AreaDirect {
    AreaDirect {
        area_id: AreaId::new(format!("D{i:03}")),
        estimate,
        design_variance: variance,
        sample_size: n,
        pop_size_hat: n as f64,
        cv: None,
        degenerate_variance: false,
    }
}

pub fn model_rows(y: &[f64], s2: &[f64], x: &[Vec<f64>]) -> Vec<AreaModelRow> {
    y.iter()
        .zip(s2)
        .zip(x)
        .enumerate()
        .map(|(i, ((&y, &s), x))| AreaModelRow::new(format!("D{i:03}"), y, s, x.clone()).unwrap())
        .collect()
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
