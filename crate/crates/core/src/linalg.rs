//! Small dense least-squares helpers on top of nalgebra.
//!
//! Designs here are tall and thin (hundreds of rows, at most a handful of
//! columns) but badly scaled: a GVF design mixes prevalences near 0.01 with
//! sample sizes in the thousands. Columns are equilibrated to unit norm before
//! a Householder QR, and rank is judged on the scaled triangular factor.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a scaled design is treated as rank
/// deficient.
const RANK_TOL: f64 = 1e-10;

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    /// `(X'X)^{-1}`, row-major `p x p`.
    pub xtx_inv: DMatrix<f64>,
    /// `log det(X'X)`.
    pub log_det_xtx: f64,
    pub residuals: Vec<f64>,
    pub rss: f64,
}

/// Ordinary least squares of `z` on `x` (`n x p`, `n >= p`).
pub fn least_squares(x: &DMatrix<f64>, z: &DVector<f64>) -> Result<LeastSquares, RankDeficient> {
    let (n, p) = x.shape();
    if n < p || p == 0 {
        return Err(RankDeficient);
    }
    let mut scale = vec![0.0; p];
    let mut xs = x.clone();
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = x.column(j).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(RankDeficient);
        }
        *s = norm;
        xs.column_mut(j).scale_mut(1.0 / norm);
    }

    let qr = xs.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..p).any(|j| r[(j, j)].abs() <= RANK_TOL * max_diag) {
        return Err(RankDeficient);
    }

    let mut qtz = z.clone();
    qr.q_tr_mul(&mut qtz);
    let qtz = qtz.rows(0, p).into_owned();
    let coef_scaled = r.solve_upper_triangular(&qtz).ok_or(RankDeficient)?;
    let coef: Vec<f64> = coef_scaled
        .iter()
        .zip(&scale)
        .map(|(c, s)| c / s)
        .collect();

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(RankDeficient)?;
    let mut xtx_inv = &r_inv * r_inv.transpose();
    for i in 0..p {
        for j in 0..p {
            xtx_inv[(i, j)] /= scale[i] * scale[j];
        }
    }
    let log_det_xtx = (0..p)
        .map(|j| 2.0 * (r[(j, j)].abs().ln() + scale[j].ln()))
        .sum();

    let fitted = x * DVector::from_column_slice(&coef);
    let residuals: Vec<f64> = z.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let rss = compensated_sum(residuals.iter().map(|r| r * r));

    Ok(LeastSquares {
        coef,
        xtx_inv,
        log_det_xtx,
        residuals,
        rss,
    })
}

/// Quadratic form `x' A x` for a symmetric `A`.
pub fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    (v.transpose() * a * &v)[(0, 0)]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
