//! Area-level Fay-Herriot model `y = X beta + u + e` with
//! `u ~ N(0, s2u I)` and `e ~ N(0, diag(s2d))`, the sampling variances
//! `s2d` treated as known.
//!
//! `s2u` is fitted by REML (Fisher scoring on the profile likelihood with
//! step-halving, golden-section fallback), `beta` by GLS at the fitted
//! `s2u`. Uncertainty of the EBLUP follows the Prasad-Rao decomposition
//! `mse = g1 + g2 + 2 g3`.

use nalgebra::{DMatrix, DVector};

use crate::direct::AreaId;
use crate::error::{Error, Result};
use crate::linalg::{self, compensated_sum, quad_form};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One area's input to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaModelRow {
    pub area_id: AreaId,
    pub direct: f64,
    pub error_variance: f64,
    /// Covariates including the leading intercept.
    pub covariates: Vec<f64>,
}

impl AreaModelRow {
    pub fn new(
        area_id: impl Into<AreaId>,
        direct: f64,
        error_variance: f64,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        if !(error_variance > 0.0 && error_variance.is_finite()) {
            return Err(Error::InvalidErrorVariance(error_variance));
        }
        Ok(AreaModelRow {
            area_id: area_id.into(),
            direct,
            error_variance,
            covariates,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlOptions {
    pub max_iter: usize,
    /// Relative change in `s2u` that counts as converged.
    pub tol: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhFit {
    pub beta_hat: Vec<f64>,
    pub sigma_u2_hat: f64,
    pub reml_loglik: f64,
    /// Full Gaussian log-likelihood at `(beta_hat, sigma_u2_hat)`; AIC uses it.
    pub ml_loglik: f64,
    pub aic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `(X' V^-1 X)^-1` at the fitted `s2u`, row-major `p x p`.
    pub beta_covariance: Vec<f64>,
    /// REML log-likelihood after each accepted scoring step.
    pub loglik_trace: Vec<f64>,
}

impl FhFit {
    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn synthetic(&self, covariates: &[f64]) -> f64 {
        linalg::dot(covariates, &self.beta_hat)
    }

    fn beta_cov_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_row_slice(p, p, &self.beta_covariance)
    }
}

struct Design {
    x: DMatrix<f64>,
    y: DVector<f64>,
    s2d: Vec<f64>,
}

impl Design {
    fn new(rows: &[AreaModelRow]) -> Result<Self> {
        let d = rows.len();
        let p = rows.first().map(|r| r.covariates.len()).unwrap_or(0);
        if p == 0 {
            return Err(Error::Empty("no covariates"));
        }
        let mut data = Vec::with_capacity(d * p);
        for r in rows {
            if r.covariates.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: r.covariates.len(),
                }
                .in_area(&r.area_id));
            }
            if !(r.error_variance > 0.0 && r.error_variance.is_finite()) {
                return Err(Error::InvalidErrorVariance(r.error_variance).in_area(&r.area_id));
            }
            data.extend_from_slice(&r.covariates);
        }
        Ok(Design {
            x: DMatrix::from_row_slice(d, p, &data),
            y: DVector::from_iterator(d, rows.iter().map(|r| r.direct)),
            s2d: rows.iter().map(|r| r.error_variance).collect(),
        })
    }

    fn d(&self) -> usize {
        self.x.nrows()
    }

    fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Weighted least squares at a given `s2u`, with the pieces REML needs.
struct GlsEval {
    beta: Vec<f64>,
    /// `(X'WX)^-1`
    m: DMatrix<f64>,
    log_det_xtwx: f64,
    w: Vec<f64>,
    resid: Vec<f64>,
}

fn gls_eval(design: &Design, sigma_u2: f64) -> Result<GlsEval> {
    let (d, p) = (design.d(), design.p());
    let w: Vec<f64> = design.s2d.iter().map(|s| 1.0 / (sigma_u2 + s)).collect();
    let mut xw = design.x.clone();
    let mut yw = design.y.clone();
    for i in 0..d {
        let sw = w[i].sqrt();
        xw.row_mut(i).scale_mut(sw);
        yw[i] *= sw;
    }
    let ls = linalg::least_squares(&xw, &yw).map_err(|_| Error::CollinearCovariates)?;
    let fitted = &design.x * DVector::from_column_slice(&ls.coef);
    let resid = (0..d).map(|i| design.y[i] - fitted[i]).collect();
    debug_assert_eq!(ls.coef.len(), p);
    Ok(GlsEval {
        beta: ls.coef,
        m: ls.xtx_inv,
        log_det_xtwx: ls.log_det_xtx,
        w,
        resid,
    })
}

/// GLS estimate of `beta` with weights `1 / (s2u + s2d)`.
pub fn gls_beta(rows: &[AreaModelRow], sigma_u2: f64) -> Result<Vec<f64>> {
    let design = Design::new(rows)?;
    if design.d() < design.p() {
        return Err(Error::TooFewAreas {
            need: design.p(),
            got: design.d(),
        });
    }
    Ok(gls_eval(&design, sigma_u2)?.beta)
}

struct RemlPoint {
    sigma_u2: f64,
    loglik: f64,
    score: f64,
    info: f64,
}

/// `X' diag(v) X`
fn xt_diag_x(x: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut out = DMatrix::zeros(p, p);
    for (i, vi) in v.iter().enumerate() {
        let row = x.row(i);
        for a in 0..p {
            let ra = row[a] * vi;
            for b in a..p {
                out[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

fn reml_point(design: &Design, sigma_u2: f64) -> Result<RemlPoint> {
    let g = gls_eval(design, sigma_u2)?;
    let (d, p) = (design.d(), design.p());
    let w2: Vec<f64> = g.w.iter().map(|w| w * w).collect();
    let w3: Vec<f64> = g.w.iter().map(|w| w * w * w).collect();

    let log_det_v = compensated_sum(design.s2d.iter().map(|s| (sigma_u2 + s).ln()));
    let ypy = compensated_sum(g.w.iter().zip(&g.resid).map(|(w, r)| w * r * r));
    let yppy = compensated_sum(w2.iter().zip(&g.resid).map(|(w, r)| w * r * r));
    let loglik = -0.5 * ((d - p) as f64 * LN_2PI + log_det_v + g.log_det_xtwx + ypy);

    // P = W - W X M X' W with W diagonal.
    let a2 = &g.m * xt_diag_x(&design.x, &w2);
    let a3 = &g.m * xt_diag_x(&design.x, &w3);
    let tr_p = compensated_sum(g.w.iter().copied()) - a2.trace();
    let tr_pp = compensated_sum(w2.iter().copied()) - 2.0 * a3.trace() + (&a2 * &a2).trace();

    Ok(RemlPoint {
        sigma_u2,
        loglik,
        score: 0.5 * (yppy - tr_p),
        info: 0.5 * tr_pp,
    })
}

fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = compensated_sum(y.iter().copied()) / n;
    compensated_sum(y.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0).max(1.0)
}

fn converged(old: f64, new: f64, tol: f64) -> bool {
    (new - old).abs() <= tol * old.abs().max(new.abs()).max(f64::MIN_POSITIVE)
}

struct RemlOutcome {
    sigma_u2: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

fn fisher_scoring(design: &Design, start: f64, opts: &RemlOptions) -> Result<RemlOutcome> {
    let mut cur = reml_point(design, start)?;
    let mut trace = vec![cur.loglik];
    for it in 1..=opts.max_iter {
        if cur.info.is_nan() || cur.info <= 0.0 {
            break;
        }
        let step = cur.score / cur.info;
        if cur.sigma_u2 == 0.0 && step <= 0.0 {
            return Ok(RemlOutcome {
                sigma_u2: 0.0,
                converged: true,
                iterations: it,
                trace,
            });
        }
        let mut h = step;
        let mut next = None;
        for _ in 0..60 {
            let cand = (cur.sigma_u2 + h).max(0.0);
            let pt = reml_point(design, cand)?;
            if pt.loglik >= cur.loglik - 1e-12 * cur.loglik.abs().max(1.0) {
                next = Some(pt);
                break;
            }
            h *= 0.5;
        }
        let Some(next) = next else { break };
        let done = converged(cur.sigma_u2, next.sigma_u2, opts.tol);
        trace.push(next.loglik);
        cur = next;
        if done {
            return Ok(RemlOutcome {
                sigma_u2: cur.sigma_u2,
                converged: true,
                iterations: it,
                trace,
            });
        }
    }
    Ok(RemlOutcome {
        sigma_u2: cur.sigma_u2,
        converged: false,
        iterations: opts.max_iter,
        trace,
    })
}

fn golden_section(design: &Design, hi: f64, opts: &RemlOptions) -> Result<RemlOutcome> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let f = |s: f64| reml_point(design, s).map(|p| p.loglik);
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut e = a + INV_PHI * (b - a);
    let (mut fc, mut fe) = (f(c)?, f(e)?);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut done = false;
    while iterations < opts.max_iter {
        iterations += 1;
        if fc >= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + INV_PHI * (b - a);
            fe = f(e)?;
        }
        trace.push(fc.max(fe));
        if (b - a) <= opts.tol * (a + b).abs().max(f64::MIN_POSITIVE) {
            done = true;
            break;
        }
    }
    let mid = 0.5 * (a + b);
    // The bracket may have collapsed onto the boundary.
    let sigma_u2 = if f(0.0)? >= f(mid)? { 0.0 } else { mid };
    Ok(RemlOutcome {
        sigma_u2,
        converged: done,
        iterations,
        trace,
    })
}

/// Fits `s2u` by REML over `[0, inf)` and `beta` by GLS.
pub fn reml_fit(rows: &[AreaModelRow]) -> Result<FhFit> {
    reml_fit_with(rows, &RemlOptions::default())
}

pub fn reml_fit_with(rows: &[AreaModelRow], opts: &RemlOptions) -> Result<FhFit> {
    let design = Design::new(rows)?;
    let (d, p) = (design.d(), design.p());
    if d <= p {
        return Err(Error::TooFewAreas { need: p + 1, got: d });
    }

    // Moment-type start: residual variance of the OLS fit minus mean s2d.
    let ols = gls_eval(&design, 1.0)?;
    let rss = compensated_sum(ols.resid.iter().map(|r| r * r));
    let mean_s2d = compensated_sum(design.s2d.iter().copied()) / d as f64;
    let start = (rss / (d - p) as f64 - mean_s2d).max(0.1 * mean_s2d);

    let mut outcome = fisher_scoring(&design, start, opts)?;
    if !outcome.converged {
        let hi = 10.0 * sample_variance(&design.y).max(mean_s2d);
        let fallback = golden_section(&design, hi, opts)?;
        let l_scoring = reml_point(&design, outcome.sigma_u2)?.loglik;
        let l_golden = reml_point(&design, fallback.sigma_u2)?.loglik;
        if l_golden >= l_scoring {
            let mut trace = outcome.trace;
            trace.extend(fallback.trace);
            outcome = RemlOutcome {
                sigma_u2: fallback.sigma_u2,
                converged: fallback.converged,
                iterations: outcome.iterations + fallback.iterations,
                trace,
            };
        }
    }
    let mut fit = fit_at(rows, outcome.sigma_u2)?;
    fit.converged = outcome.converged;
    fit.iterations = outcome.iterations;
    fit.loglik_trace = outcome.trace;
    Ok(fit)
}

/// Model evaluated at a fixed `s2u` (no optimisation).
pub fn fit_at(rows: &[AreaModelRow], sigma_u2: f64) -> Result<FhFit> {
    if !(sigma_u2 >= 0.0 && sigma_u2.is_finite()) {
        return Err(Error::Validation(format!("sigma_u2 must be >= 0, got {sigma_u2}")));
    }
    let design = Design::new(rows)?;
    let (d, p) = (design.d(), design.p());
    if d < p {
        return Err(Error::TooFewAreas { need: p, got: d });
    }
    let point = reml_point(&design, sigma_u2)?;
    let g = gls_eval(&design, sigma_u2)?;
    let log_det_v = compensated_sum(design.s2d.iter().map(|s| (sigma_u2 + s).ln()));
    let ypy = compensated_sum(g.w.iter().zip(&g.resid).map(|(w, r)| w * r * r));
    let ml_loglik = -0.5 * (d as f64 * LN_2PI + log_det_v + ypy);
    let mut beta_covariance = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            beta_covariance.push(g.m[(i, j)]);
        }
    }
    Ok(FhFit {
        aic: aic_from(ml_loglik, p),
        beta_hat: g.beta,
        sigma_u2_hat: sigma_u2,
        reml_loglik: point.loglik,
        ml_loglik,
        converged: true,
        iterations: 0,
        beta_covariance,
        loglik_trace: vec![point.loglik],
    })
}

fn aic_from(ml_loglik: f64, p: usize) -> f64 {
    -2.0 * ml_loglik + 2.0 * (p + 1) as f64
}

/// `-2 ml_loglik + 2 (p + 1)`.
pub fn fh_aic(fit: &FhFit) -> f64 {
    aic_from(fit.ml_loglik, fit.p())
}

pub fn shrinkage(sigma_u2: f64, error_variance: f64) -> f64 {
    let total = sigma_u2 + error_variance;
    if total > 0.0 {
        (sigma_u2 / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Predicted random effect `gamma_d (direct - x_d beta)`.
pub fn random_effect(fit: &FhFit, row: &AreaModelRow) -> f64 {
    shrinkage(fit.sigma_u2_hat, row.error_variance) * (row.direct - fit.synthetic(&row.covariates))
}

/// Point part of an area prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EblupEstimate {
    pub eblup: f64,
    pub synthetic: f64,
    pub gamma: f64,
    pub u_hat: f64,
    /// `direct - eblup`
    pub residual: f64,
}

pub fn eblup(fit: &FhFit, row: &AreaModelRow) -> EblupEstimate {
    let synthetic = fit.synthetic(&row.covariates);
    let gamma = shrinkage(fit.sigma_u2_hat, row.error_variance);
    let u_hat = gamma * (row.direct - synthetic);
    // Rounding must not push the convex combination outside its endpoints.
    let (lo, hi) = if row.direct < synthetic {
        (row.direct, synthetic)
    } else {
        (synthetic, row.direct)
    };
    let value = (synthetic + u_hat).clamp(lo, hi);
    EblupEstimate {
        eblup: value,
        synthetic,
        gamma,
        u_hat,
        residual: row.direct - value,
    }
}

/// `2 [sum_d (s2u + s2d)^-2]^-1`
pub fn avar_sigma_u(fit: &FhFit, rows: &[AreaModelRow]) -> f64 {
    avar_from(fit.sigma_u2_hat, rows.iter().map(|r| r.error_variance))
}

fn avar_from(sigma_u2: f64, s2d: impl Iterator<Item = f64>) -> f64 {
    let info = compensated_sum(s2d.map(|s| {
        let t = sigma_u2 + s;
        1.0 / (t * t)
    }));
    2.0 / info
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseComponents {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub mse: f64,
}

/// Shared per-fit quantities for MSE evaluation: `(X'V^-1X)^-1` and `avar`.
pub struct MseContext {
    sigma_u2: f64,
    m: DMatrix<f64>,
    avar: f64,
}

impl MseContext {
    pub fn new(fit: &FhFit, rows: &[AreaModelRow]) -> Result<Self> {
        let design = Design::new(rows)?;
        if design.p() != fit.p() {
            return Err(Error::Dimension {
                expected: fit.p(),
                got: design.p(),
            });
        }
        let g = gls_eval(&design, fit.sigma_u2_hat)?;
        Ok(MseContext {
            sigma_u2: fit.sigma_u2_hat,
            m: g.m,
            avar: avar_from(fit.sigma_u2_hat, design.s2d.iter().copied()),
        })
    }

    pub fn avar(&self) -> f64 {
        self.avar
    }

    pub fn components(&self, row: &AreaModelRow) -> MseComponents {
        let s2u = self.sigma_u2;
        let s2d = row.error_variance;
        let total = s2u + s2d;
        let b = s2d / total;
        let g1 = s2u * s2d / total;
        let g2 = (b * b * quad_form(&self.m, &row.covariates)).max(0.0);
        let g3 = s2d * s2d / (total * total * total) * self.avar;
        MseComponents {
            g1,
            g2,
            g3,
            mse: g1 + g2 + 2.0 * g3,
        }
    }
}

/// Prasad-Rao MSE for area `d` of `rows`.
pub fn mse_prasad_rao(fit: &FhFit, rows: &[AreaModelRow], d: usize) -> Result<MseComponents> {
    let row = rows.get(d).ok_or(Error::Dimension {
        expected: rows.len(),
        got: d,
    })?;
    Ok(MseContext::new(fit, rows)?.components(row))
}

/// Full per-area output of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaPrediction {
    pub area_id: AreaId,
    pub eblup: f64,
    pub synthetic: f64,
    pub gamma: f64,
    pub u_hat: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub mse: f64,
    pub cv: Option<f64>,
    pub residual: f64,
    pub synthetic_only: bool,
}

impl AreaPrediction {
    pub fn out_of_range(&self) -> bool {
        !(0.0..=1.0).contains(&self.eblup)
    }
}

/// `sqrt(mse) / eblup`, undefined for nonpositive estimates.
pub fn predict_cv(pred: &AreaPrediction) -> Option<f64> {
    cv_of(pred.eblup, pred.mse)
}

fn cv_of(estimate: f64, mse: f64) -> Option<f64> {
    (estimate > 0.0).then(|| mse.max(0.0).sqrt() / estimate)
}

/// EBLUP, MSE and CV for every row.
pub fn predict_all(fit: &FhFit, rows: &[AreaModelRow]) -> Result<Vec<AreaPrediction>> {
    let ctx = MseContext::new(fit, rows)?;
    Ok(rows
        .iter()
        .map(|row| {
            let est = eblup(fit, row);
            let mse = ctx.components(row);
            AreaPrediction {
                area_id: row.area_id.clone(),
                eblup: est.eblup,
                synthetic: est.synthetic,
                gamma: est.gamma,
                u_hat: est.u_hat,
                g1: mse.g1,
                g2: mse.g2,
                g3: mse.g3,
                mse: mse.mse,
                cv: cv_of(est.eblup, mse.mse),
                residual: est.residual,
                synthetic_only: false,
            }
        })
        .collect())
}

/// Synthetic prediction for an area with no sample:
/// `x beta` with MSE `x (X'V^-1X)^-1 x' + s2u`.
pub fn predict_unsampled(
    fit: &FhFit,
    area_id: impl Into<AreaId>,
    covariates: &[f64],
) -> Result<AreaPrediction> {
    if covariates.len() != fit.p() {
        return Err(Error::Dimension {
            expected: fit.p(),
            got: covariates.len(),
        });
    }
    let synthetic = fit.synthetic(covariates);
    let leverage = quad_form(&fit.beta_cov_matrix(), covariates).max(0.0);
    let mse = leverage + fit.sigma_u2_hat;
    Ok(AreaPrediction {
        area_id: area_id.into(),
        eblup: synthetic,
        synthetic,
        gamma: 0.0,
        u_hat: 0.0,
        g1: 0.0,
        g2: leverage,
        g3: 0.0,
        mse,
        cv: cv_of(synthetic, mse),
        residual: 0.0,
        synthetic_only: true,
    })
}
