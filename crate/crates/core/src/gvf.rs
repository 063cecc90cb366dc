//! Generalized variance function: a log-linear model that smooths noisy
//! design variances as a function of the estimate and the sample size.
//!
//! The response is `log(var_d + delta)` and the full design row is
//! `(1, p, sqrt(p), n, sqrt(n), sqrt(p n))`. Candidate designs are subsets of
//! those six terms that keep the intercept; AIC picks among them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::direct::AreaDirect;
use crate::error::{Error, Result};
use crate::linalg::{self, compensated_sum};

/// Floor applied to back-transformed variances when `delta` is subtracted.
pub const SUBTRACT_DELTA_FLOOR: f64 = 1e-10;

/// Absolute AIC difference treated as a tie.
pub const AIC_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GvfTerm {
    Intercept,
    Prevalence,
    SqrtPrevalence,
    SampleSize,
    SqrtSampleSize,
    SqrtInteraction,
}

impl GvfTerm {
    pub const ALL: [GvfTerm; 6] = [
        GvfTerm::Intercept,
        GvfTerm::Prevalence,
        GvfTerm::SqrtPrevalence,
        GvfTerm::SampleSize,
        GvfTerm::SqrtSampleSize,
        GvfTerm::SqrtInteraction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            GvfTerm::Intercept => "intercept",
            GvfTerm::Prevalence => "p",
            GvfTerm::SqrtPrevalence => "sqrt_p",
            GvfTerm::SampleSize => "n",
            GvfTerm::SqrtSampleSize => "sqrt_n",
            GvfTerm::SqrtInteraction => "sqrt_pn",
        }
    }
}

impl FromStr for GvfTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GvfTerm::ALL
            .into_iter()
            .find(|t| t.label() == s.trim())
            .ok_or_else(|| Error::InvalidDesign(format!("unknown GVF term `{s}`")))
    }
}

/// A subset of the GVF terms, always containing the intercept, kept in
/// canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GvfDesign {
    terms: Vec<GvfTerm>,
}

impl GvfDesign {
    pub fn new(terms: impl IntoIterator<Item = GvfTerm>) -> Result<Self> {
        let mut terms: Vec<GvfTerm> = terms.into_iter().collect();
        terms.sort();
        terms.dedup();
        if terms.first() != Some(&GvfTerm::Intercept) {
            return Err(Error::InvalidDesign(
                "GVF design must contain the intercept".into(),
            ));
        }
        Ok(GvfDesign { terms })
    }

    pub fn full() -> Self {
        GvfDesign {
            terms: GvfTerm::ALL.to_vec(),
        }
    }

    pub fn intercept_only() -> Self {
        GvfDesign {
            terms: vec![GvfTerm::Intercept],
        }
    }

    /// All 32 designs that contain the intercept, smallest first.
    pub fn all_subsets() -> Vec<GvfDesign> {
        let mut out: Vec<GvfDesign> = (0u32..32)
            .map(|mask| {
                let terms = std::iter::once(GvfTerm::Intercept)
                    .chain(
                        GvfTerm::ALL[1..]
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| mask & (1 << i) != 0)
                            .map(|(_, t)| *t),
                    )
                    .collect();
                GvfDesign { terms }
            })
            .collect();
        out.sort_by_key(|d| d.width());
        out
    }

    pub fn terms(&self) -> &[GvfTerm] {
        &self.terms
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.terms.iter().map(|t| t.label()).collect()
    }

    fn project(&self, row: &GvfDesignRow) -> Vec<f64> {
        self.terms.iter().map(|t| row.0[t.index()]).collect()
    }
}

impl fmt::Display for GvfDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels().join("+"))
    }
}

impl FromStr for GvfDesign {
    type Err = Error;

    /// Parses `intercept+p+sqrt_n` (commas also accepted).
    fn from_str(s: &str) -> Result<Self> {
        let terms = s
            .split(['+', ','])
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<GvfTerm>>>()?;
        GvfDesign::new(terms)
    }
}

/// Full six-term covariate row `(1, p, sqrt(p), n, sqrt(n), sqrt(p n))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvfDesignRow(pub [f64; 6]);

impl GvfDesignRow {
    pub fn values(&self) -> &[f64; 6] {
        &self.0
    }
}

pub fn build_design_row(estimate: f64, sample_size: usize) -> Result<GvfDesignRow> {
    if !(estimate >= 0.0 && estimate.is_finite()) {
        return Err(Error::InvalidPrevalence(estimate));
    }
    if sample_size == 0 {
        return Err(Error::InvalidSampleSize(sample_size));
    }
    let n = sample_size as f64;
    Ok(GvfDesignRow([
        1.0,
        estimate,
        estimate.sqrt(),
        n,
        n.sqrt(),
        (estimate * n).sqrt(),
    ]))
}

/// Fitted log-linear variance model.
#[derive(Debug, Clone, PartialEq)]
pub struct GvfFit {
    pub design: GvfDesign,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `RSS / (D - p)`; 0 for an exactly determined fit.
    pub residual_variance: f64,
    pub delta: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_obs: usize,
    pub bias_correction: bool,
}

impl GvfFit {
    pub fn with_bias_correction(mut self, enabled: bool) -> Self {
        self.bias_correction = enabled;
        self
    }

    pub fn linear_predictor(&self, row: &GvfDesignRow) -> f64 {
        linalg::dot(&self.design.project(row), &self.coefficients)
    }

    /// Whether the log-normal correction `exp(s2/2)` is applied. It is skipped
    /// whenever an offset is in use.
    pub fn applies_correction(&self) -> bool {
        self.bias_correction && self.delta == 0.0
    }
}

/// Smoothed error variance for one area.
pub fn predict_variance(fit: &GvfFit, row: &GvfDesignRow) -> f64 {
    let mut v = fit.linear_predictor(row).exp();
    if fit.applies_correction() {
        v *= (fit.residual_variance / 2.0).exp();
    }
    v
}

/// Like [`predict_variance`], optionally removing the offset again
/// (floored at [`SUBTRACT_DELTA_FLOOR`]). Sensitivity analysis only.
pub fn predict_variance_adjusted(fit: &GvfFit, row: &GvfDesignRow, subtract_delta: bool) -> f64 {
    let v = predict_variance(fit, row);
    if subtract_delta {
        (v - fit.delta).max(SUBTRACT_DELTA_FLOOR)
    } else {
        v
    }
}

/// Mean of the design variances.
pub fn default_delta(areas: &[AreaDirect]) -> Result<f64> {
    if areas.is_empty() {
        return Err(Error::Empty("no areas for delta"));
    }
    Ok(compensated_sum(areas.iter().map(|a| a.design_variance)) / areas.len() as f64)
}

pub fn design_rows(areas: &[AreaDirect]) -> Result<Vec<GvfDesignRow>> {
    areas
        .iter()
        .map(|a| build_design_row(a.estimate, a.sample_size).map_err(|e| e.in_area(&a.area_id)))
        .collect()
}

fn log_responses(areas: &[AreaDirect], delta: f64) -> Result<Vec<f64>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
    }
    areas
        .iter()
        .map(|a| {
            let v = a.design_variance + delta;
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::DeltaTooSmall(v).in_area(&a.area_id))
            }
        })
        .collect()
}

/// Fits the full six-term design.
pub fn fit_gvf(areas: &[AreaDirect], delta: f64) -> Result<GvfFit> {
    fit_gvf_design(areas, &GvfDesign::full(), delta)
}

pub fn fit_gvf_design(areas: &[AreaDirect], design: &GvfDesign, delta: f64) -> Result<GvfFit> {
    let rows = design_rows(areas)?;
    let z = log_responses(areas, delta)?;
    fit_log_linear(&rows, &z, design, delta)
}

/// OLS of the log-scale responses `z` on the projected design rows.
pub fn fit_log_linear(
    rows: &[GvfDesignRow],
    z: &[f64],
    design: &GvfDesign,
    delta: f64,
) -> Result<GvfFit> {
    let d = rows.len();
    let p = design.width();
    if z.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: z.len(),
        });
    }
    if d < p {
        return Err(Error::TooFewAreas { need: p, got: d });
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| design.project(r)).collect();
    let x = DMatrix::from_row_slice(d, p, &data);
    let zv = DVector::from_column_slice(z);
    let ls = linalg::least_squares(&x, &zv).map_err(|_| Error::CollinearGvf)?;

    let scale = compensated_sum(z.iter().map(|v| v * v)).max(1.0);
    let rss = if ls.rss <= 1e-24 * scale { 0.0 } else { ls.rss };
    let residual_variance = if d > p { rss / (d - p) as f64 } else { 0.0 };
    let std_errors = (0..p)
        .map(|j| (residual_variance * ls.xtx_inv[(j, j)]).max(0.0).sqrt())
        .collect();

    let n = d as f64;
    let log_likelihood = if rss == 0.0 {
        f64::INFINITY
    } else {
        -0.5 * n * ((2.0 * std::f64::consts::PI * rss / n).ln() + 1.0)
    };
    let aic = -2.0 * log_likelihood + 2.0 * (p + 1) as f64;

    Ok(GvfFit {
        design: design.clone(),
        coefficients: ls.coef,
        std_errors,
        residual_variance,
        delta,
        log_likelihood,
        aic,
        n_obs: d,
        bias_correction: false,
    })
}

/// Result of AIC selection over candidate designs.
#[derive(Debug, Clone)]
pub struct GvfSelection {
    pub best: GvfFit,
    /// Every candidate with its AIC, or the error that stopped it.
    pub candidates: Vec<(GvfDesign, std::result::Result<f64, String>)>,
}

fn aic_better(candidate: &GvfFit, incumbent: &GvfFit) -> bool {
    let (a, b) = (candidate.aic, incumbent.aic);
    let tie = a == b || (a - b).abs() <= AIC_TIE_TOL;
    if tie {
        candidate.design.width() < incumbent.design.width()
    } else {
        a < b
    }
}

/// Fits every candidate and keeps the one with the smallest AIC, breaking
/// ties toward fewer columns. Candidates that fail to fit are skipped; if
/// none fit, the first error is returned.
pub fn select_gvf(areas: &[AreaDirect], candidates: &[GvfDesign], delta: f64) -> Result<GvfSelection> {
    if candidates.is_empty() {
        return Err(Error::Empty("no GVF candidate designs"));
    }
    let mut best: Option<GvfFit> = None;
    let mut first_err = None;
    let mut table = Vec::with_capacity(candidates.len());
    for design in candidates {
        match fit_gvf_design(areas, design, delta) {
            Ok(fit) => {
                table.push((design.clone(), Ok(fit.aic)));
                if best.as_ref().is_none_or(|b| aic_better(&fit, b)) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                table.push((design.clone(), Err(e.to_string())));
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some(best) => Ok(GvfSelection {
            best,
            candidates: table,
        }),
        None => Err(first_err.expect("at least one candidate")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GvfResidual {
    pub observed_log: f64,
    pub fitted_log: f64,
    pub residual: f64,
}

/// Log-scale observed, fitted and residual values for each area.
pub fn residuals(fit: &GvfFit, areas: &[AreaDirect]) -> Result<Vec<GvfResidual>> {
    let rows = design_rows(areas)?;
    let z = log_responses(areas, fit.delta)?;
    Ok(rows
        .iter()
        .zip(z)
        .map(|(row, observed_log)| {
            let fitted_log = fit.linear_predictor(row);
            GvfResidual {
                observed_log,
                fitted_log,
                residual: observed_log - fitted_log,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::AreaId;

    fn area(i: usize, estimate: f64, n: usize, var: f64) -> AreaDirect {
        AreaDirect {
            area_id: AreaId::new(format!("a{i}")),
            estimate,
            design_variance: var,
            sample_size: n,
            pop_size_hat: 10.0 * n as f64,
            cv: None,
            degenerate_variance: false,
        }
    }

    #[test]
    fn design_row_examples() {
        let r = build_design_row(0.04, 100).unwrap();
        let expect = [1.0, 0.04, 0.2, 100.0, 10.0, 2.0];
        for (a, b) in r.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(
            build_design_row(0.0, 9).unwrap().0,
            [1.0, 0.0, 0.0, 9.0, 3.0, 0.0]
        );
        assert_eq!(build_design_row(1.0, 1).unwrap().0, [1.0; 6]);
        assert!(matches!(
            build_design_row(-0.1, 3),
            Err(Error::InvalidPrevalence(_))
        ));
    }

    #[test]
    fn design_parsing_and_subsets() {
        let d: GvfDesign = "intercept+p+sqrt_n".parse().unwrap();
        assert_eq!(d.width(), 3);
        assert_eq!(d.to_string(), "intercept+p+sqrt_n");
        assert!("p+n".parse::<GvfDesign>().is_err());
        assert!("intercept+q".parse::<GvfDesign>().is_err());
        let all = GvfDesign::all_subsets();
        assert_eq!(all.len(), 32);
        assert_eq!(all[0], GvfDesign::intercept_only());
        assert_eq!(all[31], GvfDesign::full());
    }

    #[test]
    fn default_delta_examples() {
        let areas = [area(0, 0.1, 5, 0.004), area(1, 0.2, 5, 0.008)];
        assert!((default_delta(&areas).unwrap() - 0.006).abs() < 1e-15);
        let zeros = [area(0, 0.0, 5, 0.0), area(1, 0.0, 5, 0.0)];
        assert_eq!(default_delta(&zeros).unwrap(), 0.0);
        assert!(default_delta(&[]).is_err());
    }

    #[test]
    fn prediction_examples() {
        let mut fit = GvfFit {
            design: GvfDesign::full(),
            coefficients: vec![0.0; 6],
            std_errors: vec![0.0; 6],
            residual_variance: 0.5,
            delta: 0.0,
            log_likelihood: 0.0,
            aic: 0.0,
            n_obs: 10,
            bias_correction: false,
        };
        let row = build_design_row(0.3, 40).unwrap();
        assert_eq!(predict_variance(&fit, &row), 1.0);
        fit.coefficients[0] = -3.0;
        assert_eq!(predict_variance(&fit, &row), (-3.0f64).exp());
        fit.bias_correction = true;
        assert_eq!(predict_variance(&fit, &row), (-3.0f64).exp() * 0.25f64.exp());
        fit.delta = 0.01;
        assert_eq!(predict_variance(&fit, &row), (-3.0f64).exp());
        let sub = predict_variance_adjusted(&fit, &row, true);
        assert!((sub - ((-3.0f64).exp() - 0.01)).abs() < 1e-15);
        fit.coefficients[0] = -30.0;
        assert_eq!(predict_variance_adjusted(&fit, &row, true), SUBTRACT_DELTA_FLOOR);
    }

    #[test]
    fn zero_variance_without_delta_is_an_error() {
        let areas: Vec<_> = (0..10)
            .map(|i| area(i, 0.1 * i as f64, 10 + i * i, if i == 3 { 0.0 } else { 0.01 }))
            .collect();
        let err = fit_gvf(&areas, 0.0).unwrap_err();
        assert!(matches!(err.root(), Error::DeltaTooSmall(_)));
        assert!(fit_gvf(&areas, 0.001).is_ok());
    }

    #[test]
    fn constant_sample_size_is_collinear() {
        let areas: Vec<_> = (0..12)
            .map(|i| area(i, 0.05 * (i + 1) as f64, 25, 0.001 * (i + 1) as f64))
            .collect();
        assert!(matches!(fit_gvf(&areas, 0.0), Err(Error::CollinearGvf)));
        let d: GvfDesign = "intercept+p+sqrt_p".parse().unwrap();
        assert!(fit_gvf_design(&areas, &d, 0.0).is_ok());
    }

    #[test]
    fn constant_response_prefers_intercept_only() {
        let areas: Vec<_> = (0..15)
            .map(|i| area(i, 0.03 * (i + 1) as f64, 5 + 3 * i, 0.002))
            .collect();
        let sel = select_gvf(&areas, &GvfDesign::all_subsets(), 0.0).unwrap();
        assert_eq!(sel.best.design, GvfDesign::intercept_only());
        assert_eq!(sel.best.residual_variance, 0.0);
    }

    #[test]
    fn select_single_candidate_and_tie_rule() {
        let areas: Vec<_> = (0..20)
            .map(|i| {
                let p = 0.02 + 0.01 * i as f64;
                area(i, p, 10 + i * i, p * (1.0 - p) / (10 + i * i) as f64 * (1.0 + 0.1 * (i % 3) as f64))
            })
            .collect();
        let d: GvfDesign = "intercept+p".parse().unwrap();
        let sel = select_gvf(&areas, std::slice::from_ref(&d), 0.0).unwrap();
        assert_eq!(sel.best.design, d);
        assert!(select_gvf(&areas, &[], 0.0).is_err());

        let mut small = sel.best.clone();
        let mut big = fit_gvf(&areas, 0.0).unwrap();
        big.aic = small.aic + 5e-13;
        assert!(aic_better(&small, &big));
        assert!(!aic_better(&big, &small));
        small.aic = f64::NEG_INFINITY;
        big.aic = f64::NEG_INFINITY;
        assert!(aic_better(&small, &big));
    }
}
