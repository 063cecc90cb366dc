//! Orchestration: direct estimates, GVF smoothing, Fay-Herriot fit and
//! per-area prediction. Everything here is in memory; file handling lives in
//! [`crate::io`] and [`crate::output`].

use std::collections::{BTreeMap, BTreeSet};

use crate::direct::{self, AreaDirect, AreaId, UnitRecord};
use crate::error::{Error, Result, Stage};
use crate::fh::{self, AreaModelRow, AreaPrediction, FhFit};
use crate::gvf::{self, GvfDesign, GvfFit, GvfResidual, GvfSelection};
use crate::model::FittedModel;

pub const INTERCEPT: &str = "intercept";

/// Area-level covariates keyed by area id.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaTable {
    columns: Vec<String>,
    rows: BTreeMap<AreaId, Vec<f64>>,
}

impl AreaTable {
    pub fn new(columns: Vec<String>) -> Self {
        AreaTable {
            columns,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: AreaId, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Dimension {
                expected: self.columns.len(),
                got: values.len(),
            }
            .in_area(&id));
        }
        if self.rows.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate area_id `{id}`")));
        }
        self.rows.insert(id, values);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &AreaId) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AreaId, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("covariate column `{name}` not in area file")))
    }

    /// `[1, x_selected...]` for one area.
    fn design_row(&self, id: &AreaId, idx: &[usize]) -> Option<Vec<f64>> {
        let vals = self.rows.get(id)?;
        Some(std::iter::once(1.0).chain(idx.iter().map(|&i| vals[i])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaPolicy {
    /// Mean of the direct design variances.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for DeltaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            return Ok(DeltaPolicy::Auto);
        }
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("delta must be `auto` or a number, got `{s}`")))?;
        if v >= 0.0 && v.is_finite() {
            Ok(DeltaPolicy::Fixed(v))
        } else {
            Err(Error::Config(format!("delta must be >= 0, got {v}")))
        }
    }
}

/// Which GVF designs are compared by AIC.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GvfCandidates {
    /// Every subset of the six terms that keeps the intercept.
    #[default]
    AllSubsets,
    Full,
    List(Vec<GvfDesign>),
}

impl GvfCandidates {
    pub fn designs(&self) -> Vec<GvfDesign> {
        match self {
            GvfCandidates::AllSubsets => GvfDesign::all_subsets(),
            GvfCandidates::Full => vec![GvfDesign::full()],
            GvfCandidates::List(v) => v.clone(),
        }
    }

    pub fn parse_list<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        match items {
            [one] if one.as_ref() == "all" => Ok(GvfCandidates::AllSubsets),
            [one] if one.as_ref() == "full" => Ok(GvfCandidates::Full),
            _ => Ok(GvfCandidates::List(
                items
                    .iter()
                    .map(|s| s.as_ref().parse())
                    .collect::<Result<_>>()?,
            )),
        }
    }
}

/// Model settings shared by the CLI and the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub delta: DeltaPolicy,
    pub gvf_candidates: GvfCandidates,
    /// FH covariate columns; `None` uses every column of the area file.
    pub fh_covariates: Option<Vec<String>>,
    /// Alternative FH covariate sets compared by AIC. Overrides
    /// `fh_covariates` when set.
    pub fh_candidates: Option<Vec<Vec<String>>>,
    pub bias_correction: bool,
    pub subtract_delta: bool,
    pub strict: bool,
    /// Columns expected to be percentages; values outside `[0, 100]` warn.
    pub percent_columns: Vec<String>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            delta: DeltaPolicy::Auto,
            gvf_candidates: GvfCandidates::AllSubsets,
            fh_covariates: None,
            fh_candidates: None,
            bias_correction: false,
            subtract_delta: false,
            strict: false,
            percent_columns: vec!["x2".to_owned()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub degenerate_variance: bool,
    pub out_of_range: bool,
    pub synthetic_only: bool,
}

impl Flags {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.degenerate_variance {
            parts.push("degenerate_variance");
        }
        if self.out_of_range {
            parts.push("out_of_range");
        }
        if self.synthetic_only {
            parts.push("synthetic_only");
        }
        parts.join(";")
    }
}

/// One line of the publication table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub area_id: AreaId,
    pub n_d: usize,
    pub direct: Option<f64>,
    pub design_variance: Option<f64>,
    pub direct_cv: Option<f64>,
    pub sigma_d2_gvf: Option<f64>,
    pub eblup: f64,
    pub eblup_cv: Option<f64>,
    pub gamma: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub mse: f64,
    pub residual: Option<f64>,
    pub flags: Flags,
}

#[derive(Debug, Clone)]
pub struct FhCandidate {
    pub covariates: Vec<String>,
    pub aic: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub direct: Vec<AreaDirect>,
    pub delta: f64,
    pub gvf: GvfFit,
    pub gvf_candidates: Vec<(GvfDesign, std::result::Result<f64, String>)>,
    pub gvf_residuals: Vec<GvfResidual>,
    /// Names of the FH design columns, starting with `intercept`.
    pub fh_covariates: Vec<String>,
    pub fh_candidates: Vec<FhCandidate>,
    pub fh: FhFit,
    pub model_rows: Vec<AreaModelRow>,
    pub results: Vec<ResultRow>,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn fitted_model(&self, subtract_delta: bool) -> FittedModel {
        FittedModel::new(
            self.gvf.clone(),
            subtract_delta,
            self.fh_covariates.clone(),
            self.fh.clone(),
            &self.model_rows,
        )
    }
}

fn percent_warnings(areas: &AreaTable, percent_columns: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for name in percent_columns {
        let Some(ci) = areas.columns.iter().position(|c| c == name) else {
            continue;
        };
        for (id, vals) in areas.iter() {
            let v = vals[ci];
            if !(0.0..=100.0).contains(&v) {
                out.push(format!(
                    "area {id}: column `{name}` = {v} is outside [0, 100] (expected a percentage)"
                ));
            }
        }
    }
    out
}

fn check_coverage(direct: &[AreaDirect], areas: &AreaTable) -> Result<()> {
    let missing: Vec<String> = direct
        .iter()
        .filter(|d| areas.get(&d.area_id).is_none())
        .map(|d| d.area_id.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "areas in unit file missing from covariate file: {}",
            missing.join(", ")
        )))
    }
}

fn smoothed_variances(
    direct: &[AreaDirect],
    fit: &GvfFit,
    subtract_delta: bool,
) -> Result<Vec<f64>> {
    let rows = gvf::design_rows(direct)?;
    Ok(rows
        .iter()
        .map(|r| gvf::predict_variance_adjusted(fit, r, subtract_delta))
        .collect())
}

fn model_rows(
    direct: &[AreaDirect],
    sigma2: &[f64],
    areas: &AreaTable,
    idx: &[usize],
) -> Result<Vec<AreaModelRow>> {
    direct
        .iter()
        .zip(sigma2)
        .map(|(d, &s2)| {
            let x = areas
                .design_row(&d.area_id, idx)
                .expect("coverage checked");
            AreaModelRow::new(d.area_id.clone(), d.estimate, s2, x).map_err(|e| e.in_area(&d.area_id))
        })
        .collect()
}

fn covariate_sets(areas: &AreaTable, opts: &PipelineOptions) -> Vec<Vec<String>> {
    if let Some(c) = &opts.fh_candidates {
        return c.clone();
    }
    vec![opts
        .fh_covariates
        .clone()
        .unwrap_or_else(|| areas.columns.clone())]
}

fn with_intercept(cols: &[String]) -> Vec<String> {
    std::iter::once(INTERCEPT.to_owned())
        .chain(cols.iter().cloned())
        .collect()
}

/// Runs the whole pipeline, fitting GVF and FH models from the data.
pub fn run(units: &[UnitRecord], areas: &AreaTable, opts: &PipelineOptions) -> Result<PipelineOutput> {
    run_inner(units, areas, opts, None)
}

/// Runs the pipeline with previously fitted GVF and FH parameters.
pub fn run_with_model(
    units: &[UnitRecord],
    areas: &AreaTable,
    opts: &PipelineOptions,
    model: &FittedModel,
) -> Result<PipelineOutput> {
    run_inner(units, areas, opts, Some(model))
}

fn run_inner(
    units: &[UnitRecord],
    areas: &AreaTable,
    opts: &PipelineOptions,
    stored: Option<&FittedModel>,
) -> Result<PipelineOutput> {
    let mut warnings = percent_warnings(areas, &opts.percent_columns);
    for w in &warnings {
        log::warn!("{w}");
    }

    if units.is_empty() {
        return Err(Error::Empty("no unit records").at(Stage::Direct));
    }
    let direct = direct::direct_table(units).map_err(|e| e.at(Stage::Direct))?;
    check_coverage(&direct, areas).map_err(|e| e.at(Stage::Ingest))?;

    // GVF
    let (gvf_fit, gvf_candidates, delta) = match stored {
        Some(m) => (m.gvf.clone(), Vec::new(), m.gvf.delta),
        None => {
            let delta = match opts.delta {
                DeltaPolicy::Auto => gvf::default_delta(&direct).map_err(|e| e.at(Stage::Gvf))?,
                DeltaPolicy::Fixed(v) => v,
            };
            let GvfSelection { best, candidates } =
                gvf::select_gvf(&direct, &opts.gvf_candidates.designs(), delta)
                    .map_err(|e| e.at(Stage::Gvf))?;
            (best.with_bias_correction(opts.bias_correction), candidates, delta)
        }
    };
    let subtract_delta = stored.map_or(opts.subtract_delta, |m| m.subtract_delta);
    let gvf_residuals = gvf::residuals(&gvf_fit, &direct).map_err(|e| e.at(Stage::Gvf))?;
    let sigma2 = smoothed_variances(&direct, &gvf_fit, subtract_delta).map_err(|e| e.at(Stage::Gvf))?;

    // FH
    let (fh_fit, fh_cols, rows, fh_candidates) = match stored {
        Some(m) => {
            let cols: Vec<String> = m.fh_covariates[1..].to_vec();
            let idx = cols
                .iter()
                .map(|c| areas.column_index(c))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at(Stage::Fit))?;
            let rows = model_rows(&direct, &sigma2, areas, &idx).map_err(|e| e.at(Stage::Fit))?;
            (m.fh.clone(), m.fh_covariates.clone(), rows, Vec::new())
        }
        None => fit_fh(&direct, &sigma2, areas, opts).map_err(|e| e.at(Stage::Fit))?,
    };
    if !fh_fit.converged {
        if opts.strict {
            return Err(Error::NotConverged(fh_fit.iterations).at(Stage::Fit));
        }
        let w = format!(
            "REML did not converge after {} iterations; sigma_u2 = {}",
            fh_fit.iterations, fh_fit.sigma_u2_hat
        );
        log::warn!("{w}");
        warnings.push(w);
    }

    // Predict
    let preds = predict_sampled(&fh_fit, &rows).map_err(|e| e.at(Stage::Predict))?;
    let idx: Vec<usize> = fh_cols[1..]
        .iter()
        .map(|c| areas.column_index(c))
        .collect::<Result<_>>()
        .map_err(|e| e.at(Stage::Predict))?;
    let sampled: BTreeSet<&AreaId> = direct.iter().map(|d| &d.area_id).collect();

    let mut by_id: BTreeMap<AreaId, ResultRow> = BTreeMap::new();
    for ((d, p), s2) in direct.iter().zip(&preds).zip(&sigma2) {
        by_id.insert(
            d.area_id.clone(),
            ResultRow {
                area_id: d.area_id.clone(),
                n_d: d.sample_size,
                direct: Some(d.estimate),
                design_variance: Some(d.design_variance),
                direct_cv: d.cv,
                sigma_d2_gvf: Some(*s2),
                eblup: p.eblup,
                eblup_cv: p.cv,
                gamma: p.gamma,
                g1: p.g1,
                g2: p.g2,
                g3: p.g3,
                mse: p.mse,
                residual: Some(p.residual),
                flags: Flags {
                    degenerate_variance: d.degenerate_variance,
                    out_of_range: p.out_of_range(),
                    synthetic_only: false,
                },
            },
        );
    }
    for (id, _) in areas.iter().filter(|(id, _)| !sampled.contains(id)) {
        let x = areas.design_row(id, &idx).expect("present");
        let p = fh::predict_unsampled(&fh_fit, id.clone(), &x).map_err(|e| e.at(Stage::Predict))?;
        by_id.insert(
            id.clone(),
            ResultRow {
                area_id: id.clone(),
                n_d: 0,
                direct: None,
                design_variance: None,
                direct_cv: None,
                sigma_d2_gvf: None,
                eblup: p.eblup,
                eblup_cv: p.cv,
                gamma: 0.0,
                g1: p.g1,
                g2: p.g2,
                g3: p.g3,
                mse: p.mse,
                residual: None,
                flags: Flags {
                    degenerate_variance: false,
                    out_of_range: p.out_of_range(),
                    synthetic_only: true,
                },
            },
        );
    }

    Ok(PipelineOutput {
        direct,
        delta,
        gvf: gvf_fit,
        gvf_candidates,
        gvf_residuals,
        fh_covariates: fh_cols,
        fh_candidates,
        fh: fh_fit,
        model_rows: rows,
        results: by_id.into_values().collect(),
        warnings,
    })
}

type FhStage = (FhFit, Vec<String>, Vec<AreaModelRow>, Vec<FhCandidate>);

fn fit_fh(
    direct: &[AreaDirect],
    sigma2: &[f64],
    areas: &AreaTable,
    opts: &PipelineOptions,
) -> Result<FhStage> {
    let mut best: Option<(FhFit, Vec<String>, Vec<AreaModelRow>)> = None;
    let mut table = Vec::new();
    let mut first_err = None;
    for cols in covariate_sets(areas, opts) {
        let idx = cols
            .iter()
            .map(|c| areas.column_index(c))
            .collect::<Result<Vec<_>>>()?;
        let attempt = model_rows(direct, sigma2, areas, &idx)
            .and_then(|rows| fh::reml_fit(&rows).map(|fit| (fit, rows)));
        let names = with_intercept(&cols);
        match attempt {
            Ok((fit, rows)) => {
                table.push(FhCandidate {
                    covariates: names.clone(),
                    aic: Ok(fit.aic),
                });
                let better = best.as_ref().is_none_or(|(b, bn, _)| {
                    fit.aic < b.aic - gvf::AIC_TIE_TOL
                        || ((fit.aic - b.aic).abs() <= gvf::AIC_TIE_TOL && names.len() < bn.len())
                });
                if better {
                    best = Some((fit, names, rows));
                }
            }
            Err(e) => {
                table.push(FhCandidate {
                    covariates: names,
                    aic: Err(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((fit, names, rows)) => Ok((fit, names, rows, table)),
        None => Err(first_err.unwrap_or(Error::Empty("no FH covariate sets"))),
    }
}

fn predict_sampled(fit: &FhFit, rows: &[AreaModelRow]) -> Result<Vec<AreaPrediction>> {
    fh::predict_all(fit, rows)
}
