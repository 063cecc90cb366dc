//! CSV and model-file rendering, plus all-or-nothing writes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::direct::AreaDirect;
use crate::error::{Error, Result};
use crate::gvf;
use crate::pipeline::PipelineOutput;

/// A rendered output file: name relative to the output directory, contents.
pub type Artifact = (String, String);

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn pct2(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()
}

fn pct_full(x: Option<f64>) -> String {
    x.map(|v| num(100.0 * v)).unwrap_or_default()
}

fn render(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const RESULTS_HEADER: [&str; 19] = [
    "area_id",
    "n_d",
    "direct",
    "direct_cv_pct",
    "sigma_d2_gvf",
    "eblup",
    "eblup_cv_pct",
    "gamma",
    "mse",
    "residual",
    "flags",
    "direct_cv",
    "direct_cv_pct_full",
    "eblup_cv",
    "eblup_cv_pct_full",
    "design_variance",
    "g1",
    "g2",
    "g3",
];

pub fn direct_csv(direct: &[AreaDirect]) -> Result<String> {
    render(
        &[
            "area_id",
            "n_d",
            "pop_size_hat",
            "direct",
            "design_variance",
            "direct_cv",
            "direct_cv_pct",
            "flags",
        ],
        direct.iter().map(|d| {
            vec![
                d.area_id.to_string(),
                d.sample_size.to_string(),
                num(d.pop_size_hat),
                num(d.estimate),
                num(d.design_variance),
                opt(d.cv),
                pct2(d.cv),
                if d.degenerate_variance {
                    "degenerate_variance".into()
                } else {
                    String::new()
                },
            ]
        }),
    )
}

pub fn gvf_csv(out: &PipelineOutput) -> Result<String> {
    gvf_table(&out.direct, &out.gvf, &out.gvf_residuals)
}

pub fn gvf_table(direct: &[AreaDirect], fit: &gvf::GvfFit, residuals: &[gvf::GvfResidual]) -> Result<String> {
    let rows = gvf::design_rows(direct)?;
    render(
        &[
            "area_id",
            "n_d",
            "direct",
            "design_variance",
            "log_observed",
            "log_fitted",
            "residual",
            "sigma_d2_gvf",
        ],
        direct
            .iter()
            .zip(residuals)
            .zip(rows)
            .map(|((d, r), row)| {
                vec![
                    d.area_id.to_string(),
                    d.sample_size.to_string(),
                    num(d.estimate),
                    num(d.design_variance),
                    num(r.observed_log),
                    num(r.fitted_log),
                    num(r.residual),
                    num(gvf::predict_variance(fit, &row)),
                ]
            }),
    )
}

pub fn results_csv(out: &PipelineOutput) -> Result<String> {
    render(
        &RESULTS_HEADER,
        out.results.iter().map(|r| {
            vec![
                r.area_id.to_string(),
                r.n_d.to_string(),
                opt(r.direct),
                pct2(r.direct_cv),
                opt(r.sigma_d2_gvf),
                num(r.eblup),
                pct2(r.eblup_cv),
                num(r.gamma),
                num(r.mse),
                opt(r.residual),
                r.flags.render(),
                opt(r.direct_cv),
                pct_full(r.direct_cv),
                opt(r.eblup_cv),
                pct_full(r.eblup_cv),
                opt(r.design_variance),
                num(r.g1),
                num(r.g2),
                num(r.g3),
            ]
        }),
    )
}

pub fn diagnostics_csv(out: &PipelineOutput) -> Result<String> {
    render(
        &[
            "area_id",
            "n_d",
            "direct",
            "eblup",
            "fh_residual",
            "gvf_log_observed",
            "gvf_log_fitted",
            "gvf_residual",
        ],
        out.direct
            .iter()
            .zip(&out.gvf_residuals)
            .map(|(d, g)| {
                let r = out
                    .results
                    .iter()
                    .find(|r| r.area_id == d.area_id)
                    .expect("every sampled area has a result");
                vec![
                    d.area_id.to_string(),
                    d.sample_size.to_string(),
                    num(d.estimate),
                    num(r.eblup),
                    opt(r.residual),
                    num(g.observed_log),
                    num(g.fitted_log),
                    num(g.residual),
                ]
            }),
    )
}

pub fn model_selection_csv(out: &PipelineOutput) -> Result<String> {
    let mut rows = gvf_selection_rows(&out.gvf_candidates, &out.gvf.design);
    for c in &out.fh_candidates {
        rows.push(vec![
            "fh".into(),
            c.covariates.join("+"),
            c.aic.as_ref().map(|a| num(*a)).unwrap_or_default(),
            (c.covariates == out.fh_covariates).to_string(),
            c.aic.as_ref().err().cloned().unwrap_or_default(),
        ]);
    }
    render(&SELECTION_HEADER, rows)
}

const SELECTION_HEADER: [&str; 5] = ["stage", "candidate", "aic", "selected", "error"];

pub fn gvf_selection_csv(sel: &gvf::GvfSelection) -> Result<String> {
    render(&SELECTION_HEADER, gvf_selection_rows(&sel.candidates, &sel.best.design))
}

fn gvf_selection_rows(
    candidates: &[(gvf::GvfDesign, std::result::Result<f64, String>)],
    chosen: &gvf::GvfDesign,
) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (design, aic) in candidates {
        rows.push(vec![
            "gvf".into(),
            design.to_string(),
            aic.as_ref().map(|a| num(*a)).unwrap_or_default(),
            (design == chosen).to_string(),
            aic.as_ref().err().cloned().unwrap_or_default(),
        ]);
    }
    rows
}

pub fn model_txt(out: &PipelineOutput, subtract_delta: bool) -> String {
    out.fitted_model(subtract_delta).to_text()
}

/// The four plotting tables.
pub fn report_bundle(out: &PipelineOutput) -> Result<Vec<Artifact>> {
    let gvf_resid = render(
        &["area_id", "fitted_log", "residual"],
        out.direct.iter().zip(&out.gvf_residuals).map(|(d, g)| {
            vec![d.area_id.to_string(), num(g.fitted_log), num(g.residual)]
        }),
    )?;
    let gvf_obs = render(
        &["area_id", "n_d", "direct", "log_observed", "log_predicted"],
        out.direct.iter().zip(&out.gvf_residuals).map(|(d, g)| {
            vec![
                d.area_id.to_string(),
                d.sample_size.to_string(),
                num(d.estimate),
                num(g.observed_log),
                num(g.fitted_log),
            ]
        }),
    )?;
    let sampled = || out.results.iter().filter(|r| !r.flags.synthetic_only);
    let dve = render(
        &["area_id", "n_d", "direct", "eblup", "direct_cv_pct_full", "eblup_cv_pct_full"],
        sampled().map(|r| {
            vec![
                r.area_id.to_string(),
                r.n_d.to_string(),
                opt(r.direct),
                num(r.eblup),
                pct_full(r.direct_cv),
                pct_full(r.eblup_cv),
            ]
        }),
    )?;
    let fh_resid = render(
        &["index", "area_id", "eblup", "residual"],
        sampled().enumerate().map(|(i, r)| {
            vec![
                (i + 1).to_string(),
                r.area_id.to_string(),
                num(r.eblup),
                opt(r.residual),
            ]
        }),
    )?;
    Ok(vec![
        ("gvf_residuals.csv".into(), gvf_resid),
        ("gvf_observed_vs_predicted.csv".into(), gvf_obs),
        ("direct_vs_eblup.csv".into(), dve),
        ("fh_residuals.csv".into(), fh_resid),
    ])
}

/// Writes every artifact to a temporary file in `dir` first and renames them
/// into place only after all were written.
pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(artifacts.len());
    for (name, contents) in artifacts {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, contents.as_bytes())?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(name)));
    }
    let mut paths = Vec::with_capacity(staged.len());
    for (tmp, path) in staged {
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn study_csv(report: &crate::sim::StudyReport) -> Result<String> {
    render(
        &[
            "area_id",
            "n_d",
            "replicates",
            "mean_truth",
            "mean_direct",
            "bias_direct",
            "mse_direct",
            "mean_eblup",
            "bias_eblup",
            "mse_eblup",
            "mean_pr_mse",
            "mean_gamma",
            "mean_direct_cv",
            "mean_eblup_cv",
            "cv_pairs",
            "eblup_cv_lower",
        ],
        report.areas.iter().map(|a| {
            vec![
                a.area_id.to_string(),
                a.n_d.to_string(),
                a.replicates.to_string(),
                num(a.mean_truth),
                num(a.mean_direct),
                num(a.bias_direct),
                num(a.mse_direct),
                num(a.mean_eblup),
                num(a.bias_eblup),
                num(a.mse_eblup),
                num(a.mean_pr_mse),
                num(a.mean_gamma),
                opt(a.mean_direct_cv),
                opt(a.mean_eblup_cv),
                a.cv_pairs.to_string(),
                a.eblup_cv_lower.to_string(),
            ]
        }),
    )
}

pub fn study_summary(report: &crate::sim::StudyReport) -> String {
    let s = &report.summary;
    let mut t = format!(
        "replicates: {}\nfailed replicates: {}\nareas: {}\n\
         mean gamma: {:.4}\n\
         mean |bias| direct: {:.6}\nmean |bias| eblup: {:.6}\n\
         mean empirical mse direct: {:.6e}\nmean empirical mse eblup: {:.6e}\n\
         mean prasad-rao mse: {:.6e}\n\
         areas with eblup cv < direct cv: {:.1}%\n",
        s.replicates,
        s.failures,
        s.areas,
        s.mean_gamma,
        s.mean_abs_bias_direct,
        s.mean_abs_bias_eblup,
        s.mean_mse_direct,
        s.mean_mse_eblup,
        s.mean_pr_mse,
        100.0 * s.frac_eblup_cv_lower,
    );
    for m in s.failure_messages.iter().take(10) {
        t.push_str(&format!("failure: {m}\n"));
    }
    t
}

/// `units.csv`, `areas.csv` and `truth.csv` for a synthetic population.
pub fn fixture_csvs(
    pop: &crate::sim::SyntheticPopulation,
    units: &[crate::direct::UnitRecord],
) -> Result<Vec<Artifact>> {
    let u = render(
        &["area_id", "weight", "y"],
        units.iter().map(|r| {
            vec![
                r.area_id.to_string(),
                num(r.weight()),
                if r.outcome() { "1" } else { "0" }.into(),
            ]
        }),
    )?;
    let mut header = vec!["area_id"];
    header.extend(pop.covariate_names.iter().map(String::as_str));
    let a = render(
        &header,
        pop.areas.iter().map(|a| {
            std::iter::once(a.area_id.to_string())
                .chain(a.covariates.iter().map(|&x| num(x)))
                .collect()
        }),
    )?;
    let t = render(
        &["area_id", "population_size", "truth", "probability", "u"],
        pop.areas.iter().map(|a| {
            vec![
                a.area_id.to_string(),
                a.size().to_string(),
                num(a.truth),
                num(a.probability),
                num(a.u),
            ]
        }),
    )?;
    Ok(vec![
        ("units.csv".into(), u),
        ("areas.csv".into(), a),
        ("truth.csv".into(), t),
    ])
}
