mod common;

use std::collections::BTreeSet;

use fhsae::fh;
use fhsae::output;
use fhsae::pipeline::{self, AreaTable, PipelineOptions};
use fhsae::sim::{self, Allocation, CovariateSpec, PopulationSpec, SampleDesign, SizeLaw};
use fhsae::{AreaId, FittedModel, UnitRecord};

const BETA: [f64; 3] = [0.02, 0.3, 0.001];

fn spec(areas: usize, seed: u64) -> PopulationSpec {
    PopulationSpec {
        areas,
        size_law: SizeLaw::QuartileProfile {
            knots: [7, 47, 89, 170, 3069],
            inflation: 10,
        },
        covariates: vec![
            CovariateSpec {
                name: "x1".into(),
                low: 0.0,
                high: 0.3,
            },
            CovariateSpec {
                name: "x2".into(),
                low: 10.0,
                high: 90.0,
            },
        ],
        beta: BETA.to_vec(),
        sigma_u2: 0.002,
        seed,
    }
}

fn fixture(areas: usize, seed: u64) -> (Vec<UnitRecord>, AreaTable, sim::SyntheticPopulation) {
    let pop = sim::generate_population(&spec(areas, seed)).unwrap();
    let units = sim::draw_sample(&pop, &SampleDesign::simple_random(Allocation::Nominal, seed + 1)).unwrap();
    let table = pop.area_table();
    (units, table, pop)
}

fn all_artifacts(out: &pipeline::PipelineOutput) -> Vec<(String, String)> {
    let mut v = vec![
        ("direct.csv".to_owned(), output::direct_csv(&out.direct).unwrap()),
        ("gvf.csv".to_owned(), output::gvf_csv(out).unwrap()),
        ("results.csv".to_owned(), output::results_csv(out).unwrap()),
        ("diagnostics.csv".to_owned(), output::diagnostics_csv(out).unwrap()),
        ("model_selection.csv".to_owned(), output::model_selection_csv(out).unwrap()),
        ("model.txt".to_owned(), output::model_txt(out, false)),
    ];
    v.extend(output::report_bundle(out).unwrap());
    v
}

#[test]
fn end_to_end_recovers_beta() {
    let (units, table, _) = fixture(282, 3);
    let out = pipeline::run(&units, &table, &PipelineOptions::default()).unwrap();
    assert_eq!(out.direct.len(), 282);
    assert_eq!(out.fh_covariates, ["intercept", "x1", "x2"]);
    let p = out.fh.beta_hat.len();
    for (j, truth) in BETA.iter().enumerate() {
        let se = out.fh.beta_covariance[j * p + j].sqrt();
        assert!(
            (out.fh.beta_hat[j] - truth).abs() <= 4.0 * se,
            "beta[{j}] = {} (se {se}), truth {truth}",
            out.fh.beta_hat[j]
        );
    }
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let (units, table, _) = fixture(120, 4);
    let opts = PipelineOptions::default();
    let a = all_artifacts(&pipeline::run(&units, &table, &opts).unwrap());
    let mut reversed = units.clone();
    reversed.reverse();
    let b = all_artifacts(&pipeline::run(&reversed, &table, &opts).unwrap());
    assert_eq!(a, b);
}

#[test]
fn every_area_reported_once_and_cv_columns_agree() {
    let (units, mut table, _) = fixture(60, 5);
    table.insert(AreaId::new("Z9999"), vec![0.1, 50.0]).unwrap();
    let out = pipeline::run(&units, &table, &PipelineOptions::default()).unwrap();
    let ids: Vec<&AreaId> = out.results.iter().map(|r| &r.area_id).collect();
    let unique: BTreeSet<&AreaId> = ids.iter().copied().collect();
    assert_eq!(ids.len(), unique.len());
    assert_eq!(ids.len(), 61);
    for r in &out.results {
        assert!(table.get(&r.area_id).is_some());
    }
    let extra = out.results.iter().find(|r| r.area_id.as_str() == "Z9999").unwrap();
    assert!(extra.flags.synthetic_only);
    assert_eq!(extra.n_d, 0);
    assert!(extra.mse >= out.fh.sigma_u2_hat);

    let csv = output::results_csv(&out).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let h = rdr.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let (dc, dcp, ec, ecp) = (col("direct_cv"), col("direct_cv_pct_full"), col("eblup_cv"), col("eblup_cv_pct_full"));
    let (d2, e2) = (col("direct_cv_pct"), col("eblup_cv_pct"));
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for (f, p, p2) in [(dc, dcp, d2), (ec, ecp, e2)] {
            if rec[f].is_empty() {
                assert!(rec[p].is_empty() && rec[p2].is_empty());
                continue;
            }
            let frac: f64 = rec[f].parse().unwrap();
            let pct: f64 = rec[p].parse().unwrap();
            assert!((pct - 100.0 * frac).abs() <= 1e-9 * pct.abs().max(1.0));
            assert_eq!(rec[p2], format!("{:.2}", 100.0 * frac));
        }
    }
}

#[test]
fn uncovered_area_is_an_ingest_error() {
    let (units, table, _) = fixture(20, 6);
    let mut partial = AreaTable::new(table.columns().to_vec());
    for (id, v) in table.iter().skip(2) {
        partial.insert(id.clone(), v.to_vec()).unwrap();
    }
    let err = pipeline::run(&units, &partial, &PipelineOptions::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("ingest:"), "{msg}");
    assert!(msg.contains("A0001, A0002"), "{msg}");
}

#[test]
fn out_of_range_percentage_warns() {
    let (units, table, _) = fixture(30, 7);
    let mut odd = AreaTable::new(table.columns().to_vec());
    for (i, (id, v)) in table.iter().enumerate() {
        let mut v = v.to_vec();
        if i == 0 {
            v[1] = 140.0;
        }
        odd.insert(id.clone(), v).unwrap();
    }
    let out = pipeline::run(&units, &odd, &PipelineOptions::default()).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("x2"));
}

#[test]
fn tiny_error_variance_pins_eblup_to_direct() {
    let (units, table, _) = fixture(100, 8);
    let out = pipeline::run(&units, &table, &PipelineOptions::default()).unwrap();
    let mut rows = out.model_rows.clone();
    rows[10].error_variance = 1e-12;
    let fit = fh::reml_fit(&rows).unwrap();
    let e = fh::eblup(&fit, &rows[10]);
    assert!((e.eblup - rows[10].direct).abs() <= 1e-6);
}

#[test]
fn saved_model_reproduces_results() {
    let (units, table, _) = fixture(80, 9);
    let opts = PipelineOptions::default();
    let out = pipeline::run(&units, &table, &opts).unwrap();
    let model = FittedModel::parse(&output::model_txt(&out, false)).unwrap();
    let again = pipeline::run_with_model(&units, &table, &opts, &model).unwrap();
    assert_eq!(output::results_csv(&out).unwrap(), output::results_csv(&again).unwrap());
    assert_eq!(model.error_variance_digest, fhsae::model::error_variance_digest(&again.model_rows));
}

#[test]
fn diagnostic_bundle_properties() {
    let (units, table, _) = fixture(282, 10);
    let out = pipeline::run(&units, &table, &PipelineOptions::default()).unwrap();
    let bundle = output::report_bundle(&out).unwrap();
    let names: Vec<&str> = bundle.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["gvf_residuals.csv", "gvf_observed_vs_predicted.csv", "direct_vs_eblup.csv", "fh_residuals.csv"]
    );
    let column = |text: &str, name: &str| -> Vec<f64> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
        r.records().map(|rec| rec.unwrap()[i].parse().unwrap()).collect()
    };
    let resid = column(&bundle[0].1, "residual");
    assert!((resid.iter().sum::<f64>() / resid.len() as f64).abs() < 1e-10);

    let sd = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let direct = column(&bundle[2].1, "direct");
    let eblup = column(&bundle[2].1, "eblup");
    assert!(sd(&eblup) <= sd(&direct));
}

#[test]
fn census_sample_reproduces_truth_in_direct_stage() {
    let mut s = spec(25, 11);
    s.size_law = SizeLaw::Uniform { min: 5, max: 40 };
    let pop = sim::generate_population(&s).unwrap();
    let units = sim::draw_sample(&pop, &SampleDesign::simple_random(Allocation::Census, 1)).unwrap();
    let table = fhsae::direct::direct_table(&units).unwrap();
    for (d, a) in table.iter().zip(&pop.areas) {
        assert_eq!(d.estimate, a.truth);
        assert_eq!(d.design_variance, 0.0);
    }
    // Every design variance is 0, so the automatic offset is 0 too and the
    // GVF log is undefined.
    let err = pipeline::run(&units, &pop.area_table(), &PipelineOptions::default()).unwrap_err();
    assert!(matches!(err.root(), fhsae::Error::DeltaTooSmall(_)), "{err}");
}
