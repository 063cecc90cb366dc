use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fhsae::error::{Error, Result, Stage};
use fhsae::output::{self, Artifact};
use fhsae::pipeline::{self, DeltaPolicy, GvfCandidates, PipelineOptions, PipelineOutput};
use fhsae::sim::{self, StudyConfig};
use fhsae::{direct, gvf, io, FittedModel};

#[derive(Parser)]
#[command(name = "fhsae", version, about = "Fay-Herriot small area estimation of prevalences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hájek direct estimates per area.
    Direct(Common),
    /// Direct estimates plus GVF selection and smoothed variances.
    Gvf(Common),
    /// Full pipeline: results, model file, diagnostics.
    Fit(Common),
    /// EBLUP table only, optionally from a saved model file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Monte-Carlo study from a config file, or a synthetic fixture.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write units.csv, areas.csv and truth.csv instead of running a study.
        #[arg(long)]
        fixture: bool,
    },
    /// Tables for the diagnostic plots.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    units: Option<PathBuf>,
    #[arg(long)]
    areas: Option<PathBuf>,
    /// `auto` (mean design variance) or a number >= 0.
    #[arg(long)]
    delta: Option<String>,
    #[arg(long, value_enum)]
    bias_correction: Option<OnOff>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Settings file; its values override command-line flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Treat REML non-convergence as an error.
    #[arg(long)]
    strict: bool,
}

/// Keys accepted in `--config` for the estimation subcommands.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    units: Option<PathBuf>,
    areas: Option<PathBuf>,
    out: Option<PathBuf>,
    delta: Option<toml::Value>,
    bias_correction: Option<bool>,
    subtract_delta: Option<bool>,
    strict: Option<bool>,
    gvf_candidates: Option<Vec<String>>,
    fh_covariates: Option<Vec<String>>,
    fh_candidates: Option<Vec<Vec<String>>>,
    percent_columns: Option<Vec<String>>,
}

struct Settings {
    units: Option<PathBuf>,
    areas: Option<PathBuf>,
    out: PathBuf,
    opts: PipelineOptions,
}

impl Settings {
    fn units(&self) -> Result<&Path> {
        self.units
            .as_deref()
            .ok_or_else(|| Error::Config("--units is required".into()))
    }

    fn areas(&self) -> Result<&Path> {
        self.areas
            .as_deref()
            .ok_or_else(|| Error::Config("--areas is required".into()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn delta_from_toml(v: &toml::Value) -> Result<DeltaPolicy> {
    match v {
        toml::Value::String(s) => s.parse(),
        toml::Value::Float(f) => f.to_string().parse(),
        toml::Value::Integer(i) => i.to_string().parse(),
        other => Err(Error::Config(format!("bad delta `{other}`"))),
    }
}

fn settings(c: &Common) -> Result<Settings> {
    let mut opts = PipelineOptions {
        strict: c.strict,
        ..PipelineOptions::default()
    };
    if let Some(d) = &c.delta {
        opts.delta = d.parse()?;
    }
    if let Some(b) = c.bias_correction {
        opts.bias_correction = matches!(b, OnOff::On);
    }
    let mut s = Settings {
        units: c.units.clone(),
        areas: c.areas.clone(),
        out: c.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        opts,
    };
    let Some(path) = &c.config else {
        return Ok(s);
    };
    let f: FileConfig = toml::from_str(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    if let Some(p) = f.units {
        s.units = Some(rel(p));
    }
    if let Some(p) = f.areas {
        s.areas = Some(rel(p));
    }
    if let Some(p) = f.out {
        s.out = rel(p);
    }
    if let Some(d) = &f.delta {
        s.opts.delta = delta_from_toml(d)?;
    }
    if let Some(b) = f.bias_correction {
        s.opts.bias_correction = b;
    }
    if let Some(b) = f.subtract_delta {
        s.opts.subtract_delta = b;
    }
    if let Some(b) = f.strict {
        s.opts.strict = b;
    }
    if let Some(g) = f.gvf_candidates {
        s.opts.gvf_candidates = GvfCandidates::parse_list(&g)?;
    }
    if f.fh_covariates.is_some() {
        s.opts.fh_covariates = f.fh_covariates;
    }
    if f.fh_candidates.is_some() {
        s.opts.fh_candidates = f.fh_candidates;
    }
    if let Some(p) = f.percent_columns {
        s.opts.percent_columns = p;
    }
    Ok(s)
}

fn ingest(s: &Settings) -> Result<(Vec<fhsae::UnitRecord>, fhsae::AreaTable)> {
    let units = io::ingest_units(s.units()?).map_err(|e| e.at(Stage::Ingest))?;
    let areas = io::ingest_areas(s.areas()?).map_err(|e| e.at(Stage::Ingest))?;
    Ok((units, areas))
}

fn write(dir: &Path, artifacts: &[Artifact]) -> Result<()> {
    let paths = output::write_all(dir, artifacts).map_err(|e| e.at(Stage::Output))?;
    for p in paths {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn full_run(s: &Settings, model: Option<&FittedModel>) -> Result<PipelineOutput> {
    let (units, areas) = ingest(s)?;
    let out = match model {
        Some(m) => pipeline::run_with_model(&units, &areas, &s.opts, m)?,
        None => pipeline::run(&units, &areas, &s.opts)?,
    };
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    Ok(out)
}

fn cmd_direct(c: &Common) -> Result<()> {
    let s = settings(c)?;
    let units = io::ingest_units(s.units()?).map_err(|e| e.at(Stage::Ingest))?;
    let table = direct::direct_table(&units).map_err(|e| e.at(Stage::Direct))?;
    write(&s.out, &[("direct.csv".into(), output::direct_csv(&table)?)])
}

fn cmd_gvf(c: &Common) -> Result<()> {
    let s = settings(c)?;
    let units = io::ingest_units(s.units()?).map_err(|e| e.at(Stage::Ingest))?;
    let table = direct::direct_table(&units).map_err(|e| e.at(Stage::Direct))?;
    let stage = |e: Error| e.at(Stage::Gvf);
    let delta = match s.opts.delta {
        DeltaPolicy::Auto => gvf::default_delta(&table).map_err(stage)?,
        DeltaPolicy::Fixed(v) => v,
    };
    let sel = gvf::select_gvf(&table, &s.opts.gvf_candidates.designs(), delta).map_err(stage)?;
    let fit = sel.best.clone().with_bias_correction(s.opts.bias_correction);
    let resid = gvf::residuals(&fit, &table).map_err(stage)?;
    write(
        &s.out,
        &[
            ("direct.csv".into(), output::direct_csv(&table)?),
            ("gvf.csv".into(), output::gvf_table(&table, &fit, &resid)?),
            ("gvf_selection.csv".into(), output::gvf_selection_csv(&sel)?),
        ],
    )
}

fn cmd_fit(c: &Common) -> Result<()> {
    let s = settings(c)?;
    let out = full_run(&s, None)?;
    write(
        &s.out,
        &[
            ("direct.csv".into(), output::direct_csv(&out.direct)?),
            ("gvf.csv".into(), output::gvf_csv(&out)?),
            ("results.csv".into(), output::results_csv(&out)?),
            ("diagnostics.csv".into(), output::diagnostics_csv(&out)?),
            ("model_selection.csv".into(), output::model_selection_csv(&out)?),
            ("model.txt".into(), output::model_txt(&out, s.opts.subtract_delta)),
        ],
    )
}

fn cmd_predict(c: &Common, model: Option<&Path>) -> Result<()> {
    let s = settings(c)?;
    let model = model
        .map(|p| FittedModel::parse(&read_text(p)?))
        .transpose()
        .map_err(|e| e.at(Stage::Ingest))?;
    let out = full_run(&s, model.as_ref())?;
    write(&s.out, &[("results.csv".into(), output::results_csv(&out)?)])
}

fn cmd_report(c: &Common) -> Result<()> {
    let s = settings(c)?;
    let out = full_run(&s, None)?;
    write(&s.out, &output::report_bundle(&out)?)
}

fn default_fixture() -> StudyConfig {
    StudyConfig {
        replicates: 1,
        regenerate_population: true,
        population: sim::PopulationSpec {
            areas: 282,
            size_law: sim::SizeLaw::QuartileProfile {
                knots: [7, 47, 89, 170, 3069],
                inflation: 20,
            },
            covariates: vec![
                sim::CovariateSpec {
                    name: "x1".into(),
                    low: 0.0,
                    high: 0.3,
                },
                sim::CovariateSpec {
                    name: "x2".into(),
                    low: 10.0,
                    high: 90.0,
                },
            ],
            beta: vec![0.02, 0.3, 0.001],
            sigma_u2: 0.001,
            seed: 1,
        },
        design: sim::SampleDesign::simple_random(sim::Allocation::Nominal, 2),
        pipeline: sim::StudyPipeline::default(),
    }
}

fn cmd_simulate(c: &Common, fixture: bool) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => StudyConfig::from_toml(&read_text(p)?)?,
        None if fixture => default_fixture(),
        None => return Err(Error::Config("simulate needs --config or --fixture".into())),
    };
    if let Some(seed) = c.seed {
        cfg.population.seed = seed;
        cfg.design.seed = seed.wrapping_add(1);
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    if fixture {
        let pop = sim::generate_population(&cfg.population)?;
        let units = sim::draw_sample(&pop, &cfg.design)?;
        return write(&out, &output::fixture_csvs(&pop, &units)?);
    }
    let report = sim::run_study(&cfg)?;
    write(
        &out,
        &[
            ("study_areas.csv".into(), output::study_csv(&report)?),
            ("study_summary.txt".into(), output::study_summary(&report)),
        ],
    )?;
    print!("{}", output::study_summary(&report));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Direct(c) => cmd_direct(c),
        Command::Gvf(c) => cmd_gvf(c),
        Command::Fit(c) => cmd_fit(c),
        Command::Predict { common, model } => cmd_predict(common, model.as_deref()),
        Command::Simulate { common, fixture } => cmd_simulate(common, *fixture),
        Command::Report(c) => cmd_report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
