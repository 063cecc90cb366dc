//! Synthetic finite populations, survey samples drawn from them, and
//! Monte-Carlo studies of the full pipeline against known truth.
//!
//! Household outcomes are Bernoulli with area probability
//! `clip(x_d beta + u_d, 0.001, 0.999)`, `u_d ~ N(0, sigma_u2)`. Every
//! (replicate, area, purpose) triple owns its own ChaCha stream, so results do
//! not depend on evaluation order or thread count.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct::{AreaId, UnitRecord};
use crate::error::{Error, Result};
use crate::linalg::compensated_sum;
use crate::pipeline::{self, AreaTable, PipelineOptions, ResultRow};

pub mod oracle;

pub const PROB_MIN: f64 = 0.001;
pub const PROB_MAX: f64 = 0.999;

/// Ratio of stratum weights in the weight-stratified design.
pub const DEFAULT_WEIGHT_RATIO: f64 = 4.0;

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Covariates = 0,
    RandomEffect = 1,
    Outcomes = 2,
    Sample = 3,
    Size = 4,
}

fn stream(seed: u64, replicate: u64, area: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((area as u64) << 4) | purpose as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SizeLaw {
    Constant {
        size: usize,
    },
    Uniform {
        min: usize,
        max: usize,
    },
    /// Target sample sizes interpolated geometrically between the five
    /// quartile knots (min, Q1, median, Q3, max); population sizes are the
    /// targets times `inflation`.
    QuartileProfile {
        knots: [usize; 5],
        inflation: usize,
    },
}

impl SizeLaw {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid size law: {m}")));
        match self {
            SizeLaw::Constant { size } if *size == 0 => bad("size must be >= 1"),
            SizeLaw::Uniform { min, max } if *min == 0 || min > max => bad("need 1 <= min <= max"),
            SizeLaw::QuartileProfile { knots, inflation } => {
                if knots[0] == 0 || knots.windows(2).any(|w| w[0] > w[1]) {
                    bad("knots must be positive and nondecreasing")
                } else if *inflation == 0 {
                    bad("inflation must be >= 1")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Sample-size profile through five quartile knots, geometric within each
/// quarter.
pub fn quartile_profile(areas: usize, knots: [usize; 5]) -> Vec<usize> {
    if areas == 1 {
        return vec![knots[2]];
    }
    (0..areas)
        .map(|d| {
            let q = 4.0 * d as f64 / (areas - 1) as f64;
            let k = (q.floor() as usize).min(3);
            let t = q - k as f64;
            let (a, b) = ((knots[k] as f64).ln(), (knots[k + 1] as f64).ln());
            (a + t * (b - a)).exp().round().max(1.0) as usize
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub areas: usize,
    pub size_law: SizeLaw,
    /// Area covariates, each uniform on `[low, high]`; the intercept is implicit.
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Intercept first, then one coefficient per covariate.
    pub beta: Vec<f64>,
    pub sigma_u2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticArea {
    pub area_id: AreaId,
    pub outcomes: Vec<bool>,
    /// Without the intercept.
    pub covariates: Vec<f64>,
    pub u: f64,
    pub probability: f64,
    /// Exact population prevalence.
    pub truth: f64,
    /// Sample size suggested by the size law.
    pub nominal_sample: usize,
}

impl SyntheticArea {
    pub fn size(&self) -> usize {
        self.outcomes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub areas: Vec<SyntheticArea>,
    pub covariate_names: Vec<String>,
    pub spec: PopulationSpec,
    pub replicate: u64,
}

impl SyntheticPopulation {
    pub fn area_table(&self) -> AreaTable {
        let mut t = AreaTable::new(self.covariate_names.clone());
        for a in &self.areas {
            t.insert(a.area_id.clone(), a.covariates.clone())
                .expect("generated ids are unique");
        }
        t
    }
}

pub fn area_label(d: usize) -> AreaId {
    AreaId::new(format!("A{:04}", d + 1))
}

fn validate_spec(spec: &PopulationSpec) -> Result<()> {
    if spec.areas == 0 {
        return Err(Error::Config("population needs at least one area".into()));
    }
    spec.size_law.validate()?;
    if spec.beta.len() != spec.covariates.len() + 1 {
        return Err(Error::Config(format!(
            "beta has {} entries, expected {} (intercept + covariates)",
            spec.beta.len(),
            spec.covariates.len() + 1
        )));
    }
    if !(spec.sigma_u2 >= 0.0 && spec.sigma_u2.is_finite()) {
        return Err(Error::Config("sigma_u2 must be >= 0".into()));
    }
    if spec.covariates.iter().any(|c| c.low.is_nan() || c.high.is_nan() || c.low > c.high) {
        return Err(Error::Config("covariate range needs low <= high".into()));
    }
    Ok(())
}

pub fn generate_population(spec: &PopulationSpec) -> Result<SyntheticPopulation> {
    generate_population_replicate(spec, 0)
}

pub fn generate_population_replicate(spec: &PopulationSpec, replicate: u64) -> Result<SyntheticPopulation> {
    validate_spec(spec)?;
    let profile = match &spec.size_law {
        SizeLaw::QuartileProfile { knots, .. } => Some(quartile_profile(spec.areas, *knots)),
        _ => None,
    };
    let u_law = Normal::new(0.0, spec.sigma_u2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let areas = (0..spec.areas)
        .into_par_iter()
        .map(|d| {
            let (size, nominal) = match &spec.size_law {
                SizeLaw::Constant { size } => (*size, *size),
                SizeLaw::Uniform { min, max } => {
                    let n = stream(spec.seed, replicate, d, Purpose::Size).random_range(*min..=*max);
                    (n, n)
                }
                SizeLaw::QuartileProfile { inflation, .. } => {
                    let s = profile.as_ref().expect("profile")[d];
                    (s * inflation, s)
                }
            };
            let mut xr = stream(spec.seed, replicate, d, Purpose::Covariates);
            let covariates: Vec<f64> = spec
                .covariates
                .iter()
                .map(|c| if c.low == c.high { c.low } else { xr.random_range(c.low..c.high) })
                .collect();
            let u = if spec.sigma_u2 > 0.0 {
                u_law.sample(&mut stream(spec.seed, replicate, d, Purpose::RandomEffect))
            } else {
                0.0
            };
            let eta = spec.beta[0]
                + spec.beta[1..]
                    .iter()
                    .zip(&covariates)
                    .map(|(b, x)| b * x)
                    .sum::<f64>();
            let probability = (eta + u).clamp(PROB_MIN, PROB_MAX);
            let mut yr = stream(spec.seed, replicate, d, Purpose::Outcomes);
            let outcomes: Vec<bool> = (0..size).map(|_| yr.random_bool(probability)).collect();
            let ones = outcomes.iter().filter(|&&y| y).count();
            SyntheticArea {
                area_id: area_label(d),
                truth: ones as f64 / size as f64,
                outcomes,
                covariates,
                u,
                probability,
                nominal_sample: nominal,
            }
        })
        .collect();
    Ok(SyntheticPopulation {
        areas,
        covariate_names: spec.covariates.iter().map(|c| c.name.clone()).collect(),
        spec: spec.clone(),
        replicate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DesignKind {
    SimpleRandom,
    /// Two strata per area (first and second half of the households), the
    /// first sampled so its weights are `ratio` times those of the second.
    WeightStratified {
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
}

fn default_ratio() -> f64 {
    DEFAULT_WEIGHT_RATIO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Allocation {
    /// `n_d = N_d`
    Census,
    Fixed(usize),
    /// `n_d = max(1, round(f N_d))`
    Fraction(f64),
    /// Size law's nominal sample size.
    Nominal,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDesign {
    pub kind: DesignKind,
    pub allocation: Allocation,
    pub seed: u64,
}

impl SampleDesign {
    pub fn simple_random(allocation: Allocation, seed: u64) -> Self {
        SampleDesign {
            kind: DesignKind::SimpleRandom,
            allocation,
            seed,
        }
    }

    fn sample_size(&self, d: usize, area: &SyntheticArea) -> Result<usize> {
        let big_n = area.size();
        let n = match &self.allocation {
            Allocation::Census => big_n,
            Allocation::Fixed(n) => *n,
            Allocation::Fraction(f) => ((f * big_n as f64).round() as usize).max(1),
            Allocation::Nominal => area.nominal_sample,
            Allocation::Explicit(v) => *v.get(d).ok_or_else(|| {
                Error::Config(format!("explicit allocation has no entry for area {}", d + 1))
            })?,
        };
        if n == 0 || n > big_n {
            return Err(Error::Validation(format!(
                "area {}: sample size {n} not in 1..={big_n}",
                area.area_id
            )));
        }
        Ok(n)
    }
}

/// Draws one sample per area. Weights are inverse inclusion probabilities.
pub fn draw_sample(pop: &SyntheticPopulation, design: &SampleDesign) -> Result<Vec<UnitRecord>> {
    draw_sample_replicate(pop, design, pop.replicate)
}

pub fn draw_sample_replicate(
    pop: &SyntheticPopulation,
    design: &SampleDesign,
    replicate: u64,
) -> Result<Vec<UnitRecord>> {
    let per_area: Vec<Vec<UnitRecord>> = pop
        .areas
        .par_iter()
        .enumerate()
        .map(|(d, area)| {
            let n = design.sample_size(d, area)?;
            let mut rng = stream(design.seed, replicate, d, Purpose::Sample);
            let picks = match design.kind {
                DesignKind::SimpleRandom => srs(&mut rng, 0, area.size(), n),
                DesignKind::WeightStratified { ratio } => stratified(&mut rng, area.size(), n, ratio),
            };
            picks
                .into_iter()
                .map(|(j, w)| UnitRecord::new(area.area_id.clone(), w, area.outcomes[j]))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_area.into_iter().flatten().collect())
}

fn srs(rng: &mut ChaCha8Rng, offset: usize, size: usize, n: usize) -> Vec<(usize, f64)> {
    let w = size as f64 / n as f64;
    let mut idx = index::sample(rng, size, n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|j| (offset + j, w)).collect()
}

fn stratified(rng: &mut ChaCha8Rng, size: usize, n: usize, ratio: f64) -> Vec<(usize, f64)> {
    if n < 2 || size < 2 || ratio.is_nan() || ratio <= 0.0 {
        return srs(rng, 0, size, n);
    }
    let n_a_pop = size.div_ceil(2);
    let n_b_pop = size - n_a_pop;
    // w_a = ratio * w_b  =>  n_b = n * ratio N_b / (N_a + ratio N_b)
    let ideal_b = n as f64 * ratio * n_b_pop as f64 / (n_a_pop as f64 + ratio * n_b_pop as f64);
    let mut n_b = (ideal_b.round() as usize).clamp(1, n_b_pop.min(n - 1));
    let mut n_a = n - n_b;
    if n_a > n_a_pop {
        n_a = n_a_pop;
        n_b = n - n_a;
    }
    let mut out = srs(rng, 0, n_a_pop, n_a);
    out.extend(srs(rng, n_a_pop, n_b_pop, n_b));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPipeline {
    /// `"auto"` or a number.
    #[serde(default = "default_delta")]
    pub delta: toml::Value,
    #[serde(default)]
    pub bias_correction: bool,
    /// `["all"]`, `["full"]` or explicit designs such as `"intercept+p+n"`.
    #[serde(default = "default_candidates")]
    pub gvf_candidates: Vec<String>,
}

fn default_delta() -> toml::Value {
    toml::Value::String("auto".into())
}

fn default_candidates() -> Vec<String> {
    vec!["all".into()]
}

impl Default for StudyPipeline {
    fn default() -> Self {
        StudyPipeline {
            delta: default_delta(),
            bias_correction: false,
            gvf_candidates: default_candidates(),
        }
    }
}

impl StudyPipeline {
    pub fn options(&self) -> Result<PipelineOptions> {
        let delta = match &self.delta {
            toml::Value::String(s) => s.parse()?,
            toml::Value::Float(f) => f.to_string().parse()?,
            toml::Value::Integer(i) => i.to_string().parse()?,
            other => return Err(Error::Config(format!("bad delta `{other}`"))),
        };
        Ok(PipelineOptions {
            delta,
            gvf_candidates: pipeline::GvfCandidates::parse_list(&self.gvf_candidates)?,
            bias_correction: self.bias_correction,
            percent_columns: Vec::new(),
            ..PipelineOptions::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub replicates: usize,
    /// Redraw covariates, random effects and households every replicate
    /// (model-based study); otherwise only the sample is redrawn.
    #[serde(default = "yes")]
    pub regenerate_population: bool,
    pub population: PopulationSpec,
    pub design: SampleDesign,
    #[serde(default)]
    pub pipeline: StudyPipeline,
}

fn yes() -> bool {
    true
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Per-area Monte-Carlo summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaStudyRow {
    pub area_id: AreaId,
    pub n_d: usize,
    pub replicates: usize,
    pub mean_truth: f64,
    pub mean_direct: f64,
    pub bias_direct: f64,
    pub mse_direct: f64,
    pub mean_eblup: f64,
    pub bias_eblup: f64,
    pub mse_eblup: f64,
    pub mean_pr_mse: f64,
    pub mean_gamma: f64,
    pub mean_direct_cv: Option<f64>,
    pub mean_eblup_cv: Option<f64>,
    /// Replicates where both CVs exist.
    pub cv_pairs: usize,
    /// Of those, replicates where the EBLUP CV is below the direct CV.
    pub eblup_cv_lower: usize,
}

impl AreaStudyRow {
    pub fn mc_se_direct(&self) -> f64 {
        // Variance of direct - truth across replicates.
        let var = (self.mse_direct - self.bias_direct * self.bias_direct).max(0.0);
        (var / self.replicates as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub replicates: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub areas: usize,
    pub mean_gamma: f64,
    pub mean_abs_bias_direct: f64,
    pub mean_abs_bias_eblup: f64,
    pub mean_mse_direct: f64,
    pub mean_mse_eblup: f64,
    pub mean_pr_mse: f64,
    /// Fraction of areas whose mean EBLUP CV is below the mean direct CV.
    pub frac_eblup_cv_lower: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub areas: Vec<AreaStudyRow>,
    pub summary: StudySummary,
}

/// One replicate: truth per area plus the pipeline's result rows.
#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub truth: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    pub results: Vec<ResultRow>,
}

pub fn run_replicate(
    config: &StudyConfig,
    fixed: Option<&SyntheticPopulation>,
    replicate: u64,
    opts: &PipelineOptions,
) -> Result<ReplicateRun> {
    let owned;
    let pop = match fixed {
        Some(p) => p,
        None => {
            owned = generate_population_replicate(&config.population, replicate)?;
            &owned
        }
    };
    let units = draw_sample_replicate(pop, &config.design, replicate)?;
    let out = pipeline::run(&units, &pop.area_table(), opts)?;
    let results: Vec<ResultRow> = out.results;
    let sample_sizes = results.iter().map(|r| r.n_d).collect();
    Ok(ReplicateRun {
        truth: pop.areas.iter().map(|a| a.truth).collect(),
        sample_sizes,
        results,
    })
}

#[derive(Default, Clone)]
struct Acc {
    n: usize,
    truth: f64,
    direct: f64,
    err_direct: f64,
    sq_direct: f64,
    eblup: f64,
    err_eblup: f64,
    sq_eblup: f64,
    pr_mse: f64,
    gamma: f64,
    direct_cv: (f64, usize),
    eblup_cv: (f64, usize),
    pairs: usize,
    lower: usize,
}

/// Runs `config.replicates` independent replicates (in parallel) and reduces
/// them in replicate order.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    if config.replicates == 0 {
        return Err(Error::Config("replicates must be >= 1".into()));
    }
    let opts = config.pipeline.options()?;
    let fixed = if config.regenerate_population {
        None
    } else {
        Some(generate_population(&config.population)?)
    };
    let runs: Vec<Result<ReplicateRun>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(config, fixed.as_ref(), r, &opts))
        .collect();

    let d = config.population.areas;
    let mut acc = vec![Acc::default(); d];
    let mut n_d = vec![0usize; d];
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        let run = match run {
            Ok(run) => run,
            Err(e) => {
                failures.push(format!("replicate {r}: {e}"));
                continue;
            }
        };
        for (i, (res, truth)) in run.results.iter().zip(&run.truth).enumerate() {
            let a = &mut acc[i];
            let direct = res.direct.unwrap_or(f64::NAN);
            a.n += 1;
            a.truth += truth;
            a.direct += direct;
            a.err_direct += direct - truth;
            a.sq_direct += (direct - truth).powi(2);
            a.eblup += res.eblup;
            a.err_eblup += res.eblup - truth;
            a.sq_eblup += (res.eblup - truth).powi(2);
            a.pr_mse += res.mse;
            a.gamma += res.gamma;
            if let Some(c) = res.direct_cv {
                a.direct_cv.0 += c;
                a.direct_cv.1 += 1;
            }
            if let Some(c) = res.eblup_cv {
                a.eblup_cv.0 += c;
                a.eblup_cv.1 += 1;
            }
            if let (Some(dc), Some(ec)) = (res.direct_cv, res.eblup_cv) {
                a.pairs += 1;
                if ec < dc {
                    a.lower += 1;
                }
            }
            if n_d[i] == 0 {
                n_d[i] = run.sample_sizes[i];
            }
        }
    }
    if failures.len() == config.replicates {
        return Err(Error::Validation(format!(
            "all {} replicates failed; first: {}",
            config.replicates, failures[0]
        )));
    }

    let rows: Vec<AreaStudyRow> = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let k = a.n as f64;
            let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
            AreaStudyRow {
                area_id: area_label(i),
                n_d: n_d[i],
                replicates: a.n,
                mean_truth: a.truth / k,
                mean_direct: a.direct / k,
                bias_direct: a.err_direct / k,
                mse_direct: a.sq_direct / k,
                mean_eblup: a.eblup / k,
                bias_eblup: a.err_eblup / k,
                mse_eblup: a.sq_eblup / k,
                mean_pr_mse: a.pr_mse / k,
                mean_gamma: a.gamma / k,
                mean_direct_cv: mean(a.direct_cv),
                mean_eblup_cv: mean(a.eblup_cv),
                cv_pairs: a.pairs,
                eblup_cv_lower: a.lower,
            }
        })
        .collect();

    let avg = |f: &dyn Fn(&AreaStudyRow) -> f64| compensated_sum(rows.iter().map(f)) / rows.len() as f64;
    let comparable: Vec<&AreaStudyRow> = rows
        .iter()
        .filter(|r| r.mean_direct_cv.is_some() && r.mean_eblup_cv.is_some())
        .collect();
    let lower = comparable
        .iter()
        .filter(|r| r.mean_eblup_cv < r.mean_direct_cv)
        .count();
    let summary = StudySummary {
        replicates: config.replicates,
        failures: failures.len(),
        failure_messages: failures,
        areas: rows.len(),
        mean_gamma: avg(&|r| r.mean_gamma),
        mean_abs_bias_direct: avg(&|r| r.bias_direct.abs()),
        mean_abs_bias_eblup: avg(&|r| r.bias_eblup.abs()),
        mean_mse_direct: avg(&|r| r.mse_direct),
        mean_mse_eblup: avg(&|r| r.mse_eblup),
        mean_pr_mse: avg(&|r| r.mean_pr_mse),
        frac_eblup_cv_lower: if comparable.is_empty() {
            0.0
        } else {
            lower as f64 / comparable.len() as f64
        },
    };
    Ok(StudyReport {
        areas: rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(areas: usize, sigma_u2: f64) -> PopulationSpec {
        PopulationSpec {
            areas,
            size_law: SizeLaw::Uniform { min: 20, max: 60 },
            covariates: vec![CovariateSpec {
                name: "x1".into(),
                low: 0.0,
                high: 0.4,
            }],
            beta: vec![0.05, 0.6],
            sigma_u2,
            seed: 11,
        }
    }

    #[test]
    fn population_is_deterministic() {
        let a = generate_population(&spec(12, 0.002)).unwrap();
        let b = generate_population(&spec(12, 0.002)).unwrap();
        assert_eq!(a, b);
        let c = generate_population_replicate(&spec(12, 0.002), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn truth_is_exact_mean() {
        let pop = generate_population(&spec(8, 0.002)).unwrap();
        for a in &pop.areas {
            let ones = a.outcomes.iter().filter(|&&y| y).count();
            assert_eq!(a.truth, ones as f64 / a.size() as f64);
            assert!(a.size() >= 1);
            assert!((PROB_MIN..=PROB_MAX).contains(&a.probability));
        }
    }

    #[test]
    fn zero_sigma_means_shared_linear_probability() {
        let pop = generate_population(&spec(10, 0.0)).unwrap();
        for a in &pop.areas {
            assert_eq!(a.u, 0.0);
            let p = (0.05 + 0.6 * a.covariates[0]).clamp(PROB_MIN, PROB_MAX);
            assert_eq!(a.probability, p);
        }
    }

    #[test]
    fn clipped_probability_is_near_degenerate() {
        let mut s = spec(5, 0.0);
        s.beta = vec![2.0, 0.0];
        s.size_law = SizeLaw::Constant { size: 4000 };
        let pop = generate_population(&s).unwrap();
        for a in &pop.areas {
            assert_eq!(a.probability, PROB_MAX);
            // 4 binomial standard deviations.
            let sd = (PROB_MAX * (1.0 - PROB_MAX) / 4000.0).sqrt();
            assert!((a.truth - PROB_MAX).abs() < 4.0 * sd + 1e-12);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(5, 0.0);
        s.size_law = SizeLaw::Uniform { min: 5, max: 2 };
        assert!(generate_population(&s).is_err());
        let mut s = spec(5, 0.0);
        s.beta = vec![0.1];
        assert!(generate_population(&s).is_err());
        let mut s = spec(5, 0.0);
        s.size_law = SizeLaw::QuartileProfile {
            knots: [5, 4, 6, 7, 8],
            inflation: 2,
        };
        assert!(generate_population(&s).is_err());
    }

    #[test]
    fn census_weights_are_one() {
        let pop = generate_population(&spec(6, 0.001)).unwrap();
        let units = draw_sample(&pop, &SampleDesign::simple_random(Allocation::Census, 3)).unwrap();
        assert!(units.iter().all(|u| u.weight() == 1.0));
        let table = crate::direct::direct_table(&units).unwrap();
        for (row, area) in table.iter().zip(&pop.areas) {
            assert_eq!(row.estimate, area.truth);
        }
    }

    #[test]
    fn oversized_sample_rejected() {
        let pop = generate_population(&spec(3, 0.001)).unwrap();
        let design = SampleDesign::simple_random(Allocation::Fixed(10_000), 3);
        assert!(draw_sample(&pop, &design).is_err());
    }

    #[test]
    fn stratified_weights_sum_to_population_size() {
        let pop = generate_population(&spec(10, 0.001)).unwrap();
        let design = SampleDesign {
            kind: DesignKind::WeightStratified { ratio: 4.0 },
            allocation: Allocation::Fraction(0.3),
            seed: 9,
        };
        let units = draw_sample(&pop, &design).unwrap();
        let table = crate::direct::direct_table(&units).unwrap();
        for (row, area) in table.iter().zip(&pop.areas) {
            assert!((row.pop_size_hat - area.size() as f64).abs() < 1e-9);
        }
        let w: Vec<f64> = units
            .iter()
            .filter(|u| u.area_id == pop.areas[0].area_id)
            .map(|u| u.weight())
            .collect();
        let (lo, hi) = w.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi / lo > 2.0, "strata weights {lo} {hi}");
    }

    #[test]
    fn quartile_profile_hits_knots() {
        let s = quartile_profile(282, [7, 47, 89, 170, 3069]);
        assert_eq!(s.len(), 282);
        assert_eq!(s[0], 7);
        assert_eq!(s[281], 3069);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f).round() as usize];
        assert!((q(0.25) as i64 - 47).abs() <= 2);
        assert!((q(0.5) as i64 - 89).abs() <= 2);
        assert!((q(0.75) as i64 - 170).abs() <= 3);
    }

    #[test]
    fn study_config_parses() {
        let text = r#"
replicates = 3
[population]
areas = 10
beta = [0.05, 0.6]
sigma_u2 = 0.001
seed = 1
size_law = { kind = "uniform", min = 20, max = 50 }
covariates = [{ name = "x1", low = 0.0, high = 0.4 }]
[design]
kind = { kind = "simple-random" }
allocation = { fraction = 0.5 }
seed = 2
[pipeline]
delta = 0.001
gvf_candidates = ["full"]
"#;
        let cfg = StudyConfig::from_toml(text).unwrap();
        assert_eq!(cfg.replicates, 3);
        assert!(cfg.regenerate_population);
        assert_eq!(cfg.design.allocation, Allocation::Fraction(0.5));
        let opts = cfg.pipeline.options().unwrap();
        assert_eq!(opts.delta, pipeline::DeltaPolicy::Fixed(0.001));
        assert_eq!(opts.gvf_candidates, pipeline::GvfCandidates::Full);
    }
}
