//! Versioned plain-text `key = value` model file.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parsed model reproduces the fitted parameters bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fh::{AreaModelRow, FhFit};
use crate::gvf::{GvfDesign, GvfFit};

pub const FORMAT_NAME: &str = "fhsae-model";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to re-apply a fitted pipeline to new data.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub gvf: GvfFit,
    pub subtract_delta: bool,
    /// FH design column names, first is `intercept`.
    pub fh_covariates: Vec<String>,
    pub fh: FhFit,
    pub n_areas: usize,
    /// SHA-256 over `area_id,error_variance` lines of the training rows.
    pub error_variance_digest: String,
}

pub fn error_variance_digest(rows: &[AreaModelRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(format!("{},{}\n", r.area_id, r.error_variance).as_bytes());
    }
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl FittedModel {
    pub fn new(
        gvf: GvfFit,
        subtract_delta: bool,
        fh_covariates: Vec<String>,
        mut fh: FhFit,
        rows: &[AreaModelRow],
    ) -> Self {
        fh.loglik_trace.clear();
        FittedModel {
            gvf,
            subtract_delta,
            fh_covariates,
            fh,
            n_areas: rows.len(),
            error_variance_digest: error_variance_digest(rows),
        }
    }

    pub fn to_text(&self) -> String {
        let g = &self.gvf;
        let f = &self.fh;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("format", FORMAT_NAME.into());
        kv("version", FORMAT_VERSION.to_string());
        kv("gvf.design", g.design.to_string());
        kv("gvf.coefficients", join(&g.coefficients));
        kv("gvf.std_errors", join(&g.std_errors));
        kv("gvf.residual_variance", g.residual_variance.to_string());
        kv("gvf.delta", g.delta.to_string());
        kv("gvf.log_likelihood", g.log_likelihood.to_string());
        kv("gvf.aic", g.aic.to_string());
        kv("gvf.n_obs", g.n_obs.to_string());
        kv("gvf.bias_correction", g.bias_correction.to_string());
        kv("gvf.subtract_delta", self.subtract_delta.to_string());
        kv("fh.covariates", self.fh_covariates.join(","));
        kv("fh.beta", join(&f.beta_hat));
        kv("fh.beta_covariance", join(&f.beta_covariance));
        kv("fh.sigma_u2", f.sigma_u2_hat.to_string());
        kv("fh.reml_loglik", f.reml_loglik.to_string());
        kv("fh.ml_loglik", f.ml_loglik.to_string());
        kv("fh.aic", f.aic.to_string());
        kv("fh.converged", f.converged.to_string());
        kv("fh.iterations", f.iterations.to_string());
        kv("fh.areas", self.n_areas.to_string());
        kv(
            "fh.error_variance_digest",
            format!("sha256:{}", self.error_variance_digest),
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Model(format!("line {}: expected `key = value`", i + 1)))?;
            if map.insert(k.trim().to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::Model(format!("duplicate key `{}`", k.trim())));
            }
        }
        let r = Reader(&map);
        if r.str("format")? != FORMAT_NAME {
            return Err(Error::Model("not an fhsae model file".into()));
        }
        let version: u32 = r.num("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Model(format!("unsupported version {version}")));
        }
        let design: GvfDesign = r.str("gvf.design")?.parse()?;
        let coefficients = r.floats("gvf.coefficients")?;
        if coefficients.len() != design.width() {
            return Err(Error::Model("gvf.coefficients does not match gvf.design".into()));
        }
        let gvf = GvfFit {
            design,
            coefficients,
            std_errors: r.floats("gvf.std_errors")?,
            residual_variance: r.num("gvf.residual_variance")?,
            delta: r.num("gvf.delta")?,
            log_likelihood: r.num("gvf.log_likelihood")?,
            aic: r.num("gvf.aic")?,
            n_obs: r.num("gvf.n_obs")?,
            bias_correction: r.num("gvf.bias_correction")?,
        };
        let fh_covariates: Vec<String> = r
            .str("fh.covariates")?
            .split(',')
            .map(|s| s.trim().to_owned())
            .collect();
        let beta_hat = r.floats("fh.beta")?;
        let beta_covariance = r.floats("fh.beta_covariance")?;
        if beta_hat.len() != fh_covariates.len()
            || beta_covariance.len() != beta_hat.len() * beta_hat.len()
        {
            return Err(Error::Model("fh.beta dimensions do not match fh.covariates".into()));
        }
        let fh = FhFit {
            beta_hat,
            sigma_u2_hat: r.num("fh.sigma_u2")?,
            reml_loglik: r.num("fh.reml_loglik")?,
            ml_loglik: r.num("fh.ml_loglik")?,
            aic: r.num("fh.aic")?,
            converged: r.num("fh.converged")?,
            iterations: r.num("fh.iterations")?,
            beta_covariance,
            loglik_trace: Vec::new(),
        };
        let digest = r.str("fh.error_variance_digest")?;
        Ok(FittedModel {
            gvf,
            subtract_delta: r.num("gvf.subtract_delta")?,
            fh_covariates,
            fh,
            n_areas: r.num("fh.areas")?,
            error_variance_digest: digest.strip_prefix("sha256:").unwrap_or(digest).to_owned(),
        })
    }
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn str(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Model(format!("missing key `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Model(format!("bad value for `{key}`: `{v}`")))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.str(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::Model(format!("bad number in `{key}`: `{x}`")))
            })
            .collect()
    }
}
