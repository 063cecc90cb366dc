//! Design-weighted direct estimates of area prevalences.
//!
//! For the sampled households `s_d` of an area with expansion factors `w_j`
//! and binary outcomes `y_j`:
//!
//! ```text
//! N_d    = sum w_j
//! Ybar_d = sum w_j y_j / N_d
//! var_d  = N_d^-2 sum w_j (w_j - 1) (y_j - Ybar_d)^2
//! cv_d   = sqrt(var_d) / Ybar_d
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::KahanSum;

/// Opaque area identifier (municipality code, name, ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(String);

impl AreaId {
    pub fn new(id: impl Into<String>) -> Self {
        AreaId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AreaId {
    fn from(s: &str) -> Self {
        AreaId(s.to_owned())
    }
}

impl From<String> for AreaId {
    fn from(s: String) -> Self {
        AreaId(s)
    }
}

/// One sampled household.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub area_id: AreaId,
    weight: f64,
    outcome: bool,
}

impl UnitRecord {
    pub fn new(area_id: impl Into<AreaId>, weight: f64, outcome: bool) -> Result<Self> {
        check_weight(weight)?;
        Ok(UnitRecord {
            area_id: area_id.into(),
            weight,
            outcome,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn outcome(&self) -> bool {
        self.outcome
    }

    fn y(&self) -> f64 {
        if self.outcome {
            1.0
        } else {
            0.0
        }
    }
}

fn check_weight(w: f64) -> Result<()> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidWeight(w))
    }
}

/// Direct estimate for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaDirect {
    pub area_id: AreaId,
    pub estimate: f64,
    pub design_variance: f64,
    pub sample_size: usize,
    pub pop_size_hat: f64,
    /// `None` exactly when `estimate == 0`.
    pub cv: Option<f64>,
    /// Set for single-unit areas and for estimates of exactly 0 or 1, whose
    /// variance estimate is 0 by construction and carries no information.
    pub degenerate_variance: bool,
}

/// Units sorted by (weight, outcome) so sums do not depend on input order.
fn canonical<'a>(units: &[&'a UnitRecord]) -> Result<Vec<&'a UnitRecord>> {
    if units.is_empty() {
        return Err(Error::EmptyArea);
    }
    for u in units {
        check_weight(u.weight)?;
    }
    let mut sorted = units.to_vec();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight).then(a.outcome.cmp(&b.outcome)));
    Ok(sorted)
}

/// Hájek weighted mean. Returns `(estimate, pop_size_hat)`.
pub fn hajek_mean(units: &[&UnitRecord]) -> Result<(f64, f64)> {
    let units = canonical(units)?;
    Ok(mean_sorted(&units))
}

fn mean_sorted(units: &[&UnitRecord]) -> (f64, f64) {
    let mut n_hat = KahanSum::new();
    let mut total = KahanSum::new();
    for u in units {
        n_hat.add(u.weight);
        total.add(u.weight * u.y());
    }
    let n_hat = n_hat.value();
    let estimate = (total.value() / n_hat).clamp(0.0, 1.0);
    (estimate, n_hat)
}

/// Design variance of the Hájek mean, `N^-2 sum w (w - 1) (y - estimate)^2`.
pub fn hajek_variance(units: &[&UnitRecord], estimate: f64, pop_size_hat: f64) -> Result<f64> {
    let units = canonical(units)?;
    Ok(variance_sorted(&units, estimate, pop_size_hat))
}

fn variance_sorted(units: &[&UnitRecord], estimate: f64, pop_size_hat: f64) -> f64 {
    let ss: KahanSum = units
        .iter()
        .map(|u| {
            let r = u.y() - estimate;
            u.weight * (u.weight - 1.0) * r * r
        })
        .collect();
    // w in (0, 1) makes individual terms negative; the total can dip below 0.
    (ss.value() / (pop_size_hat * pop_size_hat)).max(0.0)
}

/// Estimated coefficient of variation, undefined at zero prevalence.
pub fn direct_cv(estimate: f64, design_variance: f64) -> Option<f64> {
    if estimate > 0.0 {
        Some(design_variance.max(0.0).sqrt() / estimate)
    } else {
        None
    }
}

/// Direct estimate for the units of a single area.
pub fn area_direct(area_id: &AreaId, units: &[&UnitRecord]) -> Result<AreaDirect> {
    let sorted = canonical(units).map_err(|e| e.in_area(area_id))?;
    let (estimate, pop_size_hat) = mean_sorted(&sorted);
    let design_variance = variance_sorted(&sorted, estimate, pop_size_hat);
    let sample_size = sorted.len();
    Ok(AreaDirect {
        area_id: area_id.clone(),
        estimate,
        design_variance,
        sample_size,
        pop_size_hat,
        cv: direct_cv(estimate, design_variance),
        degenerate_variance: sample_size == 1 || estimate == 0.0 || estimate == 1.0,
    })
}

/// One row per distinct area in `units`, ordered by area id.
pub fn direct_table(units: &[UnitRecord]) -> Result<Vec<AreaDirect>> {
    let mut groups: BTreeMap<&AreaId, Vec<&UnitRecord>> = BTreeMap::new();
    for u in units {
        groups.entry(&u.area_id).or_default().push(u);
    }
    groups
        .into_iter()
        .map(|(id, members)| area_direct(id, &members))
        .collect()
}
