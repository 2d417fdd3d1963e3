//! M-nearest-neighbour matching with replacement across treatment arms.
//!
//! Distances are Euclidean on the matching variables. Ties go to the lower
//! row index, so results depend on row order. The search is brute force.

use serde::{Deserialize, Serialize};

use crate::data::{CovariateSet, Covariates, View};
use crate::estimating::ModelFit;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceScaling {
    Raw,
    /// Each matching variable divided by its sample standard deviation.
    Standardized,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// For each unit, its M nearest opposite-arm units, nearest first.
    pub match_sets: Vec<Vec<usize>>,
    /// Unweighted K_j: how often unit j is used as a match.
    pub counts: Vec<f64>,
    pub matching_vars: CovariateSet,
    pub m: usize,
}

impl MatchResult {
    /// K_j = π_j Σ_l π_l⁻¹ 1{j ∈ J_l}, written with weights w = π⁻¹.
    /// Unit weights give the plain counts.
    pub fn weighted_counts(&self, weights: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.match_sets.len()];
        for (l, set) in self.match_sets.iter().enumerate() {
            for &j in set {
                k[j] += weights[l];
            }
        }
        k.iter_mut().zip(weights).for_each(|(kj, w)| *kj /= w);
        k
    }
}

pub fn find_matches(
    view: &View,
    matching_vars: CovariateSet,
    m: usize,
    scaling: DistanceScaling,
) -> Result<MatchResult> {
    if m == 0 {
        return Err(Error::InvalidInput("M must be at least 1".into()));
    }
    let cov = scaled_covariates(view, matching_vars, scaling)?;
    let a = view.treatments();
    let arms: [Vec<usize>; 2] = [
        (0..a.len()).filter(|&i| a[i] == 0).collect(),
        (0..a.len()).filter(|&i| a[i] == 1).collect(),
    ];
    if arms[0].len() < m || arms[1].len() < m {
        return Err(Error::Data(format!(
            "each arm needs at least M = {m} units (have {} control, {} treated)",
            arms[0].len(),
            arms[1].len()
        )));
    }
    let mut match_sets = Vec::with_capacity(a.len());
    let mut counts = vec![0.0; a.len()];
    // (distance, index) pairs kept sorted; candidates arrive in index order
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
    for j in 0..a.len() {
        let xj = cov.row(j);
        best.clear();
        for &l in &arms[1 - a[j] as usize] {
            let d: f64 = xj.iter().zip(cov.row(l)).map(|(p, q)| (p - q) * (p - q)).sum();
            if best.len() == m && d >= best[m - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, l));
            best.truncate(m);
        }
        let set: Vec<usize> = best.iter().map(|&(_, l)| l).collect();
        for &l in &set {
            counts[l] += 1.0;
        }
        match_sets.push(set);
    }
    Ok(MatchResult { match_sets, counts, matching_vars, m })
}

fn scaled_covariates(view: &View, set: CovariateSet, scaling: DistanceScaling) -> Result<Covariates> {
    let mut cov = view.covariates(set, false)?;
    if scaling == DistanceScaling::Standardized && cov.n > 1 {
        for c in 0..cov.k {
            let n = cov.n as f64;
            let mean = (0..cov.n).map(|i| cov.row(i)[c]).sum::<f64>() / n;
            let var = (0..cov.n).map(|i| (cov.row(i)[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if !(var > 0.0) {
                return Err(Error::Data(format!(
                    "matching variable '{}' has zero variance",
                    cov.names[c]
                )));
            }
            let sd = var.sqrt();
            for i in 0..cov.n {
                cov.data[i * cov.k + c] /= sd;
            }
        }
    }
    Ok(cov)
}

/// τ̂⁰ = Σ w_j (2A_j−1)(Y_j − M⁻¹Σ_{l∈J_j} Y_l) / Σ w_j.
pub fn matching_estimate_raw(view: &View, matches: &MatchResult, weights: &[f64]) -> f64 {
    let a = view.treatments();
    let y = view.outcomes();
    let m = matches.m as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, set) in matches.match_sets.iter().enumerate() {
        let imputed = set.iter().map(|&l| y[l]).sum::<f64>() / m;
        num += weights[j] * sign(a[j]) * (y[j] - imputed);
        den += weights[j];
    }
    num / den
}

pub(crate) fn sign(a: u8) -> f64 {
    if a == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Plug-in matching-discrepancy bias, subtracted from τ̂⁰. `mu0` and `mu1`
/// must be fitted on the matching variables.
pub fn bias_correction(
    view: &View,
    matches: &MatchResult,
    mu0: &ModelFit,
    mu1: &ModelFit,
    weights: &[f64],
) -> Result<f64> {
    let pred = fitted_values(view, matches.matching_vars, [mu0, mu1])?;
    let a = view.treatments();
    let m = matches.m as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, set) in matches.match_sets.iter().enumerate() {
        let other = &pred[1 - a[j] as usize];
        let disc = set.iter().map(|&l| other[j] - other[l]).sum::<f64>() / m;
        num += weights[j] * sign(a[j]) * disc;
        den += weights[j];
    }
    Ok(num / den)
}

/// μ̂₀ and μ̂₁ evaluated at every unit of the view.
pub(crate) fn fitted_values(view: &View, vars: CovariateSet, fits: [&ModelFit; 2]) -> Result<[Vec<f64>; 2]> {
    let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (arm, fit) in fits.iter().enumerate() {
        if fit.spec.covariate_set != vars {
            return Err(Error::InvalidInput(
                "bias-correction models must use the matching variables".into(),
            ));
        }
        let cov = view.covariates(vars, fit.spec.include_intercept)?;
        out[arm] = (0..cov.n).map(|i| fit.predict_row(cov.row(i))).collect();
    }
    Ok(out)
}
