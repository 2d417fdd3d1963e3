//! Control-variate fusion of the initial estimator with error-prone
//! differences.
//!
//! Γ̂, V̂ and v̂₂ are reported on the scale of `n₂ · Cov`, so that
//! `v̂ = (v̂₂ − Γ̂ᵀV̂⁻¹Γ̂) / n₂` in every regime and for every variance source.
//! Bootstrap (co)variances of replicate deviations are multiplied by n₂ to
//! land on that scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::HashMap;

use crate::data::Design;
use crate::estimators::{EstimateWithExpansion, Method};
use crate::{Error, Result};

/// V̂ is treated as singular above this condition number.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapScheme {
    /// n₁ draws from S₁ with replacement.
    JointResample,
    /// n₂ draws from S₂ and n₁ − n₂ from S₁∖S₂.
    StratifiedResample,
    /// n₁ draws from S₁ with π⁻¹-weighted validation totals.
    WeightedExpansion,
    /// n₂ draws from S₂ only; the main-data estimator is treated as fixed.
    ValidationOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub b: usize,
    pub seed: u64,
    pub scheme: BootstrapScheme,
}

impl BootstrapSpec {
    /// The scheme matching a sampling design.
    pub fn for_design(design: Design, b: usize, seed: u64) -> Self {
        let scheme = match design {
            Design::SimpleRandom => BootstrapScheme::JointResample,
            Design::KnownInclusion => BootstrapScheme::WeightedExpansion,
        };
        Self { b, seed, scheme }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceSource {
    Analytic,
    Bootstrap(BootstrapSpec),
}

#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub tau2: EstimateWithExpansion,
    /// (estimate on S₁, estimate on S₂) per error-prone component.
    pub ep_pairs: Vec<(EstimateWithExpansion, EstimateWithExpansion)>,
    pub regime: Design,
}

impl FusionInputs {
    pub fn n1(&self) -> usize {
        self.ep_pairs.first().map_or(0, |p| p.0.expansion.len())
    }

    pub fn n2(&self) -> usize {
        self.tau2.expansion.len()
    }

    pub fn ep_diff(&self) -> Vec<f64> {
        self.ep_pairs.iter().map(|(m, v)| v.point - m.point).collect()
    }

    fn check(&self) -> Result<()> {
        if self.ep_pairs.is_empty() {
            return Err(Error::InvalidInput("at least one error-prone pair is needed".into()));
        }
        let n1 = self.n1();
        for (m, v) in &self.ep_pairs {
            if m.kind.method != v.kind.method || m.target != v.target {
                return Err(Error::InvalidInput("pair members must share method and target".into()));
            }
            if m.expansion.len() != n1 || m.rows.iter().enumerate().any(|(i, &r)| i != r) {
                return Err(Error::InvalidInput("main-data estimates must cover S₁ in row order".into()));
            }
            if v.rows != self.tau2.rows {
                return Err(Error::InvalidInput(
                    "validation estimates must cover the same units as the initial estimate".into(),
                ));
            }
        }
        if self.n2() > n1 {
            return Err(Error::InvalidInput("validation sample larger than main sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaV {
    pub gamma: DVector<f64>,
    pub v: DMatrix<f64>,
    pub v2: f64,
    /// Bootstrap replicates redrawn for an empty validation arm.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostics {
    /// Condition number of the full V̂ (infinite when singular).
    pub condition_number: f64,
    pub fallback: bool,
    /// Error-prone components dropped from the solve.
    pub dropped: Vec<usize>,
    pub bootstrap_redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub tau_hat: f64,
    pub tau2: f64,
    pub ep_diff: Vec<f64>,
    pub gamma: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub v2: f64,
    pub v_hat: f64,
    pub n2: usize,
    /// V̂⁻¹Γ̂ on the retained components, zero elsewhere.
    pub coefficients: Vec<f64>,
    pub ci: ConfidenceInterval,
    pub variance_reduction: f64,
    pub diagnostics: FusionDiagnostics,
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Analytic Γ̂, V̂, v̂₂. Matching has no analytic path.
pub fn analytic_gamma_v(inputs: &FusionInputs) -> Result<GammaV> {
    inputs.check()?;
    let uses_matching = inputs.tau2.kind.method == Method::Matching
        || inputs.ep_pairs.iter().any(|(m, _)| m.kind.method == Method::Matching);
    if uses_matching {
        return Err(Error::InvalidInput(
            "no analytic variance for matching estimators; use the bootstrap".into(),
        ));
    }
    let n1 = inputs.n1();
    let n2 = inputs.n2();
    let l = inputs.ep_pairs.len();
    let rho = n2 as f64 / n1 as f64;
    let psi = &inputs.tau2.expansion;
    let mut gamma = DVector::zeros(l);
    let mut v = DMatrix::zeros(l, l);
    let v2;
    match inputs.regime {
        Design::SimpleRandom => {
            v2 = mean(psi.iter().map(|p| p * p), n2);
            for (a, (ma, va)) in inputs.ep_pairs.iter().enumerate() {
                gamma[a] = (1.0 - rho) * mean(psi.iter().zip(&va.expansion).map(|(p, f)| p * f), n2);
                for (b, (mb, _)) in inputs.ep_pairs.iter().enumerate().skip(a) {
                    let s = (1.0 - rho)
                        * mean(ma.expansion.iter().zip(&mb.expansion).map(|(f, g)| f * g), n1);
                    v[(a, b)] = s;
                    v[(b, a)] = s;
                }
            }
        }
        Design::KnownInclusion => {
            // per-unit contributions over S₁: aᵢ = Iπ⁻¹ψ, dᵢ = Iπ⁻¹φ₂ − φ₁
            let w = &inputs.tau2.weights;
            let mut a_i = vec![0.0; n1];
            let mut d_i = vec![vec![0.0; n1]; l];
            for (c, (m, _)) in inputs.ep_pairs.iter().enumerate() {
                for i in 0..n1 {
                    d_i[c][i] = -m.expansion[i];
                }
            }
            for (j, &row) in inputs.tau2.rows.iter().enumerate() {
                a_i[row] = w[j] * psi[j];
                for (c, (_, val)) in inputs.ep_pairs.iter().enumerate() {
                    d_i[c][row] += val.weights[j] * val.expansion[j];
                }
            }
            v2 = rho * mean(a_i.iter().map(|a| a * a), n1);
            for a in 0..l {
                gamma[a] = rho * mean(a_i.iter().zip(&d_i[a]).map(|(x, y)| x * y), n1);
                for b in a..l {
                    let s = rho * mean(d_i[a].iter().zip(&d_i[b]).map(|(x, y)| x * y), n1);
                    v[(a, b)] = s;
                    v[(b, a)] = s;
                }
            }
        }
    }
    Ok(GammaV { gamma, v, v2, redraws: 0 })
}

/// A mean of frozen expansion values over the drawn units of one sample.
struct LinearStat {
    /// Value per universe unit; `None` outside the statistic's sample.
    values: Vec<Option<f64>>,
    /// Divide by this instead of the drawn member count.
    fixed_denominator: Option<f64>,
}

impl LinearStat {
    fn evaluate(&self, draws: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in draws {
            if let Some(v) = self.values[i] {
                sum += v;
                count += 1;
            }
        }
        match self.fixed_denominator {
            Some(d) => sum / d,
            None if count > 0 => sum / count as f64,
            None => 0.0,
        }
    }
}

/// The resampling problem: a universe of units, optional strata, the
/// validation arm of each unit, and the statistics whose deviations are
/// tracked. Replicate rows are `[δτ̂₂, δdiff₁, …, δdiff_L]`.
struct Resampler {
    n: usize,
    /// Draw this many from each stratum; `None` draws n from everything.
    strata: Option<Vec<Vec<usize>>>,
    arm: Vec<Option<u8>>,
    tau: LinearStat,
    /// (validation-side, main-side) statistic per component; a missing main
    /// side counts as fixed.
    diffs: Vec<(LinearStat, Option<LinearStat>)>,
}

impl Resampler {
    fn draw(&self, rng: &mut ChaCha8Rng, draws: &mut Vec<usize>) {
        draws.clear();
        match &self.strata {
            None => draws.extend((0..self.n).map(|_| rng.random_range(0..self.n))),
            Some(strata) => {
                for s in strata {
                    draws.extend((0..s.len()).map(|_| s[rng.random_range(0..s.len())]));
                }
            }
        }
    }

    fn both_arms(&self, draws: &[usize]) -> bool {
        let mut seen = [false; 2];
        for &i in draws {
            if let Some(a) = self.arm[i] {
                seen[a as usize] = true;
            }
        }
        seen[0] && seen[1]
    }

    fn replicate(&self, seed: u64, b: usize) -> Result<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut draws = Vec::with_capacity(self.n);
        let mut redraws = 0;
        loop {
            self.draw(&mut rng, &mut draws);
            if self.both_arms(&draws) {
                break;
            }
            redraws += 1;
            if redraws > 1000 {
                return Err(Error::Numerical(
                    "bootstrap keeps drawing a validation sample with an empty arm; use StratifiedResample".into(),
                ));
            }
        }
        let mut row = Vec::with_capacity(1 + self.diffs.len());
        row.push(self.tau.evaluate(&draws));
        for (val, main) in &self.diffs {
            let m = main.as_ref().map_or(0.0, |s| s.evaluate(&draws));
            row.push(val.evaluate(&draws) - m);
        }
        Ok((row, redraws))
    }

    fn run(&self, spec: &BootstrapSpec, n2: usize) -> Result<GammaV> {
        if spec.b < 2 {
            return Err(Error::InvalidInput("bootstrap needs B ≥ 2".into()));
        }
        let reps: Vec<(Vec<f64>, usize)> = (0..spec.b)
            .into_par_iter()
            .map(|b| self.replicate(spec.seed, b))
            .collect::<Result<_>>()?;
        let redraws: usize = reps.iter().map(|r| r.1).sum();
        if redraws * 2 > spec.b {
            return Err(Error::Numerical(format!(
                "{redraws} of {} bootstrap replicates had an empty validation arm; use StratifiedResample",
                spec.b
            )));
        }
        let rows: Vec<Vec<f64>> = reps.into_iter().map(|r| r.0).collect();
        let cov = covariance(&rows);
        let l = self.diffs.len();
        let scale = n2 as f64;
        let gamma = DVector::from_iterator(l, (0..l).map(|c| scale * cov[(0, c + 1)]));
        let v = DMatrix::from_fn(l, l, |r, c| scale * cov[(r + 1, c + 1)]);
        Ok(GammaV { gamma, v, v2: scale * cov[(0, 0)], redraws })
    }
}

/// Sample covariance with divisor B − 1, accumulated in replicate order.
fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows[0].len();
    let b = rows.len() as f64;
    let mut mu = vec![0.0; k];
    for r in rows {
        mu.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= b);
    let mut c = DMatrix::zeros(k, k);
    for r in rows {
        for i in 0..k {
            let di = r[i] - mu[i];
            for j in i..k {
                c[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            c[(i, j)] /= b - 1.0;
            c[(j, i)] = c[(i, j)];
        }
    }
    c
}

/// Bootstrap Γ̂, V̂, v̂₂ from frozen expansions.
pub fn bootstrap_gamma_v(inputs: &FusionInputs, spec: &BootstrapSpec) -> Result<GammaV> {
    inputs.check()?;
    let n1 = inputs.n1();
    let n2 = inputs.n2();
    let t2 = &inputs.tau2;
    let mut arm = vec![None; n1];
    for (j, &row) in t2.rows.iter().enumerate() {
        arm[row] = Some(t2.treatments[j]);
    }
    // validation-side values indexed by universe row
    let on_validation = |e: &EstimateWithExpansion, weighted: bool| -> Vec<Option<f64>> {
        let mut v = vec![None; n1];
        for (j, &row) in e.rows.iter().enumerate() {
            let w = if weighted { e.weights[j] } else { 1.0 };
            v[row] = Some(w * e.expansion[j]);
        }
        v
    };
    let whole = |e: &EstimateWithExpansion| -> Vec<Option<f64>> { e.expansion.iter().map(|&x| Some(x)).collect() };
    let stat = |values, fixed_denominator| LinearStat { values, fixed_denominator };

    let resampler = match spec.scheme {
        BootstrapScheme::JointResample | BootstrapScheme::StratifiedResample => {
            if inputs.regime == Design::KnownInclusion {
                return Err(Error::InvalidInput(
                    "known-inclusion data need the WeightedExpansion bootstrap".into(),
                ));
            }
            let strata = (spec.scheme == BootstrapScheme::StratifiedResample).then(|| {
                let (val, rest): (Vec<usize>, Vec<usize>) = (0..n1).partition(|&i| arm[i].is_some());
                vec![val, rest]
            });
            Resampler {
                n: n1,
                strata,
                arm,
                tau: stat(on_validation(t2, false), None),
                diffs: inputs
                    .ep_pairs
                    .iter()
                    .map(|(m, v)| (stat(on_validation(v, false), None), Some(stat(whole(m), Some(n1 as f64)))))
                    .collect(),
            }
        }
        BootstrapScheme::WeightedExpansion => {
            let d = Some(n1 as f64);
            Resampler {
                n: n1,
                strata: None,
                arm,
                tau: stat(on_validation(t2, true), d),
                diffs: inputs
                    .ep_pairs
                    .iter()
                    .map(|(m, v)| (stat(on_validation(v, true), d), Some(stat(whole(m), d))))
                    .collect(),
            }
        }
        BootstrapScheme::ValidationOnly => {
            let weighted = inputs.regime == Design::KnownInclusion;
            let val_rows: Vec<usize> = (0..n1).filter(|&i| arm[i].is_some()).collect();
            let den = weighted.then(|| t2.weights.iter().sum::<f64>());
            Resampler {
                n: n1,
                strata: Some(vec![val_rows]),
                arm,
                tau: stat(on_validation(t2, weighted), den),
                diffs: inputs.ep_pairs.iter().map(|(_, v)| (stat(on_validation(v, weighted), den), None)).collect(),
            }
        }
    };
    resampler.run(spec, n2)
}

fn z_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput("confidence level must lie in (0,1)".into()));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(normal.inverse_cdf((1.0 + level) / 2.0))
}

fn condition_number(v: &DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(v.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    (cond, eig.eigenvalues, eig.eigenvectors)
}

/// τ̂ = τ̂₂ − Γ̂ᵀV̂⁻¹diff and v̂ = (v̂₂ − Γ̂ᵀV̂⁻¹Γ̂)/n₂, dropping error-prone
/// components while V̂ is numerically singular.
#[allow(clippy::too_many_arguments)]
pub fn combine(
    tau2: f64,
    ep_diff: &[f64],
    gamma: &DVector<f64>,
    v: &DMatrix<f64>,
    v2: f64,
    n2: usize,
    level: f64,
    redraws: usize,
) -> Result<FusionResult> {
    let l = ep_diff.len();
    if gamma.len() != l || v.nrows() != l || v.ncols() != l {
        return Err(Error::InvalidInput("Γ̂, V̂ and the difference vector disagree in size".into()));
    }
    let z = z_value(level)?;
    let (full_cond, _, _) = if l > 0 { condition_number(v) } else { (f64::INFINITY, DVector::zeros(0), DMatrix::zeros(0, 0)) };
    let mut active: Vec<usize> = (0..l).collect();
    let mut dropped = Vec::new();
    let mut coefficients = vec![0.0; l];
    while !active.is_empty() {
        let sub = DMatrix::from_fn(active.len(), active.len(), |r, c| v[(active[r], active[c])]);
        let (cond, vals, vecs) = condition_number(&sub);
        if cond <= MAX_CONDITION {
            if let Some(ch) = sub.clone().cholesky() {
                let g = DVector::from_iterator(active.len(), active.iter().map(|&i| gamma[i]));
                let x = ch.solve(&g);
                for (k, &i) in active.iter().enumerate() {
                    coefficients[i] = x[k];
                }
                break;
            }
        }
        // drop the component loading most on the smallest-eigenvalue direction
        let small = vals.imin();
        let col = vecs.column(small);
        let mut worst = 0;
        for k in 1..active.len() {
            if col[k].abs() > col[worst].abs() {
                worst = k;
            }
        }
        dropped.push(active.remove(worst));
    }
    let fallback = !dropped.is_empty();
    let adjust: f64 = (0..l).map(|i| coefficients[i] * ep_diff[i]).sum();
    let reduction: f64 = (0..l).map(|i| coefficients[i] * gamma[i]).sum();
    let tau_hat = tau2 - adjust;
    let v_hat = (v2 - reduction) / n2 as f64;
    let half = z * v_hat.max(0.0).sqrt();
    dropped.sort_unstable();
    Ok(FusionResult {
        tau_hat,
        tau2,
        ep_diff: ep_diff.to_vec(),
        gamma: gamma.iter().copied().collect(),
        v: (0..l).map(|r| (0..l).map(|c| v[(r, c)]).collect()).collect(),
        v2,
        v_hat,
        n2,
        coefficients,
        ci: ConfidenceInterval { lo: tau_hat - half, hi: tau_hat + half, level },
        variance_reduction: if v2 > 0.0 { reduction / v2 } else { 0.0 },
        diagnostics: FusionDiagnostics { condition_number: full_cond, fallback, dropped, bootstrap_redraws: redraws },
    })
}

pub fn gamma_v(inputs: &FusionInputs, source: &VarianceSource) -> Result<GammaV> {
    match source {
        VarianceSource::Analytic => analytic_gamma_v(inputs),
        VarianceSource::Bootstrap(spec) => bootstrap_gamma_v(inputs, spec),
    }
}

pub fn fuse(inputs: &FusionInputs, source: &VarianceSource, level: f64) -> Result<FusionResult> {
    let gv = gamma_v(inputs, source)?;
    combine(inputs.tau2.point, &inputs.ep_diff(), &gv.gamma, &gv.v, gv.v2, inputs.n2(), level, gv.redraws)
}

/// Report for the initial estimator alone, with variance v̂₂/n₂.
pub fn initial_only(tau2: f64, v2: f64, n2: usize, level: f64) -> Result<FusionResult> {
    combine(tau2, &[], &DVector::zeros(0), &DMatrix::zeros(0, 0), v2, n2, level, 0)
}

/// One error-prone component from another source O_d, paired with the same
/// procedure on the common validation source O_K.
#[derive(Debug, Clone)]
pub struct SourcePair {
    pub main: EstimateWithExpansion,
    pub validation: EstimateWithExpansion,
    /// Unit ids of O_d, indexed by `main.rows`.
    pub main_ids: Vec<String>,
}

/// Fusion over several main sources, each containing the validation units.
/// `validation_ids` are the ids of O_K, indexed by `tau_k.rows`.
pub fn fuse_multi(
    tau_k: &EstimateWithExpansion,
    validation_ids: &[String],
    pairs: &[SourcePair],
    source: &VarianceSource,
    level: f64,
) -> Result<FusionResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("at least one source pair is needed".into()));
    }
    // union of all unit ids, in first-seen order over the pairs
    let mut index: HashMap<&str, usize> = HashMap::new();
    let ids_of = |e: &EstimateWithExpansion, ids: &[String]| -> Result<Vec<String>> {
        e.rows
            .iter()
            .map(|&r| ids.get(r).cloned().ok_or_else(|| Error::InvalidInput("row outside id list".into())))
            .collect()
    };
    let k_ids = ids_of(tau_k, validation_ids)?;
    let main_ids: Vec<Vec<String>> = pairs.iter().map(|p| ids_of(&p.main, &p.main_ids)).collect::<Result<_>>()?;
    for ids in &main_ids {
        for id in ids {
            let next = index.len();
            index.entry(id.as_str()).or_insert(next);
        }
    }
    let k_univ: Vec<usize> = k_ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::InvalidInput(format!("validation unit {id} is missing from a main source"))))
        .collect::<Result<_>>()?;
    let main_univ: Vec<Vec<usize>> = main_ids.iter().map(|ids| ids.iter().map(|id| index[id.as_str()]).collect()).collect();
    for (p, univ) in pairs.iter().zip(&main_univ) {
        if p.validation.rows != tau_k.rows {
            return Err(Error::InvalidInput("validation-side estimates must cover the initial estimate's units".into()));
        }
        let members: std::collections::HashSet<usize> = univ.iter().copied().collect();
        if k_univ.iter().any(|u| !members.contains(u)) {
            return Err(Error::InvalidInput("each main source must contain every validation unit".into()));
        }
    }
    let n_univ = index.len();
    let nk = tau_k.expansion.len();
    let l = pairs.len();
    let psi = &tau_k.expansion;
    let ep_diff: Vec<f64> = pairs.iter().map(|p| p.validation.point - p.main.point).collect();

    let gv = match source {
        VarianceSource::Analytic => {
            if tau_k.kind.method == Method::Matching || pairs.iter().any(|p| p.main.kind.method == Method::Matching) {
                return Err(Error::InvalidInput("no analytic variance for matching estimators; use the bootstrap".into()));
            }
            let v2 = mean(psi.iter().map(|p| p * p), nk);
            let mut gamma = DVector::zeros(l);
            // main expansions as universe-indexed maps
            let dense: Vec<Vec<Option<f64>>> = pairs
                .iter()
                .zip(&main_univ)
                .map(|(p, univ)| {
                    let mut v = vec![None; n_univ];
                    for (j, &u) in univ.iter().enumerate() {
                        v[u] = Some(p.main.expansion[j]);
                    }
                    v
                })
                .collect();
            let mut v = DMatrix::zeros(l, l);
            for a in 0..l {
                let nd = pairs[a].main.expansion.len() as f64;
                gamma[a] = (1.0 - nk as f64 / nd)
                    * mean(psi.iter().zip(&pairs[a].validation.expansion).map(|(x, y)| x * y), nk);
                for b in a..l {
                    let ne = pairs[b].main.expansion.len() as f64;
                    let mut s = 0.0;
                    let mut common = 0usize;
                    for u in 0..n_univ {
                        if let (Some(x), Some(y)) = (dense[a][u], dense[b][u]) {
                            s += x * y;
                            common += 1;
                        }
                    }
                    let nkf = nk as f64;
                    let factor = nkf * (1.0 / nkf - 1.0 / nd - 1.0 / ne + common as f64 / (nd * ne));
                    let val = factor * s / common as f64;
                    v[(a, b)] = val;
                    v[(b, a)] = val;
                }
            }
            GammaV { gamma, v, v2, redraws: 0 }
        }
        VarianceSource::Bootstrap(spec) => {
            if spec.scheme != BootstrapScheme::JointResample {
                return Err(Error::InvalidInput("multi-source fusion supports the JointResample bootstrap only".into()));
            }
            let mut arm = vec![None; n_univ];
            for (j, &u) in k_univ.iter().enumerate() {
                arm[u] = Some(tau_k.treatments[j]);
            }
            let on_k = |e: &EstimateWithExpansion| {
                let mut v = vec![None; n_univ];
                for (j, &u) in k_univ.iter().enumerate() {
                    v[u] = Some(e.expansion[j]);
                }
                LinearStat { values: v, fixed_denominator: None }
            };
            let diffs = pairs
                .iter()
                .zip(&main_univ)
                .map(|(p, univ)| {
                    let mut v = vec![None; n_univ];
                    for (j, &u) in univ.iter().enumerate() {
                        v[u] = Some(p.main.expansion[j]);
                    }
                    (on_k(&p.validation), Some(LinearStat { values: v, fixed_denominator: None }))
                })
                .collect();
            let r = Resampler { n: n_univ, strata: None, arm, tau: on_k(tau_k), diffs };
            r.run(spec, nk)?
        }
    };
    combine(tau_k.point, &ep_diff, &gv.gamma, &gv.v, gv.v2, nk, level, gv.redraws)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioEstimand {
    LogCrr,
    LogCor,
}

/// Delta-method combination of treated and control mean estimates into a
/// log risk ratio or log odds ratio estimate.
pub fn ratio_transform(
    arm1: &EstimateWithExpansion,
    arm0: &EstimateWithExpansion,
    estimand: RatioEstimand,
) -> Result<EstimateWithExpansion> {
    if arm1.rows != arm0.rows {
        return Err(Error::InvalidInput("arm-mean estimates must share units".into()));
    }
    let (m1, m0) = (arm1.point, arm0.point);
    let (point, g1, g0) = match estimand {
        RatioEstimand::LogCrr => {
            if !(m1 > 0.0 && m0 > 0.0) {
                return Err(Error::Numerical("arm mean at the boundary for the log risk ratio".into()));
            }
            (m1.ln() - m0.ln(), 1.0 / m1, -1.0 / m0)
        }
        RatioEstimand::LogCor => {
            if !(m1 > 0.0 && m1 < 1.0 && m0 > 0.0 && m0 < 1.0) {
                return Err(Error::Numerical("arm mean at the boundary for the log odds ratio".into()));
            }
            let logit = |m: f64| (m / (1.0 - m)).ln();
            (logit(m1) - logit(m0), 1.0 / (m1 * (1.0 - m1)), -1.0 / (m0 * (1.0 - m0)))
        }
    };
    let mut out = arm1.clone();
    out.point = point;
    out.expansion = arm1.expansion.iter().zip(&arm0.expansion).map(|(a, b)| g1 * a + g0 * b).collect();
    out.model_fits.extend(arm0.model_fits.iter().cloned());
    out.trimmed = arm1.trimmed.max(arm0.trimmed);
    Ok(out)
}

/// Treated and control mean estimates for one estimator.
#[derive(Debug, Clone)]
pub struct ArmMeans {
    pub treated: EstimateWithExpansion,
    pub control: EstimateWithExpansion,
}

pub fn fuse_ratio_estimand(
    tau2: &ArmMeans,
    ep_pairs: &[(ArmMeans, ArmMeans)],
    regime: Design,
    estimand: RatioEstimand,
    source: &VarianceSource,
    level: f64,
) -> Result<FusionResult> {
    let t = |a: &ArmMeans| ratio_transform(&a.treated, &a.control, estimand);
    let inputs = FusionInputs {
        tau2: t(tau2)?,
        ep_pairs: ep_pairs.iter().map(|(m, v)| Ok((t(m)?, t(v)?))).collect::<Result<_>>()?,
        regime,
    };
    fuse(&inputs, source, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub delta: Vec<f64>,
    pub tau_adj: f64,
    pub ci: ConfidenceInterval,
}

/// τ̂_adj(δ) = τ̂₂ − Γ̂ᵀV̂⁻¹(diff − δ) over a grid of δ vectors.
pub fn sensitivity_curve(fused: &FusionResult, grid: &[Vec<f64>]) -> Result<Vec<SensitivityPoint>> {
    let l = fused.ep_diff.len();
    let half = (fused.ci.hi - fused.ci.lo) / 2.0;
    grid.iter()
        .map(|delta| {
            if delta.len() != l {
                return Err(Error::InvalidInput(format!(
                    "sensitivity grid point has {} components, expected {l}",
                    delta.len()
                )));
            }
            let adjust: f64 = (0..l).map(|i| fused.coefficients[i] * (fused.ep_diff[i] - delta[i])).sum();
            let tau_adj = fused.tau2 - adjust;
            Ok(SensitivityPoint {
                delta: delta.clone(),
                tau_adj,
                ci: ConfidenceInterval { lo: tau_adj - half, hi: tau_adj + half, level: fused.ci.level },
            })
        })
        .collect()
}

/// Fuses and evaluates the sensitivity curve on the same Γ̂, V̂.
pub fn sensitivity(
    inputs: &FusionInputs,
    grid: &[Vec<f64>],
    source: &VarianceSource,
    level: f64,
) -> Result<Vec<SensitivityPoint>> {
    sensitivity_curve(&fuse(inputs, source, level)?, grid)
}
