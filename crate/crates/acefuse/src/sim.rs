//! Simulation study: data-generating process, true effect and a Monte
//! Carlo harness.
//!
//! X ~ U(0,2), U = 0.5 + 0.5X − 2 sin X + 2 sign(sin 5X) + ε with
//! ε ~ U(−0.5, 0.5), Y(0) = −X − U + N(0,1), Y(1) = −X + 4U + N(0,1) and
//! logit P(A = 1) = 1 − 0.5X − 0.5U. sign(0) is 0.
//!
//! Replicate r draws from the ChaCha8 stream r of the configured seed, so a
//! run is reproducible whatever the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSet, Design, FusedDataset, UnitRecord};
use crate::estimating::expit;
use crate::estimators::{error_prone_pair, initial_estimate, EstimatorOptions, Method};
use crate::fusion::{fuse, BootstrapSpec, FusionInputs, FusionResult, VarianceSource};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Misspecification {
    None,
    /// Outcome models of the initial estimator omit U.
    WrongOutcome,
    /// The propensity model of the initial estimator omits U.
    WrongPropensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    /// Simple random validation subsample of size n₂.
    SimpleRandom,
    /// Bernoulli validation with π = `high` when Y > `threshold`, else `low`.
    OutcomeDependent { threshold: f64, low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimVariance {
    Analytic,
    Bootstrap { b: usize },
}

impl SimVariance {
    pub fn label(&self) -> String {
        match self {
            SimVariance::Analytic => "analytic".into(),
            SimVariance::Bootstrap { b } => format!("bootstrap(B={b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MenuItem {
    pub initial: Method,
    pub error_prone: Vec<Method>,
}

impl MenuItem {
    pub fn same_type(m: Method) -> Self {
        Self { initial: m, error_prone: vec![m] }
    }

    pub fn label(&self) -> String {
        let ep: Vec<&str> = self.error_prone.iter().map(|m| m.short_name()).collect();
        format!("{}&{}", self.initial.short_name(), ep.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n1: usize,
    pub n2: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimator_menu: Vec<MenuItem>,
    pub variance_sources: Vec<SimVariance>,
    pub misspecification: Misspecification,
    pub sampling: Sampling,
    pub options: EstimatorOptions,
    pub level: f64,
}

impl SimConfig {
    /// The four same-type pairings at the given sizes.
    pub fn paper(n1: usize, n2: usize, reps: usize, seed: u64) -> Self {
        Self {
            n1,
            n2,
            reps,
            seed,
            estimator_menu: Method::ALL.into_iter().map(MenuItem::same_type).collect(),
            variance_sources: vec![SimVariance::Analytic, SimVariance::Bootstrap { b: 500 }],
            misspecification: Misspecification::None,
            sampling: Sampling::SimpleRandom,
            options: EstimatorOptions::default(),
            level: 0.95,
        }
    }

    fn check(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be at least 1".into()));
        }
        if self.sampling == Sampling::SimpleRandom && !(self.n2 < self.n1 && self.n2 >= 4) {
            return Err(Error::InvalidInput("need 4 ≤ n2 < n1".into()));
        }
        Ok(())
    }

    fn initial_options(&self) -> EstimatorOptions {
        let mut o = self.options;
        match self.misspecification {
            Misspecification::None => {}
            Misspecification::WrongOutcome => o.outcome_covariates = CovariateSet::XOnly,
            Misspecification::WrongPropensity => o.propensity_covariates = CovariateSet::XOnly,
        }
        o
    }
}

/// sign with sign(0) = 0.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// E(U | X = x).
pub fn u_mean(x: f64) -> f64 {
    0.5 + 0.5 * x - 2.0 * x.sin() + 2.0 * sign0((5.0 * x).sin())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Replicate `rep` of the data-generating process.
pub fn generate(config: &SimConfig, rep: usize) -> Result<FusedDataset> {
    let mut rng = rng_for(config.seed, rep as u64);
    let n1 = config.n1;
    let mut units = Vec::with_capacity(n1);
    for i in 0..n1 {
        let x: f64 = 2.0 * rng.random::<f64>();
        let u = u_mean(x) + rng.random::<f64>() - 0.5;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let a = u8::from(rng.random::<f64>() < expit(1.0 - 0.5 * x - 0.5 * u));
        let y = if a == 1 { -x + 4.0 * u + e1 } else { -x - u + e0 };
        units.push(UnitRecord {
            id: format!("{i}"),
            a,
            y,
            x: vec![x],
            u: Some(vec![u]),
            in_validation: false,
            pi: None,
        });
    }
    let design = match config.sampling {
        Sampling::SimpleRandom => {
            for i in rand::seq::index::sample(&mut rng, n1, config.n2) {
                units[i].in_validation = true;
            }
            Design::SimpleRandom
        }
        Sampling::OutcomeDependent { threshold, low, high } => {
            for r in &mut units {
                let pi = if r.y > threshold { high } else { low };
                r.pi = Some(pi);
                r.in_validation = rng.random::<f64>() < pi;
            }
            Design::KnownInclusion
        }
    };
    FusedDataset::new(units, design)
}

/// Adaptive Simpson quadrature on [a, b].
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            left + right + diff / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// τ = 5 E(U), integrating E(U | X) over X ~ U(0,2) piecewise between the
/// jumps of sign(sin 5X).
pub fn true_tau() -> f64 {
    let mut cuts = vec![0.0];
    let mut k = 1.0;
    while k * std::f64::consts::PI / 5.0 < 2.0 {
        cuts.push(k * std::f64::consts::PI / 5.0);
        k += 1.0;
    }
    cuts.push(2.0);
    let total: f64 = cuts
        .windows(2)
        .map(|w| {
            // the sign term is constant inside each piece
            let mid = 0.5 * (w[0] + w[1]);
            let s = sign0((5.0 * mid).sin());
            let f = move |x: f64| 0.5 + 0.5 * x - 2.0 * x.sin() + 2.0 * s;
            integrate(&f, w[0], w[1], 1e-14)
        })
        .sum();
    5.0 * total / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub mean: f64,
    pub bias: f64,
    /// Divisor R, so that mse = bias² + variance.
    pub variance: f64,
    pub mse: f64,
    /// Monte Carlo standard error of the mean.
    pub mc_se: f64,
}

impl PointStats {
    pub fn from_values(values: &[f64], truth: f64) -> Self {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
        let bias = mean - truth;
        let sample_var = if values.len() > 1 { variance * r / (r - 1.0) } else { 0.0 };
        Self { mean, bias, variance, mse: bias * bias + variance, mc_se: (sample_var / r).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub source: String,
    pub initial_coverage: f64,
    pub fused_coverage: f64,
    pub mean_v_hat: f64,
    /// Replicates whose V̂ was positive definite.
    pub pd_reps: usize,
    /// Of those, how many satisfied v̂ ≤ v̂₂/n₂.
    pub efficiency_holds: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub initial: PointStats,
    pub fused: PointStats,
    /// {1 − MSE(fused)/MSE(initial)} · 100.
    pub mse_reduction_pct: f64,
    /// Mean and Monte Carlo SE of (fused − τ)² − (initial − τ)².
    pub mse_diff_mean: f64,
    pub mse_diff_se: f64,
    /// τ̂₁,ep as an estimator of τ, per error-prone component.
    pub error_prone_main: Vec<PointStats>,
    /// τ̂₂,ep − τ̂₁,ep per component, against zero.
    pub error_prone_diff: Vec<PointStats>,
    pub coverage: Vec<CoverageStats>,
    pub reps_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub true_tau: f64,
    pub config: SimConfig,
    pub estimators: Vec<EstimatorSummary>,
    /// More than 1% of replicates failed for some estimator.
    pub flagged: bool,
}

/// One replicate's output for one menu item.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub tau2: f64,
    pub ep_main: Vec<f64>,
    pub ep_diff: Vec<f64>,
    /// Per variance source; `None` when the source does not apply.
    pub fused: Vec<Option<FusionResult>>,
}

fn mix(seed: u64, rep: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ rep.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs every menu item on one dataset.
pub fn run_replicate(config: &SimConfig, rep: usize) -> Vec<Result<ReplicateRecord>> {
    let d = match generate(config, rep) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return config.estimator_menu.iter().map(|_| Err(Error::Data(msg.clone()))).collect();
        }
    };
    let init_opts = config.initial_options();
    let boot_seed = mix(config.seed, rep as u64);
    config
        .estimator_menu
        .iter()
        .map(|item| {
            let tau2 = initial_estimate(&d, item.initial, &init_opts)?;
            let pairs = item
                .error_prone
                .iter()
                .map(|&m| error_prone_pair(&d, m, &config.options))
                .collect::<Result<Vec<_>>>()?;
            let inputs = FusionInputs { tau2, ep_pairs: pairs, regime: d.design() };
            let uses_matching = item.initial == Method::Matching || item.error_prone.contains(&Method::Matching);
            let fused = config
                .variance_sources
                .iter()
                .map(|s| match s {
                    SimVariance::Analytic if uses_matching => Ok(None),
                    SimVariance::Analytic => fuse(&inputs, &VarianceSource::Analytic, config.level).map(Some),
                    SimVariance::Bootstrap { b } => {
                        let spec = BootstrapSpec::for_design(d.design(), *b, boot_seed);
                        fuse(&inputs, &VarianceSource::Bootstrap(spec), config.level).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ReplicateRecord {
                tau2: inputs.tau2.point,
                ep_main: inputs.ep_pairs.iter().map(|p| p.0.point).collect(),
                ep_diff: inputs.ep_diff(),
                fused,
            })
        })
        .collect()
}

/// All replicate records, indexed [rep][menu item].
pub fn run_replicates(config: &SimConfig) -> Result<Vec<Vec<Result<ReplicateRecord>>>> {
    config.check()?;
    Ok((0..config.reps).into_par_iter().map(|r| run_replicate(config, r)).collect())
}

pub fn run_monte_carlo(config: &SimConfig) -> Result<SimReport> {
    let records = run_replicates(config)?;
    Ok(summarize(config, &records))
}

pub fn summarize(config: &SimConfig, records: &[Vec<Result<ReplicateRecord>>]) -> SimReport {
    let truth = true_tau();
    let mut flagged = false;
    let estimators = config
        .estimator_menu
        .iter()
        .enumerate()
        .map(|(k, item)| {
            let ok: Vec<&ReplicateRecord> = records.iter().filter_map(|r| r[k].as_ref().ok()).collect();
            let failures = records.len() - ok.len();
            if failures * 100 > records.len() {
                flagged = true;
            }
            summarize_item(item, config, &ok, truth, failures)
        })
        .collect();
    SimReport { true_tau: truth, config: config.clone(), estimators, flagged }
}

fn summarize_item(
    item: &MenuItem,
    config: &SimConfig,
    ok: &[&ReplicateRecord],
    truth: f64,
    failures: usize,
) -> EstimatorSummary {
    let empty = PointStats { mean: f64::NAN, bias: f64::NAN, variance: f64::NAN, mse: f64::NAN, mc_se: f64::NAN };
    if ok.is_empty() {
        return EstimatorSummary {
            label: item.label(),
            initial: empty.clone(),
            fused: empty,
            mse_reduction_pct: f64::NAN,
            mse_diff_mean: f64::NAN,
            mse_diff_se: f64::NAN,
            error_prone_main: vec![],
            error_prone_diff: vec![],
            coverage: vec![],
            reps_used: 0,
            failures,
        };
    }
    let initial: Vec<f64> = ok.iter().map(|r| r.tau2).collect();
    // the fused point is the same for every variance source only when Γ̂ and
    // V̂ agree, so the point summary uses the first source
    let fused: Vec<f64> = ok.iter().map(|r| first_fused(r).map_or(r.tau2, |f| f.tau_hat)).collect();
    let init_stats = PointStats::from_values(&initial, truth);
    let fused_stats = PointStats::from_values(&fused, truth);
    let diffs: Vec<f64> = initial.iter().zip(&fused).map(|(i, f)| (f - truth).powi(2) - (i - truth).powi(2)).collect();
    let diff_stats = PointStats::from_values(&diffs, 0.0);
    let l = item.error_prone.len();
    let ep_main = (0..l).map(|c| PointStats::from_values(&ok.iter().map(|r| r.ep_main[c]).collect::<Vec<_>>(), truth)).collect();
    let ep_diff = (0..l).map(|c| PointStats::from_values(&ok.iter().map(|r| r.ep_diff[c]).collect::<Vec<_>>(), 0.0)).collect();
    let coverage = config
        .variance_sources
        .iter()
        .enumerate()
        .filter_map(|(s, src)| {
            let res: Vec<&FusionResult> = ok.iter().filter_map(|r| r.fused[s].as_ref()).collect();
            if res.is_empty() {
                return None;
            }
            let n = res.len() as f64;
            let covers = |lo: f64, hi: f64| lo <= truth && truth <= hi;
            let z = (res[0].ci.hi - res[0].ci.lo) / 2.0 / res[0].v_hat.max(0.0).sqrt();
            let init_cov = res
                .iter()
                .filter(|f| {
                    let half = z * (f.v2 / f.n2 as f64).max(0.0).sqrt();
                    covers(f.tau2 - half, f.tau2 + half)
                })
                .count() as f64
                / n;
            let fused_cov = res.iter().filter(|f| covers(f.ci.lo, f.ci.hi)).count() as f64 / n;
            let pd: Vec<&&FusionResult> = res.iter().filter(|f| !f.diagnostics.fallback).collect();
            let holds = pd.iter().filter(|f| f.v_hat <= f.v2 / f.n2 as f64).count();
            Some(CoverageStats {
                source: src.label(),
                initial_coverage: init_cov,
                fused_coverage: fused_cov,
                mean_v_hat: res.iter().map(|f| f.v_hat).sum::<f64>() / n,
                pd_reps: pd.len(),
                efficiency_holds: holds,
                reps: res.len(),
            })
        })
        .collect();
    EstimatorSummary {
        label: item.label(),
        mse_reduction_pct: (1.0 - fused_stats.mse / init_stats.mse) * 100.0,
        initial: init_stats,
        fused: fused_stats,
        mse_diff_mean: diff_stats.mean,
        mse_diff_se: diff_stats.mc_se,
        error_prone_main: ep_main,
        error_prone_diff: ep_diff,
        coverage,
        reps_used: ok.len(),
        failures,
    }
}

fn first_fused(r: &ReplicateRecord) -> Option<&FusionResult> {
    r.fused.iter().flatten().next()
}

/// Flat CSV: one row per estimator and variance source.
pub fn report_csv(report: &SimReport) -> String {
    let mut out = String::from(
        "estimator,source,true_tau,initial_mean,initial_bias,initial_mse,fused_mean,fused_bias,fused_mse,mse_reduction_pct,initial_coverage,fused_coverage,reps\n",
    );
    for e in &report.estimators {
        for c in &e.coverage {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.label,
                c.source,
                report.true_tau,
                e.initial.mean,
                e.initial.bias,
                e.initial.mse,
                e.fused.mean,
                e.fused.bias,
                e.fused.mse,
                e.mse_reduction_pct,
                c.initial_coverage,
                c.fused_coverage,
                c.reps
            ));
        }
    }
    out
}
