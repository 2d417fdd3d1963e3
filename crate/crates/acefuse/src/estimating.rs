//! Parametric propensity and outcome models solved as weighted estimating
//! equations. Every fit keeps its per-unit scores and the bread matrix
//! `mean(∂S/∂θᵀ)` so influence functions can be assembled downstream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::data::CovariateSet;
use crate::data::{Covariates, View};
use crate::{Error, Result};

pub const MAX_ITER: usize = 100;
pub const SCORE_TOL: f64 = 1e-8;
const SEPARATION_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    PropensityLogistic,
    OutcomeLinear,
    OutcomeLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub covariate_set: CovariateSet,
    pub arm: Option<u8>,
    pub include_intercept: bool,
}

impl ModelSpec {
    pub fn propensity(covariate_set: CovariateSet) -> Self {
        Self { kind: ModelKind::PropensityLogistic, covariate_set, arm: None, include_intercept: true }
    }

    pub fn outcome_linear(covariate_set: CovariateSet, arm: u8) -> Self {
        Self { kind: ModelKind::OutcomeLinear, covariate_set, arm: Some(arm), include_intercept: true }
    }

    pub fn outcome_logistic(covariate_set: CovariateSet, arm: u8) -> Self {
        Self { kind: ModelKind::OutcomeLogistic, covariate_set, arm: Some(arm), include_intercept: true }
    }

    fn check(&self) -> Result<()> {
        let is_outcome = self.kind != ModelKind::PropensityLogistic;
        match self.arm {
            Some(a) if is_outcome && a <= 1 => Ok(()),
            None if !is_outcome => Ok(()),
            _ => Err(Error::InvalidInput("arm must be set exactly for outcome models".into())),
        }
    }

    fn logistic_link(&self) -> bool {
        self.kind != ModelKind::OutcomeLinear
    }
}

/// A solved estimating equation.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub spec: ModelSpec,
    pub columns: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Row j holds S_j(θ̂). Outcome models score zero off their arm.
    pub scores: DMatrix<f64>,
    /// Weighted mean of ∂S_j/∂θᵀ over the whole view.
    pub bread: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub weights_used: Vec<f64>,
    /// Some fitted probability sits within 1e-10 of 0 or 1.
    pub separation: bool,
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ModelFit {
    /// Linear predictor through the link, for a design row that already
    /// includes the intercept.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let eta = dot(row, self.coefficients.as_slice());
        if self.spec.logistic_link() {
            expit(eta)
        } else {
            eta
        }
    }

    /// ∂μ/∂θ at a design row.
    pub fn gradient_row(&self, row: &[f64]) -> DVector<f64> {
        let scale = if self.spec.logistic_link() {
            let m = self.predict_row(row);
            m * (1.0 - m)
        } else {
            1.0
        };
        DVector::from_iterator(row.len(), row.iter().map(|v| v * scale))
    }

    /// Prediction from raw covariates (X, then U when the model uses them),
    /// without the intercept.
    pub fn predict(&self, covariates: &[f64]) -> Result<f64> {
        let k = self.coefficients.len() - usize::from(self.spec.include_intercept);
        if covariates.len() != k {
            return Err(Error::InvalidInput(format!(
                "expected {k} covariates, got {}",
                covariates.len()
            )));
        }
        let mut row = Vec::with_capacity(k + 1);
        if self.spec.include_intercept {
            row.push(1.0);
        }
        row.extend_from_slice(covariates);
        Ok(self.predict_row(&row))
    }

    /// ‖Σ w_j S_j(θ̂)‖∞.
    pub fn score_residual(&self) -> f64 {
        let k = self.coefficients.len();
        (0..k)
            .map(|c| {
                (0..self.scores.nrows())
                    .map(|j| self.weights_used[j] * self.scores[(j, c)])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::InvalidInput("weight vector length differs from view".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be strictly positive".into()));
    }
    Ok(())
}

pub fn fit_logistic_propensity(view: &View, spec: ModelSpec, weights: &[f64]) -> Result<ModelFit> {
    spec.check()?;
    if spec.kind != ModelKind::PropensityLogistic {
        return Err(Error::InvalidInput("expected a propensity model spec".into()));
    }
    check_weights(weights, view.len())?;
    let design = view.covariates(spec.covariate_set, spec.include_intercept)?;
    let response: Vec<f64> = view.treatments().iter().map(|&a| f64::from(a)).collect();
    let mask = vec![true; view.len()];
    fit_logistic(&design, &response, &mask, spec, weights)
}

/// Fits μ_a on the units with A = spec.arm.
pub fn fit_outcome(view: &View, spec: ModelSpec, weights: &[f64]) -> Result<ModelFit> {
    spec.check()?;
    check_weights(weights, view.len())?;
    let arm = spec.arm.ok_or_else(|| Error::InvalidInput("outcome model needs an arm".into()))?;
    let design = view.covariates(spec.covariate_set, spec.include_intercept)?;
    let mask: Vec<bool> = view.treatments().iter().map(|&a| a == arm).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count < design.k {
        return Err(Error::Data(format!(
            "arm {arm} has {count} units, fewer than the {} coefficients",
            design.k
        )));
    }
    match spec.kind {
        ModelKind::OutcomeLinear => fit_linear(&design, view.outcomes(), &mask, spec, weights),
        ModelKind::OutcomeLogistic => {
            if view.outcomes().iter().zip(&mask).any(|(&y, &m)| m && y != 0.0 && y != 1.0) {
                return Err(Error::Data("logistic outcome model needs a binary outcome".into()));
            }
            fit_logistic(&design, view.outcomes(), &mask, spec, weights)
        }
        ModelKind::PropensityLogistic => {
            Err(Error::InvalidInput("expected an outcome model spec".into()))
        }
    }
}

/// Names the first column that is (numerically) a combination of earlier
/// ones in the masked, weighted design.
fn collinear_columns(design: &Covariates, mask: &[bool], weights: &[f64]) -> Option<String> {
    let rows: Vec<usize> = (0..design.n).filter(|&i| mask[i]).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..design.k {
        let mut v: Vec<f64> = rows.iter().map(|&i| design.row(i)[c] * weights[i].sqrt()).collect();
        let norm0 = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        for b in &basis {
            let proj = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(t, bb)| *t -= proj * bb);
        }
        let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm <= 1e-10 * norm0.max(1.0) {
            let earlier = design.names[..c].join(", ");
            return Some(if earlier.is_empty() {
                format!("column '{}' is identically zero", design.names[c])
            } else {
                format!("column '{}' is collinear with [{}]", design.names[c], earlier)
            });
        }
        v.iter_mut().for_each(|t| *t /= norm);
        basis.push(v);
    }
    None
}

fn fit_linear(
    design: &Covariates,
    y: &[f64],
    mask: &[bool],
    spec: ModelSpec,
    weights: &[f64],
) -> Result<ModelFit> {
    if let Some(msg) = collinear_columns(design, mask, weights) {
        return Err(Error::Data(format!("rank-deficient design: {msg}")));
    }
    let k = design.k;
    let n = design.n;
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwy = DVector::<f64>::zeros(k);
    for i in (0..n).filter(|&i| mask[i]) {
        let r = design.row(i);
        let w = weights[i];
        for a in 0..k {
            xtwy[a] += w * r[a] * y[i];
            for b in 0..k {
                xtwx[(a, b)] += w * r[a] * r[b];
            }
        }
    }
    let chol = xtwx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
    let mut beta = chol.solve(&xtwy);
    // iterative refinement on the residual equations
    for _ in 0..2 {
        let mut g = DVector::<f64>::zeros(k);
        for i in (0..n).filter(|&i| mask[i]) {
            let r = design.row(i);
            let res = y[i] - dot(r, beta.as_slice());
            for a in 0..k {
                g[a] += weights[i] * r[a] * res;
            }
        }
        beta += chol.solve(&g);
    }
    let wsum: f64 = weights.iter().sum();
    let mut scores = DMatrix::<f64>::zeros(n, k);
    for i in (0..n).filter(|&i| mask[i]) {
        let r = design.row(i);
        let res = y[i] - dot(r, beta.as_slice());
        for a in 0..k {
            scores[(i, a)] = r[a] * res;
        }
    }
    let bread = -xtwx / wsum;
    Ok(ModelFit {
        spec,
        columns: design.names.clone(),
        coefficients: beta,
        scores,
        bread,
        converged: true,
        iterations: 1,
        weights_used: weights.to_vec(),
        separation: false,
    })
}

fn logistic_loglik(design: &Covariates, y: &[f64], mask: &[bool], w: &[f64], theta: &[f64]) -> f64 {
    (0..design.n)
        .filter(|&i| mask[i])
        .map(|i| {
            let eta = dot(design.row(i), theta);
            w[i] * (y[i] * eta - softplus(eta))
        })
        .sum()
}

/// Weighted gradient Σ w S and information Σ w p(1−p) x xᵀ.
fn logistic_derivs(
    design: &Covariates,
    y: &[f64],
    mask: &[bool],
    w: &[f64],
    theta: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let k = design.k;
    let mut g = DVector::<f64>::zeros(k);
    let mut h = DMatrix::<f64>::zeros(k, k);
    for i in (0..design.n).filter(|&i| mask[i]) {
        let r = design.row(i);
        let p = expit(dot(r, theta));
        let res = y[i] - p;
        let v = w[i] * p * (1.0 - p);
        for a in 0..k {
            g[a] += w[i] * r[a] * res;
            for b in 0..k {
                h[(a, b)] += v * r[a] * r[b];
            }
        }
    }
    (g, h)
}

fn fit_logistic(
    design: &Covariates,
    y: &[f64],
    mask: &[bool],
    spec: ModelSpec,
    weights: &[f64],
) -> Result<ModelFit> {
    if let Some(msg) = collinear_columns(design, mask, weights) {
        return Err(Error::Data(format!("rank-deficient design: {msg}")));
    }
    let k = design.k;
    let mut theta = DVector::<f64>::zeros(k);
    let mut ll = logistic_loglik(design, y, mask, weights, theta.as_slice());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let (g, h) = logistic_derivs(design, y, mask, weights, theta.as_slice());
        if g.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Numerical("singular Hessian in logistic fit".into()))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta + &step * t;
            let cand_ll = logistic_loglik(design, y, mask, weights, cand.as_slice());
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                theta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let n = design.n;
    let mut scores = DMatrix::<f64>::zeros(n, k);
    let mut bread = DMatrix::<f64>::zeros(k, k);
    let mut separation = false;
    for i in (0..n).filter(|&i| mask[i]) {
        let r = design.row(i);
        let p = expit(dot(r, theta.as_slice()));
        if p < SEPARATION_EPS || p > 1.0 - SEPARATION_EPS {
            separation = true;
        }
        for a in 0..k {
            scores[(i, a)] = r[a] * (y[i] - p);
            for b in 0..k {
                bread[(a, b)] -= weights[i] * p * (1.0 - p) * r[a] * r[b];
            }
        }
    }
    let wsum: f64 = weights.iter().sum();
    bread /= wsum;
    if !converged && !separation {
        return Err(Error::Numerical(format!(
            "logistic fit did not converge in {iterations} iterations"
        )));
    }
    Ok(ModelFit {
        spec,
        columns: design.names.clone(),
        coefficients: theta,
        scores,
        bread,
        converged,
        iterations,
        weights_used: weights.to_vec(),
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(a: Vec<u8>, y: Vec<f64>, x: Vec<f64>) -> View {
        View::from_columns(a, y, x.into_iter().map(|v| vec![v]).collect(), None, None).unwrap()
    }

    fn prop_spec() -> ModelSpec {
        ModelSpec::propensity(CovariateSet::XOnly)
    }

    #[test]
    fn intercept_only_logistic() {
        let v = View::from_columns(vec![1, 0, 1, 0], vec![0.0; 4], vec![vec![]; 4], None, None).unwrap();
        let f = fit_logistic_propensity(&v, prop_spec(), &v.unit_weights()).unwrap();
        assert!(f.coefficients[0].abs() < 1e-12);
        assert!((f.predict(&[]).unwrap() - 0.5).abs() < 1e-12);

        let v = View::from_columns(vec![1, 1, 1, 0], vec![0.0; 4], vec![vec![]; 4], None, None).unwrap();
        let f = fit_logistic_propensity(&v, prop_spec(), &v.unit_weights()).unwrap();
        assert!((f.coefficients[0] - 3f64.ln()).abs() < 1e-10);
        assert!(f.converged && f.score_residual() < SCORE_TOL);
    }

    #[test]
    fn four_unit_logistic_matches_grid_search() {
        let data = [(1u8, 0.0), (0, 1.0), (1, 2.0), (0, 0.0)];
        let v = view(data.iter().map(|d| d.0).collect(), vec![0.0; 4], data.iter().map(|d| d.1).collect());
        let f = fit_logistic_propensity(&v, prop_spec(), &v.unit_weights()).unwrap();

        let ll = |b0: f64, b1: f64| -> f64 {
            data.iter()
                .map(|&(a, x)| {
                    let p = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
                    if a == 1 { p.ln() } else { (1.0 - p).ln() }
                })
                .sum()
        };
        // coarse grid, then successively finer grids around the best point
        let (mut c0, mut c1, mut half) = (0.0, 0.0, 10.0);
        for _ in 0..8 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for i in 0..=200 {
                for j in 0..=200 {
                    let b0 = c0 - half + 2.0 * half * i as f64 / 200.0;
                    let b1 = c1 - half + 2.0 * half * j as f64 / 200.0;
                    let v = ll(b0, b1);
                    if v > best.0 {
                        best = (v, b0, b1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            half /= 20.0;
        }
        assert!((f.coefficients[0] - c0).abs() < 1e-4, "{} vs {c0}", f.coefficients[0]);
        assert!((f.coefficients[1] - c1).abs() < 1e-4, "{} vs {c1}", f.coefficients[1]);
    }

    #[test]
    fn linear_interpolation_and_constant() {
        let v = view(vec![1, 1], vec![1.0, 3.0], vec![0.0, 1.0]);
        let f = fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 1), &v.unit_weights()).unwrap();
        assert!((f.coefficients[0] - 1.0).abs() < 1e-12 && (f.coefficients[1] - 2.0).abs() < 1e-12);
        assert!((f.predict(&[3.0]).unwrap() - 7.0).abs() < 1e-12);

        let v = view(vec![0, 0, 0, 1], vec![4.0, 4.0, 4.0, 9.0], vec![0.0, 1.0, 5.0, 2.0]);
        let f = fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 0), &v.unit_weights()).unwrap();
        assert!((f.coefficients[0] - 4.0).abs() < 1e-12 && f.coefficients[1].abs() < 1e-12);
        // off-arm unit scores zero
        assert_eq!(f.scores[(3, 0)], 0.0);
    }

    #[test]
    fn weighted_least_squares_matches_normal_equations() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.5, 2.9, 4.2, 6.1];
        let w = [1.0, 2.0, 0.5, 3.0, 1.5];
        let v = view(vec![1; 5], y.to_vec(), x.to_vec());
        let f = fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 1), &w).unwrap();
        // closed form for a weighted simple regression
        let sw: f64 = w.iter().sum();
        let mx = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
        let my = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sw;
        let sxy: f64 = (0..5).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
        let sxx: f64 = (0..5).map(|i| w[i] * (x[i] - mx).powi(2)).sum();
        let b1 = sxy / sxx;
        let b0 = my - b1 * mx;
        assert!((f.coefficients[0] - b0).abs() < 1e-10);
        assert!((f.coefficients[1] - b1).abs() < 1e-10);
        assert!(f.score_residual() < SCORE_TOL);
    }

    #[test]
    fn collinear_columns_named() {
        let x = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0], vec![4.0, 8.0]];
        let v = View::from_columns(vec![1; 4], vec![1.0, 2.0, 3.0, 5.0], x, None, None).unwrap();
        let err = fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 1), &v.unit_weights()).unwrap_err();
        assert!(err.to_string().contains("'x2' is collinear with [intercept, x1]"), "{err}");
    }

    #[test]
    fn small_arm_rejected() {
        let v = view(vec![1, 0, 0], vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0]);
        assert!(fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 1), &v.unit_weights()).is_err());
    }

    #[test]
    fn separation_flagged() {
        let v = view(vec![0, 0, 1, 1], vec![0.0; 4], vec![0.0, 1.0, 2.0, 3.0]);
        let f = fit_logistic_propensity(&v, prop_spec(), &v.unit_weights()).unwrap();
        assert!(f.separation);
    }

    #[test]
    fn predict_dimension_mismatch() {
        let v = view(vec![1, 1], vec![1.0, 3.0], vec![0.0, 1.0]);
        let f = fit_outcome(&v, ModelSpec::outcome_linear(CovariateSet::XOnly, 1), &v.unit_weights()).unwrap();
        assert!(f.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn logistic_score_matches_finite_differences() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let a: Vec<u8> = (0..20).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let v = view(a.clone(), vec![0.0; 20], x.clone());
        let design = v.covariates(CovariateSet::XOnly, true).unwrap();
        let y: Vec<f64> = a.iter().map(|&t| t as f64).collect();
        let mask = vec![true; 20];
        let w = vec![1.0; 20];
        for theta in [[0.3, -0.7], [-1.2, 0.4], [0.0, 1.5]] {
            let (g, _) = logistic_derivs(&design, &y, &mask, &w, &theta);
            for c in 0..2 {
                let h = 1e-6;
                let mut tp = theta;
                let mut tm = theta;
                tp[c] += h;
                tm[c] -= h;
                let fd = (logistic_loglik(&design, &y, &mask, &w, &tp)
                    - logistic_loglik(&design, &y, &mask, &w, &tm))
                    / (2.0 * h);
                assert!((fd - g[c]).abs() <= 1e-5 * g[c].abs().max(1e-3), "{fd} vs {}", g[c]);
            }
        }
    }
}
