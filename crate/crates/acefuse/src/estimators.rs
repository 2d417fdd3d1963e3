//! Regression imputation, IPW, AIPW and bias-corrected matching, each
//! returned with its per-unit linear expansion.
//!
//! Expansions are scaled so that `τ̂ − τ ≈ Σ w_j ψ_j / Σ w_j` over the
//! estimator's own sample, where `w` are the estimator's weights (1 in the
//! simple-random regime, π⁻¹ for a weighted validation estimator).
//!
//! For a plug-in mean τ̂ = mean_w τ_j(θ̂) the expansion is
//! `τ_j − τ̂ − D B⁻¹ S_j`, summed over the fitted models, with
//! `D = mean_w ∂τ_j/∂θ` and `B` the model's bread.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{main_view, validation_view, CovariateSet, Design, FusedDataset, Sample, View};
use crate::estimating::{fit_logistic_propensity, fit_outcome, ModelFit, ModelSpec};
use crate::matching::{find_matches, fitted_values, DistanceScaling};
use crate::{Error, Result};

/// Fitted propensities are clamped to [TRIM, 1 − TRIM].
pub const TRIM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    RegImputation,
    Ipw,
    Aipw,
    Matching,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RegImputation, Method::Ipw, Method::Aipw, Method::Matching];

    pub fn short_name(self) -> &'static str {
        match self {
            Method::RegImputation => "reg",
            Method::Ipw => "ipw",
            Method::Aipw => "aipw",
            Method::Matching => "match",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.short_name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorKind {
    pub method: Method,
    pub covariate_set: CovariateSet,
    pub dataset: Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorForm {
    /// Plain mean; needs unit weights.
    HorvitzThompson,
    /// Weighted mean normalised by the weight sum.
    Hajek,
}

/// What the estimator targets: the effect or one arm's mean outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Ate,
    ArmMean(u8),
}

impl Target {
    /// Coefficients on the treated and control mean.
    fn contrast(self) -> (f64, f64) {
        match self {
            Target::Ate => (1.0, -1.0),
            Target::ArmMean(1) => (1.0, 0.0),
            Target::ArmMean(_) => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeLink {
    Linear,
    Logistic,
}

/// Which correction terms enter the AIPW expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AipwTerms {
    Full,
    /// Drops the outcome-score projections. Only valid when both working
    /// models are correct; kept for demonstrating what goes wrong otherwise.
    WithoutOutcomeProjections,
}

#[derive(Debug, Clone)]
pub struct EstimateWithExpansion {
    pub kind: EstimatorKind,
    pub target: Target,
    pub point: f64,
    pub expansion: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row indices into the source dataset.
    pub rows: Vec<usize>,
    pub treatments: Vec<u8>,
    pub model_fits: Vec<ModelFit>,
    pub weight_regime: Design,
    /// Units whose propensity was clamped.
    pub trimmed: usize,
}

impl EstimateWithExpansion {
    /// Σ w ψ / Σ w.
    pub fn expansion_mean(&self) -> f64 {
        let sw: f64 = self.weights.iter().sum();
        self.expansion.iter().zip(&self.weights).map(|(p, w)| p * w).sum::<f64>() / sw
    }
}

/// Model and matching settings shared by the estimator runners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub m: usize,
    pub scaling: DistanceScaling,
    pub outcome_link: OutcomeLink,
    pub aipw_terms: AipwTerms,
    pub target: Target,
    /// Covariates of the initial estimator's propensity model.
    pub propensity_covariates: CovariateSet,
    /// Covariates of the initial estimator's outcome models.
    pub outcome_covariates: CovariateSet,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            m: 4,
            scaling: DistanceScaling::Raw,
            outcome_link: OutcomeLink::Linear,
            aipw_terms: AipwTerms::Full,
            target: Target::Ate,
            propensity_covariates: CovariateSet::XU,
            outcome_covariates: CovariateSet::XU,
        }
    }
}

struct Correction<'a> {
    fit: &'a ModelFit,
    /// Σ w_j ∂τ_j/∂θ, normalised later.
    d: DVector<f64>,
}

fn form_check(form: EstimatorForm, weights: &[f64]) -> Result<()> {
    if form == EstimatorForm::HorvitzThompson && weights.iter().any(|&w| w != 1.0) {
        return Err(Error::InvalidInput(
            "Horvitz-Thompson form needs unit weights; use the Hajek form with inclusion weights".into(),
        ));
    }
    Ok(())
}

fn regime_of(weights: &[f64]) -> Design {
    if weights.iter().all(|&w| w == 1.0) {
        Design::SimpleRandom
    } else {
        Design::KnownInclusion
    }
}

fn assemble(
    view: &View,
    kind: EstimatorKind,
    target: Target,
    weights: &[f64],
    tau_j: Vec<f64>,
    corrections: Vec<Correction<'_>>,
    trimmed: usize,
) -> Result<EstimateWithExpansion> {
    if weights.len() != view.len() {
        return Err(Error::InvalidInput("weight vector length differs from view".into()));
    }
    let sw: f64 = weights.iter().sum();
    let point = tau_j.iter().zip(weights).map(|(t, w)| t * w).sum::<f64>() / sw;
    let mut expansion: Vec<f64> = tau_j.iter().map(|t| t - point).collect();
    let mut fits = Vec::with_capacity(corrections.len());
    for c in corrections {
        let d = c.d / sw;
        let coef = c
            .fit
            .bread
            .transpose()
            .lu()
            .solve(&d)
            .ok_or_else(|| Error::Numerical("singular bread matrix".into()))?;
        let adj = &c.fit.scores * coef;
        expansion.iter_mut().zip(adj.iter()).for_each(|(e, a)| *e -= a);
        fits.push(c.fit.clone());
    }
    Ok(EstimateWithExpansion {
        kind,
        target,
        point,
        expansion,
        weights: weights.to_vec(),
        rows: view.rows().to_vec(),
        treatments: view.treatments().to_vec(),
        model_fits: fits,
        weight_regime: regime_of(weights),
        trimmed,
    })
}

fn kind_for(view: &View, method: Method, fits: &[&ModelFit]) -> EstimatorKind {
    let uses_u = fits.iter().any(|f| f.spec.covariate_set == CovariateSet::XU);
    EstimatorKind {
        method,
        covariate_set: if uses_u { CovariateSet::XU } else { CovariateSet::XOnly },
        dataset: view.sample(),
    }
}

/// Design rows, predictions and ∂μ/∂θ for one fit over the view.
struct Evaluated {
    rows: DMatrix<f64>,
    pred: Vec<f64>,
}

fn evaluate(view: &View, fit: &ModelFit) -> Result<Evaluated> {
    let cov = view.covariates(fit.spec.covariate_set, fit.spec.include_intercept)?;
    if cov.k != fit.coefficients.len() {
        return Err(Error::InvalidInput("model does not match the view's covariates".into()));
    }
    if fit.scores.nrows() != view.len() {
        return Err(Error::InvalidInput("model was fitted on a different view".into()));
    }
    let pred = (0..cov.n).map(|i| fit.predict_row(cov.row(i))).collect();
    Ok(Evaluated { rows: DMatrix::from_row_slice(cov.n, cov.k, &cov.data), pred })
}

fn gradient(fit: &ModelFit, ev: &Evaluated, j: usize) -> DVector<f64> {
    let row: Vec<f64> = ev.rows.row(j).iter().copied().collect();
    fit.gradient_row(&row)
}

fn clamp_propensity(e: &mut [f64]) -> usize {
    let mut n = 0;
    for p in e.iter_mut() {
        if *p < TRIM || *p > 1.0 - TRIM {
            *p = p.clamp(TRIM, 1.0 - TRIM);
            n += 1;
        }
    }
    n
}

pub fn reg_imputation(
    view: &View,
    mu0: &ModelFit,
    mu1: &ModelFit,
    weights: &[f64],
    target: Target,
) -> Result<EstimateWithExpansion> {
    let (c1, c0) = target.contrast();
    let e0 = evaluate(view, mu0)?;
    let e1 = evaluate(view, mu1)?;
    let mut d0 = DVector::zeros(mu0.coefficients.len());
    let mut d1 = DVector::zeros(mu1.coefficients.len());
    let mut tau = Vec::with_capacity(view.len());
    for j in 0..view.len() {
        tau.push(c1 * e1.pred[j] + c0 * e0.pred[j]);
        d1 += gradient(mu1, &e1, j) * (weights[j] * c1);
        d0 += gradient(mu0, &e0, j) * (weights[j] * c0);
    }
    let kind = kind_for(view, Method::RegImputation, &[mu0, mu1]);
    let corr = vec![Correction { fit: mu1, d: d1 }, Correction { fit: mu0, d: d0 }];
    assemble(view, kind, target, weights, tau, corr, 0)
}

pub fn ipw(
    view: &View,
    e_fit: &ModelFit,
    weights: &[f64],
    form: EstimatorForm,
    target: Target,
) -> Result<EstimateWithExpansion> {
    form_check(form, weights)?;
    let (c1, c0) = target.contrast();
    let ev = evaluate(view, e_fit)?;
    let mut e = ev.pred.clone();
    let trimmed = clamp_propensity(&mut e);
    let a = view.treatments();
    let y = view.outcomes();
    let mut da = DVector::zeros(e_fit.coefficients.len());
    let mut tau = Vec::with_capacity(view.len());
    for j in 0..view.len() {
        let t = f64::from(a[j]);
        tau.push(c1 * t * y[j] / e[j] + c0 * (1.0 - t) * y[j] / (1.0 - e[j]));
        let de = -c1 * t * y[j] / (e[j] * e[j]) + c0 * (1.0 - t) * y[j] / ((1.0 - e[j]) * (1.0 - e[j]));
        da += gradient(e_fit, &ev, j) * (weights[j] * de);
    }
    let kind = kind_for(view, Method::Ipw, &[e_fit]);
    assemble(view, kind, target, weights, tau, vec![Correction { fit: e_fit, d: da }], trimmed)
}

#[allow(clippy::too_many_arguments)]
pub fn aipw(
    view: &View,
    e_fit: &ModelFit,
    mu0: &ModelFit,
    mu1: &ModelFit,
    weights: &[f64],
    form: EstimatorForm,
    target: Target,
    terms: AipwTerms,
) -> Result<EstimateWithExpansion> {
    form_check(form, weights)?;
    let (c1, c0) = target.contrast();
    let ev = evaluate(view, e_fit)?;
    let e0 = evaluate(view, mu0)?;
    let e1 = evaluate(view, mu1)?;
    let mut e = ev.pred.clone();
    let trimmed = clamp_propensity(&mut e);
    let a = view.treatments();
    let y = view.outcomes();
    let mut da = DVector::zeros(e_fit.coefficients.len());
    let mut d0 = DVector::zeros(mu0.coefficients.len());
    let mut d1 = DVector::zeros(mu1.coefficients.len());
    let mut tau = Vec::with_capacity(view.len());
    for j in 0..view.len() {
        let t = f64::from(a[j]);
        let (m1, m0) = (e1.pred[j], e0.pred[j]);
        let r1 = t * (y[j] - m1);
        let r0 = (1.0 - t) * (y[j] - m0);
        tau.push(c1 * (r1 / e[j] + m1) + c0 * (r0 / (1.0 - e[j]) + m0));
        let de = -c1 * r1 / (e[j] * e[j]) + c0 * r0 / ((1.0 - e[j]) * (1.0 - e[j]));
        da += gradient(e_fit, &ev, j) * (weights[j] * de);
        d1 += gradient(mu1, &e1, j) * (weights[j] * c1 * (1.0 - t / e[j]));
        d0 += gradient(mu0, &e0, j) * (weights[j] * c0 * (1.0 - (1.0 - t) / (1.0 - e[j])));
    }
    let kind = kind_for(view, Method::Aipw, &[e_fit, mu0, mu1]);
    let mut corr = vec![Correction { fit: e_fit, d: da }];
    if terms == AipwTerms::Full {
        corr.push(Correction { fit: mu1, d: d1 });
        corr.push(Correction { fit: mu0, d: d0 });
    }
    let mut est = assemble(view, kind, target, weights, tau, corr, trimmed)?;
    if terms == AipwTerms::WithoutOutcomeProjections {
        est.model_fits.extend([mu1.clone(), mu0.clone()]);
    }
    Ok(est)
}

/// Bias-corrected matching. The bias models are linear regressions per arm
/// on the matching variables, fitted with `weights`.
pub fn matching_bias_corrected(
    view: &View,
    matching_vars: CovariateSet,
    m: usize,
    scaling: DistanceScaling,
    weights: &[f64],
    target: Target,
) -> Result<EstimateWithExpansion> {
    let mu0 = fit_outcome(view, ModelSpec::outcome_linear(matching_vars, 0), weights)?;
    let mu1 = fit_outcome(view, ModelSpec::outcome_linear(matching_vars, 1), weights)?;
    let matches = find_matches(view, matching_vars, m, scaling)?;
    let k = matches.weighted_counts(weights);
    let pred = fitted_values(view, matching_vars, [&mu0, &mu1])?;
    let (c1, c0) = target.contrast();
    let a = view.treatments();
    let y = view.outcomes();
    let mm = m as f64;
    let n = view.len();
    let mut tau = Vec::with_capacity(n);
    let mut lin = Vec::with_capacity(n);
    for j in 0..n {
        let own = a[j] as usize;
        let other = 1 - own;
        // bias-adjusted imputation of the missing potential outcome
        let imputed = matches.match_sets[j]
            .iter()
            .map(|&l| y[l] + pred[other][j] - pred[other][l])
            .sum::<f64>()
            / mm;
        let mut yhat = [0.0; 2];
        yhat[own] = y[j];
        yhat[other] = imputed;
        tau.push(c1 * yhat[1] + c0 * yhat[0]);
        let resid = (1.0 + k[j] / mm) * (y[j] - pred[own][j]);
        let mut part = [pred[0][j], pred[1][j]];
        part[own] += resid;
        lin.push(c1 * part[1] + c0 * part[0]);
    }
    let sw: f64 = weights.iter().sum();
    let point = tau.iter().zip(weights).map(|(t, w)| t * w).sum::<f64>() / sw;
    let expansion = lin.iter().map(|v| v - point).collect();
    let covariate_set = matching_vars;
    Ok(EstimateWithExpansion {
        kind: EstimatorKind { method: Method::Matching, covariate_set, dataset: view.sample() },
        target,
        point,
        expansion,
        weights: weights.to_vec(),
        rows: view.rows().to_vec(),
        treatments: a.to_vec(),
        model_fits: vec![mu0, mu1],
        weight_regime: regime_of(weights),
        trimmed: 0,
    })
}

fn outcome_spec(set: CovariateSet, arm: u8, link: OutcomeLink) -> ModelSpec {
    match link {
        OutcomeLink::Linear => ModelSpec::outcome_linear(set, arm),
        OutcomeLink::Logistic => ModelSpec::outcome_logistic(set, arm),
    }
}

/// Fits the working models a method needs and runs it on `view`.
pub fn estimate(
    view: &View,
    method: Method,
    propensity_set: CovariateSet,
    outcome_set: CovariateSet,
    weights: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateWithExpansion> {
    let form = match regime_of(weights) {
        Design::SimpleRandom => EstimatorForm::HorvitzThompson,
        Design::KnownInclusion => EstimatorForm::Hajek,
    };
    let fit_mu = |arm| fit_outcome(view, outcome_spec(outcome_set, arm, opts.outcome_link), weights);
    match method {
        Method::RegImputation => reg_imputation(view, &fit_mu(0)?, &fit_mu(1)?, weights, opts.target),
        Method::Ipw => {
            let e = fit_logistic_propensity(view, ModelSpec::propensity(propensity_set), weights)?;
            ipw(view, &e, weights, form, opts.target)
        }
        Method::Aipw => {
            let e = fit_logistic_propensity(view, ModelSpec::propensity(propensity_set), weights)?;
            aipw(view, &e, &fit_mu(0)?, &fit_mu(1)?, weights, form, opts.target, opts.aipw_terms)
        }
        Method::Matching => {
            matching_bias_corrected(view, outcome_set, opts.m, opts.scaling, weights, opts.target)
        }
    }
}

/// The initial estimator on the validation data, using U.
pub fn initial_estimate(
    d: &FusedDataset,
    method: Method,
    opts: &EstimatorOptions,
) -> Result<EstimateWithExpansion> {
    let v = validation_view(d);
    let w = v.design_weights();
    estimate(&v, method, opts.propensity_covariates, opts.outcome_covariates, &w, opts)
}

/// The same X-only procedure on the main data (unweighted) and on the
/// validation data (π⁻¹-weighted under known inclusion).
pub fn error_prone_pair(
    d: &FusedDataset,
    method: Method,
    opts: &EstimatorOptions,
) -> Result<(EstimateWithExpansion, EstimateWithExpansion)> {
    let x = CovariateSet::XOnly;
    let mv = main_view(d);
    let main = estimate(&mv, method, x, x, &mv.unit_weights(), opts)?;
    let vv = validation_view(d);
    let val = estimate(&vv, method, x, x, &vv.design_weights(), opts)?;
    Ok((main, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::estimating::{fit_logistic_propensity, ModelFit};
    use crate::matching::{bias_correction, matching_estimate_raw};

    fn view1(a: Vec<u8>, y: Vec<f64>, x: Vec<f64>) -> View {
        View::from_columns(a, y, x.into_iter().map(|v| vec![v]).collect(), None, None).unwrap()
    }

    /// A propensity fit whose coefficients are overwritten so that every
    /// unit gets the requested probability through a unit-specific column.
    fn fixed_propensity(view: &View, e: &[f64]) -> ModelFit {
        let mut f = fit_logistic_propensity(view, ModelSpec::propensity(CovariateSet::XOnly), &view.unit_weights())
            .unwrap_or_else(|_| panic!("fit"));
        let cov = view.covariates(CovariateSet::XOnly, true).unwrap();
        // solve for coefficients reproducing logit(e) exactly on these rows
        let m = DMatrix::from_row_slice(cov.n, cov.k, &cov.data);
        let target = DVector::from_iterator(cov.n, e.iter().map(|p| (p / (1.0 - p)).ln()));
        f.coefficients = m.svd(true, true).solve(&target, 1e-14).unwrap();
        f
    }

    fn lin(view: &View, arm: u8) -> ModelFit {
        fit_outcome(view, ModelSpec::outcome_linear(CovariateSet::XOnly, arm), &view.unit_weights()).unwrap()
    }

    #[test]
    fn ipw_four_unit_hand_value() {
        // x chosen so logit(ê) is linear in (1, x1, x2)
        let e = [0.5, 0.5, 0.8, 0.2];
        let x = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = View::from_columns(vec![1, 0, 1, 0], vec![2.0, 1.0, 4.0, 3.0], x, None, None).unwrap();
        let f = fixed_propensity(&v, &e);
        let est = ipw(&v, &f, &v.unit_weights(), EstimatorForm::HorvitzThompson, Target::Ate).unwrap();
        assert!((est.point - 0.8125).abs() < 1e-12, "{}", est.point);
    }

    #[test]
    fn ipw_constant_propensity_and_zero_outcome() {
        let x = vec![vec![]; 4];
        let v = View::from_columns(vec![1, 0, 1, 0], vec![3.0, 1.0, 5.0, 2.0], x.clone(), None, None).unwrap();
        let f = fit_logistic_propensity(&v, ModelSpec::propensity(CovariateSet::XOnly), &v.unit_weights()).unwrap();
        let est = ipw(&v, &f, &v.unit_weights(), EstimatorForm::HorvitzThompson, Target::Ate).unwrap();
        // ê = 0.5 with balanced arms gives the difference in means
        assert!((est.point - (4.0 - 1.5)).abs() < 1e-12);
        let v0 = View::from_columns(vec![1, 0, 1, 0], vec![0.0; 4], x, None, None).unwrap();
        let est = ipw(&v0, &f, &v0.unit_weights(), EstimatorForm::HorvitzThompson, Target::Ate).unwrap();
        assert_eq!(est.point, 0.0);
    }

    #[test]
    fn aipw_two_unit_hand_value() {
        let x = vec![vec![], vec![]];
        let v = View::from_columns(vec![1, 0], vec![3.0, 1.0], x, None, None).unwrap();
        let e = fit_logistic_propensity(&v, ModelSpec::propensity(CovariateSet::XOnly), &v.unit_weights()).unwrap();
        let v3 = View::from_columns(vec![1, 0, 1, 0], vec![2.0, 1.0, 2.0, 1.0], vec![vec![]; 4], None, None).unwrap();
        let mut mu1 = lin(&v3, 1);
        let mut mu0 = lin(&v3, 0);
        // rebind the constant fits to the two-unit view
        mu1.scores = mu1.scores.rows(0, 2).into_owned();
        mu0.scores = mu0.scores.rows(0, 2).into_owned();
        let est = aipw(&v, &e, &mu0, &mu1, &v.unit_weights(), EstimatorForm::HorvitzThompson, Target::Ate, AipwTerms::Full)
            .unwrap();
        // per-unit terms: 3/0.5 + (1 − 2)·2 − 0 − 1 = 3 and 0 + 2 − 1/0.5 − (1 − 2)·1 = 1
        assert!((est.point - 2.0).abs() < 1e-12, "{}", est.point);
    }

    #[test]
    fn aipw_equals_reg_when_residuals_vanish() {
        let v = view1(vec![1, 0, 1, 0, 1, 0], vec![1.0, 0.0, 3.0, 4.0, 5.0, 8.0], vec![0.0, 0.0, 1.0, 2.0, 2.0, 4.0]);
        let (m0, m1) = (lin(&v, 0), lin(&v, 1));
        let e = fit_logistic_propensity(&v, ModelSpec::propensity(CovariateSet::XOnly), &v.unit_weights()).unwrap();
        let r = reg_imputation(&v, &m0, &m1, &v.unit_weights(), Target::Ate).unwrap();
        let a = aipw(&v, &e, &m0, &m1, &v.unit_weights(), EstimatorForm::HorvitzThompson, Target::Ate, AipwTerms::Full)
            .unwrap();
        assert!((a.point - r.point).abs() < 1e-12);
    }

    #[test]
    fn aipw_collapses_to_ipw_with_constant_models() {
        let x = vec![vec![]; 5];
        let v = View::from_columns(vec![1, 0, 1, 1, 0], vec![1.0, 2.0, 4.0, 0.5, 3.0], x, None, None).unwrap();
        let e = fit_logistic_propensity(&v, ModelSpec::propensity(CovariateSet::XOnly), &v.unit_weights()).unwrap();
        let mut m0 = lin(&v, 0);
        let mut m1 = lin(&v, 1);
        m0.coefficients[0] = 0.0;
        m1.coefficients[0] = 0.0;
        let w = v.unit_weights();
        let a = aipw(&v, &e, &m0, &m1, &w, EstimatorForm::HorvitzThompson, Target::Ate, AipwTerms::Full).unwrap();
        let i = ipw(&v, &e, &w, EstimatorForm::HorvitzThompson, Target::Ate).unwrap();
        assert!((a.point - i.point).abs() < 1e-12);
    }

    #[test]
    fn reg_saturated_and_equal_models() {
        let v = view1(vec![1, 1, 0, 0], vec![3.0, 5.0, 1.0, 2.0], vec![0.0, 0.0, 0.0, 0.0]);
        let x = vec![vec![]; 4];
        let v2 = View::from_columns(v.treatments().to_vec(), v.outcomes().to_vec(), x, None, None).unwrap();
        let est = reg_imputation(&v2, &lin(&v2, 0), &lin(&v2, 1), &v2.unit_weights(), Target::Ate).unwrap();
        assert!((est.point - (4.0 - 1.5)).abs() < 1e-12);
        let same = lin(&v2, 1);
        let est = reg_imputation(&v2, &same, &same, &v2.unit_weights(), Target::Ate).unwrap();
        assert_eq!(est.point, 0.0);
    }

    #[test]
    fn reg_expansion_matches_hand_formula() {
        let v = view1(vec![1, 0, 1, 0, 1, 0], vec![2.0, 1.0, 3.5, 0.0, 6.0, 2.5], vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]);
        let (m0, m1) = (lin(&v, 0), lin(&v, 1));
        let est = reg_imputation(&v, &m0, &m1, &v.unit_weights(), Target::Ate).unwrap();
        let n = 6.0;
        let x: Vec<f64> = (0..6).map(|i| v.x(i)[0]).collect();
        let a = v.treatments();
        let y = v.outcomes();
        let (b0, b1) = (&m0.coefficients, &m1.coefficients);
        let mu = |b: &DVector<f64>, x: f64| b[0] + b[1] * x;
        let tau = x.iter().map(|&xi| mu(b1, xi) - mu(b0, xi)).sum::<f64>() / n;
        // mean of μ̇ = (1, x̄); bread of arm a = −mean(1{A=a} x xᵀ)
        let xbar = x.iter().sum::<f64>() / n;
        let bread = |arm: u8| {
            let mut m = DMatrix::<f64>::zeros(2, 2);
            for i in 0..6 {
                if a[i] == arm {
                    let r = [1.0, x[i]];
                    for p in 0..2 {
                        for q in 0..2 {
                            m[(p, q)] -= r[p] * r[q] / n;
                        }
                    }
                }
            }
            m
        };
        let g = DVector::from_vec(vec![1.0, xbar]);
        let c1 = bread(1).transpose().try_inverse().unwrap() * &g;
        let c0 = bread(0).transpose().try_inverse().unwrap() * &g;
        for j in 0..6 {
            let arm = a[j];
            let b = if arm == 1 { b1 } else { b0 };
            let s = DVector::from_vec(vec![y[j] - mu(b, x[j]), x[j] * (y[j] - mu(b, x[j]))]);
            let mut psi = mu(b1, x[j]) - mu(b0, x[j]) - tau;
            if arm == 1 {
                psi -= c1.dot(&s);
            } else {
                psi += c0.dot(&s);
            }
            assert!((est.expansion[j] - psi).abs() < 1e-12, "{j}: {} vs {psi}", est.expansion[j]);
        }
        assert!((est.point - tau).abs() < 1e-12);
        assert!(est.expansion_mean().abs() < 1e-8);
    }

    #[test]
    fn matching_examples() {
        let v = view1(vec![1, 0, 1, 0], vec![7.0; 4], vec![0.0, 0.1, 1.0, 0.9]);
        let est = matching_bias_corrected(&v, CovariateSet::XOnly, 1, DistanceScaling::Raw, &v.unit_weights(), Target::Ate)
            .unwrap();
        assert!(est.point.abs() < 1e-12);
        assert!(est.expansion.iter().all(|e| e.abs() < 1e-12));

        // exact matching: within-pair difference mean regardless of the fit
        let v = view1(vec![1, 0, 1, 0, 1, 0], vec![4.0, 1.0, 7.0, 2.0, 3.0, 3.5], vec![0.0, 0.0, 1.0, 1.0, 3.0, 3.0]);
        let est = matching_bias_corrected(&v, CovariateSet::XOnly, 1, DistanceScaling::Raw, &v.unit_weights(), Target::Ate)
            .unwrap();
        assert!((est.point - (3.0 + 5.0 - 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_point_is_raw_minus_correction() {
        let v = view1(
            vec![1, 0, 1, 0, 1, 0, 0],
            vec![2.0, 1.0, 5.0, 3.0, 4.0, 0.5, 2.2],
            vec![0.0, 0.3, 1.0, 0.9, 2.2, 1.7, 0.4],
        );
        let w = v.unit_weights();
        let est = matching_bias_corrected(&v, CovariateSet::XOnly, 2, DistanceScaling::Raw, &w, Target::Ate).unwrap();
        let r = find_matches(&v, CovariateSet::XOnly, 2, DistanceScaling::Raw).unwrap();
        let raw = matching_estimate_raw(&v, &r, &w);
        let corr = bias_correction(&v, &r, &est.model_fits[0], &est.model_fits[1], &w).unwrap();
        assert!((est.point - (raw - corr)).abs() < 1e-12);
        assert!(est.expansion_mean().abs() < 1e-10);
    }

    #[test]
    fn horvitz_thompson_needs_unit_weights() {
        let x = vec![vec![]; 4];
        let v = View::from_columns(vec![1, 0, 1, 0], vec![1.0; 4], x, None, None).unwrap();
        let f = fit_logistic_propensity(&v, ModelSpec::propensity(CovariateSet::XOnly), &v.unit_weights()).unwrap();
        assert!(ipw(&v, &f, &[2.0; 4], EstimatorForm::HorvitzThompson, Target::Ate).is_err());
        assert!(ipw(&v, &f, &[2.0; 4], EstimatorForm::Hajek, Target::Ate).is_ok());
    }

    fn six_unit_dataset(all_flagged: bool) -> FusedDataset {
        let rows = [
            (1u8, 2.0, 0.0, 0.3, true),
            (0, 1.0, 0.2, -0.1, true),
            (1, 3.0, 0.9, 0.5, all_flagged),
            (0, 0.5, 1.1, 0.2, true),
            (1, 4.0, 1.6, 0.8, true),
            (0, 2.0, 1.9, 0.6, all_flagged),
        ];
        let units = rows
            .iter()
            .enumerate()
            .map(|(i, &(a, y, x, u, val))| UnitRecord {
                id: format!("u{i}"),
                a,
                y,
                x: vec![x],
                u: Some(vec![u]),
                in_validation: val,
                pi: None,
            })
            .collect();
        FusedDataset::new(units, Design::SimpleRandom).unwrap()
    }

    #[test]
    fn error_prone_pair_on_identical_samples() {
        let d = six_unit_dataset(true);
        for method in [Method::RegImputation, Method::Ipw, Method::Aipw] {
            let (m, v) = error_prone_pair(&d, method, &EstimatorOptions::default()).unwrap();
            assert_eq!(m.point, v.point);
        }
    }

    #[test]
    fn error_prone_matching_hand_enumeration() {
        let d = six_unit_dataset(false);
        let opts = EstimatorOptions { m: 1, ..Default::default() };
        let (main, val) = error_prone_pair(&d, Method::Matching, &opts).unwrap();
        assert_eq!(main.expansion.len(), 6);
        assert_eq!(val.expansion.len(), 4);
        for (est, rows) in [(&main, vec![0usize, 1, 2, 3, 4, 5]), (&val, vec![0, 1, 3, 4])] {
            let units = &d.units()[..];
            let sub: Vec<_> = rows.iter().map(|&i| &units[i]).collect();
            let n = sub.len();
            // per-arm least-squares lines in x
            let line = |arm: u8| {
                let pts: Vec<(f64, f64)> = sub.iter().filter(|u| u.a == arm).map(|u| (u.x[0], u.y)).collect();
                let k = pts.len() as f64;
                let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
                let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
                let b = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
                    / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
                (my - b * mx, b)
            };
            let fits = [line(0), line(1)];
            let mut total = 0.0;
            for j in 0..n {
                // nearest opposite-arm unit by exhaustive scan, first index on ties
                let mut best: Option<(f64, usize)> = None;
                for l in 0..n {
                    if sub[l].a == sub[j].a {
                        continue;
                    }
                    let dist = (sub[j].x[0] - sub[l].x[0]).abs();
                    if best.is_none_or(|b| dist < b.0) {
                        best = Some((dist, l));
                    }
                }
                let l = best.unwrap().1;
                let f = fits[1 - sub[j].a as usize];
                let imputed = sub[l].y + f.1 * (sub[j].x[0] - sub[l].x[0]);
                total += if sub[j].a == 1 { sub[j].y - imputed } else { imputed - sub[j].y };
            }
            assert!((est.point - total / n as f64).abs() < 1e-12, "{} vs {}", est.point, total / n as f64);
        }
    }

    #[test]
    fn xu_refused_on_main() {
        let d = six_unit_dataset(false);
        let mv = main_view(&d);
        let r = estimate(&mv, Method::Aipw, CovariateSet::XU, CovariateSet::XU, &mv.unit_weights(), &EstimatorOptions::default());
        assert!(r.is_err());
    }
}
