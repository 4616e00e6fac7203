//! Parametric conditional densities with scores, Hessians and samplers.
//!
//! Covariate slices never include the intercept: coefficient 0 of every
//! regression model is the intercept and coefficient `k + 1` multiplies
//! covariate `k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FiError, Result};
use crate::numerics::{self, expit, log1p_exp, Cholesky, DesignMatrix, LogisticOptions};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Floor on `|v|` inside the variance function `sigma2 * |v|^(2 alpha)`.
pub const VARIANCE_COVARIATE_FLOOR: f64 = 1e-8;
/// Floor on any conditional variance.
pub const VARIANCE_FLOOR: f64 = 1e-300;

/// A conditional density `f(response | covariates; params)`.
pub trait ConditionalModel: Clone + Send + Sync + std::fmt::Debug {
    /// Number of free parameters.
    fn dim(&self) -> usize;
    /// Parameters in the optimization parameterization.
    fn params(&self) -> DVector<f64>;
    fn with_params(&self, params: &[f64]) -> Self;
    fn log_density(&self, response: f64, covariates: &[f64]) -> f64;
    fn score(&self, response: f64, covariates: &[f64]) -> DVector<f64>;
    fn score_hessian(&self, response: f64, covariates: &[f64]) -> DMatrix<f64>;
    fn mean(&self, covariates: &[f64]) -> f64;
    fn draw<R: Rng + ?Sized>(&self, covariates: &[f64], rng: &mut R) -> f64;
    /// Solves the weighted score equations `sum_r w_r S(theta; y_r, x_r) = 0`,
    /// starting from `self`. `design` carries an intercept column first.
    fn fit_weighted(&self, design: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self>;
}

/// Normal linear regression, optionally with variance `sigma2 * |v|^(2 alpha)`
/// where `v` is one of the covariates.
///
/// Parameter order: coefficients, `ln sigma2`, then `alpha` when the model is
/// heteroscedastic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalLinearModel {
    coefficients: Vec<f64>,
    sigma2: f64,
    variance_power: f64,
    variance_covariate_index: Option<usize>,
    #[serde(skip)]
    log_sigma2: f64,
}

impl NormalLinearModel {
    /// Homoscedastic model. `sigma2 = 0` is accepted for degenerate or
    /// injected models; its density is evaluated at the variance floor.
    pub fn new(coefficients: Vec<f64>, sigma2: f64) -> Result<Self> {
        Self::build(coefficients, sigma2, 0.0, None)
    }

    pub fn heteroscedastic(coefficients: Vec<f64>, sigma2: f64, alpha: f64, index: usize) -> Result<Self> {
        if index + 1 >= coefficients.len() {
            return Err(FiError::Argument(format!(
                "variance covariate {index} out of range for {} coefficients",
                coefficients.len()
            )));
        }
        Self::build(coefficients, sigma2, alpha, Some(index))
    }

    fn build(coefficients: Vec<f64>, sigma2: f64, alpha: f64, index: Option<usize>) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(FiError::Argument("coefficients must be finite and non-empty".into()));
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() || !alpha.is_finite() {
            return Err(FiError::Argument(format!("invalid variance parameters ({sigma2}, {alpha})")));
        }
        Ok(Self {
            coefficients,
            sigma2,
            variance_power: alpha,
            variance_covariate_index: index,
            log_sigma2: sigma2.ln(),
        })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn variance_power(&self) -> f64 {
        self.variance_power
    }

    pub fn variance_covariate_index(&self) -> Option<usize> {
        self.variance_covariate_index
    }

    pub fn is_heteroscedastic(&self) -> bool {
        self.variance_covariate_index.is_some()
    }

    /// `ln |v|` (floored) for the variance covariate, zero when homoscedastic.
    #[inline]
    fn log_abs_v(&self, covariates: &[f64]) -> f64 {
        match self.variance_covariate_index {
            Some(k) => covariates[k].abs().max(VARIANCE_COVARIATE_FLOOR).ln(),
            None => 0.0,
        }
    }

    /// Conditional variance at the given covariates.
    pub fn variance(&self, covariates: &[f64]) -> f64 {
        let lv = self.log_abs_v(covariates);
        (self.sigma2 * (2.0 * self.variance_power * lv).exp()).max(VARIANCE_FLOOR)
    }

    #[inline]
    fn parts(&self, response: f64, covariates: &[f64]) -> (f64, f64, f64) {
        let r = response - self.mean(covariates);
        let lv = self.log_abs_v(covariates);
        let log_s2 = self.log_sigma2 + 2.0 * self.variance_power * lv;
        (r, lv, log_s2.max(VARIANCE_FLOOR.ln()))
    }
}

impl ConditionalModel for NormalLinearModel {
    fn dim(&self) -> usize {
        self.coefficients.len() + 1 + usize::from(self.is_heteroscedastic())
    }

    fn params(&self) -> DVector<f64> {
        let mut p = self.coefficients.clone();
        p.push(self.log_sigma2);
        if self.is_heteroscedastic() {
            p.push(self.variance_power);
        }
        DVector::from_vec(p)
    }

    fn with_params(&self, params: &[f64]) -> Self {
        let k = self.coefficients.len();
        let log_sigma2 = params[k];
        let alpha = if self.is_heteroscedastic() { params[k + 1] } else { 0.0 };
        Self {
            coefficients: params[..k].to_vec(),
            sigma2: log_sigma2.exp(),
            variance_power: alpha,
            variance_covariate_index: self.variance_covariate_index,
            log_sigma2,
        }
    }

    #[inline]
    fn log_density(&self, response: f64, covariates: &[f64]) -> f64 {
        let (r, _, log_s2) = self.parts(response, covariates);
        -0.5 * (LN_2PI + log_s2 + r * r * (-log_s2).exp())
    }

    fn score(&self, response: f64, covariates: &[f64]) -> DVector<f64> {
        let (r, lv, log_s2) = self.parts(response, covariates);
        let inv = (-log_s2).exp();
        let k = self.coefficients.len();
        let mut s = DVector::zeros(self.dim());
        s[0] = r * inv;
        for (a, c) in covariates.iter().enumerate().take(k - 1) {
            s[a + 1] = r * inv * c;
        }
        let q = r * r * inv;
        s[k] = 0.5 * (q - 1.0);
        if self.is_heteroscedastic() {
            s[k + 1] = lv * (q - 1.0);
        }
        s
    }

    fn score_hessian(&self, response: f64, covariates: &[f64]) -> DMatrix<f64> {
        let (r, lv, log_s2) = self.parts(response, covariates);
        let inv = (-log_s2).exp();
        let k = self.coefficients.len();
        let d = self.dim();
        let mut x = Vec::with_capacity(k);
        x.push(1.0);
        x.extend_from_slice(&covariates[..k - 1]);
        let q = r * r * inv;
        let mut h = DMatrix::zeros(d, d);
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] = -x[a] * x[b] * inv;
            }
            h[(a, k)] = -r * x[a] * inv;
            h[(k, a)] = h[(a, k)];
        }
        h[(k, k)] = -0.5 * q;
        if self.is_heteroscedastic() {
            for a in 0..k {
                h[(a, k + 1)] = -2.0 * lv * r * x[a] * inv;
                h[(k + 1, a)] = h[(a, k + 1)];
            }
            h[(k, k + 1)] = -q * lv;
            h[(k + 1, k)] = h[(k, k + 1)];
            h[(k + 1, k + 1)] = -2.0 * lv * lv * q;
        }
        h
    }

    #[inline]
    fn mean(&self, covariates: &[f64]) -> f64 {
        let mut m = self.coefficients[0];
        for (c, v) in self.coefficients[1..].iter().zip(covariates) {
            m += c * v;
        }
        m
    }

    fn draw<R: Rng + ?Sized>(&self, covariates: &[f64], rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let sd = if self.sigma2 == 0.0 { 0.0 } else { self.variance(covariates).sqrt() };
        self.mean(covariates) + sd * z
    }

    fn fit_weighted(&self, design: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self> {
        match self.variance_covariate_index {
            None => fit_normal_mle(design, y, Some(w)),
            Some(index) => fit_heteroscedastic(design, y, Some(w), index),
        }
    }
}

/// Weighted least squares with the maximum likelihood variance
/// `sum w r^2 / sum w`.
pub fn fit_normal_mle(design: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<NormalLinearModel> {
    let fit = numerics::ols_fit(design, y, w)?;
    let mut ssr = 0.0;
    let mut wsum = 0.0;
    for i in 0..design.nrows() {
        let wi = w.map_or(1.0, |w| w[i]);
        let r = y[i] - design.row(i).iter().zip(fit.coefficients.iter()).map(|(a, b)| a * b).sum::<f64>();
        ssr += wi * r * r;
        wsum += wi;
    }
    NormalLinearModel::new(fit.coefficients.iter().copied().collect(), ssr / wsum)
}

/// Sum of weighted scores and Hessians of a model over rows of a design with
/// an intercept column first.
pub fn total_score_hessian<M: ConditionalModel>(
    model: &M,
    design: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = model.dim();
    let mut ll = 0.0;
    let mut s = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for i in 0..design.nrows() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let cov = &design.row(i)[1..];
        ll += wi * model.log_density(y[i], cov);
        s += model.score(y[i], cov) * wi;
        h += model.score_hessian(y[i], cov) * wi;
    }
    (ll, s, h)
}

/// Weighted log-likelihood of a model over a design.
pub fn total_loglik<M: ConditionalModel>(model: &M, design: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> f64 {
    (0..design.nrows())
        .map(|i| {
            let wi = w.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                0.0
            } else {
                wi * model.log_density(y[i], &design.row(i)[1..])
            }
        })
        .sum()
}

/// Damped Newton maximization of a weighted log-likelihood from `start`.
///
/// Indefinite Hessians are shifted toward `-lambda I`; steps that lower the
/// objective are halved up to 30 times. Converges when the largest score
/// component is below `tol * max(1, sum w)`.
pub fn newton_maximize<M: ConditionalModel>(
    start: &M,
    design: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(M, usize)> {
    let wsum = w.map_or(design.nrows() as f64, |w| w.iter().sum());
    let tol = tol * wsum.max(1.0);
    let mut model = start.clone();
    let (mut ll, _, _) = total_score_hessian(&model, design, y, w);
    for iter in 0..max_iter {
        let (_, s, h) = total_score_hessian(&model, design, y, w);
        if s.amax() < tol {
            return Ok((model, iter));
        }
        let neg_h = -h;
        let scale = (0..neg_h.nrows()).map(|i| neg_h[(i, i)].abs()).fold(1e-12, f64::max);
        let mut lambda = 0.0;
        let step = loop {
            let mut m = neg_h.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += lambda;
            }
            if let Ok(ch) = Cholesky::new(&m) {
                break ch.solve(&s);
            }
            lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
            if lambda > 1e12 * scale {
                return Err(FiError::NonConvergence {
                    iterations: iter,
                    diagnostic: "Hessian could not be regularized".into(),
                });
            }
        };
        let params = model.params();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let cand_p = &params + &step * t;
            let cand = model.with_params(cand_p.as_slice());
            let cand_ll = total_loglik(&cand, design, y, w);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                model = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(FiError::NonConvergence {
                iterations: iter,
                diagnostic: format!("step halving failed; max |score| = {:.3e}", s.amax()),
            });
        }
    }
    let (_, s, _) = total_score_hessian(&model, design, y, w);
    Err(FiError::NonConvergence {
        iterations: max_iter,
        diagnostic: format!("max |score| = {:.3e}", s.amax()),
    })
}

/// `E[ln chi^2_1]`, the offset of the log-squared-residual regression.
const MEAN_LOG_CHISQ1: f64 = -1.270_362_845_461_478;

/// Maximum likelihood fit of `y ~ N(x'b, sigma2 |x_index|^(2 alpha))`.
///
/// Starts from OLS coefficients and a regression of `ln r^2` on `ln x_index^2`.
pub fn fit_heteroscedastic(
    design: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    index: usize,
) -> Result<NormalLinearModel> {
    let ols = numerics::ols_fit(design, y, w)?;
    let coefs: Vec<f64> = ols.coefficients.iter().copied().collect();
    let mut log_rows = Vec::new();
    let mut log_r2 = Vec::new();
    let mut log_w = Vec::new();
    for i in 0..design.nrows() {
        let v = design.row(i)[index + 1];
        let fitted: f64 = design.row(i).iter().zip(&coefs).map(|(a, b)| a * b).sum();
        let r = y[i] - fitted;
        if v.abs() < 1e-12 || r == 0.0 {
            continue;
        }
        log_rows.push([(v * v).ln()]);
        log_r2.push((r * r).ln());
        log_w.push(w.map_or(1.0, |w| w[i]));
    }
    let (sigma2, alpha) = match DesignMatrix::with_intercept(&log_rows)
        .and_then(|d| numerics::ols_fit(&d, &log_r2, Some(&log_w)))
    {
        Ok(f) => ((f.coefficients[0] - MEAN_LOG_CHISQ1).exp(), f.coefficients[1]),
        Err(_) => (ols.residual_variance.max(1e-12), 0.0),
    };
    let start = NormalLinearModel::heteroscedastic(coefs, sigma2.max(1e-12), alpha, index)?;
    let (model, _) = newton_maximize(&start, design, y, w, 1e-8, 200)?;
    Ok(model)
}

/// Binary logistic regression `P(y = 1 | x) = expit(gamma0 + gamma_x' x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub gamma0: f64,
    pub gamma_x: Vec<f64>,
}

impl LogisticModel {
    pub fn new(gamma0: f64, gamma_x: Vec<f64>) -> Result<Self> {
        if !gamma0.is_finite() || gamma_x.iter().any(|g| !g.is_finite()) {
            return Err(FiError::Argument("logistic parameters must be finite".into()));
        }
        Ok(Self { gamma0, gamma_x })
    }

    #[inline]
    fn linear_predictor(&self, covariates: &[f64]) -> f64 {
        let mut eta = self.gamma0;
        for (g, v) in self.gamma_x.iter().zip(covariates) {
            eta += g * v;
        }
        eta
    }

    pub fn probability(&self, covariates: &[f64]) -> f64 {
        expit(self.linear_predictor(covariates))
    }
}

impl ConditionalModel for LogisticModel {
    fn dim(&self) -> usize {
        1 + self.gamma_x.len()
    }

    fn params(&self) -> DVector<f64> {
        let mut p = vec![self.gamma0];
        p.extend_from_slice(&self.gamma_x);
        DVector::from_vec(p)
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self {
            gamma0: params[0],
            gamma_x: params[1..].to_vec(),
        }
    }

    #[inline]
    fn log_density(&self, response: f64, covariates: &[f64]) -> f64 {
        let eta = self.linear_predictor(covariates);
        response * eta - log1p_exp(eta)
    }

    fn score(&self, response: f64, covariates: &[f64]) -> DVector<f64> {
        let r = response - self.probability(covariates);
        let mut s = DVector::zeros(self.dim());
        s[0] = r;
        for (a, v) in covariates.iter().enumerate().take(self.gamma_x.len()) {
            s[a + 1] = r * v;
        }
        s
    }

    fn score_hessian(&self, _response: f64, covariates: &[f64]) -> DMatrix<f64> {
        let p = self.probability(covariates);
        let v = p * (1.0 - p);
        let d = self.dim();
        let x: Vec<f64> = std::iter::once(1.0).chain(covariates.iter().copied().take(d - 1)).collect();
        DMatrix::from_fn(d, d, |a, b| -v * x[a] * x[b])
    }

    fn mean(&self, covariates: &[f64]) -> f64 {
        self.probability(covariates)
    }

    fn draw<R: Rng + ?Sized>(&self, covariates: &[f64], rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.probability(covariates) {
            1.0
        } else {
            0.0
        }
    }

    fn fit_weighted(&self, design: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self> {
        let opts = LogisticOptions {
            init: Some(self.params()),
            ..LogisticOptions::default()
        };
        let fit = numerics::logistic_fit(design, y, Some(w), &opts)?;
        Ok(self.with_params(fit.coefficients.as_slice()))
    }
}

/// Normal marginal `N(mu, sigma2)`; parameters `(mu, ln sigma2)`. Covariates are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianMarginal {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(FiError::Argument(format!("invalid normal marginal ({mu}, {sigma2})")));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Weighted maximum likelihood fit.
    pub fn fit(values: &[f64], w: Option<&[f64]>) -> Result<Self> {
        if values.len() < 2 {
            return Err(FiError::Argument("need at least two values".into()));
        }
        let ones = vec![1.0; values.len()];
        let w = w.unwrap_or(&ones);
        let mu = numerics::weighted_mean(values, w);
        let dev: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
        Self::new(mu, numerics::weighted_mean(&dev, w))
    }
}

impl ConditionalModel for GaussianMarginal {
    fn dim(&self) -> usize {
        2
    }

    fn params(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.mu, self.sigma2.ln()])
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self {
            mu: params[0],
            sigma2: params[1].exp(),
        }
    }

    fn log_density(&self, response: f64, _covariates: &[f64]) -> f64 {
        let r = response - self.mu;
        -0.5 * (LN_2PI + self.sigma2.ln() + r * r / self.sigma2)
    }

    fn score(&self, response: f64, _covariates: &[f64]) -> DVector<f64> {
        let r = response - self.mu;
        DVector::from_vec(vec![r / self.sigma2, 0.5 * (r * r / self.sigma2 - 1.0)])
    }

    fn score_hessian(&self, response: f64, _covariates: &[f64]) -> DMatrix<f64> {
        let r = response - self.mu;
        let inv = 1.0 / self.sigma2;
        DMatrix::from_row_slice(2, 2, &[-inv, -r * inv, -r * inv, -0.5 * r * r * inv])
    }

    fn mean(&self, _covariates: &[f64]) -> f64 {
        self.mu
    }

    fn draw<R: Rng + ?Sized>(&self, _covariates: &[f64], rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mu + self.sigma2.sqrt() * z
    }

    fn fit_weighted(&self, design: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self> {
        if design.nrows() != y.len() {
            return Err(FiError::Argument("design and response lengths differ".into()));
        }
        Self::fit(y, Some(w))
    }
}

/// Parameters of the two conditional models of a matching problem:
/// `f(y1 | x; theta1)` from sample A and `f(y2 | x1, y1; theta2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams<M = NormalLinearModel> {
    pub theta1: NormalLinearModel,
    pub theta2: M,
}
