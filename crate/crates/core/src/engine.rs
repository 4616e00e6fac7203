//! Fractional imputation EM.
//!
//! Donors are generated once from a stage-A model (parametric draws or the
//! observed sample-A values) and carry fixed log initial weights. The EM then
//! alternates the fractional-weight update `w*_ij ∝ q_ij0 f(y2_i | x1_i, v_ij)`
//! with a weighted score solve for the outcome model.

use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FractionalDataset, MatchingProblem};
use crate::error::{FiError, Result};
use crate::models::{fit_normal_mle, ConditionalModel, NormalLinearModel, ThetaParams};
use crate::numerics::{invert, DesignMatrix};
use crate::rng::{derive_seed, stream_index, substream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Parametric donors drawn from the stage-A model.
    Pfi,
    /// Every sample-A response is a donor, with importance initial weights.
    Hdfi,
    /// Parametric donors with weights frozen at `1/m` (conditional independence).
    Sri,
}

impl FromStr for Method {
    type Err = FiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pfi" => Ok(Self::Pfi),
            "hdfi" => Ok(Self::Hdfi),
            "sri" => Ok(Self::Sri),
            other => Err(FiError::Argument(format!("unknown method `{other}` (expected pfi, hdfi or sri)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub m: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            m: 10,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            method: Method::Pfi,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(FiError::Argument("m must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(FiError::Argument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(FiError::Argument("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// The units receiving imputations: weights, outcome covariates (without the
/// imputed variable) and observed outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipients {
    pub ids: Vec<String>,
    pub weights: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    pub response: Vec<f64>,
}

impl Recipients {
    /// Sample B of a matching problem: covariates `x1`, response `y2`.
    pub fn from_problem(problem: &MatchingProblem) -> Self {
        let b = &problem.sample_b;
        Self {
            ids: b.iter().map(|u| u.id.clone()).collect(),
            weights: b.iter().map(|u| u.weight).collect(),
            covariates: b.iter().map(|u| u.x1.clone()).collect(),
            response: b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Outcome covariate row `[x1..., imputed]`.
    pub fn outcome_row(&self, i: usize, imputed: f64) -> Vec<f64> {
        let mut r = self.covariates[i].clone();
        r.push(imputed);
        r
    }
}

/// Sample-A quantities for linearization: per-unit scores of the stage-A
/// log-likelihood, unit weights and the observed information.
#[derive(Debug, Clone)]
pub struct SampleAInfo {
    pub weights: Vec<f64>,
    pub scores: Vec<DVector<f64>>,
    pub information: DMatrix<f64>,
}

/// A source of donors with log initial weights depending on stage-A
/// parameters. Donor values are fixed once generated; only the weights move
/// when the parameters change.
pub trait DonorModel: Clone + Send + Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> DVector<f64>;
    fn with_params(&self, params: &[f64]) -> Self;
    fn n_recipients(&self) -> usize;
    /// Donor values for every recipient; `ids` key the random streams.
    fn generate(&self, m: usize, seed: u64, ids: &[String]) -> Vec<Vec<f64>>;
    /// Unnormalized log initial weights of recipient `i`'s donors.
    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64>;
    /// Gradients of [`DonorModel::log_initial`] in the stage-A parameters.
    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>>;
    /// A single conditional-mean imputation, used to start the EM.
    fn point_imputation(&self, _i: usize) -> Option<f64> {
        None
    }
    fn sample_a(&self) -> SampleAInfo;
    /// For hot-deck donors (donor `j` is sample-A unit `j`): the matrix
    /// `P[j, k]` of unit `k`'s share in the normalizing sum of donor `j`, or a
    /// zero-column matrix when the initial weights have no such sum.
    fn hot_deck(&self) -> Option<DMatrix<f64>> {
        None
    }
}

fn normal_sample_a(model: &NormalLinearModel, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> SampleAInfo {
    let d = model.dim();
    let mut info = DMatrix::zeros(d, d);
    let scores = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((x, y), w)| {
            info -= model.score_hessian(*y, x) * *w;
            model.score(*y, x)
        })
        .collect();
    SampleAInfo {
        weights: w.to_vec(),
        scores,
        information: info,
    }
}

/// Donors drawn from a normal linear stage-A model. Log initial weights are
/// `ln f(v | x; theta1) - ln h(v | x)` with `h` the model the donors were
/// drawn from, so they vanish at the fitted parameters.
#[derive(Debug, Clone)]
pub struct ParametricDonors {
    model: NormalLinearModel,
    proposal: NormalLinearModel,
    recipient_x: Vec<Vec<f64>>,
    a_x: Vec<Vec<f64>>,
    a_y: Vec<f64>,
    a_w: Vec<f64>,
}

impl ParametricDonors {
    pub fn new(model: NormalLinearModel, recipient_x: Vec<Vec<f64>>, a_x: Vec<Vec<f64>>, a_y: Vec<f64>, a_w: Vec<f64>) -> Self {
        Self {
            proposal: model.clone(),
            model,
            recipient_x,
            a_x,
            a_y,
            a_w,
        }
    }

    pub fn from_problem(problem: &MatchingProblem, theta1: NormalLinearModel) -> Self {
        let (a_x, a_y, a_w) = sample_a_arrays(problem);
        Self::new(theta1, problem.sample_b.iter().map(|u| u.covariates()).collect(), a_x, a_y, a_w)
    }

    pub fn model(&self) -> &NormalLinearModel {
        &self.model
    }
}

fn sample_a_arrays(problem: &MatchingProblem) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let a = &problem.sample_a;
    (
        a.iter().map(|u| u.covariates()).collect(),
        a.iter().map(|u| u.y1.unwrap_or(f64::NAN)).collect(),
        a.iter().map(|u| u.weight).collect(),
    )
}

impl DonorModel for ParametricDonors {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn params(&self) -> DVector<f64> {
        self.model.params()
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self {
            model: self.model.with_params(params),
            ..self.clone()
        }
    }

    fn n_recipients(&self) -> usize {
        self.recipient_x.len()
    }

    fn generate(&self, m: usize, seed: u64, ids: &[String]) -> Vec<Vec<f64>> {
        let seed = derive_seed(seed, tags::DONORS);
        ids.par_iter()
            .zip(&self.recipient_x)
            .map(|(id, x)| {
                let mut rng = substream(seed, stream_index(id));
                (0..m).map(|_| self.proposal.draw(x, &mut rng)).collect()
            })
            .collect()
    }

    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64> {
        let x = &self.recipient_x[i];
        donors
            .iter()
            .map(|v| self.model.log_density(*v, x) - self.proposal.log_density(*v, x))
            .collect()
    }

    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>> {
        let x = &self.recipient_x[i];
        donors.iter().map(|v| self.model.score(*v, x)).collect()
    }

    fn point_imputation(&self, i: usize) -> Option<f64> {
        Some(self.model.mean(&self.recipient_x[i]))
    }

    fn sample_a(&self) -> SampleAInfo {
        normal_sample_a(&self.model, &self.a_x, &self.a_y, &self.a_w)
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Hot-deck donors: every sample-A response, with initial weight
/// `w_j f(y1_j | x_i) / sum_k w_k f(y1_j | x_k)`. The donor's own weight
/// `w_j` is a constant under equal weights and drops out on normalization.
#[derive(Debug, Clone)]
pub struct HotDeckDonors {
    model: NormalLinearModel,
    recipient_x: Vec<Vec<f64>>,
    a_x: Vec<Vec<f64>>,
    a_y: Vec<f64>,
    a_w: Vec<f64>,
    log_denominator: Vec<f64>,
    /// `sum_k P[j, k] S1(y1_j | x_k)` per donor, built on first use.
    denominator_score: OnceLock<Vec<DVector<f64>>>,
}

impl HotDeckDonors {
    pub fn new(model: NormalLinearModel, recipient_x: Vec<Vec<f64>>, a_x: Vec<Vec<f64>>, a_y: Vec<f64>, a_w: Vec<f64>) -> Self {
        let log_denominator = Self::denominators(&model, &a_x, &a_y, &a_w);
        Self {
            model,
            recipient_x,
            a_x,
            a_y,
            a_w,
            log_denominator,
            denominator_score: OnceLock::new(),
        }
    }

    pub fn from_problem(problem: &MatchingProblem, theta1: NormalLinearModel) -> Self {
        let (a_x, a_y, a_w) = sample_a_arrays(problem);
        Self::new(theta1, problem.sample_b.iter().map(|u| u.covariates()).collect(), a_x, a_y, a_w)
    }

    fn denominators(model: &NormalLinearModel, a_x: &[Vec<f64>], a_y: &[f64], a_w: &[f64]) -> Vec<f64> {
        a_y.par_iter()
            .map(|y| log_sum_exp(a_x.iter().zip(a_w).map(|(x, w)| w.ln() + model.log_density(*y, x))))
            .collect()
    }

    fn shares(&self) -> DMatrix<f64> {
        let n = self.a_y.len();
        DMatrix::from_fn(n, n, |j, k| {
            (self.a_w[k].ln() + self.model.log_density(self.a_y[j], &self.a_x[k]) - self.log_denominator[j]).exp()
        })
    }

    fn denominator_scores(&self) -> &[DVector<f64>] {
        self.denominator_score.get_or_init(|| {
            let p = self.shares();
            (0..self.a_y.len())
                .map(|j| {
                    let mut s = DVector::zeros(self.model.dim());
                    for (k, x) in self.a_x.iter().enumerate() {
                        s += self.model.score(self.a_y[j], x) * p[(j, k)];
                    }
                    s
                })
                .collect()
        })
    }
}

impl DonorModel for HotDeckDonors {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn params(&self) -> DVector<f64> {
        self.model.params()
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self::new(
            self.model.with_params(params),
            self.recipient_x.clone(),
            self.a_x.clone(),
            self.a_y.clone(),
            self.a_w.clone(),
        )
    }

    fn n_recipients(&self) -> usize {
        self.recipient_x.len()
    }

    fn generate(&self, _m: usize, _seed: u64, ids: &[String]) -> Vec<Vec<f64>> {
        vec![self.a_y.clone(); ids.len()]
    }

    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64> {
        let x = &self.recipient_x[i];
        donors
            .iter()
            .zip(&self.log_denominator)
            .zip(&self.a_w)
            .map(|((v, d), w)| w.ln() + self.model.log_density(*v, x) - d)
            .collect()
    }

    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>> {
        let x = &self.recipient_x[i];
        donors
            .iter()
            .zip(self.denominator_scores())
            .map(|(v, d)| self.model.score(*v, x) - d)
            .collect()
    }

    fn point_imputation(&self, i: usize) -> Option<f64> {
        Some(self.model.mean(&self.recipient_x[i]))
    }

    fn sample_a(&self) -> SampleAInfo {
        normal_sample_a(&self.model, &self.a_x, &self.a_y, &self.a_w)
    }

    fn hot_deck(&self) -> Option<DMatrix<f64>> {
        Some(self.shares())
    }
}

/// Either donor source of the matching problem.
#[derive(Debug, Clone)]
pub enum MatchingDonors {
    Parametric(ParametricDonors),
    HotDeck(HotDeckDonors),
}

macro_rules! delegate {
    ($self:ident, $d:ident => $e:expr) => {
        match $self {
            MatchingDonors::Parametric($d) => $e,
            MatchingDonors::HotDeck($d) => $e,
        }
    };
}

impl DonorModel for MatchingDonors {
    fn dim(&self) -> usize {
        delegate!(self, d => d.dim())
    }

    fn params(&self) -> DVector<f64> {
        delegate!(self, d => d.params())
    }

    fn with_params(&self, params: &[f64]) -> Self {
        match self {
            Self::Parametric(d) => Self::Parametric(d.with_params(params)),
            Self::HotDeck(d) => Self::HotDeck(d.with_params(params)),
        }
    }

    fn n_recipients(&self) -> usize {
        delegate!(self, d => d.n_recipients())
    }

    fn generate(&self, m: usize, seed: u64, ids: &[String]) -> Vec<Vec<f64>> {
        delegate!(self, d => d.generate(m, seed, ids))
    }

    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64> {
        delegate!(self, d => d.log_initial(i, donors))
    }

    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>> {
        delegate!(self, d => d.log_initial_grad(i, donors))
    }

    fn point_imputation(&self, i: usize) -> Option<f64> {
        delegate!(self, d => d.point_imputation(i))
    }

    fn sample_a(&self) -> SampleAInfo {
        delegate!(self, d => d.sample_a())
    }

    fn hot_deck(&self) -> Option<DMatrix<f64>> {
        delegate!(self, d => d.hot_deck())
    }
}

/// Normalizes log weights after subtracting their maximum; `None` when every
/// weight is zero or any is NaN.
pub fn normalize_log_weights(lw: &[f64]) -> Option<Vec<f64>> {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || lw.iter().any(|v| v.is_nan()) {
        return None;
    }
    let e: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Some(e.into_iter().map(|v| v / s).collect())
}

/// Draws donors and attaches normalized initial weights.
pub fn initial_dataset<D: DonorModel>(donors: &D, rec: &Recipients, m: usize, seed: u64) -> Result<FractionalDataset> {
    if donors.n_recipients() != rec.len() {
        return Err(FiError::Argument(format!(
            "donor model covers {} recipients, {} given",
            donors.n_recipients(),
            rec.len()
        )));
    }
    let pools = donors.generate(m, seed, &rec.ids);
    let log_initial: Vec<Vec<f64>> = pools
        .par_iter()
        .enumerate()
        .map(|(i, d)| donors.log_initial(i, d))
        .collect();
    let weights = log_initial
        .iter()
        .enumerate()
        .map(|(i, lw)| normalize_log_weights(lw).ok_or_else(|| FiError::DegenerateRecipient(rec.ids[i].clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(FractionalDataset {
        donors: pools,
        log_initial,
        weights,
    })
}

fn kernel<M: ConditionalModel>(model: &M, rec: &Recipients, i: usize, ds: &FractionalDataset) -> Vec<f64> {
    let mut row = rec.outcome_row(i, 0.0);
    let last = row.len() - 1;
    ds.donors[i]
        .iter()
        .zip(&ds.log_initial[i])
        .map(|(v, q)| {
            row[last] = *v;
            q + model.log_density(rec.response[i], &row)
        })
        .collect()
}

fn recipient_loglik(lw: &[f64], log_initial: &[f64]) -> f64 {
    log_sum_exp(lw.iter().copied()) - log_sum_exp(log_initial.iter().copied())
}

/// E-step: `w*_ij ∝ q_ij0 f(y2_i | x1_i, v_ij; theta2)`, normalized per
/// recipient in log space. Returns the observed pseudo log-likelihood at
/// `theta2`.
pub fn update_weights<M: ConditionalModel>(ds: &mut FractionalDataset, rec: &Recipients, theta2: &M) -> Result<f64> {
    let results: Vec<(Option<Vec<f64>>, f64)> = (0..rec.len())
        .into_par_iter()
        .map(|i| {
            let lw = kernel(theta2, rec, i, ds);
            let ll = recipient_loglik(&lw, &ds.log_initial[i]);
            (normalize_log_weights(&lw), ll)
        })
        .collect();
    let mut total = 0.0;
    for (i, (w, ll)) in results.into_iter().enumerate() {
        ds.weights[i] = w.ok_or_else(|| FiError::DegenerateRecipient(rec.ids[i].clone()))?;
        total += rec.weights[i] * ll;
    }
    Ok(total)
}

/// `sum_i w_i ln sum_j q_ij0 f(y2_i | x1_i, v_ij; theta2)` with `q_ij0` the
/// normalized initial weights. May be `-inf` when a recipient has no support.
pub fn observed_pseudo_loglik<M: ConditionalModel>(ds: &FractionalDataset, rec: &Recipients, theta2: &M) -> f64 {
    let per: Vec<f64> = (0..rec.len())
        .into_par_iter()
        .map(|i| recipient_loglik(&kernel(theta2, rec, i, ds), &ds.log_initial[i]))
        .collect();
    per.iter().zip(&rec.weights).map(|(l, w)| w * l).sum()
}

/// All (recipient, donor) outcome rows stacked for the M-step.
#[derive(Debug, Clone)]
pub struct Stacked {
    pub design: DesignMatrix,
    pub response: Vec<f64>,
    pub unit_weights: Vec<f64>,
}

pub fn stack(ds: &FractionalDataset, rec: &Recipients) -> Result<Stacked> {
    let p = rec.covariates.first().map_or(0, Vec::len) + 2;
    let total = ds.total_donors();
    let mut data = Vec::with_capacity(total * p);
    let mut response = Vec::with_capacity(total);
    let mut unit_weights = Vec::with_capacity(total);
    for i in 0..rec.len() {
        for v in &ds.donors[i] {
            data.push(1.0);
            data.extend_from_slice(&rec.covariates[i]);
            data.push(*v);
            response.push(rec.response[i]);
            unit_weights.push(rec.weights[i]);
        }
    }
    Ok(Stacked {
        design: DesignMatrix::new(total, p, data)?,
        response,
        unit_weights,
    })
}

/// M-step: solves `sum_i w_i sum_j w*_ij S(theta; x1_i, v_ij, y2_i) = 0`
/// starting from `start`.
pub fn m_step<M: ConditionalModel>(stacked: &Stacked, ds: &FractionalDataset, start: &M) -> Result<M> {
    let w: Vec<f64> = ds
        .weights
        .iter()
        .flatten()
        .zip(&stacked.unit_weights)
        .map(|(a, b)| a * b)
        .collect();
    start.fit_weighted(&stacked.design, &stacked.response, &w)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Outcome parameters entering each iteration.
    pub theta2: Vec<Vec<f64>>,
    /// Observed pseudo log-likelihood at those parameters.
    pub loglik: Vec<f64>,
    /// Largest absolute parameter change produced by the iteration.
    pub max_change: Vec<f64>,
    /// Pseudo log-likelihood at the returned parameters.
    pub final_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct EmResult<M> {
    pub theta2: M,
    pub dataset: FractionalDataset,
    pub trace: EmTrace,
    pub converged: bool,
    pub iterations: usize,
}

fn initial_theta<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    stacked: &Stacked,
    ds: &FractionalDataset,
) -> Result<M> {
    let point: Option<Vec<f64>> = (0..rec.len()).map(|i| donors.point_imputation(i)).collect();
    match point {
        Some(yhat) => {
            let rows: Vec<Vec<f64>> = yhat.iter().enumerate().map(|(i, v)| rec.outcome_row(i, *v)).collect();
            start.fit_weighted(&DesignMatrix::with_intercept(&rows)?, &rec.response, &rec.weights)
        }
        None => m_step(stacked, ds, start),
    }
}

fn max_abs_change(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, |m, d| if d.is_nan() { f64::NAN } else { m.max(d) })
}

/// Runs the EM from fixed donors. `start` supplies the outcome model form.
///
/// The first iterate is the outcome fit on single conditional-mean
/// imputations when the donor model provides them, otherwise one M-step on
/// the initial weights. SRI performs a single M-step on the initial weights.
/// Non-convergence is reported through `converged`, not as an error.
pub fn run_em<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    config: &EmConfig,
) -> Result<EmResult<M>> {
    config.validate()?;
    let mut ds = initial_dataset(donors, rec, config.m, config.seed)?;
    run_em_from(donors, rec, start, config, &mut ds).map(|(theta2, trace, converged, iterations)| EmResult {
        theta2,
        dataset: ds,
        trace,
        converged,
        iterations,
    })
}

fn run_em_from<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    config: &EmConfig,
    ds: &mut FractionalDataset,
) -> Result<(M, EmTrace, bool, usize)> {
    let stacked = stack(ds, rec)?;
    let mut trace = EmTrace::default();
    if config.method == Method::Sri {
        let theta = m_step(&stacked, ds, start)?;
        trace.final_loglik = observed_pseudo_loglik(ds, rec, &theta);
        return Ok((theta, trace, true, 1));
    }
    let mut theta = initial_theta(donors, rec, start, &stacked, ds)?;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        let ll = update_weights(ds, rec, &theta)?;
        let next = m_step(&stacked, ds, &theta)?;
        let (p0, p1) = (theta.params(), next.params());
        let change = max_abs_change(&p0, &p1);
        trace.theta2.push(p0.iter().copied().collect());
        trace.loglik.push(ll);
        trace.max_change.push(change);
        theta = next;
        iterations += 1;
        if !change.is_finite() {
            break;
        }
        if change < config.tol {
            converged = true;
            break;
        }
    }
    trace.final_loglik = update_weights(ds, rec, &theta)?;
    Ok((theta, trace, converged, iterations))
}

/// Weighted MLE of `y1 ~ N((1, x1, x2)'a, s2)` on sample A.
pub fn fit_stage_a(problem: &MatchingProblem) -> Result<NormalLinearModel> {
    let (x, y, w) = sample_a_arrays(problem);
    let model = fit_normal_mle(&DesignMatrix::with_intercept(&x)?, &y, Some(&w))?;
    let scale = crate::numerics::weighted_mean(&y.iter().map(|v| v * v).collect::<Vec<_>>(), &w).max(1.0);
    if model.sigma2() <= 1e-20 * scale {
        return Err(FiError::Degenerate(format!(
            "stage-A residual variance is {:e}; y1 is an exact function of x",
            model.sigma2()
        )));
    }
    Ok(model)
}

/// PFI donors: `m` draws per recipient from the stage-A model, uniform weights.
pub fn generate_donors_pfi(theta1: &NormalLinearModel, problem: &MatchingProblem, config: &EmConfig) -> Result<FractionalDataset> {
    config.validate()?;
    let donors = ParametricDonors::from_problem(problem, theta1.clone());
    initial_dataset(&donors, &Recipients::from_problem(problem), config.m, config.seed)
}

/// HDFI donors: all sample-A responses for every recipient with importance
/// initial weights.
pub fn generate_donors_hdfi(theta1: &NormalLinearModel, problem: &MatchingProblem) -> Result<FractionalDataset> {
    let donors = HotDeckDonors::from_problem(problem, theta1.clone());
    initial_dataset(&donors, &Recipients::from_problem(problem), 1, 0)
}

/// Starting form of the normal outcome model `y2 ~ (1, x1, y1)`.
pub fn normal_outcome_start(k1: usize) -> NormalLinearModel {
    NormalLinearModel::new(vec![0.0; k1 + 2], 1.0).expect("valid start")
}

/// Fitted matching problem.
#[derive(Debug, Clone)]
pub struct MatchingFit {
    pub theta: ThetaParams,
    pub donors: MatchingDonors,
    pub recipients: Recipients,
    pub dataset: FractionalDataset,
    pub trace: EmTrace,
    pub converged: bool,
    pub iterations: usize,
    pub method: Method,
}

/// Stage-A fit, donor generation and EM for the normal linear matching model.
pub fn run_matching(problem: &MatchingProblem, config: &EmConfig) -> Result<MatchingFit> {
    problem.validate()?;
    config.validate()?;
    let theta1 = fit_stage_a(problem)?;
    let donors = match config.method {
        Method::Pfi | Method::Sri => MatchingDonors::Parametric(ParametricDonors::from_problem(problem, theta1.clone())),
        Method::Hdfi => MatchingDonors::HotDeck(HotDeckDonors::from_problem(problem, theta1.clone())),
    };
    let rec = Recipients::from_problem(problem);
    let res = run_em(&donors, &rec, &normal_outcome_start(problem.roles.x1.len()), config)?;
    Ok(MatchingFit {
        theta: ThetaParams {
            theta1,
            theta2: res.theta2,
        },
        donors,
        recipients: rec,
        dataset: res.dataset,
        trace: res.trace,
        converged: res.converged,
        iterations: res.iterations,
        method: config.method,
    })
}

/// One (recipient, donor) point passed to an estimating function.
#[derive(Debug, Clone, Copy)]
pub struct DonorPoint<'a> {
    /// Outcome covariates `x1` of the recipient.
    pub covariates: &'a [f64],
    pub imputed: f64,
    pub response: f64,
}

/// An estimating function `U(eta; x1, y1, y2)` free of the model parameters.
pub trait EstimatingFunction: Sync {
    fn dim(&self) -> usize;
    fn value(&self, eta: &[f64], point: &DonorPoint) -> DVector<f64>;
    /// `dU / d eta'`; central differences with `h = 1e-6 max(1, |eta_k|)` by default.
    fn jacobian(&self, eta: &[f64], point: &DonorPoint) -> DMatrix<f64> {
        let h: Vec<f64> = eta.iter().map(|e| 1e-6 * e.abs().max(1.0)).collect();
        crate::numerics::fd_jacobian(|q| Ok(self.value(q, point)), eta, &h)
            .unwrap_or_else(|_| DMatrix::from_element(self.dim(), eta.len(), f64::NAN))
    }
}

/// `U = y1 - eta`.
#[derive(Debug, Clone, Copy)]
pub struct ImputedMean;

impl EstimatingFunction for ImputedMean {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, eta: &[f64], p: &DonorPoint) -> DVector<f64> {
        DVector::from_element(1, p.imputed - eta[0])
    }
    fn jacobian(&self, _eta: &[f64], _p: &DonorPoint) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }
}

/// `U = 1(y1 < c1, y2 < c2) - eta`.
#[derive(Debug, Clone, Copy)]
pub struct JointBelow {
    pub y1: f64,
    pub y2: f64,
}

impl EstimatingFunction for JointBelow {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, eta: &[f64], p: &DonorPoint) -> DVector<f64> {
        let hit = p.imputed < self.y1 && p.response < self.y2;
        DVector::from_element(1, f64::from(u8::from(hit)) - eta[0])
    }
    fn jacobian(&self, _eta: &[f64], _p: &DonorPoint) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }
}

/// Normal equations of the simple regression `y2 = a + b y1`, `eta = (a, b)`.
#[derive(Debug, Clone, Copy)]
pub struct SimpleRegression;

impl EstimatingFunction for SimpleRegression {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, eta: &[f64], p: &DonorPoint) -> DVector<f64> {
        let r = p.response - eta[0] - eta[1] * p.imputed;
        DVector::from_vec(vec![r, r * p.imputed])
    }
    fn jacobian(&self, _eta: &[f64], p: &DonorPoint) -> DMatrix<f64> {
        let y = p.imputed;
        DMatrix::from_row_slice(2, 2, &[-1.0, -y, -y, -y * y])
    }
}

/// The outcome-model score with `eta` as the outcome parameters.
#[derive(Debug, Clone)]
pub struct OutcomeScore<M>(pub M);

impl<M: ConditionalModel> EstimatingFunction for OutcomeScore<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn value(&self, eta: &[f64], p: &DonorPoint) -> DVector<f64> {
        let mut row = p.covariates.to_vec();
        row.push(p.imputed);
        self.0.with_params(eta).score(p.response, &row)
    }
    fn jacobian(&self, eta: &[f64], p: &DonorPoint) -> DMatrix<f64> {
        let mut row = p.covariates.to_vec();
        row.push(p.imputed);
        self.0.with_params(eta).score_hessian(p.response, &row)
    }
}

/// `sum_i w_i sum_j w*_ij U` and its Jacobian in `eta`.
pub fn fractional_equation<E: EstimatingFunction>(
    ds: &FractionalDataset,
    rec: &Recipients,
    u: &E,
    eta: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = u.dim();
    let mut total = DVector::zeros(d);
    let mut jac = DMatrix::zeros(d, eta.len());
    for i in 0..rec.len() {
        for (v, w) in ds.donors[i].iter().zip(&ds.weights[i]) {
            let ww = rec.weights[i] * w;
            if ww == 0.0 {
                continue;
            }
            let p = DonorPoint {
                covariates: &rec.covariates[i],
                imputed: *v,
                response: rec.response[i],
            };
            total += u.value(eta, &p) * ww;
            jac += u.jacobian(eta, &p) * ww;
        }
    }
    (total, jac)
}

/// Solves `sum_i w_i sum_j w*_ij U(eta; .) = 0` by damped Newton.
pub fn estimate_equation<E: EstimatingFunction>(
    ds: &FractionalDataset,
    rec: &Recipients,
    u: &E,
    eta0: &[f64],
) -> Result<DVector<f64>> {
    if eta0.len() != u.dim() {
        return Err(FiError::Argument(format!("eta has length {}, U has {}", eta0.len(), u.dim())));
    }
    let tol = 1e-10 * rec.weights.iter().sum::<f64>().max(1.0);
    let mut eta = DVector::from_column_slice(eta0);
    let (mut val, mut jac) = fractional_equation(ds, rec, u, eta.as_slice());
    for iter in 0..100 {
        if val.amax() < tol {
            return Ok(eta);
        }
        let step = -invert(&jac, "estimating-equation Jacobian")? * &val;
        let norm0 = val.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let cand = &eta + &step * t;
            let (cv, cj) = fractional_equation(ds, rec, u, cand.as_slice());
            if cv.iter().all(|v| v.is_finite()) && cv.norm() < norm0 {
                eta = cand;
                val = cv;
                jac = cj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(FiError::NonConvergence {
                iterations: iter,
                diagnostic: format!("step halving failed at eta = {:?}", eta.as_slice()),
            });
        }
    }
    if val.amax() < tol {
        return Ok(eta);
    }
    Err(FiError::NonConvergence {
        iterations: 100,
        diagnostic: format!("last iterate {:?}, max |U| = {:.3e}", eta.as_slice(), val.amax()),
    })
}

/// Single imputation: one donor per recipient drawn with probability equal
/// to its fractional weight.
pub fn pps_collapse<R: Rng + ?Sized>(ds: &FractionalDataset, rng: &mut R) -> FractionalDataset {
    let mut donors = Vec::with_capacity(ds.n_recipients());
    for (d, w) in ds.donors.iter().zip(&ds.weights) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                acc += wj;
                pick = Some(j);
                if u < acc {
                    break;
                }
            }
        }
        donors.push(vec![d[pick.unwrap_or(0)]]);
    }
    let n = donors.len();
    FractionalDataset {
        donors,
        log_initial: vec![vec![0.0]; n],
        weights: vec![vec![1.0]; n],
    }
}
