//! Outcome regression on a mismeasured covariate with an external
//! calibration sample.
//!
//! The calibration sample observes `(x, z)` and the main sample `(z, y)`; as a
//! matching problem `x` plays `y1`, `z` the instrument `x2` and `y` plays `y2`.
//! Problems therefore use [`MatchingProblem`] with no `x1` and one `x2` column.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FractionalDataset, MatchingProblem};
use crate::engine::{run_em, DonorModel, EmConfig, EmTrace, ParametricDonors, Recipients, SampleAInfo};
use crate::error::{FiError, Result};
use crate::models::{fit_heteroscedastic, fit_normal_mle, ConditionalModel, GaussianMarginal, LogisticModel, NormalLinearModel};
use crate::numerics::{logistic_fit, ols_fit, DesignMatrix, LogisticOptions};
use crate::rng::{derive_seed, stream_index, substream, tags};

/// Rows with `|z|` below this are left out of the WRC variance regression.
pub const WRC_ZERO_Z: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeVariant {
    /// Donors drawn from a fitted normal `x | z`.
    Direct,
    /// Donors drawn from the fitted marginal of `x`, weighted by `f(z | x)`.
    Working,
    /// Donors are the calibration-sample `x` values.
    Hdfi,
}

impl FromStr for MeVariant {
    type Err = FiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "working" | "pfi" => Ok(Self::Working),
            "hdfi" => Ok(Self::Hdfi),
            other => Err(FiError::Argument(format!(
                "unknown variant `{other}` (expected direct, working or hdfi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationSpec {
    /// Normal linear `x | z`, plus homoscedastic `z | x` and the `x` marginal.
    Direct,
    /// Heteroscedastic `z | x` (variance `sigma2 |x|^(2 alpha)`) and the `x` marginal.
    Working,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub z_given_x: NormalLinearModel,
    pub x_marginal: GaussianMarginal,
    pub x_given_z: Option<NormalLinearModel>,
}

struct Arrays {
    a_x: Vec<f64>,
    a_z: Vec<f64>,
    a_w: Vec<f64>,
    b_z: Vec<f64>,
}

fn arrays(problem: &MatchingProblem) -> Result<Arrays> {
    problem.validate()?;
    if !problem.roles.x1.is_empty() || problem.roles.x2.len() != 1 {
        return Err(FiError::Argument(
            "measurement-error problems need exactly one mismeasured covariate and no other covariates".into(),
        ));
    }
    let a = &problem.sample_a;
    Ok(Arrays {
        a_x: a.iter().map(|u| u.y1.unwrap_or(f64::NAN)).collect(),
        a_z: a.iter().map(|u| u.x2[0]).collect(),
        a_w: a.iter().map(|u| u.weight).collect(),
        b_z: problem.sample_b.iter().map(|u| u.x2[0]).collect(),
    })
}

fn column(v: &[f64]) -> Vec<[f64; 1]> {
    v.iter().map(|x| [*x]).collect()
}

/// Weighted maximum likelihood fits of the calibration models on sample A.
pub fn fit_calibration(problem: &MatchingProblem, spec: CalibrationSpec) -> Result<CalibrationFit> {
    let d = arrays(problem)?;
    if d.a_x.len() < 5 {
        return Err(FiError::Argument(format!("calibration sample has {} units, need at least 5", d.a_x.len())));
    }
    let on_x = DesignMatrix::with_intercept(&column(&d.a_x))?;
    let x_marginal = GaussianMarginal::fit(&d.a_x, Some(&d.a_w))?;
    Ok(match spec {
        CalibrationSpec::Direct => CalibrationFit {
            z_given_x: fit_normal_mle(&on_x, &d.a_z, Some(&d.a_w))?,
            x_marginal,
            x_given_z: Some(fit_normal_mle(&DesignMatrix::with_intercept(&column(&d.a_z))?, &d.a_x, Some(&d.a_w))?),
        },
        CalibrationSpec::Working => CalibrationFit {
            z_given_x: fit_heteroscedastic(&on_x, &d.a_z, Some(&d.a_w), 0)?,
            x_marginal,
            x_given_z: None,
        },
    })
}

/// Donors drawn from a fixed normal proposal for `x`, weighted by
/// `f(z_i | x) f_x(x) / h(x)`. Parameters are those of `z | x` followed by
/// those of the `x` marginal.
#[derive(Debug, Clone)]
pub struct MarginalProposalDonors {
    z_given_x: NormalLinearModel,
    x_marginal: GaussianMarginal,
    proposal: GaussianMarginal,
    recipient_z: Vec<f64>,
    a_x: Vec<f64>,
    a_z: Vec<f64>,
    a_w: Vec<f64>,
}

impl MarginalProposalDonors {
    pub fn new(problem: &MatchingProblem, calib: &CalibrationFit) -> Result<Self> {
        let d = arrays(problem)?;
        Ok(Self {
            z_given_x: calib.z_given_x.clone(),
            x_marginal: calib.x_marginal.clone(),
            proposal: calib.x_marginal.clone(),
            recipient_z: d.b_z,
            a_x: d.a_x,
            a_z: d.a_z,
            a_w: d.a_w,
        })
    }
}

impl DonorModel for MarginalProposalDonors {
    fn dim(&self) -> usize {
        self.z_given_x.dim() + 2
    }

    fn params(&self) -> DVector<f64> {
        let (a, b) = (self.z_given_x.params(), self.x_marginal.params());
        DVector::from_iterator(a.len() + 2, a.iter().chain(b.iter()).copied())
    }

    fn with_params(&self, params: &[f64]) -> Self {
        let k = self.z_given_x.dim();
        Self {
            z_given_x: self.z_given_x.with_params(&params[..k]),
            x_marginal: self.x_marginal.with_params(&params[k..]),
            ..self.clone()
        }
    }

    fn n_recipients(&self) -> usize {
        self.recipient_z.len()
    }

    fn generate(&self, m: usize, seed: u64, ids: &[String]) -> Vec<Vec<f64>> {
        let seed = derive_seed(seed, tags::DONORS);
        ids.par_iter()
            .map(|id| {
                let mut rng = substream(seed, stream_index(id));
                (0..m).map(|_| self.proposal.draw(&[], &mut rng)).collect()
            })
            .collect()
    }

    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64> {
        let z = self.recipient_z[i];
        donors
            .iter()
            .map(|x| {
                self.z_given_x.log_density(z, &[*x]) + self.x_marginal.log_density(*x, &[])
                    - self.proposal.log_density(*x, &[])
            })
            .collect()
    }

    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>> {
        let z = self.recipient_z[i];
        donors
            .iter()
            .map(|x| {
                let (a, b) = (self.z_given_x.score(z, &[*x]), self.x_marginal.score(*x, &[]));
                DVector::from_iterator(a.len() + 2, a.iter().chain(b.iter()).copied())
            })
            .collect()
    }

    fn sample_a(&self) -> SampleAInfo {
        let k = self.z_given_x.dim();
        let d = k + 2;
        let mut info = DMatrix::zeros(d, d);
        let mut scores = Vec::with_capacity(self.a_x.len());
        for ((x, z), w) in self.a_x.iter().zip(&self.a_z).zip(&self.a_w) {
            let (a, b) = (self.z_given_x.score(*z, &[*x]), self.x_marginal.score(*x, &[]));
            scores.push(DVector::from_iterator(d, a.iter().chain(b.iter()).copied()));
            let mut top = info.view_mut((0, 0), (k, k));
            top -= self.z_given_x.score_hessian(*z, &[*x]) * *w;
            let mut bottom = info.view_mut((k, k), (2, 2));
            bottom -= self.x_marginal.score_hessian(*x, &[]) * *w;
        }
        SampleAInfo {
            weights: self.a_w.clone(),
            scores,
            information: info,
        }
    }
}

/// Every calibration-sample `x_j` is a donor with initial weight
/// `f(z_i | x_j) / w_j`.
#[derive(Debug, Clone)]
pub struct CalibrationHotDeck {
    z_given_x: NormalLinearModel,
    recipient_z: Vec<f64>,
    a_x: Vec<f64>,
    a_z: Vec<f64>,
    a_w: Vec<f64>,
}

impl CalibrationHotDeck {
    pub fn new(problem: &MatchingProblem, calib: &CalibrationFit) -> Result<Self> {
        let d = arrays(problem)?;
        Ok(Self {
            z_given_x: calib.z_given_x.clone(),
            recipient_z: d.b_z,
            a_x: d.a_x,
            a_z: d.a_z,
            a_w: d.a_w,
        })
    }
}

impl DonorModel for CalibrationHotDeck {
    fn dim(&self) -> usize {
        self.z_given_x.dim()
    }

    fn params(&self) -> DVector<f64> {
        self.z_given_x.params()
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self {
            z_given_x: self.z_given_x.with_params(params),
            ..self.clone()
        }
    }

    fn n_recipients(&self) -> usize {
        self.recipient_z.len()
    }

    fn generate(&self, _m: usize, _seed: u64, ids: &[String]) -> Vec<Vec<f64>> {
        vec![self.a_x.clone(); ids.len()]
    }

    fn log_initial(&self, i: usize, donors: &[f64]) -> Vec<f64> {
        let z = self.recipient_z[i];
        donors
            .iter()
            .zip(&self.a_w)
            .map(|(x, w)| self.z_given_x.log_density(z, &[*x]) - w.ln())
            .collect()
    }

    fn log_initial_grad(&self, i: usize, donors: &[f64]) -> Vec<DVector<f64>> {
        let z = self.recipient_z[i];
        donors.iter().map(|x| self.z_given_x.score(z, &[*x])).collect()
    }

    fn sample_a(&self) -> SampleAInfo {
        let d = self.z_given_x.dim();
        let mut info = DMatrix::zeros(d, d);
        let scores = self
            .a_x
            .iter()
            .zip(&self.a_z)
            .zip(&self.a_w)
            .map(|((x, z), w)| {
                info -= self.z_given_x.score_hessian(*z, &[*x]) * *w;
                self.z_given_x.score(*z, &[*x])
            })
            .collect();
        SampleAInfo {
            weights: self.a_w.clone(),
            scores,
            information: info,
        }
    }

    fn hot_deck(&self) -> Option<DMatrix<f64>> {
        // no normalizing sum over sample A in these initial weights
        let n = self.a_x.len();
        Some(DMatrix::zeros(n, n))
    }
}

#[derive(Debug, Clone)]
pub enum MeDonors {
    Direct(ParametricDonors),
    Working(MarginalProposalDonors),
    Hdfi(CalibrationHotDeck),
}

macro_rules! delegate {
    ($self:ident, $d:ident => $e:expr) => {
        match $self {
            MeDonors::Direct($d) => $e,
            MeDonors::Working($d) => $e,
            MeDonors::Hdfi($d) => $e,
        }
    };
}

impl DonorModel for MeDonors {
    fn dim(&self) -> usize {
        delegate!(self, d => d.dim())
    }

    fn params(&self) -> DVector<f64> {
        delegate!(self, d => d.params())
    }

    fn with_params(&self, params: &[f64]) -> Self {
        match self {
            Self::Direct(d) => Self::Direct(d.with_params(params)),
            Self::Working(d) => Self::Working(d.with_params(params)),
            Self::Hdfi(d) => Self::Hdfi(d.with_params(params)),
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

impl MeDonors {
    pub fn new(problem: &MatchingProblem, calib: &CalibrationFit, variant: MeVariant) -> Result<Self> {
        Ok(match variant {
            MeVariant::Direct => {
                let model = calib.x_given_z.clone().ok_or_else(|| {
                    FiError::Argument("the direct variant needs a fitted x | z model".into())
                })?;
                Self::Direct(ParametricDonors::from_problem(problem, model))
            }
            MeVariant::Working => Self::Working(MarginalProposalDonors::new(problem, calib)?),
            MeVariant::Hdfi => Self::Hdfi(CalibrationHotDeck::new(problem, calib)?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MeFit<M> {
    pub outcome: M,
    pub donors: MeDonors,
    pub recipients: Recipients,
    pub dataset: FractionalDataset,
    pub trace: EmTrace,
    pub converged: bool,
    pub iterations: usize,
}

/// Fractional-imputation EM for the outcome model `start` (typically
/// logistic). The variant picks the donor source; `config.method` only
/// matters for `Sri`, which freezes the initial weights.
pub fn run_em_me<M: ConditionalModel>(
    problem: &MatchingProblem,
    calib: &CalibrationFit,
    start: &M,
    config: &EmConfig,
    variant: MeVariant,
) -> Result<MeFit<M>> {
    arrays(problem)?;
    let donors = MeDonors::new(problem, calib, variant)?;
    let recipients = Recipients::from_problem(problem);
    let r = run_em(&donors, &recipients, start, config)?;
    Ok(MeFit {
        outcome: r.theta2,
        donors,
        recipients,
        dataset: r.dataset,
        trace: r.trace,
        converged: r.converged,
        iterations: r.iterations,
    })
}

fn logistic_on(values: &[f64], y: &[f64], w: &[f64]) -> Result<LogisticModel> {
    let design = DesignMatrix::with_intercept(&column(values))?;
    let fit = logistic_fit(&design, y, Some(w), &LogisticOptions::default())?;
    LogisticModel::new(fit.coefficients[0], vec![fit.coefficients[1]])
}

/// Logistic regression of `y` on the mismeasured `z` in the main sample.
pub fn naive_estimator(problem: &MatchingProblem) -> Result<LogisticModel> {
    let d = arrays(problem)?;
    let b = &problem.sample_b;
    let y: Vec<f64> = b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect();
    let w: Vec<f64> = b.iter().map(|u| u.weight).collect();
    logistic_on(&d.b_z, &y, &w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WrcFit {
    pub outcome: LogisticModel,
    /// Slope of `ln r^2` on `ln z^2`.
    pub lambda: f64,
    /// Intercept and slope of the weighted calibration line `x ~ z`.
    pub calibration: (f64, f64),
    /// Calibration units dropped because `|z|` is numerically zero.
    pub excluded: usize,
}

/// Weighted regression calibration: (i) OLS of `x` on `z`; (ii) slope `lambda`
/// of `ln r^2` on `ln z^2`; (iii) WLS of `x` on `z` with weights
/// `|z|^(2 lambda)`; (iv) `xhat = eta0 + eta1 z` in the main sample;
/// (v) logistic regression of `y` on `xhat`.
pub fn wrc_estimator(problem: &MatchingProblem) -> Result<WrcFit> {
    let d = arrays(problem)?;
    if d.a_x.len() < 5 {
        return Err(FiError::Argument(format!("calibration sample has {} units, need at least 5", d.a_x.len())));
    }
    let step1 = ols_fit(&DesignMatrix::with_intercept(&column(&d.a_z))?, &d.a_x, None)?;
    let (c0, c1) = (step1.coefficients[0], step1.coefficients[1]);
    let keep: Vec<usize> = (0..d.a_z.len()).filter(|&i| d.a_z[i].abs() >= WRC_ZERO_Z).collect();
    let excluded = d.a_z.len() - keep.len();
    let mut log_z2 = Vec::with_capacity(keep.len());
    let mut log_r2 = Vec::with_capacity(keep.len());
    for &i in &keep {
        let r = d.a_x[i] - c0 - c1 * d.a_z[i];
        if r != 0.0 {
            log_z2.push([(d.a_z[i] * d.a_z[i]).ln()]);
            log_r2.push((r * r).ln());
        }
    }
    let step2 = ols_fit(&DesignMatrix::with_intercept(&log_z2)?, &log_r2, None)?;
    let lambda = step2.coefficients[1];

    let z: Vec<[f64; 1]> = keep.iter().map(|&i| [d.a_z[i]]).collect();
    let x: Vec<f64> = keep.iter().map(|&i| d.a_x[i]).collect();
    let wls: Vec<f64> = keep.iter().map(|&i| d.a_z[i].abs().powf(2.0 * lambda)).collect();
    let step3 = ols_fit(&DesignMatrix::with_intercept(&z)?, &x, Some(&wls))?;
    let (e0, e1) = (step3.coefficients[0], step3.coefficients[1]);

    let xhat: Vec<f64> = d.b_z.iter().map(|z| e0 + e1 * z).collect();
    let b = &problem.sample_b;
    let y: Vec<f64> = b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect();
    let w: Vec<f64> = b.iter().map(|u| u.weight).collect();
    Ok(WrcFit {
        outcome: logistic_on(&xhat, &y, &w)?,
        lambda,
        calibration: (e0, e1),
        excluded,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::engine::{Method, MatchingDonors};
    use crate::models::LogisticModel;
    use crate::numerics::expit;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// `x ~ N(0, 1)`, `z = x + u` with `u ~ N(0, s2 |x|^(2 alpha))`,
    /// `y ~ Bernoulli(expit(1 + x))`.
    pub(crate) fn me_problem(n: usize, s2: f64, alpha: f64, seed: u64) -> MatchingProblem {
        let mut rng = substream(seed, 0);
        let mut draw = |with_y: bool| {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z = x + (s2 * x.abs().powf(2.0 * alpha)).sqrt() * e;
            let y = if with_y { f64::from(u8::from(rng.random::<f64>() < expit(1.0 + x))) } else { 0.0 };
            (x, z, y)
        };
        let a: Vec<(f64, f64, f64)> = (0..n).map(|_| draw(false)).collect();
        let b: Vec<(f64, f64, f64)> = (0..n).map(|_| draw(true)).collect();
        MatchingProblem::from_arrays(
            &a.iter().map(|t| vec![t.1]).collect::<Vec<_>>(),
            &a.iter().map(|t| t.0).collect::<Vec<_>>(),
            &b.iter().map(|t| vec![t.1]).collect::<Vec<_>>(),
            &b.iter().map(|t| t.2).collect::<Vec<_>>(),
            0,
        )
        .unwrap()
    }

    fn start() -> LogisticModel {
        LogisticModel::new(0.0, vec![0.0]).unwrap()
    }

    fn cfg(m: usize) -> EmConfig {
        EmConfig {
            m,
            seed: 4,
            ..EmConfig::default()
        }
    }

    #[test]
    fn calibration_recovers_design() {
        let p = me_problem(4000, 0.25, 0.4, 1);
        let c = fit_calibration(&p, CalibrationSpec::Working).unwrap();
        let m = &c.z_given_x;
        assert!(m.coefficients()[0].abs() < 0.03, "{m:?}");
        assert!((m.coefficients()[1] - 1.0).abs() < 0.03);
        assert!((m.sigma2() - 0.25).abs() < 0.03);
        assert!((m.variance_power() - 0.4).abs() < 0.06);
        assert!(c.x_marginal.mu.abs() < 0.05 && (c.x_marginal.sigma2 - 1.0).abs() < 0.07);
    }

    #[test]
    fn direct_and_working_fits_agree_when_homoscedastic() {
        let p = me_problem(10_000, 0.25, 0.0, 2);
        let d = fit_calibration(&p, CalibrationSpec::Direct).unwrap();
        let w = fit_calibration(&p, CalibrationSpec::Working).unwrap();
        // implied Cov(x, z) and Var(z) under each fit
        let xz = d.x_given_z.as_ref().unwrap();
        let (mx, vx) = (w.x_marginal.mu, w.x_marginal.sigma2);
        let b1 = w.z_given_x.coefficients()[1];
        let var_z_working = b1 * b1 * vx + w.z_given_x.sigma2();
        let cov_working = b1 * vx;
        let var_z_direct = d.z_given_x.coefficients()[1].powi(2) * vx + d.z_given_x.sigma2();
        assert!((var_z_working - var_z_direct).abs() < 1e-2);
        assert!((xz.coefficients()[1] * var_z_working - cov_working).abs() < 1e-2);
        assert!(mx.abs() < 0.05);
    }

    #[test]
    fn direct_variant_is_the_matching_engine() {
        let p = me_problem(150, 0.25, 0.0, 3);
        let c = fit_calibration(&p, CalibrationSpec::Direct).unwrap();
        let config = EmConfig {
            method: Method::Pfi,
            ..cfg(20)
        };
        let me = run_em_me(&p, &c, &start(), &config, MeVariant::Direct).unwrap();
        let donors = MatchingDonors::Parametric(ParametricDonors::from_problem(&p, c.x_given_z.clone().unwrap()));
        let r = run_em(&donors, &Recipients::from_problem(&p), &start(), &config).unwrap();
        assert_eq!(me.outcome, r.theta2);
        assert_eq!(me.dataset, r.dataset);
    }

    #[test]
    fn no_measurement_error_gives_naive_fit() {
        let p = me_problem(200, 0.0, 0.0, 4);
        let mut c = fit_calibration(&p, CalibrationSpec::Direct).unwrap();
        c.x_given_z = Some(NormalLinearModel::new(vec![0.0, 1.0], 0.0).unwrap());
        let fit = run_em_me(&p, &c, &start(), &cfg(5), MeVariant::Direct).unwrap();
        let naive = naive_estimator(&p).unwrap();
        assert!((fit.outcome.gamma_x[0] - naive.gamma_x[0]).abs() < 1e-9);
        assert!((fit.outcome.gamma0 - naive.gamma0).abs() < 1e-9);
    }

    #[test]
    fn variants_agree_and_correct_attenuation() {
        let p = me_problem(800, 0.25, 0.4, 5);
        let c = fit_calibration(&p, CalibrationSpec::Working).unwrap();
        let working = run_em_me(&p, &c, &start(), &cfg(200), MeVariant::Working).unwrap();
        let hdfi = run_em_me(&p, &c, &start(), &cfg(1), MeVariant::Hdfi).unwrap();
        assert!(working.converged && hdfi.converged);
        working.dataset.check_normalized(1e-12).unwrap();
        let (gw, gh) = (working.outcome.gamma_x[0], hdfi.outcome.gamma_x[0]);
        assert!((gw - gh).abs() < 0.05, "{gw} {gh}");
        assert!(naive_estimator(&p).unwrap().gamma_x[0] < gw);
    }

    #[test]
    fn wrc_step_three_matches_hand_wls() {
        let xa = [0.5, -1.0, 1.5, 2.0, -0.3, 0.9];
        let za = [0.7, -1.4, 1.2, 2.6, -0.1, 1.1];
        let p = MatchingProblem::from_arrays(
            &za.iter().map(|z| vec![*z]).collect::<Vec<_>>(),
            &xa,
            &[vec![0.0], vec![1.0], vec![-1.0], vec![2.0], vec![0.5], vec![1.5]],
            &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            0,
        )
        .unwrap();
        let fit = wrc_estimator(&p).unwrap();
        // brute-force WLS with the fitted lambda
        let w: Vec<f64> = za.iter().map(|z: &f64| z.abs().powf(2.0 * fit.lambda)).collect();
        let (mut s, mut sz, mut sx, mut szz, mut szx) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..6 {
            s += w[i];
            sz += w[i] * za[i];
            sx += w[i] * xa[i];
            szz += w[i] * za[i] * za[i];
            szx += w[i] * za[i] * xa[i];
        }
        let e1 = (s * szx - sz * sx) / (s * szz - sz * sz);
        let e0 = (sx - e1 * sz) / s;
        assert!((fit.calibration.0 - e0).abs() < 1e-10);
        assert!((fit.calibration.1 - e1).abs() < 1e-10);
        assert_eq!(fit.excluded, 0);
    }

    #[test]
    fn wrc_without_heteroscedasticity_is_regression_calibration() {
        let p = me_problem(3000, 0.25, 0.0, 6);
        let fit = wrc_estimator(&p).unwrap();
        assert!(fit.lambda.abs() < 0.1, "{}", fit.lambda);
        let naive = naive_estimator(&p).unwrap();
        assert!(fit.outcome.gamma_x[0] > naive.gamma_x[0]);
    }

    #[test]
    fn wrong_shape_rejected() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let p = MatchingProblem::from_arrays(&xs, &[1.0, 2.0, 0.5, 3.0, 1.0, 2.5], &xs, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0], 1).unwrap();
        assert!(matches!(fit_calibration(&p, CalibrationSpec::Working), Err(FiError::Argument(_))));
    }
}
