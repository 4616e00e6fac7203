//! Score tests of `H0: theta_k = c` for a block of outcome-model parameters,
//! with the remaining parameters re-estimated by fractional imputation EM
//! under the restriction, and confidence sets by test inversion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::MatchingProblem;
use crate::engine::{
    fit_stage_a, normal_outcome_start, run_em, DonorModel, EmConfig, EmResult, HotDeckDonors, MatchingDonors, Method,
    ParametricDonors, Recipients,
};
use crate::error::{FiError, Result};
use crate::models::{newton_maximize, ConditionalModel, NormalLinearModel};
use crate::numerics::{invert, DesignMatrix};
use crate::variance::{mle_variance, StageA};

/// A model with some parameters held at fixed values; only the free ones are
/// exposed to the optimizer.
#[derive(Debug, Clone)]
pub struct Restricted<M> {
    inner: M,
    free: Vec<usize>,
}

impl<M: ConditionalModel> Restricted<M> {
    /// `fixed` lists `(index, value)` pairs; the other parameters keep their
    /// values in `start`.
    pub fn new(start: &M, fixed: &[(usize, f64)]) -> Result<Self> {
        let d = start.dim();
        let mut p = start.params();
        for &(k, v) in fixed {
            if k >= d {
                return Err(FiError::Argument(format!("parameter index {k} out of range for {d} parameters")));
            }
            if !v.is_finite() {
                return Err(FiError::Argument(format!("non-finite null value for parameter {k}")));
            }
            p[k] = v;
        }
        let mut seen = vec![false; d];
        for &(k, _) in fixed {
            if std::mem::replace(&mut seen[k], true) {
                return Err(FiError::Argument(format!("parameter {k} fixed twice")));
            }
        }
        Ok(Self {
            inner: start.with_params(p.as_slice()),
            free: (0..d).filter(|k| !seen[*k]).collect(),
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }
}

impl<M: ConditionalModel> ConditionalModel for Restricted<M> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn params(&self) -> DVector<f64> {
        let p = self.inner.params();
        DVector::from_iterator(self.free.len(), self.free.iter().map(|k| p[*k]))
    }

    fn with_params(&self, params: &[f64]) -> Self {
        let mut p = self.inner.params();
        for (k, v) in self.free.iter().zip(params) {
            p[*k] = *v;
        }
        Self {
            inner: self.inner.with_params(p.as_slice()),
            free: self.free.clone(),
        }
    }

    fn log_density(&self, response: f64, covariates: &[f64]) -> f64 {
        self.inner.log_density(response, covariates)
    }

    fn score(&self, response: f64, covariates: &[f64]) -> DVector<f64> {
        self.inner.score(response, covariates).select_rows(&self.free)
    }

    fn score_hessian(&self, response: f64, covariates: &[f64]) -> DMatrix<f64> {
        self.inner
            .score_hessian(response, covariates)
            .select_rows(&self.free)
            .select_columns(&self.free)
    }

    fn mean(&self, covariates: &[f64]) -> f64 {
        self.inner.mean(covariates)
    }

    fn draw<R: Rng + ?Sized>(&self, covariates: &[f64], rng: &mut R) -> f64 {
        self.inner.draw(covariates, rng)
    }

    fn fit_weighted(&self, design: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self> {
        if self.free.is_empty() {
            return Ok(self.clone());
        }
        newton_maximize(self, design, y, Some(w), 1e-12, 200).map(|(m, _)| m)
    }
}

/// FI EM for the outcome model with the `fixed` parameters held at their
/// null values. The returned model carries the full parameter vector.
pub fn restricted_fit<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    fixed: &[(usize, f64)],
    config: &EmConfig,
) -> Result<EmResult<M>> {
    let r = run_em(donors, rec, &Restricted::new(start, fixed)?, config)?;
    Ok(EmResult {
        theta2: r.theta2.inner,
        dataset: r.dataset,
        trace: r.trace,
        converged: r.converged,
        iterations: r.iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreTestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Tested parameter indices and their null values.
    pub null: Vec<(usize, f64)>,
    /// Full outcome parameters at the restricted solution.
    pub restricted: Vec<f64>,
    /// Observed score of the tested block at the restricted solution.
    pub score: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub vs: DMatrix<f64>,
    pub converged: bool,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl ScoreTestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.statistic > chi2_quantile(self.dof, 1.0 - alpha)
    }
}

pub fn chi2_quantile(dof: usize, p: f64) -> f64 {
    ChiSquared::new(dof as f64).map_or(f64::NAN, |c| c.inverse_cdf(p))
}

/// Score test of `H0: theta2[k] = c` for every `(k, c)` in `fixed`.
///
/// The observed score is the fractional expectation of the complete-data
/// score; its derivative in the outcome parameters is minus the observed
/// information `I22`, and its derivative in the stage-A parameters is `B21`.
/// The statistic's variance is the linearized variance of the score projected
/// onto the tested block, `P V P'` with `P = [-tau21 tau11^-1, I]`, where `V`
/// includes stage-A estimation (and hot-deck donors) unless `stage_a` is
/// `Known`.
pub fn score_test<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    fixed: &[(usize, f64)],
    config: &EmConfig,
    stage_a: StageA,
) -> Result<ScoreTestResult> {
    if fixed.is_empty() {
        return Err(FiError::Argument("nothing to test".into()));
    }
    let restricted = Restricted::new(start, fixed)?;
    let fit = run_em(donors, rec, &restricted, config)?;
    let theta = fit.theta2.inner;
    let free = fit.theta2.free;
    let tested: Vec<usize> = fixed.iter().map(|f| f.0).collect();

    let mut total = DVector::zeros(theta.dim());
    for i in 0..rec.len() {
        let mut row = rec.outcome_row(i, 0.0);
        let last = row.len() - 1;
        for (y1, w) in fit.dataset.donors[i].iter().zip(&fit.dataset.weights[i]) {
            row[last] = *y1;
            total += theta.score(rec.response[i], &row) * (rec.weights[i] * w);
        }
    }
    let u12 = total.select_rows(&tested);

    let rep = mle_variance(donors, rec, &fit.dataset, &theta, stage_a)?;
    let v = &rep.components.v_b + &rep.components.v_a;
    let tau = -&rep.components.i22;
    let mut proj = DMatrix::zeros(tested.len(), theta.dim());
    for (r, k) in tested.iter().enumerate() {
        proj[(r, *k)] = 1.0;
    }
    if !free.is_empty() {
        let tau11 = tau.select_rows(&free).select_columns(&free);
        let tau21 = tau.select_rows(&tested).select_columns(&free);
        let adj = -tau21 * invert(&tau11, "restricted information")?;
        for (c, k) in free.iter().enumerate() {
            for r in 0..tested.len() {
                proj[(r, *k)] = adj[(r, c)];
            }
        }
    }
    let vs = &proj * v * proj.transpose();
    let vs = (&vs + vs.transpose()) * 0.5;
    let vs_inv = invert(&vs, "score variance")?;
    let statistic = (u12.transpose() * vs_inv * &u12)[(0, 0)].max(0.0);
    let dof = tested.len();
    let p_value = ChiSquared::new(dof as f64)
        .map(|c| 1.0 - c.cdf(statistic))
        .map_err(|e| FiError::Argument(e.to_string()))?;
    Ok(ScoreTestResult {
        statistic,
        dof,
        p_value: p_value.clamp(0.0, 1.0),
        null: fixed.to_vec(),
        restricted: theta.params().iter().copied().collect(),
        score: u12.iter().copied().collect(),
        vs,
        converged: fit.converged,
    })
}

/// Donor model and recipients for a matching problem, as built by the
/// matching driver.
pub fn matching_setup(problem: &MatchingProblem, method: Method) -> Result<(MatchingDonors, Recipients, NormalLinearModel)> {
    problem.validate()?;
    let theta1 = fit_stage_a(problem)?;
    let donors = match method {
        Method::Pfi | Method::Sri => MatchingDonors::Parametric(ParametricDonors::from_problem(problem, theta1)),
        Method::Hdfi => MatchingDonors::HotDeck(HotDeckDonors::from_problem(problem, theta1)),
    };
    Ok((donors, Recipients::from_problem(problem), normal_outcome_start(problem.roles.x1.len())))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSet {
    pub index: usize,
    pub level: f64,
    pub critical: f64,
    /// `(value, statistic)` at each grid point; `NaN` where the test failed.
    pub grid: Vec<(f64, f64)>,
    /// Smallest and largest accepted grid values, if any.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Whether the accepted grid points are contiguous.
    pub contiguous: bool,
}

/// Inverts the score test for parameter `index` over `points` evenly spaced
/// values in `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
pub fn confidence_set<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    start: &M,
    index: usize,
    (lo, hi): (f64, f64),
    points: usize,
    alpha: f64,
    config: &EmConfig,
    stage_a: StageA,
) -> Result<ConfidenceSet> {
    if !(lo < hi) || points < 2 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(FiError::Argument("need lo < hi, at least two grid points and alpha in (0, 1)".into()));
    }
    let critical = chi2_quantile(1, 1.0 - alpha);
    let grid: Vec<(f64, f64)> = (0..points)
        .into_par_iter()
        .map(|g| {
            let c = lo + (hi - lo) * g as f64 / (points - 1) as f64;
            let t = score_test(donors, rec, start, &[(index, c)], config, stage_a).map_or(f64::NAN, |r| r.statistic);
            (c, t)
        })
        .collect();
    let accepted: Vec<usize> = (0..points).filter(|g| grid[*g].1 < critical).collect();
    let contiguous = accepted.windows(2).all(|p| p[1] == p[0] + 1);
    Ok(ConfidenceSet {
        index,
        level: 1.0 - alpha,
        critical,
        lower: accepted.first().map(|g| grid[*g].0),
        upper: accepted.last().map(|g| grid[*g].0),
        grid,
        contiguous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_matching;
    use crate::engine::tests::sim1_problem;
    use crate::measurement::tests::me_problem;
    use crate::measurement::{fit_calibration, CalibrationSpec, MeDonors, MeVariant};
    use crate::models::LogisticModel;

    fn cfg(m: usize) -> EmConfig {
        EmConfig {
            m,
            seed: 9,
            ..EmConfig::default()
        }
    }

    #[test]
    fn restricted_wrapper_exposes_free_block() {
        let m = NormalLinearModel::new(vec![1.0, 2.0, 3.0], 2.0).unwrap();
        let r = Restricted::new(&m, &[(1, 5.0)]).unwrap();
        assert_eq!(r.free(), &[0, 2, 3]);
        assert_eq!(r.params().as_slice(), &[1.0, 3.0, 2f64.ln()]);
        let s = r.score(1.0, &[0.5, 0.2]);
        let full = r.inner().score(1.0, &[0.5, 0.2]);
        assert_eq!(s[1], full[2]);
        assert_eq!(r.with_params(&[0.0, 0.0, 0.0]).inner().params()[1], 5.0);
        assert!(Restricted::new(&m, &[(7, 0.0)]).is_err());
        assert!(Restricted::new(&m, &[(1, 0.0), (1, 1.0)]).is_err());
    }

    #[test]
    fn null_at_the_mle_gives_zero_statistic() {
        let p = sim1_problem(150, (1.0, 1.0), 3);
        let config = EmConfig { tol: 1e-10, ..cfg(30) };
        let fit = run_matching(&p, &config).unwrap();
        let (donors, rec, start) = matching_setup(&p, Method::Pfi).unwrap();
        let b = fit.theta.theta2.params()[1];
        let r = score_test(&donors, &rec, &start, &[(1, b)], &config, StageA::Estimated).unwrap();
        assert!(r.statistic < 1e-6, "{}", r.statistic);
        for (a, b) in r.restricted.iter().zip(fit.theta.theta2.params().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn restricted_solution_solves_free_scores() {
        let p = sim1_problem(150, (1.0, 1.0), 4);
        let (donors, rec, start) = matching_setup(&p, Method::Pfi).unwrap();
        let config = EmConfig { tol: 1e-12, ..cfg(20) };
        let r = restricted_fit(&donors, &rec, &start, &[(1, 3.0)], &config).unwrap();
        assert!(r.converged);
        assert_eq!(r.theta2.params()[1], 3.0);
        let mut total = DVector::zeros(3);
        for i in 0..rec.len() {
            for (y1, w) in r.dataset.donors[i].iter().zip(&r.dataset.weights[i]) {
                total += r.theta2.score(rec.response[i], &rec.outcome_row(i, *y1)) * *w;
            }
        }
        assert!(total[0].abs() < 1e-8 && total[2].abs() < 1e-8, "{total}");
        let again = restricted_fit(&donors, &rec, &start, &[(1, 3.0)], &config).unwrap();
        assert_eq!(again.theta2, r.theta2);
    }

    #[test]
    fn far_null_is_rejected_and_interval_covers_mle() {
        let p = sim1_problem(200, (1.0, 1.0), 5);
        let (donors, rec, start) = matching_setup(&p, Method::Pfi).unwrap();
        let config = cfg(30);
        let r = score_test(&donors, &rec, &start, &[(1, 2.0)], &config, StageA::Estimated).unwrap();
        assert!(r.rejects(0.05) && r.p_value < 1e-3, "{r:?}");
        let fit = run_matching(&p, &config).unwrap();
        let b = fit.theta.theta2.params()[1];
        let set = confidence_set(&donors, &rec, &start, 1, (b - 1.0, b + 1.0), 41, 0.05, &config, StageA::Estimated).unwrap();
        let (lo, hi) = (set.lower.unwrap(), set.upper.unwrap());
        assert!(lo < b && b < hi && set.contiguous, "{lo} {b} {hi}");
        assert!(hi - lo < 2.0);
    }

    /// Outcome model in the coordinates `theta = A phi` on the free block.
    #[derive(Debug, Clone)]
    struct Reparam {
        inner: LogisticModel,
        a: DMatrix<f64>,
    }

    impl ConditionalModel for Reparam {
        fn dim(&self) -> usize {
            2
        }
        fn params(&self) -> DVector<f64> {
            self.a.clone().try_inverse().unwrap() * self.inner.params()
        }
        fn with_params(&self, params: &[f64]) -> Self {
            let theta = &self.a * DVector::from_column_slice(params);
            Self {
                inner: self.inner.with_params(theta.as_slice()),
                a: self.a.clone(),
            }
        }
        fn log_density(&self, y: f64, x: &[f64]) -> f64 {
            self.inner.log_density(y, x)
        }
        fn score(&self, y: f64, x: &[f64]) -> DVector<f64> {
            self.a.transpose() * self.inner.score(y, x)
        }
        fn score_hessian(&self, y: f64, x: &[f64]) -> DMatrix<f64> {
            self.a.transpose() * self.inner.score_hessian(y, x) * &self.a
        }
        fn mean(&self, x: &[f64]) -> f64 {
            self.inner.mean(x)
        }
        fn draw<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
            self.inner.draw(x, rng)
        }
        fn fit_weighted(&self, d: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<Self> {
            newton_maximize(self, d, y, Some(w), 1e-12, 200).map(|(m, _)| m)
        }
    }

    #[test]
    fn statistic_invariant_to_nuisance_reparameterization() {
        let p = me_problem(300, 0.25, 0.4, 6);
        let calib = fit_calibration(&p, CalibrationSpec::Working).unwrap();
        let donors = MeDonors::new(&p, &calib, MeVariant::Working).unwrap();
        let rec = Recipients::from_problem(&p);
        let config = EmConfig { tol: 1e-12, ..cfg(50) };
        let start = LogisticModel::new(0.0, vec![0.0]).unwrap();
        let plain = score_test(&donors, &rec, &start, &[(1, 1.2)], &config, StageA::Estimated).unwrap();
        // scale the nuisance intercept; the tested coordinate stays a unit vector
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let re = Reparam { inner: start.clone(), a };
        let other = score_test(&donors, &rec, &re, &[(1, 1.2)], &config, StageA::Estimated).unwrap();
        assert!((plain.statistic - other.statistic).abs() < 1e-6, "{} {}", plain.statistic, other.statistic);
    }

    #[test]
    fn known_stage_a_gives_smaller_variance() {
        let p = me_problem(300, 0.25, 0.4, 7);
        let calib = fit_calibration(&p, CalibrationSpec::Working).unwrap();
        let donors = MeDonors::new(&p, &calib, MeVariant::Working).unwrap();
        let rec = Recipients::from_problem(&p);
        let start = LogisticModel::new(0.0, vec![0.0]).unwrap();
        let est = score_test(&donors, &rec, &start, &[(1, 1.0)], &cfg(50), StageA::Estimated).unwrap();
        let known = score_test(&donors, &rec, &start, &[(1, 1.0)], &cfg(50), StageA::Known).unwrap();
        assert!(known.vs[(0, 0)] <= est.vs[(0, 0)]);
        assert_eq!(known.score, est.score);
    }
}
