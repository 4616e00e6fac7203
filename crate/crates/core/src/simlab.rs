//! Monte Carlo studies: data generators, estimator batteries and summaries.
//!
//! Replicate `r` draws its data from stream `r` of `derive_seed(seed, DATA)`
//! and seeds its imputations with `derive_seed(derive_seed(seed, REPLICATE), r)`,
//! so a study's output does not depend on the number of worker threads.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::MatchingProblem;
use crate::engine::{run_matching, EmConfig, JointBelow, MatchingFit, Method};
use crate::error::{FiError, Result};
use crate::measurement::{fit_calibration, naive_estimator, run_em_me, wrc_estimator, CalibrationSpec, MeVariant};
use crate::models::{fit_normal_mle, LogisticModel};
use crate::numerics::{expit, DesignMatrix};
use crate::rng::{derive_seed, substream, tags};
use crate::splitq::{fit_theta_splitq, impute_y2_for_a, imputed_mean_mu2};
use crate::twostage::two_stage_least_squares;
use crate::variance::{eta_variance, mle_variance, StageA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Sim1,
    Sim1Sens,
    Sim2,
    /// Split-questionnaire design on Simulation-One data.
    Splitq,
}

impl FromStr for StudyKind {
    type Err = FiError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim1" => Ok(Self::Sim1),
            "sim1_sens" | "sim1-sens" | "sens" => Ok(Self::Sim1Sens),
            "sim2" => Ok(Self::Sim2),
            "splitq" => Ok(Self::Splitq),
            _ => Err(FiError::Argument(format!("unknown study `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Complete `(y1, y2)` in B.
    Full,
    Sri,
    Pfi,
    Hdfi,
    Naive,
    Wrc,
    Tsls,
    /// Mean of `y2` over B in the split-questionnaire study.
    Direct,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::Sri => "SRI",
            Self::Pfi => "PFI",
            Self::Hdfi => "HDFI",
            Self::Naive => "Naive",
            Self::Wrc => "WRC",
            Self::Tsls => "TSLS",
            Self::Direct => "Direct",
        }
    }
}

impl FromStr for Estimator {
    type Err = FiError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "sri" => Ok(Self::Sri),
            "pfi" => Ok(Self::Pfi),
            "hdfi" | "fhdi" => Ok(Self::Hdfi),
            "naive" => Ok(Self::Naive),
            "wrc" => Ok(Self::Wrc),
            "tsls" | "2sls" => Ok(Self::Tsls),
            "direct" => Ok(Self::Direct),
            _ => Err(FiError::Argument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub replicates: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub m: usize,
    pub rho: Option<f64>,
    pub seed: u64,
    pub methods: Vec<Estimator>,
    /// Collect linearization variance estimates where available.
    pub variance: bool,
}

impl StudyConfig {
    /// Desk-scale defaults for each study.
    pub fn default_for(study: StudyKind) -> Self {
        use Estimator::*;
        let (replicates, n, m, methods) = match study {
            StudyKind::Sim1 => (500, 400, 10, vec![Full, Sri, Pfi, Hdfi]),
            StudyKind::Sim1Sens => (500, 400, 10, vec![Full, Pfi, Hdfi]),
            StudyKind::Sim2 => (200, 800, 200, vec![Pfi, Hdfi, Naive, Wrc]),
            StudyKind::Splitq => (1000, 400, 10, vec![Pfi, Direct]),
        };
        Self {
            study,
            replicates,
            n_a: n,
            n_b: n,
            m,
            rho: (study == StudyKind::Sim1Sens).then_some(0.0),
            seed: 20_140_101,
            methods,
            variance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use Estimator::*;
        if self.replicates < 1 {
            return Err(FiError::Argument("replicates must be at least 1".into()));
        }
        if self.n_a < 2 || self.n_b < 2 || self.m < 1 {
            return Err(FiError::Argument("sample sizes must be at least 2 and m at least 1".into()));
        }
        match (self.study, self.rho) {
            (StudyKind::Sim1Sens, Some(r)) if r.is_finite() => {}
            (StudyKind::Sim1Sens, _) => return Err(FiError::Argument("sim1_sens needs a finite rho".into())),
            (_, Some(_)) => return Err(FiError::Argument("rho applies only to sim1_sens".into())),
            _ => {}
        }
        let allowed: &[Estimator] = match self.study {
            StudyKind::Sim1 => &[Full, Sri, Pfi, Hdfi, Tsls],
            StudyKind::Sim1Sens => &[Full, Sri, Pfi, Hdfi],
            StudyKind::Sim2 => &[Pfi, Hdfi, Naive, Wrc],
            StudyKind::Splitq => &[Pfi, Direct],
        };
        if self.methods.is_empty() {
            return Err(FiError::Argument("no methods requested".into()));
        }
        if let Some(bad) = self.methods.iter().find(|m| !allowed.contains(m)) {
            return Err(FiError::Argument(format!("method {} is not available in this study", bad.name())));
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<&'static str> {
        match self.study {
            StudyKind::Sim1 => vec!["beta0", "beta1", "sigma2", "pi"],
            StudyKind::Sim1Sens => vec!["theta1", "theta2", "theta3"],
            StudyKind::Sim2 => vec!["gamma0", "gamma_x"],
            StudyKind::Splitq => vec!["mu2"],
        }
    }

    pub fn truths(&self) -> Vec<f64> {
        match self.study {
            StudyKind::Sim1 => vec![1.0, 1.0, 1.0, 0.375],
            StudyKind::Sim1Sens => {
                let rho = self.rho.unwrap_or(0.0);
                vec![2.0, 1.0 + 0.7 * rho, sens_joint_probability(rho)]
            }
            StudyKind::Sim2 => vec![1.0, 1.0],
            StudyKind::Splitq => vec![3.0],
        }
    }
}

/// One unit of the Simulation-One population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim1Unit {
    pub x: f64,
    pub y1: f64,
    pub y2: f64,
}

/// `(y1, x)` bivariate normal with means `(2, 3)`, unit variances and
/// covariance 0.7; `y2 = 1 + y1 + e`, `e ~ N(0, 1)`.
pub fn gen_sim1<R: Rng + ?Sized>(n_total: usize, rng: &mut R) -> Vec<Sim1Unit> {
    gen_y2(n_total, rng, |y1, _| 1.0 + y1)
}

/// As [`gen_sim1`] with `y2 = 0.5 + y1 + rho (x - 3) + e`, so that `x` is no
/// longer a valid instrument when `rho != 0`.
pub fn gen_sim1_sens<R: Rng + ?Sized>(n_total: usize, rho: f64, rng: &mut R) -> Vec<Sim1Unit> {
    gen_y2(n_total, rng, |y1, x| 0.5 + y1 + rho * (x - 3.0))
}

fn gen_y2<R: Rng + ?Sized>(n: usize, rng: &mut R, mean: impl Fn(f64, f64) -> f64) -> Vec<Sim1Unit> {
    (0..n)
        .map(|_| {
            let y1 = 2.0 + rng.sample::<f64, _>(StandardNormal);
            let x = 3.0 + 0.7 * (y1 - 2.0) + 0.51f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let y2 = mean(y1, x) + rng.sample::<f64, _>(StandardNormal);
            Sim1Unit { x, y1, y2 }
        })
        .collect()
}

/// First `n_a` units form sample A `(x, y1)`, the rest sample B `(x, y2)`.
/// Also returns the withheld `y1` of sample B.
pub fn split_sim1(units: &[Sim1Unit], n_a: usize) -> Result<(MatchingProblem, Vec<f64>)> {
    if n_a > units.len() {
        return Err(FiError::Argument(format!("n_a = {n_a} exceeds {} units", units.len())));
    }
    let (a, b) = units.split_at(n_a);
    let problem = MatchingProblem::from_arrays(
        &a.iter().map(|u| vec![u.x]).collect::<Vec<_>>(),
        &a.iter().map(|u| u.y1).collect::<Vec<_>>(),
        &b.iter().map(|u| vec![u.x]).collect::<Vec<_>>(),
        &b.iter().map(|u| u.y2).collect::<Vec<_>>(),
        0,
    )?;
    Ok((problem, b.iter().map(|u| u.y1).collect()))
}

/// `P(y1 < 2, y2 < 3)` under the sensitivity model, by quadrature over `y1`.
pub fn sens_joint_probability(rho: f64) -> f64 {
    let std = Normal::standard();
    let s = (1.0 + 0.51 * rho * rho).sqrt();
    // t = y1 - 2; given t, y2 - 3 ~ N(t (1 + 0.7 rho) - 0.5, s^2)
    let f = |t: f64| std.pdf(t) * std.cdf((0.5 - t * (1.0 + 0.7 * rho)) / s);
    simpson(f, -12.0, 0.0, 4000)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim2Params {
    pub gamma0: f64,
    pub gamma_x: f64,
    pub sigma2: f64,
    pub alpha: f64,
}

impl Default for Sim2Params {
    fn default() -> Self {
        Self {
            gamma0: 1.0,
            gamma_x: 1.0,
            sigma2: 0.25,
            alpha: 0.4,
        }
    }
}

/// Calibration sample `(x, z)` and main sample `(z, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim2Sample {
    pub calibration: Vec<(f64, f64)>,
    pub main: Vec<(f64, f64)>,
}

impl Sim2Sample {
    /// Roles: `x2 = z`, `y1 = x`, `y2 = y`.
    pub fn problem(&self) -> Result<MatchingProblem> {
        MatchingProblem::from_arrays(
            &self.calibration.iter().map(|p| vec![p.1]).collect::<Vec<_>>(),
            &self.calibration.iter().map(|p| p.0).collect::<Vec<_>>(),
            &self.main.iter().map(|p| vec![p.0]).collect::<Vec<_>>(),
            &self.main.iter().map(|p| p.1).collect::<Vec<_>>(),
            0,
        )
    }
}

/// `x ~ N(0, 1)`, `z = x + u` with `u ~ N(0, sigma2 |x|^(2 alpha))`,
/// `y ~ Bernoulli(expit(gamma0 + gamma_x x))`.
pub fn gen_sim2<R: Rng + ?Sized>(n_a: usize, n_b: usize, params: &Sim2Params, rng: &mut R) -> Sim2Sample {
    let xz = |rng: &mut R| {
        let x: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        (x, x + (params.sigma2 * x.abs().powf(2.0 * params.alpha)).sqrt() * u)
    };
    let calibration = (0..n_a).map(|_| xz(rng)).collect();
    let main = (0..n_b)
        .map(|_| {
            let (x, z) = xz(rng);
            let p = expit(params.gamma0 + params.gamma_x * x);
            (z, f64::from(u8::from(rng.random::<f64>() < p)))
        })
        .collect();
    Sim2Sample { calibration, main }
}

/// Estimates from one method on one replicate; `None` where the method does
/// not estimate a parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Estimator,
    pub estimates: Vec<Option<f64>>,
    pub variances: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub method: Estimator,
    pub truth: f64,
    pub mc_mean: f64,
    pub bias: f64,
    pub mc_variance: f64,
    pub mc_mse: f64,
    pub mean_variance_estimate: Option<f64>,
    pub variance_relative_bias: Option<f64>,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub config: StudyConfig,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicateRecord>,
}

impl StudySummary {
    pub fn row(&self, parameter: &str, method: Estimator) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter && r.method == method)
    }

    pub fn failures(&self) -> Vec<&ReplicateRecord> {
        self.records.iter().filter(|r| r.error.is_some()).collect()
    }
}

/// Monte Carlo moments of one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub bias: f64,
    /// Divisor `R - 1`.
    pub variance: f64,
    /// `mean((est - truth)^2) = bias^2 + variance (R - 1) / R`.
    pub mse: f64,
}

pub fn moments(estimates: &[f64], truth: f64) -> Result<Moments> {
    let r = estimates.len();
    if r < 2 {
        return Err(FiError::Argument(format!("need at least 2 replicates, got {r}")));
    }
    let mean = estimates.iter().sum::<f64>() / r as f64;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r as f64;
    Ok(Moments {
        mean,
        bias: mean - truth,
        variance,
        mse,
    })
}

/// `(mean V-hat - MC variance) / MC variance`.
pub fn relative_bias(variance_estimates: &[f64], mc_variance: f64) -> f64 {
    let mean = variance_estimates.iter().sum::<f64>() / variance_estimates.len() as f64;
    (mean - mc_variance) / mc_variance
}

/// Aggregates records in replicate order. Replicates where a method failed,
/// or produced a non-finite estimate, are dropped for that method.
pub fn summarize(config: &StudyConfig, records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let truths = config.truths();
    let mut rows = Vec::new();
    for (k, (name, truth)) in config.parameters().into_iter().zip(truths).enumerate() {
        for &method in &config.methods {
            let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
            let failures = mine.iter().filter(|r| r.error.is_some()).count();
            let ok: Vec<&&ReplicateRecord> = mine
                .iter()
                .filter(|r| r.error.is_none() && r.estimates.get(k).copied().flatten().is_some_and(f64::is_finite))
                .collect();
            let est: Vec<f64> = ok.iter().filter_map(|r| r.estimates[k]).collect();
            let Ok(mo) = moments(&est, truth) else {
                continue;
            };
            let vhat: Vec<f64> = ok.iter().filter_map(|r| r.variances.get(k).copied().flatten()).collect();
            let with_v = vhat.len() == est.len() && vhat.iter().all(|v| v.is_finite());
            let mean_v = with_v.then(|| vhat.iter().sum::<f64>() / vhat.len() as f64);
            rows.push(SummaryRow {
                parameter: name.to_string(),
                method,
                truth,
                mc_mean: mo.mean,
                bias: mo.bias,
                mc_variance: mo.variance,
                mc_mse: mo.mse,
                mean_variance_estimate: mean_v,
                variance_relative_bias: with_v.then(|| relative_bias(&vhat, mo.variance)),
                replicates: est.len(),
                failures,
            });
        }
    }
    rows
}

type Outcome = Result<(Vec<Option<f64>>, Vec<Option<f64>>)>;

fn fractional_b_stats(fit: &MatchingFit, y2: &[f64]) -> (f64, f64, f64) {
    // weighted moments of (y1*, y2) and the joint-below fraction over B
    let rec = &fit.recipients;
    let (mut sw, mut s1, mut s2, mut s11, mut s12, mut hit) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..rec.len() {
        for (v, w) in fit.dataset.donors[i].iter().zip(&fit.dataset.weights[i]) {
            let ww = rec.weights[i] * w;
            sw += ww;
            s1 += ww * v;
            s2 += ww * y2[i];
            s11 += ww * v * v;
            s12 += ww * v * y2[i];
            if *v < 2.0 && y2[i] < 3.0 {
                hit += ww;
            }
        }
    }
    let (m1, m2) = (s1 / sw, s2 / sw);
    let slope = (s12 / sw - m1 * m2) / (s11 / sw - m1 * m1);
    (m1, slope, hit / sw)
}

fn complete_b_stats(y1: &[f64], y2: &[f64]) -> (f64, f64, f64) {
    let n = y1.len() as f64;
    let m1 = y1.iter().sum::<f64>() / n;
    let m2 = y2.iter().sum::<f64>() / n;
    let sxy: f64 = y1.iter().zip(y2).map(|(a, b)| (a - m1) * (b - m2)).sum();
    let sxx: f64 = y1.iter().map(|a| (a - m1).powi(2)).sum();
    let hit = y1.iter().zip(y2).filter(|(a, b)| **a < 2.0 && **b < 3.0).count() as f64;
    (m1, sxy / sxx, hit / n)
}

fn sim1_method(config: &StudyConfig, method: Estimator, problem: &MatchingProblem, y1b: &[f64], em_seed: u64) -> Outcome {
    let y2: Vec<f64> = problem.sample_b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect();
    let sens = config.study == StudyKind::Sim1Sens;
    match method {
        Estimator::Full => {
            if sens {
                let (a, b, c) = complete_b_stats(y1b, &y2);
                return Ok((vec![Some(a), Some(b), Some(c)], vec![None; 3]));
            }
            let rows: Vec<[f64; 1]> = y1b.iter().map(|v| [*v]).collect();
            let fit = fit_normal_mle(&DesignMatrix::with_intercept(&rows)?, &y2, None)?;
            let c = fit.coefficients();
            let (_, _, pi) = complete_b_stats(y1b, &y2);
            Ok((vec![Some(c[0]), Some(c[1]), Some(fit.sigma2()), Some(pi)], vec![None; 4]))
        }
        Estimator::Tsls => {
            let b = two_stage_least_squares(problem)?.beta();
            Ok((vec![Some(b[0]), Some(b[1]), None, None], vec![None; 4]))
        }
        Estimator::Sri | Estimator::Pfi | Estimator::Hdfi => {
            let m = match method {
                Estimator::Sri => Method::Sri,
                Estimator::Pfi => Method::Pfi,
                _ => Method::Hdfi,
            };
            let em = EmConfig {
                m: config.m,
                seed: em_seed,
                method: m,
                ..EmConfig::default()
            };
            let fit = run_matching(problem, &em)?;
            let (t1, t2, t3) = fractional_b_stats(&fit, &y2);
            if sens {
                return Ok((vec![Some(t1), Some(t2), Some(t3)], vec![None; 3]));
            }
            let th = &fit.theta.theta2;
            let c = th.coefficients();
            let est = vec![Some(c[0]), Some(c[1]), Some(th.sigma2()), Some(t3)];
            if !config.variance || method == Estimator::Sri {
                return Ok((est, vec![None; 4]));
            }
            let v = mle_variance(&fit.donors, &fit.recipients, &fit.dataset, th, StageA::Estimated)?;
            let cov = &v.covariance;
            let s2 = th.sigma2();
            let jb = JointBelow { y1: 2.0, y2: 3.0 };
            let vp = eta_variance(&fit.donors, &fit.recipients, &fit.dataset, th, &jb, &[t3], StageA::Estimated)?;
            Ok((
                est,
                vec![Some(cov[(0, 0)]), Some(cov[(1, 1)]), Some(s2 * s2 * cov[(2, 2)]), Some(vp.covariance[(0, 0)])],
            ))
        }
        _ => Err(FiError::Argument(format!("{} not available", method.name()))),
    }
}

fn sim2_method(config: &StudyConfig, method: Estimator, problem: &MatchingProblem, em_seed: u64) -> Outcome {
    let pair = |m: &LogisticModel| vec![Some(m.gamma0), Some(m.gamma_x[0])];
    match method {
        Estimator::Naive => Ok((pair(&naive_estimator(problem)?), vec![None; 2])),
        Estimator::Wrc => Ok((pair(&wrc_estimator(problem)?.outcome), vec![None; 2])),
        Estimator::Pfi | Estimator::Hdfi => {
            let calib = fit_calibration(problem, CalibrationSpec::Working)?;
            let variant = if method == Estimator::Pfi { MeVariant::Working } else { MeVariant::Hdfi };
            let em = EmConfig {
                m: config.m,
                seed: em_seed,
                ..EmConfig::default()
            };
            let start = LogisticModel::new(0.0, vec![0.0])?;
            let fit = run_em_me(problem, &calib, &start, &em, variant)?;
            let est = pair(&fit.outcome);
            if !config.variance {
                return Ok((est, vec![None; 2]));
            }
            let v = mle_variance(&fit.donors, &fit.recipients, &fit.dataset, &fit.outcome, StageA::Estimated)?;
            Ok((est, vec![Some(v.covariance[(0, 0)]), Some(v.covariance[(1, 1)])]))
        }
        _ => Err(FiError::Argument(format!("{} not available", method.name()))),
    }
}

fn splitq_method(config: &StudyConfig, method: Estimator, problem: &MatchingProblem, em_seed: u64) -> Outcome {
    let em = EmConfig {
        m: config.m,
        seed: em_seed,
        method: Method::Pfi,
        ..EmConfig::default()
    };
    let fit = fit_theta_splitq(problem, &em)?;
    let imputed = impute_y2_for_a(problem, &fit.theta.theta2, config.m, em_seed)?;
    let est = imputed_mean_mu2(problem, &fit, &imputed)?;
    match method {
        Estimator::Pfi => Ok((vec![Some(est.estimate)], vec![Some(est.variance)])),
        Estimator::Direct => Ok((vec![Some(est.direct_estimate)], vec![Some(est.direct_variance)])),
        _ => Err(FiError::Argument(format!("{} not available", method.name()))),
    }
}

fn run_replicate(config: &StudyConfig, r: usize) -> Vec<ReplicateRecord> {
    let mut rng = substream(derive_seed(config.seed, tags::DATA), r as u64);
    let em_seed = derive_seed(derive_seed(config.seed, tags::REPLICATE), r as u64);
    let n = config.n_a + config.n_b;
    let data: Result<(MatchingProblem, Vec<f64>)> = match config.study {
        StudyKind::Sim1 | StudyKind::Splitq => split_sim1(&gen_sim1(n, &mut rng), config.n_a),
        StudyKind::Sim1Sens => split_sim1(&gen_sim1_sens(n, config.rho.unwrap_or(0.0), &mut rng), config.n_a),
        StudyKind::Sim2 => gen_sim2(config.n_a, config.n_b, &Sim2Params::default(), &mut rng)
            .problem()
            .map(|p| (p, Vec::new())),
    };
    let k = config.parameters().len();
    config
        .methods
        .iter()
        .map(|&method| {
            let out = data.as_ref().map_err(|e| FiError::Argument(e.to_string())).and_then(|(p, y1b)| match config.study {
                StudyKind::Sim1 | StudyKind::Sim1Sens => sim1_method(config, method, p, y1b, em_seed),
                StudyKind::Sim2 => sim2_method(config, method, p, em_seed),
                StudyKind::Splitq => splitq_method(config, method, p, em_seed),
            });
            match out {
                Ok((estimates, variances)) => ReplicateRecord {
                    replicate: r,
                    method,
                    estimates,
                    variances,
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    replicate: r,
                    method,
                    estimates: vec![None; k],
                    variances: vec![None; k],
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Runs every replicate (in parallel) and summarizes in replicate order.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    config.validate()?;
    let records: Vec<ReplicateRecord> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(StudySummary {
        config: config.clone(),
        rows: summarize(config, &records),
        records,
    })
}

/// Fixed-width table of the summary rows.
pub fn format_table(summary: &StudySummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<7} {:>9} {:>10} {:>10} {:>11} {:>11} {:>9} {:>5} {:>5}",
        "parameter", "method", "truth", "mean", "bias", "variance", "mse", "rel.bias", "ok", "fail"
    );
    for r in &summary.rows {
        let rb = r.variance_relative_bias.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<10} {:<7} {:>9.4} {:>10.4} {:>10.4} {:>11.6} {:>11.6} {:>9} {:>5} {:>5}",
            r.parameter,
            r.method.name(),
            r.truth,
            r.mc_mean,
            r.bias,
            r.mc_variance,
            r.mc_mse,
            rb,
            r.replicates,
            r.failures
        );
    }
    out
}

pub fn write_csv<W: std::io::Write>(summary: &StudySummary, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in &summary.rows {
        csv.serialize(r).map_err(|source| FiError::Csv {
            path: "summary".into(),
            source,
        })?;
    }
    csv.flush().map_err(|source| FiError::Io {
        path: "summary".into(),
        source,
    })
}
