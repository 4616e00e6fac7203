//! Property checks shared by the proptest suite and the acceptance report.
#![allow(dead_code)]

use fimatch::data::{FractionalDataset, MatchingProblem};
use fimatch::engine::{
    initial_dataset, m_step, observed_pseudo_loglik, pps_collapse, run_matching, stack, update_weights, EmConfig,
    HotDeckDonors, MatchingDonors, Method, ParametricDonors, Recipients,
};
use fimatch::models::{
    fit_normal_mle, total_score_hessian, ConditionalModel, GaussianMarginal, LogisticModel, NormalLinearModel,
};
use fimatch::numerics::{fd_gradient, DesignMatrix};
use fimatch::rng::substream;
use fimatch::simlab::{gen_sim1, gen_sim1_sens, split_sim1};
use fimatch::twostage::two_stage_least_squares;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), TestCaseError>;

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

/// A small matching fixture: `n` units per sample, `y2 = 0.5 + y1 + rho (x - 3) + e`.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
    pub m: usize,
    pub hot_deck: bool,
}

pub fn fixture() -> impl Strategy<Value = Fixture> {
    (20usize..80, -0.3f64..0.3, any::<u64>(), 2usize..15, any::<bool>()).prop_map(|(n, rho, seed, m, hot_deck)| Fixture {
        n,
        rho,
        seed,
        m,
        hot_deck,
    })
}

impl Fixture {
    pub fn problem(&self) -> MatchingProblem {
        let units = gen_sim1_sens(2 * self.n, self.rho, &mut substream(self.seed, 0));
        split_sim1(&units, self.n).unwrap().0
    }

    pub fn method(&self) -> Method {
        if self.hot_deck {
            Method::Hdfi
        } else {
            Method::Pfi
        }
    }

    fn setup(&self) -> (MatchingDonors, Recipients, FractionalDataset) {
        let p = self.problem();
        let theta1 = fimatch::engine::fit_stage_a(&p).unwrap();
        let donors = if self.hot_deck {
            MatchingDonors::HotDeck(HotDeckDonors::from_problem(&p, theta1))
        } else {
            MatchingDonors::Parametric(ParametricDonors::from_problem(&p, theta1))
        };
        let rec = Recipients::from_problem(&p);
        let ds = initial_dataset(&donors, &rec, self.m, self.seed).unwrap();
        (donors, rec, ds)
    }
}

fn check_weights(ds: &FractionalDataset) -> Check {
    for (i, w) in ds.weights.iter().enumerate() {
        let s: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(fail(format!("recipient {i}: sum {s}, weights {w:?}")));
        }
    }
    Ok(())
}

/// Iterates E- and M-steps by hand, checking normalization after every
/// E-step and that the pseudo log-likelihood never decreases.
pub fn em_steps_normalized_and_monotone(f: &Fixture) -> Check {
    let (_, rec, mut ds) = f.setup();
    check_weights(&ds)?;
    let stacked = stack(&ds, &rec).unwrap();
    let mut theta = NormalLinearModel::new(vec![0.0, 0.5], 2.0).unwrap();
    let mut prev = observed_pseudo_loglik(&ds, &rec, &theta);
    for _ in 0..25 {
        let ll = update_weights(&mut ds, &rec, &theta).map_err(|e| fail(e.to_string()))?;
        check_weights(&ds)?;
        if (ll - prev).abs() > 1e-9 * prev.abs().max(1.0) {
            return Err(fail(format!("E-step loglik {ll} differs from evaluation {prev}")));
        }
        theta = m_step(&stacked, &ds, &theta).map_err(|e| fail(e.to_string()))?;
        let next = observed_pseudo_loglik(&ds, &rec, &theta);
        if next < ll - 1e-10 * ll.abs().max(1.0) {
            return Err(fail(format!("loglik fell from {ll} to {next}")));
        }
        prev = next;
    }
    Ok(())
}

/// The recorded trace of a full EM run never decreases.
pub fn em_trace_monotone(f: &Fixture) -> Check {
    let config = EmConfig {
        m: f.m,
        seed: f.seed,
        method: f.method(),
        ..EmConfig::default()
    };
    let fit = run_matching(&f.problem(), &config).map_err(|e| fail(e.to_string()))?;
    check_weights(&fit.dataset)?;
    let mut ll = fit.trace.loglik.clone();
    ll.push(fit.trace.final_loglik);
    for w in ll.windows(2) {
        if w[1] < w[0] - 1e-10 * w[0].abs().max(1.0) {
            return Err(fail(format!("loglik decreased: {w:?}")));
        }
    }
    Ok(())
}

/// A zero `y1` coefficient makes the E-step return the initial weights.
pub fn zero_slope_keeps_initial_weights(f: &Fixture, b0: f64, s2: f64) -> Check {
    let (_, rec, mut ds) = f.setup();
    let initial = ds.weights.clone();
    let theta = NormalLinearModel::new(vec![b0, 0.0], s2).unwrap();
    update_weights(&mut ds, &rec, &theta).map_err(|e| fail(e.to_string()))?;
    for (i, (a, b)) in ds.weights.iter().zip(&initial).enumerate() {
        for (x, y) in a.iter().zip(b) {
            if (x - y).abs() > 1e-12 {
                return Err(fail(format!("recipient {i}: {x} vs initial {y}")));
            }
        }
    }
    Ok(())
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Weighted score sums vanish at fitted MLEs.
pub fn score_vanishes_at_mle(seed: u64, n: usize) -> Check {
    let mut rng = substream(seed, 1);
    let x: Vec<Vec<f64>> = (0..n).map(|_| vec![gaussian(&mut rng)]).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let y: Vec<f64> = x.iter().map(|r| 1.0 - 0.5 * r[0] + gaussian(&mut rng)).collect();
    let design = DesignMatrix::with_intercept(&x).unwrap();
    let normal = fit_normal_mle(&design, &y, Some(&w)).unwrap();
    let yb: Vec<f64> = x
        .iter()
        .map(|r| f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-0.3 - r[0]).exp()))))
        .collect();
    let logistic = LogisticModel::new(0.0, vec![0.0]).unwrap().fit_weighted(&design, &yb, &w).unwrap();
    let (_, s1, _) = total_score_hessian(&normal, &design, &y, Some(&w));
    let (_, s2, _) = total_score_hessian(&logistic, &design, &yb, Some(&w));
    for (name, s) in [("normal", s1), ("logistic", s2)] {
        if s.norm() >= 1e-8 {
            return Err(fail(format!("{name} score norm {:e}", s.norm())));
        }
    }
    Ok(())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn check_derivatives<M: ConditionalModel>(model: &M, y: f64, cov: &[f64]) -> Check {
    let p = model.params();
    let g = fd_gradient(|q| model.with_params(q).log_density(y, cov), p.as_slice(), 1e-6).unwrap();
    let s = model.score(y, cov);
    let h = model.score_hessian(y, cov);
    for k in 0..p.len() {
        if !rel_close(s[k], g[k], 1e-6) {
            return Err(fail(format!("{model:?} score {k}: {} vs {}", s[k], g[k])));
        }
        let col = fd_gradient(|q| model.with_params(q).score(y, cov)[k], p.as_slice(), 1e-6).unwrap();
        for l in 0..p.len() {
            if !rel_close(h[(k, l)], col[l], 1e-5) {
                return Err(fail(format!("{model:?} hessian ({k},{l}): {} vs {}", h[(k, l)], col[l])));
            }
        }
    }
    Ok(())
}

/// Parameter point for the derivative checks.
pub fn derivative_point() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64)> {
    (-1.0f64..1.0, -1.0f64..1.0, 0.2f64..2.0, -0.5f64..0.8, 0.3f64..2.0, any::<bool>(), -1.5f64..1.5)
        .prop_map(|(b0, b1, s2, a, x, neg, e)| (b0, b1, s2, a, if neg { -x } else { x }, e))
}

pub fn derivatives_match((b0, b1, s2, alpha, x, e): (f64, f64, f64, f64, f64, f64)) -> Check {
    let y = b0 + b1 * x + e;
    check_derivatives(&NormalLinearModel::new(vec![b0, b1], s2).unwrap(), y, &[x])?;
    check_derivatives(&NormalLinearModel::heteroscedastic(vec![b0, b1], s2, alpha, 0).unwrap(), y, &[x])?;
    check_derivatives(&LogisticModel::new(b0, vec![b1]).unwrap(), f64::from(u8::from(e > 0.0)), &[x])?;
    check_derivatives(&GaussianMarginal::new(b0, s2).unwrap(), y, &[])
}

/// PFI with many donors and 2SLS agree on the `y1` coefficient with 2000
/// units per sample.
pub fn pfi_agrees_with_tsls(seed: u64) -> Check {
    let units = gen_sim1(4000, &mut substream(seed, 0));
    let (p, _) = split_sim1(&units, 2000).unwrap();
    let config = EmConfig {
        m: 200,
        seed,
        method: Method::Pfi,
        ..EmConfig::default()
    };
    let fit = run_matching(&p, &config).map_err(|e| fail(e.to_string()))?;
    let tsls = two_stage_least_squares(&p).map_err(|e| fail(e.to_string()))?.beta();
    let d = (fit.theta.theta2.coefficients()[1] - tsls[1]).abs();
    if d >= 0.02 {
        return Err(fail(format!("PFI {:?} vs 2SLS {tsls:?}", fit.theta.theta2.coefficients())));
    }
    Ok(())
}

/// Random fractional weights on one recipient.
pub fn weight_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..6).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

/// Collapse frequencies over 10^5 replays match the weights within 0.005.
pub fn pps_frequencies(weights: &[f64], seed: u64) -> Check {
    let m = weights.len();
    let ds = FractionalDataset {
        donors: vec![(0..m).map(|j| j as f64).collect()],
        log_initial: vec![vec![0.0; m]],
        weights: vec![weights.to_vec()],
    };
    let mut rng = substream(seed, 2);
    let reps = 100_000;
    let mut counts = vec![0usize; m];
    for _ in 0..reps {
        let c = pps_collapse(&ds, &mut rng);
        if c.weights != vec![vec![1.0]] {
            return Err(fail(format!("collapsed weights {:?}", c.weights)));
        }
        counts[c.donors[0][0] as usize] += 1;
    }
    for (c, w) in counts.iter().zip(weights) {
        let freq = *c as f64 / reps as f64;
        if (freq - w).abs() > 0.005 {
            return Err(fail(format!("frequency {freq} for weight {w}")));
        }
    }
    Ok(())
}
