//! Split-questionnaire designs: samples A and B partition one sample, `y1`
//! is asked in A and `y2` in B. After fitting the outcome model on B with
//! fractionally imputed `y1`, `y2` is imputed for A to complete the file.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{FractionalDataset, MatchingProblem};
use crate::engine::{run_matching, EmConfig, MatchingFit};
use crate::error::{FiError, Result};
use crate::models::{fit_normal_mle, ConditionalModel, NormalLinearModel};
use crate::numerics::{weighted_mean, DesignMatrix};
use crate::rng::{derive_seed, stream_index, substream, tags};

/// Outcome-model fit from B with `w_i` the full-sample weights.
pub fn fit_theta_splitq(problem: &MatchingProblem, config: &EmConfig) -> Result<MatchingFit> {
    run_matching(problem, config)
}

fn a_row(problem: &MatchingProblem, i: usize) -> Vec<f64> {
    let u = &problem.sample_a[i];
    let mut r = u.x1.clone();
    r.push(u.y1.unwrap_or(f64::NAN));
    r
}

/// `m` draws of `y2` per sample-A unit from `f(y2 | x1, y1; theta2)`, each
/// with weight `1/m`.
pub fn impute_y2_for_a(problem: &MatchingProblem, theta2: &NormalLinearModel, m: usize, seed: u64) -> Result<FractionalDataset> {
    if m == 0 {
        return Err(FiError::Argument("m must be at least 1".into()));
    }
    let seed = derive_seed(seed, tags::SPLITQ);
    let donors: Vec<Vec<f64>> = (0..problem.n_a())
        .into_par_iter()
        .map(|i| {
            let row = a_row(problem, i);
            let mut rng = substream(seed, stream_index(&problem.sample_a[i].id));
            (0..m).map(|_| theta2.draw(&row, &mut rng)).collect()
        })
        .collect();
    let n = donors.len();
    Ok(FractionalDataset {
        donors,
        log_initial: vec![vec![0.0; m]; n],
        weights: vec![vec![1.0 / m as f64; m]; n],
    })
}

/// Re-solves the outcome score on the completed file: imputed `y2` for A
/// plus the fractionally imputed `y1` for B.
pub fn augmented_fit(problem: &MatchingProblem, fit: &MatchingFit, imputed: &FractionalDataset) -> Result<NormalLinearModel> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for (i, u) in problem.sample_a.iter().enumerate() {
        let row = a_row(problem, i);
        for (v, wj) in imputed.donors[i].iter().zip(&imputed.weights[i]) {
            rows.push(row.clone());
            y.push(*v);
            w.push(u.weight * wj);
        }
    }
    let rec = &fit.recipients;
    for i in 0..rec.len() {
        for (v, wj) in fit.dataset.donors[i].iter().zip(&fit.dataset.weights[i]) {
            rows.push(rec.outcome_row(i, *v));
            y.push(rec.response[i]);
            w.push(rec.weights[i] * wj);
        }
    }
    fit_normal_mle(&DesignMatrix::with_intercept(&rows)?, &y, Some(&w))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitqEstimate {
    /// Imputed-data mean of `y2` over the full sample.
    pub estimate: f64,
    /// `V(y2)/n + (1/n_B - 1/n) V(e)`.
    pub variance: f64,
    /// Mean of `y2` over B alone.
    pub direct_estimate: f64,
    /// `V(y2)/n_B`.
    pub direct_variance: f64,
    pub var_y2: f64,
    pub var_e: f64,
}

fn weighted_variance(values: &[f64], w: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = weighted_mean(values, w);
    let dev: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    weighted_mean(&dev, w) * n / (n - 1.0)
}

/// Mean of `y2` on the completed file and its variance.
///
/// `V(y2)` is the sample variance of `y2` over B. `V(e)` is the variance of
/// the residual `y2 - b0 - b1'x1 - b2 yhat1` over B, with `yhat1` the stage-A
/// conditional mean. With unequal weights both are weighted plug-ins and the
/// formula, derived for simple random sampling, is an approximation.
pub fn imputed_mean_mu2(problem: &MatchingProblem, fit: &MatchingFit, imputed: &FractionalDataset) -> Result<SplitqEstimate> {
    let (n_a, n_b) = (problem.n_a(), problem.n_b());
    if n_a == 0 || n_b < 2 || imputed.n_recipients() != n_a {
        return Err(FiError::Argument("need a non-empty sample A with imputations and at least two units in B".into()));
    }
    let means_a = imputed.fractional_mean(|_, v| v);
    let w_a: Vec<f64> = problem.sample_a.iter().map(|u| u.weight).collect();
    let w_b: Vec<f64> = problem.sample_b.iter().map(|u| u.weight).collect();
    let y2: Vec<f64> = problem.sample_b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect();
    let total: f64 = w_a.iter().sum::<f64>() + w_b.iter().sum::<f64>();
    let estimate = (means_a.iter().zip(&w_a).map(|(v, w)| v * w).sum::<f64>()
        + y2.iter().zip(&w_b).map(|(v, w)| v * w).sum::<f64>())
        / total;

    let theta1 = &fit.theta.theta1;
    let theta2 = &fit.theta.theta2;
    let e: Vec<f64> = problem
        .sample_b
        .iter()
        .zip(&y2)
        .map(|(u, y)| {
            let mut row = u.x1.clone();
            row.push(theta1.mean(&u.covariates()));
            y - theta2.mean(&row)
        })
        .collect();
    let var_y2 = weighted_variance(&y2, &w_b);
    let var_e = weighted_variance(&e, &w_b);
    let n = (n_a + n_b) as f64;
    let nb = n_b as f64;
    Ok(SplitqEstimate {
        estimate,
        variance: var_y2 / n + (1.0 / nb - 1.0 / n) * var_e,
        direct_estimate: weighted_mean(&y2, &w_b),
        direct_variance: var_y2 / nb,
        var_y2,
        var_e,
    })
}
