//! Two-stage least squares for the linear matching model
//! `y2 = b0 + b1'x1 + b2 y1 + e` with `x2` as the instrument for `y1`.

use serde::Serialize;

use crate::data::MatchingProblem;
use crate::error::{FiError, Result};
use crate::numerics::{ols_fit, DesignMatrix, FitResult};

/// Instrument guard: `|alpha2| / se(alpha2)` below this is rejected. This is
/// a sanity check against an absent instrument, not a weak-instrument test.
pub const WEAK_INSTRUMENT_RATIO: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TslsResult {
    /// `y1 ~ (1, x1, x2)` on sample A.
    pub stage1: FitResult,
    /// `y2 ~ (1, x1, yhat1)` on sample B; coefficients are the estimate of b.
    pub stage2: FitResult,
    /// `|alpha2| / se(alpha2)` for each instrument column.
    pub instrument_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TslsSummary {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stage2_residual_variance: f64,
    pub instrument_ratios: Vec<f64>,
}

impl TslsResult {
    pub fn beta(&self) -> Vec<f64> {
        self.stage2.coefficients.iter().copied().collect()
    }

    pub fn summary(&self) -> TslsSummary {
        TslsSummary {
            beta: self.beta(),
            alpha: self.stage1.coefficients.iter().copied().collect(),
            stage2_residual_variance: self.stage2.residual_variance,
            instrument_ratios: self.instrument_ratios.clone(),
        }
    }
}

/// Stage-1 fitted value `a0 + a1'x1 + a2'x2` for every unit of sample B.
pub fn first_stage_predictions(problem: &MatchingProblem, stage1: &FitResult) -> Vec<f64> {
    problem
        .sample_b
        .iter()
        .map(|u| {
            let c = &stage1.coefficients;
            c[0] + u.covariates().iter().enumerate().map(|(k, v)| c[k + 1] * v).sum::<f64>()
        })
        .collect()
}

/// Sampling-weighted 2SLS. With unit weights this is plain OLS at each stage.
pub fn two_stage_least_squares(problem: &MatchingProblem) -> Result<TslsResult> {
    problem.validate()?;
    let rows_a: Vec<Vec<f64>> = problem.sample_a.iter().map(|u| u.covariates()).collect();
    let y1: Vec<f64> = problem.sample_a.iter().map(|u| u.y1.unwrap_or(f64::NAN)).collect();
    let wa: Vec<f64> = problem.sample_a.iter().map(|u| u.weight).collect();
    let stage1 = ols_fit(&DesignMatrix::with_intercept(&rows_a)?, &y1, Some(&wa))?;

    let k1 = problem.roles.x1.len();
    let mut ratios = Vec::with_capacity(problem.roles.x2.len());
    for (c, name) in problem.roles.x2.iter().enumerate() {
        let idx = 1 + k1 + c;
        let se = (stage1.residual_variance * stage1.xtx_inverse[(idx, idx)]).sqrt();
        let est = stage1.coefficients[idx].abs();
        let ratio = if se > 0.0 {
            est / se
        } else if est > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if !(ratio >= WEAK_INSTRUMENT_RATIO) {
            return Err(FiError::WeakInstrument {
                column: name.clone(),
                ratio,
            });
        }
        ratios.push(ratio);
    }

    let yhat = first_stage_predictions(problem, &stage1);
    let rows_b: Vec<Vec<f64>> = problem
        .sample_b
        .iter()
        .zip(&yhat)
        .map(|(u, h)| {
            let mut r = u.x1.clone();
            r.push(*h);
            r
        })
        .collect();
    let y2: Vec<f64> = problem.sample_b.iter().map(|u| u.y2.unwrap_or(f64::NAN)).collect();
    let wb: Vec<f64> = problem.sample_b.iter().map(|u| u.weight).collect();
    let stage2 = ols_fit(&DesignMatrix::with_intercept(&rows_b)?, &y2, Some(&wb))?;
    Ok(TslsResult {
        stage1,
        stage2,
        instrument_ratios: ratios,
    })
}
