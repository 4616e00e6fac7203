//! Linearization variance for fractionally imputed estimators.
//!
//! Every conditional expectation given `(x_i, y2_i)` is a fractional-weight
//! average over recipient `i`'s donors. Stage-A estimation enters through the
//! gradient of the log initial weights; hot-deck donors additionally vary with
//! sample A itself, which adds a per-donor influence term.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::data::FractionalDataset;
use crate::engine::{DonorModel, DonorPoint, EstimatingFunction, Recipients};
use crate::error::{FiError, Result};
use crate::models::ConditionalModel;
use crate::numerics::invert;

/// Whether the stage-A parameters are estimated or treated as known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageA {
    Estimated,
    Known,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Srs,
    Weighted,
}

fn ser_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

fn ser_opt_matrix<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match m {
        Some(m) => ser_matrix(m, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceComponents {
    #[serde(serialize_with = "ser_matrix")]
    pub i11: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub i22: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub b21: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub b22: DMatrix<f64>,
    /// Sample-B term: design variance of the linearized recipient scores.
    #[serde(serialize_with = "ser_matrix")]
    pub v_b: DMatrix<f64>,
    /// Sample-A term: stage-A estimation and, for hot-deck donors, the donors.
    #[serde(serialize_with = "ser_matrix")]
    pub v_a: DMatrix<f64>,
    /// `-dU/d eta'` for estimating-equation targets.
    #[serde(serialize_with = "ser_opt_matrix", skip_serializing_if = "Option::is_none")]
    pub tau: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub point: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub covariance: DMatrix<f64>,
    pub components: VarianceComponents,
    pub design: Design,
}

impl VarianceReport {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// With-replacement design variance `sum w_i^2 (u_i - u_w)(u_i - u_w)'` of
/// the weighted total `sum w_i u_i`.
pub fn design_variance(values: &[DVector<f64>], w: &[f64]) -> DMatrix<f64> {
    let d = values.first().map_or(0, |v| v.len());
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (v, w) in values.iter().zip(w) {
        mean += v * *w;
    }
    mean /= total;
    let mut out = DMatrix::zeros(d, d);
    for (v, w) in values.iter().zip(w) {
        let c = v - &mean;
        out += &c * c.transpose() * (w * w);
    }
    out
}

fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    let v = bread * meat * bread.transpose();
    (&v + v.transpose()) * 0.5
}

fn design_of(rec: &Recipients, a_weights: &[f64]) -> Design {
    let equal = |w: &[f64]| w.windows(2).all(|p| p[0] == p[1]);
    if equal(&rec.weights) && equal(a_weights) {
        Design::Srs
    } else {
        Design::Weighted
    }
}

/// Fractional moments of one recipient.
struct Terms {
    s2bar: DVector<f64>,
    hess: DMatrix<f64>,
    b21: DMatrix<f64>,
    b22: DMatrix<f64>,
    /// Estimating-function moments: `(ubar, d21, d22, dU/d eta)`.
    u: Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
    /// Per-donor `w*_ij (g_ij - gbar_i)` for the hot-deck influence, with `g`
    /// the stacked `(S2, U)`.
    donor: Option<Vec<DVector<f64>>>,
}

fn recipient_terms<D: DonorModel, M: ConditionalModel, E: EstimatingFunction>(
    donors: &D,
    rec: &Recipients,
    ds: &FractionalDataset,
    theta2: &M,
    u: Option<(&E, &[f64])>,
    hot: bool,
    i: usize,
) -> Terms {
    let v = &ds.donors[i];
    let w = &ds.weights[i];
    let g1 = donors.log_initial_grad(i, v);
    let (d1, d2) = (donors.dim(), theta2.dim());
    let mut row = rec.outcome_row(i, 0.0);
    let last = row.len() - 1;
    let mut s2 = Vec::with_capacity(v.len());
    let mut hess = DMatrix::zeros(d2, d2);
    let mut uv = Vec::new();
    let mut du = u.map(|(f, eta)| DMatrix::zeros(f.dim(), eta.len()));
    for (j, y1) in v.iter().enumerate() {
        row[last] = *y1;
        s2.push(theta2.score(rec.response[i], &row));
        hess += theta2.score_hessian(rec.response[i], &row) * w[j];
        if let Some((f, eta)) = u {
            let p = DonorPoint {
                covariates: &rec.covariates[i],
                imputed: *y1,
                response: rec.response[i],
            };
            uv.push(f.value(eta, &p));
            if let Some(du) = du.as_mut() {
                *du += f.jacobian(eta, &p) * w[j];
            }
        }
    }
    let avg = |xs: &[DVector<f64>], d: usize| xs.iter().zip(w).fold(DVector::zeros(d), |acc, (x, w)| acc + x * *w);
    let s1bar = avg(&g1, d1);
    let s2bar = avg(&s2, d2);
    let cross = |a: &[DVector<f64>], b: &[DVector<f64>], bbar: &DVector<f64>| {
        let mut out = DMatrix::zeros(a[0].len(), bbar.len());
        for ((a, b), w) in a.iter().zip(b).zip(w) {
            out += a * (b - bbar).transpose() * *w;
        }
        out
    };
    let b21 = cross(&s2, &g1, &s1bar);
    let b22 = cross(&s2, &s2, &s2bar);
    let u_terms = u.map(|(f, _)| {
        let ubar = avg(&uv, f.dim());
        let d21 = cross(&uv, &g1, &s1bar);
        let d22 = cross(&uv, &s2, &s2bar);
        (ubar, d21, d22, du.clone().unwrap_or_else(|| DMatrix::zeros(0, 0)))
    });
    let donor = hot.then(|| {
        (0..v.len())
            .map(|j| {
                let mut g = (&s2[j] - &s2bar) * w[j];
                if let Some((ubar, ..)) = &u_terms {
                    let gu = (&uv[j] - ubar) * w[j];
                    g = DVector::from_iterator(g.len() + gu.len(), g.iter().chain(gu.iter()).copied());
                }
                g
            })
            .collect()
    });
    Terms {
        s2bar,
        hess,
        b21,
        b22,
        u: u_terms,
        donor,
    }
}

struct Totals {
    per_unit: Vec<Terms>,
    hess: DMatrix<f64>,
    b21: DMatrix<f64>,
    b22: DMatrix<f64>,
    d21: Option<DMatrix<f64>>,
    d22: Option<DMatrix<f64>>,
    du: Option<DMatrix<f64>>,
    /// Hot-deck influence per sample-A unit (before the denominator
    /// correction): `sum_i w_i w*_ik (g_ik - gbar_i) / w_k`.
    donor: Option<Vec<DVector<f64>>>,
    shares: Option<DMatrix<f64>>,
}

fn accumulate<D: DonorModel, M: ConditionalModel, E: EstimatingFunction>(
    donors: &D,
    rec: &Recipients,
    ds: &FractionalDataset,
    theta2: &M,
    u: Option<(&E, &[f64])>,
    a_weights: &[f64],
) -> Result<Totals> {
    if ds.n_recipients() != rec.len() || donors.n_recipients() != rec.len() {
        return Err(FiError::Argument("dataset, donor model and recipients disagree in size".into()));
    }
    let shares = donors.hot_deck();
    if let Some(p) = &shares {
        if p.nrows() != a_weights.len() || ds.donors.iter().any(|d| d.len() != a_weights.len()) {
            return Err(FiError::Argument("hot-deck donor pools must hold every sample-A unit".into()));
        }
    }
    let hot = shares.is_some();
    let per_unit: Vec<Terms> = (0..rec.len())
        .into_par_iter()
        .map(|i| recipient_terms(donors, rec, ds, theta2, u, hot, i))
        .collect();
    let (d1, d2) = (donors.dim(), theta2.dim());
    let mut hess = DMatrix::zeros(d2, d2);
    let mut b21 = DMatrix::zeros(d2, d1);
    let mut b22 = DMatrix::zeros(d2, d2);
    let (mut d21, mut d22, mut du) = (None::<DMatrix<f64>>, None::<DMatrix<f64>>, None::<DMatrix<f64>>);
    let mut donor: Option<Vec<DVector<f64>>> = None;
    for (t, wb) in per_unit.iter().zip(&rec.weights) {
        hess += &t.hess * *wb;
        b21 += &t.b21 * *wb;
        b22 += &t.b22 * *wb;
        if let Some((_, a, b, j)) = &t.u {
            let add = |acc: &mut Option<DMatrix<f64>>, m: &DMatrix<f64>| match acc {
                Some(x) => *x += m * *wb,
                None => *acc = Some(m * *wb),
            };
            add(&mut d21, a);
            add(&mut d22, b);
            add(&mut du, j);
        }
        if let Some(g) = &t.donor {
            let acc = donor.get_or_insert_with(|| vec![DVector::zeros(g[0].len()); g.len()]);
            for (a, g) in acc.iter_mut().zip(g) {
                *a += g * *wb;
            }
        }
    }
    if let Some(acc) = donor.as_mut() {
        for (a, w) in acc.iter_mut().zip(a_weights) {
            *a /= *w;
        }
    }
    Ok(Totals {
        per_unit,
        hess,
        b21,
        b22,
        d21,
        d22,
        du,
        donor,
        shares,
    })
}

/// Hot-deck influence of sample-A unit `k`: its direct effect as a donor plus
/// its effect through the importance denominators of every donor `j`,
/// `-(1/w_k) sum_j w_j d_j P[j, k]`.
fn hot_deck_influence(d: &[DVector<f64>], p: &DMatrix<f64>, a_w: &[f64]) -> Vec<DVector<f64>> {
    let n = d.len();
    (0..n)
        .map(|k| {
            let mut e = d[k].clone();
            for j in 0..n {
                let pj = p[(j, k)];
                if pj != 0.0 {
                    e -= &d[j] * (a_w[j] * pj / a_w[k]);
                }
            }
            e
        })
        .collect()
}

fn stage_a_terms<D: DonorModel>(donors: &D) -> Result<(Vec<f64>, Vec<DVector<f64>>, DMatrix<f64>, DMatrix<f64>)> {
    let info = donors.sample_a();
    let i11_inv = invert(&info.information, "stage-A information")?;
    Ok((info.weights, info.scores, info.information, i11_inv))
}

/// Sandwich variance of the outcome-model MLE `theta2` from a converged run:
/// `I22^-1 [V(S2bar) + V2] I22^-1'`, with `I22 = -sum w w* dS2/dtheta2' - B22`.
pub fn mle_variance<D: DonorModel, M: ConditionalModel>(
    donors: &D,
    rec: &Recipients,
    ds: &FractionalDataset,
    theta2: &M,
    stage_a: StageA,
) -> Result<VarianceReport> {
    let (a_w, a_scores, i11, i11_inv) = stage_a_terms(donors)?;
    let t = accumulate::<D, M, crate::engine::ImputedMean>(donors, rec, ds, theta2, None, &a_w)?;
    let i22 = -&t.hess - &t.b22;
    let i22_inv = invert(&i22, "I22")?;
    let s2: Vec<DVector<f64>> = t.per_unit.iter().map(|u| u.s2bar.clone()).collect();
    let v_b = design_variance(&s2, &rec.weights);

    let k = &t.b21 * &i11_inv;
    let d2 = theta2.dim();
    let mut g: Vec<DVector<f64>> = match stage_a {
        StageA::Estimated => a_scores.iter().map(|s| &k * s).collect(),
        StageA::Known => vec![DVector::zeros(d2); a_w.len()],
    };
    if let (Some(d), Some(p)) = (&t.donor, &t.shares) {
        for (g, e) in g.iter_mut().zip(hot_deck_influence(d, p, &a_w)) {
            *g += e;
        }
    }
    let v_a = design_variance(&g, &a_w);
    Ok(VarianceReport {
        point: theta2.params().iter().copied().collect(),
        covariance: sandwich(&i22_inv, &(&v_b + &v_a)),
        components: VarianceComponents {
            i11,
            i22,
            b21: t.b21,
            b22: t.b22,
            v_b,
            v_a,
            tau: None,
        },
        design: design_of(rec, &a_w),
    })
}

/// Variance of `eta_hat` solving `sum w_i sum_j w*_ij U(eta; .) = 0`.
///
/// `U` must not depend on the model parameters. Both stage-A and outcome
/// parameter estimation are propagated; the stage-A effect includes its
/// path through `theta2_hat`.
pub fn eta_variance<D: DonorModel, M: ConditionalModel, E: EstimatingFunction>(
    donors: &D,
    rec: &Recipients,
    ds: &FractionalDataset,
    theta2: &M,
    u: &E,
    eta: &[f64],
    stage_a: StageA,
) -> Result<VarianceReport> {
    if eta.len() != u.dim() {
        return Err(FiError::Argument(format!("eta has length {}, U has {}", eta.len(), u.dim())));
    }
    let (a_w, a_scores, i11, i11_inv) = stage_a_terms(donors)?;
    let t = accumulate(donors, rec, ds, theta2, Some((u, eta)), &a_w)?;
    let i22 = -&t.hess - &t.b22;
    let i22_inv = invert(&i22, "I22")?;
    let (d21, d22, du) = match (t.d21, t.d22, t.du) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(FiError::Argument("no recipients".into())),
    };
    let tau = -du;
    let tau_inv = invert(&tau, "estimating-equation derivative")?;
    let k2 = &d22 * &i22_inv;
    let lin: Vec<DVector<f64>> = t
        .per_unit
        .iter()
        .map(|p| &p.u.as_ref().expect("estimating terms").0 + &k2 * &p.s2bar)
        .collect();
    let v_b = design_variance(&lin, &rec.weights);

    let l = (&d21 + &k2 * &t.b21) * &i11_inv;
    let du_dim = u.dim();
    let mut g: Vec<DVector<f64>> = match stage_a {
        StageA::Estimated => a_scores.iter().map(|s| &l * s).collect(),
        StageA::Known => vec![DVector::zeros(du_dim); a_w.len()],
    };
    if let (Some(d), Some(p)) = (&t.donor, &t.shares) {
        let d2 = theta2.dim();
        // combine the U and S2 donor influences as U + K2 S2
        let combined: Vec<DVector<f64>> = d
            .iter()
            .map(|x| x.rows(d2, du_dim).into_owned() + &k2 * x.rows(0, d2))
            .collect();
        for (g, e) in g.iter_mut().zip(hot_deck_influence(&combined, p, &a_w)) {
            *g += e;
        }
    }
    let v_a = design_variance(&g, &a_w);
    Ok(VarianceReport {
        point: eta.to_vec(),
        covariance: sandwich(&tau_inv, &(&v_b + &v_a)),
        components: VarianceComponents {
            i11,
            i22,
            b21: t.b21,
            b22: t.b22,
            v_b,
            v_a,
            tau: Some(tau),
        },
        design: design_of(rec, &a_w),
    })
}
