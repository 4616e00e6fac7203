//! Small-dimension regression kernels: weighted least squares, Newton-Raphson
//! logistic regression, SPD solves and central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{FiError, Result};

/// Relative pivot threshold below which a Cholesky factorization is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Row-major design matrix. The intercept column, when wanted, is an ordinary
/// column of ones supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(FiError::Argument(format!(
                "design data has {} entries, expected {n}x{p}",
                data.len()
            )));
        }
        if p == 0 {
            return Err(FiError::Argument("design matrix has no columns".into()));
        }
        if n < p {
            return Err(FiError::Argument(format!("design has {n} rows but {p} columns")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FiError::Argument(format!(
                "non-finite design entry at row {}, column {}",
                pos / p,
                pos % p
            )));
        }
        Ok(Self { n, p, data })
    }

    /// Builds `[1, row...]` for every row.
    pub fn with_intercept<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * (k + 1));
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != k {
                return Err(FiError::Argument(format!("row {i} has {} columns, expected {k}", r.len())));
            }
            data.push(1.0);
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), k + 1, data)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    /// `X' W X` with `W = diag(w)` (identity when `w` is `None`).
    pub fn weighted_gram(&self, w: Option<&[f64]>) -> DMatrix<f64> {
        let p = self.p;
        let mut g = DMatrix::zeros(p, p);
        for i in 0..self.n {
            let wi = w.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                continue;
            }
            let r = self.row(i);
            for a in 0..p {
                let ra = wi * r[a];
                for b in 0..=a {
                    g[(a, b)] += ra * r[b];
                }
            }
        }
        symmetrize_lower(&mut g);
        g
    }
}

fn symmetrize_lower(g: &mut DMatrix<f64>) {
    let p = g.nrows();
    for a in 0..p {
        for b in 0..a {
            g[(b, a)] = g[(a, b)];
        }
    }
}

/// Output of a regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
    /// `(X'WX)^{-1}` for least squares, inverse observed information for logistic fits.
    pub xtx_inverse: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes `a`, failing when a pivot drops below `PIVOT_TOLERANCE` times
    /// the largest diagonal entry.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let p = a.nrows();
        if a.ncols() != p {
            return Err(FiError::Argument(format!("matrix is {}x{}, not square", p, a.ncols())));
        }
        let max_diag = (0..p).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let threshold = PIVOT_TOLERANCE * max_diag;
        let mut l = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) || max_diag == 0.0 {
                return Err(FiError::Singular {
                    pivot: j,
                    value: d,
                    max_diag,
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..p {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let p = self.l.nrows();
        let mut y = b.clone();
        for i in 0..p {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..p).rev() {
            let mut s = y[i];
            for k in (i + 1)..p {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.l.nrows();
        let mut inv = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        let mut sym = (&inv + inv.transpose()) * 0.5;
        symmetrize_lower(&mut sym);
        sym
    }
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(Cholesky::new(a)?.inverse())
}

/// Reciprocal-free condition estimate `||A||_1 ||A^{-1}||_1`; infinite when singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let norm1 = |m: &DMatrix<f64>| {
        (0..m.ncols())
            .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match a.clone().try_inverse() {
        Some(inv) => norm1(a) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Inverts a general square matrix, reporting a condition estimate on failure.
pub fn invert(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let cond = condition_estimate(a);
    if !cond.is_finite() || cond > 1e14 {
        return Err(FiError::IllConditioned {
            condition: cond,
            context: context.to_string(),
        });
    }
    a.clone().try_inverse().ok_or_else(|| FiError::IllConditioned {
        condition: cond,
        context: context.to_string(),
    })
}

fn check_weights(w: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = w {
        if w.len() != n {
            return Err(FiError::Argument(format!("{} weights for {n} rows", w.len())));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FiError::Argument("weights must be finite and non-negative".into()));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(FiError::Argument("weights sum to zero".into()));
        }
    }
    Ok(())
}

/// Weighted least squares via Cholesky of the normal equations.
///
/// `residual_variance` is the weighted residual sum of squares divided by
/// `sum(w) - p` (`n - p` when unweighted), or zero when that is not positive.
pub fn ols_fit(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<FitResult> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(FiError::Argument(format!("{} responses for {n} rows", y.len())));
    }
    check_weights(w, n)?;
    let gram = x.weighted_gram(w);
    let mut xty = DVector::zeros(p);
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]);
        let r = x.row(i);
        for a in 0..p {
            xty[a] += wi * r[a] * y[i];
        }
    }
    let chol = Cholesky::new(&gram)?;
    let coefficients = chol.solve(&xty);
    let mut ssr = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]);
        let fitted: f64 = x.row(i).iter().zip(coefficients.iter()).map(|(a, b)| a * b).sum();
        let e = y[i] - fitted;
        ssr += wi * e * e;
        wsum += wi;
    }
    let dof = wsum - p as f64;
    let residual_variance = if dof > 0.0 { ssr / dof } else { 0.0 };
    Ok(FitResult {
        coefficients,
        residual_variance,
        xtx_inverse: chol.inverse(),
        converged: true,
        iterations: 1,
    })
}

/// Options for [`logistic_fit`].
#[derive(Debug, Clone)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest score component, scaled by `max(1, sum(w))`.
    pub tol_score: f64,
    pub init: Option<DVector<f64>>,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_score: 1e-10,
            init: None,
        }
    }
}

#[inline]
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Weighted Bernoulli log-likelihood with logit link.
pub fn logistic_loglik(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &DVector<f64>) -> f64 {
    (0..x.nrows())
        .map(|i| {
            let wi = w.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                return 0.0;
            }
            let eta = dot(x.row(i), beta);
            wi * (y[i] * eta - log1p_exp(eta))
        })
        .sum()
}

/// Score vector and information matrix of the weighted logistic log-likelihood.
pub fn logistic_score_information(
    x: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let r = x.row(i);
        let pr = expit(dot(r, beta));
        let resid = wi * (y[i] - pr);
        let v = wi * pr * (1.0 - pr);
        for a in 0..p {
            score[a] += resid * r[a];
            let va = v * r[a];
            for b in 0..=a {
                info[(a, b)] += va * r[b];
            }
        }
    }
    symmetrize_lower(&mut info);
    (score, info)
}

/// Maximum likelihood logistic regression by damped Newton-Raphson.
///
/// A step that lowers the log-likelihood is halved, at most 30 times.
/// True when every fitted probability matches its label to within 1e-6,
/// which only happens as coefficients diverge on separated data.
fn perfectly_separated(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &DVector<f64>) -> bool {
    (0..x.nrows()).all(|i| {
        if w.is_some_and(|w| w[i] == 0.0) {
            return true;
        }
        let eta: f64 = x.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        (y[i] - expit(eta)).abs() < 1e-6
    })
}

pub fn logistic_fit(
    x: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    opts: &LogisticOptions,
) -> Result<FitResult> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(FiError::Argument(format!("{} responses for {n} rows", y.len())));
    }
    check_weights(w, n)?;
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(FiError::Argument("logistic response must be 0 or 1".into()));
    }
    let active = |i: usize| w.map_or(true, |w| w[i] > 0.0);
    let ones = (0..n).filter(|&i| active(i) && y[i] == 1.0).count();
    let zeros = (0..n).filter(|&i| active(i) && y[i] == 0.0).count();
    if ones == 0 || zeros == 0 {
        return Err(FiError::Argument("logistic response has a single class".into()));
    }
    let wsum = w.map_or(n as f64, |w| w.iter().sum());
    let tol = opts.tol_score * wsum.max(1.0);

    let mut beta = match &opts.init {
        Some(b) if b.len() == p => b.clone(),
        Some(b) => {
            return Err(FiError::Argument(format!("initial value has length {}, expected {p}", b.len())))
        }
        None => DVector::zeros(p),
    };
    let mut ll = logistic_loglik(x, y, w, &beta);
    for iter in 0..=opts.max_iter {
        let (score, mut info) = logistic_score_information(x, y, w, &beta);
        let max_score = score.amax();
        if max_score < tol {
            // one more full step costs little and takes the score to round-off
            if let Ok(chol) = Cholesky::new(&info) {
                let cand = &beta + chol.solve(&score);
                let (s, i) = logistic_score_information(x, y, w, &cand);
                if s.amax() < max_score {
                    (beta, info) = (cand, i);
                }
            }
            if perfectly_separated(x, y, w, &beta) {
                return Err(FiError::NonConvergence {
                    iterations: iter,
                    diagnostic: format!("data are separated; |beta| = {:.3e}", beta.norm()),
                });
            }
            let inv = spd_inverse(&info)?;
            return Ok(FitResult {
                coefficients: beta,
                residual_variance: 0.0,
                xtx_inverse: inv,
                converged: true,
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let chol = Cholesky::new(&info).map_err(|e| FiError::NonConvergence {
            iterations: iter,
            diagnostic: format!("information matrix degenerate ({e}); possible separation, |beta| = {:.3e}", beta.norm()),
        })?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let cand = &beta + &step * scale;
            let cand_ll = logistic_loglik(x, y, w, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(FiError::NonConvergence {
                iterations: iter,
                diagnostic: format!("step halving failed; max |score| = {max_score:.3e}"),
            });
        }
    }
    let (score, _) = logistic_score_information(x, y, w, &beta);
    Err(FiError::NonConvergence {
        iterations: opts.max_iter,
        diagnostic: format!(
            "max |score| = {:.3e}, |beta| = {:.3e}; data may be separated",
            score.amax(),
            beta.norm()
        ),
    })
}

/// Central finite-difference gradient.
pub fn fd_gradient<F>(f: F, at: &[f64], h: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut point = at.to_vec();
    let mut g = DVector::zeros(at.len());
    for k in 0..at.len() {
        let orig = point[k];
        point[k] = orig + h;
        let fp = f(&point);
        if !fp.is_finite() {
            return Err(FiError::Evaluation(point.clone()));
        }
        point[k] = orig - h;
        let fm = f(&point);
        if !fm.is_finite() {
            return Err(FiError::Evaluation(point.clone()));
        }
        point[k] = orig;
        g[k] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central finite-difference Jacobian of a vector-valued function; column `k`
/// is the derivative with respect to coordinate `k`, using step `h[k]`.
pub fn fd_jacobian<F>(f: F, at: &[f64], h: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let mut point = at.to_vec();
    let mut cols = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        let orig = point[k];
        point[k] = orig + h[k];
        let fp = f(&point)?;
        point[k] = orig - h[k];
        let fm = f(&point)?;
        point[k] = orig;
        let d = (fp - fm) / (2.0 * h[k]);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(FiError::Evaluation(point.clone()));
        }
        cols.push(d);
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, at.len(), |r, c| cols[c][r]))
}

/// Weighted mean of `values` (weights need not be normalized).
pub fn weighted_mean(values: &[f64], w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    values.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_design(n: usize, seed: u64) -> (DesignMatrix, Vec<f64>) {
        let mut rng = substream(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 0.5 + 1.5 * r[0] + rng.random_range(-1.0..1.0)).collect();
        (DesignMatrix::with_intercept(&rows).unwrap(), y)
    }

    #[test]
    fn intercept_only_constant_response() {
        let x = DesignMatrix::new(3, 1, vec![1.0; 3]).unwrap();
        let fit = ols_fit(&x, &[3.0, 3.0, 3.0], None).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-14);
        assert!(fit.residual_variance < 1e-28);
    }

    #[test]
    fn exact_linear_fit_has_no_residual() {
        let x = DesignMatrix::with_intercept(&[[1.0], [2.0], [4.0], [7.0]]).unwrap();
        let y = [3.0, 5.0, 9.0, 15.0];
        let fit = ols_fit(&x, &y, None).unwrap();
        assert!(fit.residual_variance < 1e-24);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_explicit_two_by_two_inverse() {
        let (x, y) = random_design(6, 11);
        // oracle: solve the 2x2 normal equations by the adjugate formula
        let (mut s0, mut s1, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..6 {
            let v = x.row(i)[1];
            s0 += 1.0;
            s1 += v;
            s11 += v * v;
            t0 += y[i];
            t1 += v * y[i];
        }
        let det = s0 * s11 - s1 * s1;
        let b0 = (s11 * t0 - s1 * t1) / det;
        let b1 = (s0 * t1 - s1 * t0) / det;
        let fit = ols_fit(&x, &y, None).unwrap();
        assert!((fit.coefficients[0] - b0).abs() < 1e-10);
        assert!((fit.coefficients[1] - b1).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_design_names_pivot() {
        let x = DesignMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        match ols_fit(&x, &[1.0, 2.0, 3.0], None) {
            Err(FiError::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let x = DesignMatrix::new(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(ols_fit(&x, &[1.0, 2.0], None), Err(FiError::Argument(_))));
        assert!(DesignMatrix::new(1, 2, vec![1.0, 2.0]).is_err());
        assert!(DesignMatrix::new(2, 1, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn weight_scale_invariance() {
        let (x, y) = random_design(20, 5);
        let w: Vec<f64> = (0..20).map(|i| 0.5 + (i % 3) as f64).collect();
        let w10: Vec<f64> = w.iter().map(|v| v * 10.0).collect();
        let a = ols_fit(&x, &y, Some(&w)).unwrap();
        let b = ols_fit(&x, &y, Some(&w10)).unwrap();
        for k in 0..2 {
            assert!((a.coefficients[k] - b.coefficients[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn xtx_inverse_is_inverse() {
        let (x, y) = random_design(30, 9);
        let w: Vec<f64> = (0..30).map(|i| 1.0 + (i % 4) as f64).collect();
        let fit = ols_fit(&x, &y, Some(&w)).unwrap();
        let prod = &fit.xtx_inverse * x.weighted_gram(Some(&w));
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert!((&fit.xtx_inverse - fit.xtx_inverse.transpose()).amax() < 1e-12 * fit.xtx_inverse.amax());
    }

    fn small_logistic() -> (DesignMatrix, Vec<f64>) {
        let xs = [-1.5, -1.0, -0.3, 0.2, 0.4, 0.9, 1.3, -0.1];
        let y = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let rows: Vec<[f64; 1]> = xs.iter().map(|v| [*v]).collect();
        (DesignMatrix::with_intercept(&rows).unwrap(), y)
    }

    #[test]
    fn logistic_matches_grid_search() {
        let (x, y) = small_logistic();
        let fit = logistic_fit(&x, &y, None, &LogisticOptions::default()).unwrap();
        // oracle: coarse-to-fine grid maximization of the log-likelihood
        let (mut c0, mut c1, mut span) = (0.0, 0.0, 4.0);
        for _ in 0..12 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for a in 0..=40 {
                for b in 0..=40 {
                    let g0 = c0 - span + 2.0 * span * a as f64 / 40.0;
                    let g1 = c1 - span + 2.0 * span * b as f64 / 40.0;
                    let ll = logistic_loglik(&x, &y, None, &DVector::from_vec(vec![g0, g1]));
                    if ll > best.0 {
                        best = (ll, g0, g1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            span /= 4.0;
        }
        assert!((fit.coefficients[0] - c0).abs() < 1e-4);
        assert!((fit.coefficients[1] - c1).abs() < 1e-4);
    }

    #[test]
    fn logistic_score_matches_fd_gradient() {
        let (x, y) = small_logistic();
        let beta = DVector::from_vec(vec![0.3, -0.7]);
        let (score, _) = logistic_score_information(&x, &y, None, &beta);
        let fd = fd_gradient(
            |b| logistic_loglik(&x, &y, None, &DVector::from_column_slice(b)),
            beta.as_slice(),
            1e-5,
        )
        .unwrap();
        for k in 0..2 {
            assert!((score[k] - fd[k]).abs() <= 1e-6 * score[k].abs().max(1e-3));
        }
        let fit = logistic_fit(&x, &y, None, &LogisticOptions::default()).unwrap();
        let fd_at_mle = fd_gradient(
            |b| logistic_loglik(&x, &y, None, &DVector::from_column_slice(b)),
            fit.coefficients.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(fd_at_mle.amax() < 1e-6);
    }

    #[test]
    fn logistic_symmetric_noisy_data() {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for rep in 0..50 {
            let flip = rep % 10 == 0;
            rows.push([-1.0]);
            y.push(if flip { 1.0 } else { 0.0 });
            rows.push([1.0]);
            y.push(if flip { 0.0 } else { 1.0 });
        }
        let x = DesignMatrix::with_intercept(&rows).unwrap();
        let fit = logistic_fit(&x, &y, None, &LogisticOptions::default()).unwrap();
        assert!(fit.coefficients[1] > 0.0);
        assert!(fit.coefficients[0].abs() < 1e-8);
        let (score, info) = logistic_score_information(&x, &y, None, &fit.coefficients);
        assert!(score.amax() < 1e-10 * 100.0);
        assert!((&fit.xtx_inverse * info - DMatrix::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn logistic_rejects_bad_labels() {
        let x = DesignMatrix::with_intercept(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(matches!(
            logistic_fit(&x, &[1.0, 1.0, 1.0], None, &LogisticOptions::default()),
            Err(FiError::Argument(_))
        ));
        assert!(matches!(
            logistic_fit(&x, &[0.0, 0.5, 1.0], None, &LogisticOptions::default()),
            Err(FiError::Argument(_))
        ));
    }

    #[test]
    fn separated_data_fails_to_converge() {
        let x = DesignMatrix::with_intercept(&[[-2.0], [-1.0], [1.0], [2.0]]).unwrap();
        let r = logistic_fit(&x, &[0.0, 0.0, 1.0, 1.0], None, &LogisticOptions::default());
        assert!(matches!(r, Err(FiError::NonConvergence { .. })), "{r:?}");
    }

    #[test]
    fn fd_gradient_quadratic_and_constant() {
        let g = fd_gradient(|v| v.iter().map(|a| a * a).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let z = fd_gradient(|_| 3.5, &[1.0, -1.0, 0.0], 1e-4).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(fd_gradient(|v| v[0].ln(), &[0.0], 1e-3).is_err());
    }
}
