//! Classic LASSO solvers: soft-thresholding, ISTA and a FISTA reference.
//!
//! Problem: `min_x 1/2 ||s - W x||^2 + lambda ||x||_1`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::encoder::gaussian_entries;
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LassoProblem {
    pub w: Array2<f64>,
    pub s: Array1<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

impl LassoProblem {
    pub fn new(w: Array2<f64>, s: Array1<f64>, lambda: f64, alpha: f64) -> Result<Self> {
        if w.nrows() != s.len() {
            return Err(dim_err!(
                "sampling matrix has {} rows, observation has {}",
                w.nrows(),
                s.len()
            ));
        }
        if lambda < 0.0 || alpha <= 0.0 {
            return Err(contract_err!(
                "need lambda >= 0 and alpha > 0, got lambda = {lambda}, alpha = {alpha}"
            ));
        }
        Ok(Self { w, s, lambda, alpha })
    }

    /// Uses the safe step `1 / L`.
    pub fn with_safe_step(w: Array2<f64>, s: Array1<f64>, lambda: f64) -> Result<Self> {
        let l = lipschitz(w.view());
        Self::new(w, s, lambda, 1.0 / l)
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// True when `alpha <= 1 / L`.
    pub fn step_is_safe(&self) -> bool {
        self.alpha * lipschitz(self.w.view()) <= 1.0 + 1e-12
    }
}

/// Gaussian sampling matrix with entries `~ N(0, 1 / m)`.
pub fn gaussian_sampling_matrix(m: usize, n: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_vec((m, n), gaussian_entries(m, n, 1.0 / m as f64, seed))
        .expect("length is m * n")
}

/// Largest eigenvalue of `W^T W` by power iteration (100 iterations, tol 1e-10).
pub fn lipschitz(w: ArrayView2<'_, f64>) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let mut v = power_start(n);
    let mut est = 0.0;
    for _ in 0..100 {
        let next = w.t().dot(&w.dot(&v));
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let new_est = v.dot(&next);
        v = next / norm;
        if (new_est - est).abs() <= 1e-10 * new_est.abs() {
            return new_est;
        }
        est = new_est;
    }
    est
}

/// Largest eigenvalue of `W^T W` with its unit eigenvector, iterated until
/// `||W^T W v - lambda v|| <= 1e-12 lambda` (at most 5000 iterations).
pub fn dominant_eigenpair(w: ArrayView2<'_, f64>) -> (f64, Array1<f64>) {
    let n = w.ncols();
    let mut v = power_start(n);
    if n == 0 || w.nrows() == 0 {
        return (0.0, v);
    }
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let wv = w.dot(&v);
        lambda = wv.dot(&wv);
        let next = w.t().dot(&wv);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return (0.0, v);
        }
        let residual = (&next - &(lambda * &v)).dot(&(&next - &(lambda * &v))).sqrt();
        if residual <= 1e-12 * lambda {
            break;
        }
        v = next / norm;
    }
    (lambda, v)
}

// deterministic start that is unlikely to be orthogonal to the top eigenvector
fn power_start(n: usize) -> Array1<f64> {
    let v = Array1::from_shape_fn(n, |i| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 { v / norm } else { v }
}

/// `sign(x) * max(0, |x| - theta)` with a scalar threshold.
pub fn soft_threshold(x: ArrayView1<'_, f64>, theta: f64) -> Result<Array1<f64>> {
    if theta < 0.0 {
        return Err(contract_err!("negative threshold {theta}"));
    }
    Ok(x.mapv(|v| shrink(v, theta)))
}

/// Per-coordinate thresholds; `theta` has the length of `x` or length 1.
pub fn soft_threshold_vec(x: ArrayView1<'_, f64>, theta: &[f64]) -> Result<Array1<f64>> {
    if theta.iter().any(|&t| t < 0.0) {
        return Err(contract_err!("negative threshold"));
    }
    match theta.len() {
        1 => soft_threshold(x, theta[0]),
        n if n == x.len() => Ok(Array1::from_iter(
            x.iter().zip(theta).map(|(&v, &t)| shrink(v, t)),
        )),
        n => Err(dim_err!("{n} thresholds for {} values", x.len())),
    }
}

#[inline]
pub(crate) fn shrink(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// `W^T (W x - s)`.
pub fn fidelity_gradient(w: ArrayView2<'_, f64>, s: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || w.nrows() != s.len() {
        return Err(dim_err!(
            "W is {}x{}, s has {}, x has {}",
            w.nrows(),
            w.ncols(),
            s.len(),
            x.len()
        ));
    }
    Ok(w.t().dot(&(w.dot(&x) - s)))
}

/// One ISTA iteration.
pub fn ista_step(p: &LassoProblem, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let g = fidelity_gradient(p.w.view(), p.s.view(), x)?;
    let u = &x - &(g * p.alpha);
    soft_threshold(u.view(), p.alpha * p.lambda)
}

pub fn objective(p: &LassoProblem, x: ArrayView1<'_, f64>) -> f64 {
    let r = &p.s - &p.w.dot(&x);
    0.5 * r.dot(&r) + p.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// Runs `iters` ISTA steps from `x0`, returning every iterate after `x0`.
pub fn ista(p: &LassoProblem, x0: ArrayView1<'_, f64>, iters: usize) -> Result<Vec<Array1<f64>>> {
    let mut x = x0.to_owned();
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        x = ista_step(p, x.view())?;
        out.push(x.clone());
    }
    Ok(out)
}

pub const ORACLE_MAX_ITERS: usize = 1_000_000;

/// FISTA with step `1 / L` until `||x_t - x_{t-1}||_inf < tol` and the
/// proximal-gradient residual `||ista_step(x) - x||_inf < tol`.
pub fn solve_oracle(p: &LassoProblem, tol: f64) -> Result<Array1<f64>> {
    if tol <= 0.0 {
        return Err(contract_err!("tolerance must be positive"));
    }
    let n = p.dim();
    let l = lipschitz(p.w.view());
    if l == 0.0 {
        return Ok(Array1::zeros(n));
    }
    let step = 1.0 / l;
    let wts = p.w.t().dot(&p.s);
    let gram = p.w.t().dot(&p.w);
    let mut x = Array1::<f64>::zeros(n);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for _ in 0..ORACLE_MAX_ITERS {
        let grad = gram.dot(&y) - &wts;
        let next = (&y - &(grad * step)).mapv(|v| shrink(v, step * p.lambda));
        residual = (&next - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + &((&next - &x) * ((t - 1.0) / t_next));
        x = next;
        t = t_next;
        if residual < tol {
            let grad = gram.dot(&x) - &wts;
            let fixed = (&x - &(grad * step)).mapv(|v| shrink(v, step * p.lambda));
            residual = (&fixed - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if residual < tol {
                return Ok(x);
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: ORACLE_MAX_ITERS,
        residual,
    })
}
