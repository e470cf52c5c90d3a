//! Quadratic programs over the probability simplex.
//!
//! The weight update of the splitting scheme minimizes
//! `1/2 b'Qb + c'b` over `b` in the simplex. Three routes are provided: an
//! accelerated projected-gradient solver run to a fixed-point tolerance, one
//! plain projected-gradient step, and a grid search used as a test oracle.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::error::Error as InputError;
use crate::kernels::GramBundle;
use crate::measures::simplex_project;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Largest dimension accepted by [`brute_force_simplex`].
pub const BRUTE_FORCE_MAX_DIM: usize = 4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Input(#[from] InputError),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        iterate: Vec<f64>,
    },
}

/// `min 1/2 b'Qb + c'b` subject to `b >= 0, sum(b) = 1`.
#[derive(Debug, Clone)]
pub struct SimplexQp {
    q: DMatrix<f64>,
    c: DVector<f64>,
}

impl SimplexQp {
    /// Checks squareness, symmetry (1e-12) and PSD (smallest eigenvalue >= -1e-8).
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self, InputError> {
        let qp = Self::new_unchecked_psd(q, c)?;
        let min_eig = qp.q.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-8 {
            return Err(InputError::invalid(format!(
                "quadratic term is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(qp)
    }

    /// Skips the eigenvalue check; for `Q` assembled from kernel Gram matrices.
    fn new_unchecked_psd(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self, InputError> {
        let n = c.len();
        if n == 0 {
            return Err(InputError::invalid("empty quadratic program"));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(InputError::DimensionMismatch {
                expected: n,
                found: q.nrows(),
            });
        }
        if (&q - q.transpose()).amax() > 1e-12 {
            return Err(InputError::invalid("quadratic term is not symmetric"));
        }
        if q.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(InputError::invalid("non-finite quadratic program data"));
        }
        Ok(Self { q, c })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn objective(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        0.5 * b.dot(&(&self.q * &b)) + self.c.dot(&b)
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(beta);
        (&self.q * &b + &self.c).iter().copied().collect()
    }

    /// Largest eigenvalue of `Q` by power iteration, inflated by 1%.
    pub fn lipschitz(&self) -> f64 {
        let n = self.dim();
        let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0) / (n as f64 + 1.0));
        v /= v.norm();
        let mut estimate = 0.0;
        for _ in 0..500 {
            let w = &self.q * &v;
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let next = v.dot(&w);
            v = w / norm;
            if (next - estimate).abs() <= 1e-10 * next.abs() {
                estimate = next;
                break;
            }
            estimate = next;
        }
        // Rayleigh quotient converges from below.
        estimate.max(0.0) * 1.01
    }
}

/// Builds the weight-step QP from cached Gram blocks.
///
/// With `lambda` the energy weight relative to a unit proximal weight, the
/// objective is
/// `(1 + lambda) b'Kxx b - (2 lambda / m) b'Kxy 1 - 2 b'Kx_old a_prev`,
/// i.e. `Q = 2 (1 + lambda) Kxx` and `c = -(2 lambda / m) Kxy 1 - 2 Kx_old a_prev`.
pub fn assemble_mmd_step_qp(
    gram: &GramBundle,
    alpha_prev: &[f64],
    lambda: f64,
    m: usize,
) -> Result<SimplexQp, InputError> {
    let n = gram.kxx.nrows();
    if gram.kxx.ncols() != n || gram.kx_old.nrows() != n || gram.kxy.nrows() != n {
        return Err(InputError::invalid("inconsistent gram bundle shapes"));
    }
    if alpha_prev.len() != gram.kx_old.ncols() {
        return Err(InputError::DimensionMismatch {
            expected: gram.kx_old.ncols(),
            found: alpha_prev.len(),
        });
    }
    if gram.kxy.ncols() != m || m == 0 {
        return Err(InputError::DimensionMismatch {
            expected: gram.kxy.ncols(),
            found: m,
        });
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(InputError::invalid(format!("trade-off must be nonnegative, got {lambda}")));
    }
    let q = &gram.kxx * (2.0 * (1.0 + lambda));
    let ones = DVector::from_element(m, 1.0);
    let a = DVector::from_column_slice(alpha_prev);
    let c = &gram.kxy * ones * (-2.0 * lambda / m as f64) - &gram.kx_old * a * 2.0;
    SimplexQp::new_unchecked_psd(q, c)
}

/// `simplex_project(beta - step * grad)`.
pub fn qp_pgd_step(qp: &SimplexQp, beta: &[f64], step: f64) -> Vec<f64> {
    let g = qp.gradient(beta);
    let moved: Vec<f64> = beta.iter().zip(&g).map(|(b, gi)| b - step * gi).collect();
    simplex_project(&moved)
}

fn residual(qp: &SimplexQp, beta: &[f64], step: f64) -> f64 {
    let p = qp_pgd_step(qp, beta, step);
    beta.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Accelerated projected gradient (FISTA) with step `1/L` and adaptive restart.
///
/// Stops once `|b - P(b - grad/L)| <= tol`.
pub fn solve_qp_exact(
    qp: &SimplexQp,
    beta0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, SolverError> {
    let n = qp.dim();
    if beta0.len() != n {
        return Err(InputError::DimensionMismatch {
            expected: n,
            found: beta0.len(),
        }
        .into());
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let lipschitz = qp.lipschitz().max(1e-12);
    let step = 1.0 / lipschitz;

    let mut x = simplex_project(beta0);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut f_x = qp.objective(&x);
    let mut res = residual(qp, &x, step);
    for _ in 0..max_iter {
        if res <= tol {
            return Ok(x);
        }
        let x_next = qp_pgd_step(qp, &y, step);
        let f_next = qp.objective(&x_next);
        if f_next > f_x {
            // Restart: plain step from the last accepted point, drop momentum.
            let x_plain = qp_pgd_step(qp, &x, step);
            f_x = qp.objective(&x_plain);
            y = x_plain.clone();
            x = x_plain;
            t = 1.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            y = x_next
                .iter()
                .zip(&x)
                .map(|(xn, xo)| xn + momentum * (xn - xo))
                .collect();
            t = t_next;
            x = x_next;
            f_x = f_next;
        }
        res = residual(qp, &x, step);
    }
    if res <= tol {
        return Ok(x);
    }
    Err(SolverError::NotConverged {
        iterations: max_iter,
        residual: res,
        iterate: x,
    })
}

/// Grid minimizer over `{b in simplex : b_i multiple of resolution}`.
///
/// Ties resolve to the first grid point in lexicographic order of
/// `(b_1, b_2, ...)` counts.
pub fn brute_force_simplex(qp: &SimplexQp, resolution: f64) -> Result<Vec<f64>, InputError> {
    let n = qp.dim();
    if n > BRUTE_FORCE_MAX_DIM {
        return Err(InputError::invalid(format!(
            "grid search limited to dimension {BRUTE_FORCE_MAX_DIM}, got {n}"
        )));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(InputError::invalid("resolution must lie in (0, 1]"));
    }
    let steps = (1.0 / resolution).round() as usize;
    let mut counts = vec![0usize; n];
    let mut point = vec![0.0; n];
    let mut best = (f64::INFINITY, vec![0.0; n]);
    enumerate(&mut counts, 0, steps, &mut |counts| {
        for (p, c) in point.iter_mut().zip(counts) {
            *p = *c as f64 / steps as f64;
        }
        let f = qp.objective(&point);
        if f < best.0 {
            best = (f, point.clone());
        }
    });
    Ok(best.1)
}

fn enumerate(counts: &mut [usize], idx: usize, remaining: usize, visit: &mut impl FnMut(&[usize])) {
    if idx + 1 == counts.len() {
        counts[idx] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        enumerate(counts, idx + 1, remaining - c, visit);
    }
}
