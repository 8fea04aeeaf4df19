//! Box-constrained Levenberg-Marquardt on a residual vector r(x).
//!
//! Damping is scaled by diag(JᵀJ) and updated from the gain ratio.
//! Trial points are projected onto the box; a residual callback returning
//! `None` (e.g. the trajectory blew up) rejects the step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::lstsq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative cost-decrease tolerance.
    pub ftol: f64,
    /// Absolute tolerance on the projected gradient, relative to 1 + ‖r‖.
    pub gtol: f64,
    pub initial_lambda: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            xtol: 1e-10,
            ftol: 1e-15,
            gtol: 1e-10,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    StepTolerance,
    CostTolerance,
    Gradient,
    /// Damping grew without finding a decrease.
    DampingLimit,
    MaxIterations,
    /// The Jacobian could not be evaluated at an accepted point.
    JacobianFailure,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Self::StepTolerance | Self::CostTolerance | Self::Gradient | Self::DampingLimit)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("residual undefined at the starting point")]
    BadStart,
    #[error("Jacobian undefined at the starting point")]
    BadStartJacobian,
    #[error("start has {got} entries, bounds have {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub x: Vec<f64>,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// ‖r‖².
    pub cost: f64,
    pub iterations: usize,
    pub step_norm: f64,
    pub termination: Termination,
    /// Cost after each accepted step, starting with the initial cost.
    pub history: Vec<f64>,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }
}

/// Box [lower, upper]; infinite entries are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Gradient components that can still move inside the box.
fn projected_gradient(x: &[f64], g: &DVector<f64>, bounds: &Bounds) -> f64 {
    let mut m = 0.0f64;
    for i in 0..x.len() {
        let at_lo = x[i] <= bounds.lower[i] && g[i] > 0.0;
        let at_hi = x[i] >= bounds.upper[i] && g[i] < 0.0;
        if !(at_lo || at_hi) {
            m = m.max(g[i].abs());
        }
    }
    m
}

/// Minimizes ‖r(x)‖² over the box.
pub fn levenberg_marquardt<R, J>(
    mut residual: R,
    mut jacobian: J,
    x0: &[f64],
    bounds: &Bounds,
    settings: &LmSettings,
) -> Result<LmReport, LmError>
where
    R: FnMut(&[f64]) -> Option<DVector<f64>>,
    J: FnMut(&[f64], &DVector<f64>) -> Option<DMatrix<f64>>,
{
    let n = x0.len();
    if bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(LmError::Dimension {
            got: n,
            expected: bounds.lower.len(),
        });
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut r = residual(&x).filter(|r| r.iter().all(|v| v.is_finite())).ok_or(LmError::BadStart)?;
    let mut jac = jacobian(&x, &r).filter(|j| j.iter().all(|v| v.is_finite())).ok_or(LmError::BadStartJacobian)?;
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    let mut lambda = settings.initial_lambda;
    let mut nu = 2.0;
    let mut scale = vec![0.0f64; n];
    let mut step_norm = 0.0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if projected_gradient(&x, &g, bounds) <= settings.gtol * (1.0 + cost.sqrt()) {
            termination = Termination::Gradient;
            break;
        }
        let amax = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        for i in 0..n {
            scale[i] = scale[i].max(a[(i, i)]).max(1e-12 * amax);
        }
        iterations += 1;
        // inner loop: raise damping until a step is accepted
        let mut accepted = false;
        while lambda < 1e32 {
            let mut damped = a.clone();
            let mut rhs = -&g;
            for i in 0..n {
                damped[(i, i)] += lambda * scale[i];
            }
            // freeze coordinates held at a bound by the gradient
            for i in 0..n {
                let held = (x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0);
                if held {
                    damped.row_mut(i).fill(0.0);
                    damped.column_mut(i).fill(0.0);
                    damped[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                }
            }
            let delta = match damped.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => lstsq(&damped, &rhs).0,
            };
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + delta[i]).collect();
            bounds.project(&mut trial);
            let step = DVector::from_iterator(n, (0..n).map(|i| trial[i] - x[i]));
            step_norm = step.norm();
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= settings.xtol * (xnorm + settings.xtol) {
                termination = Termination::StepTolerance;
                return Ok(finish(x, r, jac, cost, iterations, step_norm, termination, history));
            }
            let predicted = -(2.0 * step.dot(&g) + step.dot(&(&a * &step)));
            let new_r = residual(&trial).filter(|r| r.iter().all(|v| v.is_finite()));
            let new_r = match new_r {
                Some(v) => v,
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let new_cost = new_r.norm_squared();
            let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { -1.0 };
            if rho > 0.0 && new_cost <= cost {
                let decrease = cost - new_cost;
                x = trial;
                r = new_r;
                cost = new_cost;
                history.push(cost);
                jac = match jacobian(&x, &r).filter(|j| j.iter().all(|v| v.is_finite())) {
                    Some(j) => j,
                    None => {
                        return Ok(finish(x, r, jac, cost, iterations, step_norm, Termination::JacobianFailure, history));
                    }
                };
                lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                lambda = lambda.max(1e-300);
                nu = 2.0;
                accepted = true;
                if decrease <= settings.ftol * history[history.len() - 2] {
                    return Ok(finish(x, r, jac, cost, iterations, step_norm, Termination::CostTolerance, history));
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
        if !accepted {
            termination = Termination::DampingLimit;
            break;
        }
    }
    Ok(finish(x, r, jac, cost, iterations, step_norm, termination, history))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    x: Vec<f64>,
    residual: DVector<f64>,
    jacobian: DMatrix<f64>,
    cost: f64,
    iterations: usize,
    step_norm: f64,
    termination: Termination,
    history: Vec<f64>,
) -> LmReport {
    LmReport {
        x,
        residual,
        jacobian,
        cost,
        iterations,
        step_norm,
        termination,
        history,
    }
}

/// Central-difference Jacobian of `residual`; steps shrink to stay inside
/// the box. Returns `None` if any evaluation fails.
pub fn fd_jacobian<R>(residual: &mut R, x: &[f64], bounds: &Bounds) -> Option<DMatrix<f64>>
where
    R: FnMut(&[f64]) -> Option<DVector<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.to_vec();
    let mut m = 0;
    for i in 0..n {
        let h = 6e-6 * x[i].abs().max(1e-3);
        let hi = (x[i] + h).min(bounds.upper[i]);
        let lo = (x[i] - h).max(bounds.lower[i]);
        xp[i] = hi;
        let rp = residual(&xp)?;
        xp[i] = lo;
        let rm = residual(&xp)?;
        xp[i] = x[i];
        m = rp.len();
        cols.push((rp - rm) / (hi - lo));
    }
    Some(DMatrix::from_fn(m, n, |r, c| cols[c][r]))
}

/// Start points for a multistart search: the (projected) center first,
/// then points drawn componentwise uniformly in center·(1 ± dispersion).
/// Point k depends only on (seed, k).
pub fn multistart_points(center: &[f64], bounds: &Bounds, count: usize, dispersion: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut x = center.to_vec();
        if k > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for v in x.iter_mut() {
                let u: f64 = rng.random_range(-1.0..=1.0);
                *v *= 1.0 + dispersion * u;
            }
        }
        bounds.project(&mut x);
        out.push(x);
    }
    out
}
