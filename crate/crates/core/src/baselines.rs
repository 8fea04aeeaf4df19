//! Comparison estimators: two-step gradient matching on the smoothed curve
//! and multistart nonlinear least squares through the integrator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::Curve;
use crate::lm::{fd_jacobian, levenberg_marquardt, multistart_points, Bounds, LmError, LmSettings, Termination};
use crate::linalg::{inverse_spd, symmetrize};
use crate::models::{InitialData, ModelSpec};
use crate::odesim::{param_jacobian, SolverSettings};
use crate::quadrature::{QuadratureError, QuadratureRule, QuadratureSettings};
use crate::smoother::{Observations, SplineFit};
use crate::stats::two_sided_z;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("derivative proxy unusable: {0}")]
    DerivativeProxyUnusable(String),
    #[error("weight function: {0}")]
    BadWeight(&'static str),
    #[error(transparent)]
    Optimizer(#[from] LmError),
    #[error("optimizer stopped after {0} iterations without converging")]
    NotConverged(usize),
    #[error("no start point requested")]
    NoStarts,
    #[error("every start failed")]
    AllStartsFailed(Vec<StartLog>),
    #[error("initial values have {got} entries, model dimension is {dim}")]
    InitialDimension { got: usize, dim: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Piecewise-affine weight on [a, b], zero at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    points: Vec<(f64, f64)>,
}

impl WeightFunction {
    /// Linear interpolant through `points` (sorted, non-negative, zero at
    /// the first and last abscissa).
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, BaselineError> {
        if points.len() < 2 {
            return Err(BaselineError::BadWeight("need at least two points"));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(BaselineError::BadWeight("abscissae must increase"));
        }
        if points.iter().any(|p| !(p.1 >= 0.0) || !p.0.is_finite() || !p.1.is_finite()) {
            return Err(BaselineError::BadWeight("weights must be finite and non-negative"));
        }
        if points[0].1 != 0.0 || points[points.len() - 1].1 != 0.0 {
            return Err(BaselineError::BadWeight("weight must vanish at both ends"));
        }
        Ok(Self { points })
    }

    /// Ramps over the outer `fraction` of [a, b] on each side, plateau 1.
    /// A fraction of 0.5 gives the hat function.
    pub fn ramps(domain: (f64, f64), fraction: f64) -> Result<Self, BaselineError> {
        if !(fraction > 0.0 && fraction <= 0.5) {
            return Err(BaselineError::BadWeight("ramp fraction must lie in (0, 0.5]"));
        }
        let (a, b) = domain;
        let r = fraction * (b - a);
        if fraction == 0.5 {
            return Self::new(vec![(a, 0.0), (a + r, 1.0), (b, 0.0)]);
        }
        Self::new(vec![(a, 0.0), (a + r, 1.0), (b - r, 1.0), (b, 0.0)])
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (a, b) = self.domain();
        if t <= a || t >= b {
            return 0.0;
        }
        let k = self.points.partition_point(|p| p.0 <= t);
        let (t0, w0) = self.points[k - 1];
        let (t1, w1) = self.points[k];
        w0 + (w1 - w0) * (t - t0) / (t1 - t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    TwoStep,
    NonlinearLeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartLog {
    pub start: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    /// +∞ for failed starts.
    pub objective: f64,
    pub iterations: usize,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub method: BaselineMethod,
    pub theta: Vec<f64>,
    /// Estimated initial values when they were optimized too.
    pub initial: Option<Vec<f64>>,
    pub objective: f64,
    pub covariance: Option<DMatrix<f64>>,
    pub intervals: Option<Vec<(f64, f64)>>,
    pub iterations: usize,
    pub termination: Termination,
    pub starts: Vec<StartLog>,
}

fn model_bounds(model: &ModelSpec) -> Bounds {
    Bounds {
        lower: model.lower.clone(),
        upper: model.upper.clone(),
    }
}

/// Two-step estimator: minimizes ∫ |ĝ′ − f(t, ĝ, θ)|² w dt.
pub fn ts_estimate(
    fit: &SplineFit,
    model: &ModelSpec,
    weight: &WeightFunction,
    theta_init: &[f64],
    quadrature: QuadratureSettings,
    lm: &LmSettings,
) -> Result<BaselineEstimate, BaselineError> {
    if fit.degree() < 2 {
        return Err(BaselineError::DerivativeProxyUnusable("spline degree below 2".into()));
    }
    ts_estimate_curve(fit, &fit.knots().breakpoints(), model, weight, theta_init, quadrature, lm)
}

/// Two-step estimator on any differentiable curve; `breaks` are extra
/// quadrature break points (the curve's knots).
pub fn ts_estimate_curve(
    curve: &dyn Curve,
    breaks: &[f64],
    model: &ModelSpec,
    weight: &WeightFunction,
    theta_init: &[f64],
    quadrature: QuadratureSettings,
    lm: &LmSettings,
) -> Result<BaselineEstimate, BaselineError> {
    if model.field.moving_discontinuities() {
        return Err(BaselineError::DerivativeProxyUnusable(
            "the field has a discontinuity at an unknown time, which a smoothed derivative cannot locate".into(),
        ));
    }
    let field = model.field.as_ref();
    let d = field.dim();
    let (fa, fb) = curve.domain();
    let (wa, wb) = weight.domain();
    let tau = model.delay().unwrap_or(0.0);
    let a = wa.max(fa + tau);
    let b = wb.min(fb);
    if !(b > a) {
        return Err(BaselineError::BadWeight("weight support misses the fitted interval"));
    }
    let mut all = breaks.to_vec();
    all.extend(weight.breakpoints());
    if tau > 0.0 {
        all.extend(breaks.iter().map(|k| k + tau));
    }
    let mut breaks = all;
    breaks.extend(field.discontinuities(theta_init));
    let rule = QuadratureRule::from_settings(a, b, quadrature, &breaks)?;
    let nodes = rule.nodes();
    let nq = nodes.len();
    let mut sw = Vec::with_capacity(nq);
    let mut g = vec![0.0; nq * d];
    let mut lag = vec![0.0; if tau > 0.0 { nq * d } else { 0 }];
    let mut gd = vec![0.0; nq * d];
    for (q, &t) in nodes.iter().enumerate() {
        sw.push((rule.weights()[q] * weight.eval(t)).sqrt());
        curve.value_into(t, &mut g[q * d..(q + 1) * d]);
        curve.derivative_into(t, &mut gd[q * d..(q + 1) * d]);
        if tau > 0.0 {
            curve.value_into(t - tau, &mut lag[q * d..(q + 1) * d]);
        }
    }
    let state = |q: usize| -> (&[f64], &[f64]) {
        let l: &[f64] = if tau > 0.0 { &lag[q * d..(q + 1) * d] } else { &[] };
        (&g[q * d..(q + 1) * d], l)
    };
    let residual = |th: &[f64]| -> Option<DVector<f64>> {
        let mut r = DVector::zeros(nq * d);
        let mut fv = vec![0.0; d];
        for q in 0..nq {
            let (x, l) = state(q);
            field.eval(nodes[q], x, l, th, &mut fv);
            for i in 0..d {
                r[q * d + i] = sw[q] * (gd[q * d + i] - fv[i]);
            }
        }
        Some(r)
    };
    let jacobian = |th: &[f64], _: &DVector<f64>| -> Option<DMatrix<f64>> {
        let p = th.len();
        let mut j = DMatrix::zeros(nq * d, p);
        for q in 0..nq {
            let (x, l) = state(q);
            let ft = param_jacobian(field, nodes[q], x, l, th);
            for i in 0..d {
                for c in 0..p {
                    j[(q * d + i, c)] = -sw[q] * ft[(i, c)];
                }
            }
        }
        Some(j)
    };
    let rep = levenberg_marquardt(residual, jacobian, theta_init, &model_bounds(model), lm)?;
    if !rep.converged() {
        return Err(BaselineError::NotConverged(rep.iterations));
    }
    Ok(BaselineEstimate {
        method: BaselineMethod::TwoStep,
        starts: vec![StartLog {
            start: theta_init.to_vec(),
            theta: Some(rep.x.clone()),
            objective: rep.cost,
            iterations: rep.iterations,
            status: format!("{:?}", rep.termination),
        }],
        theta: rep.x,
        initial: None,
        objective: rep.cost,
        covariance: None,
        intervals: None,
        iterations: rep.iterations,
        termination: rep.termination,
    })
}

/// Initial data handling for least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NlsInitial {
    Known(Vec<f64>),
    /// Optimize the initial state (or constant history) too, from this guess.
    Estimate(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsSettings {
    pub starts: usize,
    pub dispersion: f64,
    pub seed: u64,
    pub level: f64,
    pub lm: LmSettings,
    pub solver: SolverSettings,
}

impl Default for NlsSettings {
    fn default() -> Self {
        Self {
            starts: 20,
            dispersion: 0.5,
            seed: 0,
            level: 0.95,
            lm: LmSettings::default(),
            solver: SolverSettings::default(),
        }
    }
}

/// Multistart least squares on yᵢ − φ(tᵢ, φ₀, θ). Starts are drawn around
/// `center`; blow-ups reject the step.
pub fn nls_estimate(
    obs: &Observations,
    model: &ModelSpec,
    initial: &NlsInitial,
    center: &[f64],
    settings: &NlsSettings,
) -> Result<BaselineEstimate, BaselineError> {
    if settings.starts == 0 {
        return Err(BaselineError::NoStarts);
    }
    let d = model.dim();
    let p = model.n_params();
    let (guess, free) = match initial {
        NlsInitial::Known(v) => (v.clone(), false),
        NlsInitial::Estimate(v) => (v.clone(), true),
    };
    if guess.len() != d {
        return Err(BaselineError::InitialDimension { got: guess.len(), dim: d });
    }
    let make_init = |v: Vec<f64>| match model.initial {
        InitialData::State(_) => InitialData::State(v),
        InitialData::ConstantHistory(_) => InitialData::ConstantHistory(v),
    };
    let times = obs.times();
    let y = obs.values();
    let n = obs.len();
    let residual = |x: &[f64]| -> Option<DVector<f64>> {
        let (th, x0) = if free { (&x[..p], x[p..].to_vec()) } else { (x, guess.clone()) };
        let tr = model.simulate(th, &make_init(x0), times, &settings.solver).ok()?;
        if tr.blew_up() || tr.len() != n {
            return None;
        }
        let mut r = DVector::zeros(n * d);
        for i in 0..n {
            for j in 0..d {
                r[i * d + j] = y[(i, j)] - tr.states[i][j];
            }
        }
        Some(r)
    };
    let mut bounds = model_bounds(model);
    if free {
        bounds.lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, d));
        bounds.upper.extend(std::iter::repeat_n(f64::INFINITY, d));
    }
    let theta_bounds = model_bounds(model);
    let starts: Vec<Vec<f64>> = multistart_points(center, &theta_bounds, settings.starts, settings.dispersion, settings.seed)
        .into_iter()
        .map(|mut s| {
            if free {
                s.extend_from_slice(&guess);
            }
            s
        })
        .collect();
    type Run = (StartLog, Option<(Vec<f64>, DMatrix<f64>, f64, usize, Termination)>);
    let runs: Vec<Run> = starts
        .par_iter()
        .map(|s| {
            let mut res = residual;
            let bjac = bounds.clone();
            let out = levenberg_marquardt(residual, |x, _| fd_jacobian(&mut res, x, &bjac), s, &bounds, &settings.lm);
            match out {
                Ok(rep) if rep.converged() => (
                    StartLog {
                        start: s.clone(),
                        theta: Some(rep.x.clone()),
                        objective: rep.cost,
                        iterations: rep.iterations,
                        status: format!("{:?}", rep.termination),
                    },
                    Some((rep.x, rep.jacobian, rep.cost, rep.iterations, rep.termination)),
                ),
                Ok(rep) => (
                    StartLog {
                        start: s.clone(),
                        theta: Some(rep.x),
                        objective: f64::INFINITY,
                        iterations: rep.iterations,
                        status: format!("{:?}", rep.termination),
                    },
                    None,
                ),
                Err(e) => (
                    StartLog {
                        start: s.clone(),
                        theta: None,
                        objective: f64::INFINITY,
                        iterations: 0,
                        status: e.to_string(),
                    },
                    None,
                ),
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, (_, r)) in runs.iter().enumerate() {
        if let Some((_, _, cost, _, _)) = r {
            if best.is_none_or(|b| *cost < runs[b].1.as_ref().unwrap().2) {
                best = Some(i);
            }
        }
    }
    let logs: Vec<StartLog> = runs.iter().map(|r| r.0.clone()).collect();
    let Some(b) = best else {
        return Err(BaselineError::AllStartsFailed(logs));
    };
    let (x, jac, cost, iterations, termination) = runs[b].1.clone().unwrap();
    let q = x.len();
    let dof = (n * d).saturating_sub(q).max(1) as f64;
    let sigma2 = cost / dof;
    let info = symmetrize(&(jac.transpose() * &jac));
    let cov_full = sigma2 * inverse_spd(&info);
    let cov = cov_full.view((0, 0), (p, p)).into_owned();
    let (covariance, intervals) = if cov.iter().all(|v| v.is_finite()) {
        let z = two_sided_z(settings.level);
        let iv = (0..p)
            .map(|i| {
                let h = z * cov[(i, i)].max(0.0).sqrt();
                (x[i] - h, x[i] + h)
            })
            .collect();
        (Some(cov), Some(iv))
    } else {
        (None, None)
    };
    Ok(BaselineEstimate {
        method: BaselineMethod::NonlinearLeastSquares,
        theta: x[..p].to_vec(),
        initial: if free { Some(x[p..].to_vec()) } else { None },
        objective: cost,
        covariance,
        intervals,
        iterations,
        termination,
        starts: logs,
    })
}
