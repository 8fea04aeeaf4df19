//! Fixed-step RK4 for ODE and constant-delay DDE initial value problems.
//!
//! Steps are aligned with the output grid and split at declared
//! discontinuity times. Every run also yields a dense (piecewise cubic
//! Hermite) solution usable as a [`Curve`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::curve::Curve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("time grid must be non-empty, finite and strictly increasing")]
    BadGrid,
    #[error("blow-up bound must be positive")]
    BadBound,
    #[error("initial state has {got} entries, field dimension is {dim}")]
    DimensionMismatch { got: usize, dim: usize },
    #[error("vector field is not finite at t = {0} while the state is bounded")]
    NonFinite(f64),
    #[error("delay must be positive, got {0}")]
    BadDelay(f64),
    #[error("history does not cover [{0}, {1}]")]
    HistoryGap(f64, f64),
    #[error("field has no delay")]
    NoDelay,
}

/// Parametric vector field f(t, x, x(t−τ), θ). ODE fields ignore `lag`,
/// which is then an empty slice.
///
/// Jacobian hooks write row-major blocks and return `false` when no analytic
/// form is provided (callers fall back to finite differences).
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], lag: &[f64], theta: &[f64], out: &mut [f64]);

    fn delay(&self) -> Option<f64> {
        None
    }

    /// ∂f/∂x, d × d.
    fn jac_state(&self, _t: f64, _x: &[f64], _lag: &[f64], _theta: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// ∂f/∂x(t−τ), d × d.
    fn jac_lagged(&self, _t: f64, _x: &[f64], _lag: &[f64], _theta: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// ∂f/∂θ, d × p.
    fn jac_params(&self, _t: f64, _x: &[f64], _lag: &[f64], _theta: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Times where f jumps in t (may depend on θ).
    fn discontinuities(&self, _theta: &[f64]) -> Vec<f64> {
        Vec::new()
    }

    /// Whether `discontinuities` varies with θ.
    fn moving_discontinuities(&self) -> bool {
        false
    }

    /// Whether f does not depend on t.
    fn autonomous(&self) -> bool {
        false
    }
}

pub type SharedField = Arc<dyn VectorField>;

fn fd_step(v: f64) -> f64 {
    6e-6 * v.abs().max(1.0)
}

/// ∂f/∂x (d × d), analytic when available.
pub fn state_jacobian(f: &dyn VectorField, t: f64, x: &[f64], lag: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let d = f.dim();
    let mut buf = vec![0.0; d * d];
    if f.jac_state(t, x, lag, theta, &mut buf) {
        return DMatrix::from_row_slice(d, d, &buf);
    }
    let mut m = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..d {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        f.eval(t, &xp, lag, theta, &mut fp);
        xp[j] = x[j] - h;
        f.eval(t, &xp, lag, theta, &mut fm);
        xp[j] = x[j];
        for i in 0..d {
            m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    m
}

/// ∂f/∂x(t−τ) (d × d); zero for ODE fields.
pub fn lagged_jacobian(f: &dyn VectorField, t: f64, x: &[f64], lag: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let d = f.dim();
    if lag.is_empty() {
        return DMatrix::zeros(d, d);
    }
    let mut buf = vec![0.0; d * d];
    if f.jac_lagged(t, x, lag, theta, &mut buf) {
        return DMatrix::from_row_slice(d, d, &buf);
    }
    let mut m = DMatrix::zeros(d, d);
    let mut lp = lag.to_vec();
    let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..d {
        let h = fd_step(lag[j]);
        lp[j] = lag[j] + h;
        f.eval(t, x, &lp, theta, &mut fp);
        lp[j] = lag[j] - h;
        f.eval(t, x, &lp, theta, &mut fm);
        lp[j] = lag[j];
        for i in 0..d {
            m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    m
}

/// ∂f/∂θ (d × p), analytic when available.
pub fn param_jacobian(f: &dyn VectorField, t: f64, x: &[f64], lag: &[f64], theta: &[f64]) -> DMatrix<f64> {
    let (d, p) = (f.dim(), f.n_params());
    let mut buf = vec![0.0; d * p];
    if f.jac_params(t, x, lag, theta, &mut buf) {
        return DMatrix::from_row_slice(d, p, &buf);
    }
    let mut m = DMatrix::zeros(d, p);
    let mut tp = theta.to_vec();
    let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..p {
        let h = fd_step(theta[j]);
        tp[j] = theta[j] + h;
        f.eval(t, x, lag, &tp, &mut fp);
        tp[j] = theta[j] - h;
        f.eval(t, x, lag, &tp, &mut fm);
        tp[j] = theta[j];
        for i in 0..d {
            m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    m
}

/// Integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// State-norm threshold that flags a blow-up.
    pub blow_up_bound: f64,
    /// Upper bound on the step; by default a tenth of the mean grid spacing.
    pub max_step: Option<f64>,
    /// Minimum number of sub-steps between consecutive grid points.
    pub substeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            blow_up_bound: 1e6,
            max_step: None,
            substeps: 10,
        }
    }
}

/// States on the output grid, truncated at a blow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub blow_up: Option<f64>,
}

impl Trajectory {
    pub fn blew_up(&self) -> bool {
        self.blow_up.is_some()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// n × d matrix of the states.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.states[i][j])
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }
}

/// Piecewise cubic Hermite interpolant on the integration mesh, with
/// one-sided derivatives at each node.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    dim: usize,
    nodes: Vec<f64>,
    states: Vec<f64>,
    right_deriv: Vec<f64>,
    left_deriv: Vec<f64>,
    blow_up: Option<f64>,
    // region before the first node delegated to a history curve
    history: Option<HistoryFunction>,
}

impl DenseSolution {
    pub fn blow_up(&self) -> Option<f64> {
        self.blow_up
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.nodes.len();
        if n < 2 {
            return 0;
        }
        match self.nodes.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    fn hermite(&self, t: f64, deriv: bool, out: &mut [f64]) {
        if let Some(h) = &self.history {
            if t < self.nodes[0] {
                if deriv {
                    h.curve.derivative_into(t, out);
                } else {
                    h.curve.value_into(t, out);
                }
                return;
            }
        }
        let n = self.nodes.len();
        if n == 1 {
            out.copy_from_slice(self.state(0));
            if deriv {
                out.copy_from_slice(&self.right_deriv[..self.dim]);
            }
            return;
        }
        let t = t.clamp(self.nodes[0], self.nodes[n - 1]);
        let i = self.locate(t);
        let (t0, t1) = (self.nodes[i], self.nodes[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let d = self.dim;
        let x0 = self.state(i);
        let x1 = self.state(i + 1);
        let m0 = &self.right_deriv[i * d..(i + 1) * d];
        let m1 = &self.left_deriv[(i + 1) * d..(i + 2) * d];
        if deriv {
            let h00 = 6.0 * s * s - 6.0 * s;
            let h10 = 3.0 * s * s - 4.0 * s + 1.0;
            let h01 = -h00;
            let h11 = 3.0 * s * s - 2.0 * s;
            for k in 0..d {
                out[k] = (h00 * x0[k] + h01 * x1[k]) / h + h10 * m0[k] + h11 * m1[k];
            }
        } else {
            let s2 = s * s;
            let s3 = s2 * s;
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            for k in 0..d {
                out[k] = h00 * x0[k] + h * h10 * m0[k] + h01 * x1[k] + h * h11 * m1[k];
            }
        }
    }

    /// Samples at `grid` (which must lie within the solved range).
    pub fn sample(&self, grid: &[f64]) -> Trajectory {
        let mut times = Vec::new();
        let mut states = Vec::new();
        let end = self.end();
        for &t in grid {
            if self.blow_up.is_some() && t > end {
                break;
            }
            let mut v = vec![0.0; self.dim];
            self.value_into(t, &mut v);
            times.push(t);
            states.push(v);
        }
        Trajectory {
            times,
            states,
            blow_up: self.blow_up,
        }
    }
}

impl Curve for DenseSolution {
    fn dim(&self) -> usize {
        self.dim
    }

    fn domain(&self) -> (f64, f64) {
        let start = match &self.history {
            Some(h) => h.start(),
            None => self.nodes[0],
        };
        (start, self.end())
    }

    fn value_into(&self, t: f64, out: &mut [f64]) {
        self.hermite(t, false, out)
    }

    fn derivative_into(&self, t: f64, out: &mut [f64]) {
        self.hermite(t, true, out)
    }
}

/// Initial function on [t₀ − τ, t₀] for a delay equation.
#[derive(Clone)]
pub struct HistoryFunction {
    curve: Arc<dyn Curve>,
    t0: f64,
    tau: f64,
}

impl std::fmt::Debug for HistoryFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HistoryFunction")
            .field("t0", &self.t0)
            .field("tau", &self.tau)
            .finish()
    }
}

impl HistoryFunction {
    pub fn new(curve: Arc<dyn Curve>, t0: f64, tau: f64) -> Result<Self, OdeError> {
        if !(tau > 0.0) {
            return Err(OdeError::BadDelay(tau));
        }
        if !curve.covers(t0 - tau, t0) {
            return Err(OdeError::HistoryGap(t0 - tau, t0));
        }
        Ok(Self { curve, t0, tau })
    }

    pub fn constant(values: Vec<f64>, t0: f64, tau: f64) -> Result<Self, OdeError> {
        let d = values.len();
        let curve = crate::curve::FnCurve::new(
            d,
            (t0 - tau, t0),
            move |_, o| o.copy_from_slice(&values),
            move |_, o| o.iter_mut().for_each(|x| *x = 0.0),
        );
        Self::new(Arc::new(curve), t0, tau)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn start(&self) -> f64 {
        self.t0 - self.tau
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        self.curve.value(t)
    }
}

fn check_grid(grid: &[f64]) -> Result<(), OdeError> {
    if grid.is_empty() || grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OdeError::BadGrid);
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

enum StepOutcome {
    Ok,
    BlowUp,
}

struct Stepper<'a> {
    field: &'a dyn VectorField,
    theta: &'a [f64],
    bound: f64,
    d: usize,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    lag: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a dyn VectorField, theta: &'a [f64], bound: f64) -> Self {
        let d = field.dim();
        Self {
            field,
            theta,
            bound,
            d,
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            tmp: vec![0.0; d],
            lag: Vec::new(),
        }
    }

    fn eval_checked(&mut self, t: f64, x: &[f64], lag: &[f64], slot: usize) -> Result<StepOutcome, OdeError> {
        let mut out = std::mem::take(&mut self.k[slot]);
        self.field.eval(t, x, lag, self.theta, &mut out);
        let finite = out.iter().all(|v| v.is_finite());
        self.k[slot] = out;
        if !finite {
            if norm(x) > self.bound || x.iter().any(|v| !v.is_finite()) {
                return Ok(StepOutcome::BlowUp);
            }
            return Err(OdeError::NonFinite(t));
        }
        Ok(StepOutcome::Ok)
    }

    /// One RK4 step from (t, x) of size h inside a smooth segment
    /// [lo, hi]; stage times are nudged into the open segment.
    fn step<L>(&mut self, t: f64, h: f64, lo: f64, hi: f64, x: &mut [f64], lag_at: &mut L) -> Result<StepOutcome, OdeError>
    where
        L: FnMut(f64, &mut Vec<f64>),
    {
        let eta = |s: f64| 1e-12 * s.abs().max(1.0);
        let clamp = |s: f64| s.max(lo + eta(lo)).min(hi - eta(hi));
        let stages = [0.0, 0.5, 0.5, 1.0];
        let d = self.d;
        for s in 0..4 {
            let ts = clamp(t + stages[s] * h);
            if s == 0 {
                self.tmp.copy_from_slice(x);
            } else {
                for i in 0..d {
                    self.tmp[i] = x[i] + stages[s] * h * self.k[s - 1][i];
                }
            }
            let mut lag = std::mem::take(&mut self.lag);
            lag_at(ts, &mut lag);
            let tmp = self.tmp.clone();
            let r = self.eval_checked(ts, &tmp, &lag, s);
            self.lag = lag;
            if let StepOutcome::BlowUp = r? {
                return Ok(StepOutcome::BlowUp);
            }
        }
        for i in 0..d {
            x[i] += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
        if x.iter().any(|v| !v.is_finite()) || norm(x) > self.bound {
            return Ok(StepOutcome::BlowUp);
        }
        Ok(StepOutcome::Ok)
    }
}

/// Dense RK4 solution from `(grid[0], x0)` covering the whole grid.
pub fn rk4_dense(
    field: &dyn VectorField,
    theta: &[f64],
    x0: &[f64],
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<DenseSolution, OdeError> {
    check_grid(grid)?;
    if !(settings.blow_up_bound > 0.0) {
        return Err(OdeError::BadBound);
    }
    let d = field.dim();
    if x0.len() != d {
        return Err(OdeError::DimensionMismatch { got: x0.len(), dim: d });
    }
    let t_start = grid[0];
    let t_end = *grid.last().unwrap();
    let mean_spacing = if grid.len() > 1 {
        (t_end - t_start) / (grid.len() - 1) as f64
    } else {
        1.0
    };
    let substeps = settings.substeps.max(1) as f64;
    let hmax = settings.max_step.unwrap_or(f64::INFINITY).min(mean_spacing / substeps);
    let mut disc: Vec<f64> = field
        .discontinuities(theta)
        .into_iter()
        .filter(|&s| s > t_start && s < t_end)
        .collect();
    disc.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // segment edges: grid points and discontinuities
    let mut edges = grid.to_vec();
    edges.extend(&disc);
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * b.abs().max(1.0));

    let mut stepper = Stepper::new(field, theta, settings.blow_up_bound);
    let mut x = x0.to_vec();
    let mut nodes = vec![t_start];
    let mut states = x.clone();
    let mut right = Vec::with_capacity(d * 16);
    let mut left = vec![0.0; d];
    let mut no_lag = |_: f64, l: &mut Vec<f64>| l.clear();
    let mut blow_up = None;
    if norm(&x) > settings.blow_up_bound {
        blow_up = Some(t_start);
    }
    let mut deriv = vec![0.0; d];
    'outer: for w in edges.windows(2) {
        if blow_up.is_some() {
            break;
        }
        let (lo, hi) = (w[0], w[1]);
        let span = hi - lo;
        let m = ((span / hmax).ceil() as usize).max(settings.substeps.max(1)).max(1);
        let h = span / m as f64;
        // right derivative at the segment start
        let eta_lo = 1e-12 * lo.abs().max(1.0);
        for i in 0..m {
            let t = if i == 0 { lo } else { lo + i as f64 * h };
            // derivative at the start of the step (right limit)
            field.eval((t).max(lo + eta_lo), &x, &[], theta, &mut deriv);
            right.extend_from_slice(&deriv);
            match stepper.step(t, h, lo, hi, &mut x, &mut no_lag)? {
                StepOutcome::Ok => {}
                StepOutcome::BlowUp => {
                    blow_up = Some(t + h);
                    right.truncate(right.len() - d);
                    break 'outer;
                }
            }
            let t_next = if i + 1 == m { hi } else { lo + (i + 1) as f64 * h };
            let eta_hi = 1e-12 * hi.abs().max(1.0);
            field.eval(t_next.min(hi - eta_hi), &x, &[], theta, &mut deriv);
            nodes.push(t_next);
            states.extend_from_slice(&x);
            left.extend_from_slice(&deriv);
        }
    }
    // terminal right derivative mirrors the left one
    let tail: Vec<f64> = left[left.len() - d..].to_vec();
    right.extend_from_slice(&tail);
    // first node has no left limit; use the right derivative
    let head: Vec<f64> = right[..d].to_vec();
    left[..d].copy_from_slice(&head);
    Ok(DenseSolution {
        dim: d,
        nodes,
        states,
        right_deriv: right,
        left_deriv: left,
        blow_up,
        history: None,
    })
}

/// Classical RK4 from `(grid[0], x0)`; states reported at every grid point.
pub fn rk4_solve(
    field: &dyn VectorField,
    theta: &[f64],
    x0: &[f64],
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<Trajectory, OdeError> {
    let dense = rk4_dense(field, theta, x0, grid, settings)?;
    Ok(dense.sample(grid))
}

/// Method of steps for a constant-delay equation, from the history's t₀
/// to the end of `grid`. The step divides τ so that lagged stage times fall
/// on mesh nodes or midpoints of completed steps.
pub fn dde_dense(
    field: &dyn VectorField,
    theta: &[f64],
    history: &HistoryFunction,
    t_end: f64,
    step: f64,
    settings: &SolverSettings,
) -> Result<DenseSolution, OdeError> {
    let tau = field.delay().ok_or(OdeError::NoDelay)?;
    if !(tau > 0.0) {
        return Err(OdeError::BadDelay(tau));
    }
    if !((tau - history.tau()).abs() <= 1e-12 * tau.max(1.0)) && history.tau() < tau {
        return Err(OdeError::HistoryGap(history.t0() - tau, history.t0()));
    }
    if !(settings.blow_up_bound > 0.0) {
        return Err(OdeError::BadBound);
    }
    let t0 = history.t0();
    if !(t_end > t0) {
        return Err(OdeError::BadGrid);
    }
    let d = field.dim();
    let per_delay = ((tau / step).ceil() as usize).max(1);
    let h = tau / per_delay as f64;
    let n_steps = ((t_end - t0) / h).ceil() as usize;
    let mut x = history.value(t0);
    if x.len() != d {
        return Err(OdeError::DimensionMismatch { got: x.len(), dim: d });
    }
    let mut sol = DenseSolution {
        dim: d,
        nodes: vec![t0],
        states: x.clone(),
        right_deriv: Vec::new(),
        left_deriv: vec![0.0; d],
        blow_up: None,
        history: Some(history.clone()),
    };
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut lag = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let bound = settings.blow_up_bound;
    let lag_at = |sol: &DenseSolution, s: f64, out: &mut [f64]| {
        if s <= t0 {
            out.copy_from_slice(&history.value(s));
        } else {
            sol.hermite(s, false, out);
        }
    };
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        let t_next = if i + 1 == n_steps { t_end.max(t0 + (i + 1) as f64 * h) } else { t0 + (i + 1) as f64 * h };
        let hh = t_next - t;
        let stages = [0.0, 0.5, 0.5, 1.0];
        let mut blew = false;
        for s in 0..4 {
            let ts = t + stages[s] * hh;
            if s == 0 {
                tmp.copy_from_slice(&x);
            } else {
                for j in 0..d {
                    tmp[j] = x[j] + stages[s] * hh * k[s - 1][j];
                }
            }
            lag_at(&sol, ts - tau, &mut lag);
            let mut out = std::mem::take(&mut k[s]);
            field.eval(ts, &tmp, &lag, theta, &mut out);
            let finite = out.iter().all(|v| v.is_finite());
            k[s] = out;
            if !finite {
                if norm(&tmp) > bound || tmp.iter().any(|v| !v.is_finite()) {
                    blew = true;
                    break;
                }
                return Err(OdeError::NonFinite(ts));
            }
        }
        if !blew {
            for j in 0..d {
                x[j] += hh / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
            }
            blew = x.iter().any(|v| !v.is_finite()) || norm(&x) > bound;
        }
        if blew {
            sol.blow_up = Some(t_next);
            break;
        }
        sol.right_deriv.extend_from_slice(&k[0]);
        lag_at(&sol, t_next - tau, &mut lag);
        let mut fd = vec![0.0; d];
        field.eval(t_next, &x, &lag, theta, &mut fd);
        sol.nodes.push(t_next);
        sol.states.extend_from_slice(&x);
        sol.left_deriv.extend_from_slice(&fd);
    }
    let dl = sol.left_deriv.len();
    let tail: Vec<f64> = sol.left_deriv[dl - d..].to_vec();
    sol.right_deriv.extend_from_slice(&tail);
    let head: Vec<f64> = sol.right_deriv[..d].to_vec();
    sol.left_deriv[..d].copy_from_slice(&head);
    Ok(sol)
}

/// DDE trajectory on `grid` (grid points must be ≥ t₀).
pub fn dde_solve(
    field: &dyn VectorField,
    theta: &[f64],
    history: &HistoryFunction,
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<Trajectory, OdeError> {
    check_grid(grid)?;
    let t0 = history.t0();
    if grid[0] < t0 - 1e-12 * t0.abs().max(1.0) {
        return Err(OdeError::BadGrid);
    }
    let t_end = *grid.last().unwrap();
    let mean = if grid.len() > 1 {
        (t_end - grid[0]) / (grid.len() - 1) as f64
    } else {
        history.tau()
    };
    let step = settings
        .max_step
        .unwrap_or(f64::INFINITY)
        .min(mean / settings.substeps.max(1) as f64);
    if t_end <= t0 {
        let states = grid.iter().map(|&t| history.value(t)).collect();
        return Ok(Trajectory {
            times: grid.to_vec(),
            states,
            blow_up: None,
        });
    }
    let dense = dde_dense(field, theta, history, t_end, step, settings)?;
    Ok(dense.sample(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Tangent;
    impl VectorField for Tangent {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            0
        }
        fn eval(&self, _t: f64, x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) {
            o[0] = x[0] * x[0] + 1.0;
        }
    }

    struct Zero;
    impl VectorField for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn n_params(&self) -> usize {
            0
        }
        fn eval(&self, _t: f64, _x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) {
            o.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    struct Step {
        at: f64,
    }
    impl VectorField for Step {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            0
        }
        fn eval(&self, t: f64, _x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) {
            o[0] = if t >= self.at { -2.0 } else { 0.0 };
        }
        fn discontinuities(&self, _th: &[f64]) -> Vec<f64> {
            vec![self.at]
        }
    }

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn tangent_and_blow_up() {
        let grid = linspace(0.0, 1.4, 141);
        let tr = rk4_solve(&Tangent, &[], &[0.0], &grid, &SolverSettings::default()).unwrap();
        assert!(!tr.blew_up());
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert!((s[0] - t.tan()).abs() < 1e-6, "t={t}");
        }
        let grid = linspace(0.0, 2.0, 201);
        let tr = rk4_solve(&Tangent, &[], &[0.0], &grid, &SolverSettings::default()).unwrap();
        let bu = tr.blow_up.unwrap();
        assert!(bu < 1.6 && bu > 1.5);
        assert!(tr.times.iter().all(|&t| t <= bu));
    }

    #[test]
    fn constant_field() {
        let grid = linspace(0.0, 3.0, 7);
        let tr = rk4_solve(&Zero, &[], &[1.5, -2.0], &grid, &SolverSettings::default()).unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![1.5, -2.0]));
    }

    #[test]
    fn jump_in_forcing_is_resolved() {
        let grid = linspace(0.0, 14.0, 15);
        let dense = rk4_dense(&Step { at: 5.3 }, &[], &[1.0], &grid, &SolverSettings::default()).unwrap();
        assert!((dense.value(5.3)[0] - 1.0).abs() < 1e-12);
        assert!((dense.value(14.0)[0] - (1.0 - 2.0 * 8.7)).abs() < 1e-10);
        let t = 5.3;
        let eps = 1e-7;
        let dl = (dense.value(t)[0] - dense.value(t - eps)[0]) / eps;
        let dr = (dense.value(t + eps)[0] - dense.value(t)[0]) / eps;
        assert!((dl - dr - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rk4_order() {
        struct Decay;
        impl VectorField for Decay {
            fn dim(&self) -> usize {
                1
            }
            fn n_params(&self) -> usize {
                0
            }
            fn eval(&self, _t: f64, x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) {
                o[0] = -3.0 * x[0];
            }
        }
        let grid = [0.0, 2.0];
        let err = |m: usize| {
            let s = SolverSettings {
                substeps: m,
                ..Default::default()
            };
            let tr = rk4_solve(&Decay, &[], &[1.0], &grid, &s).unwrap();
            (tr.states[1][0] - (-6.0f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((10.0..25.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn grid_errors() {
        let s = SolverSettings::default();
        assert_eq!(rk4_solve(&Tangent, &[], &[0.0], &[1.0, 0.5], &s).unwrap_err(), OdeError::BadGrid);
        let bad = SolverSettings {
            blow_up_bound: 0.0,
            ..s
        };
        assert_eq!(rk4_solve(&Tangent, &[], &[0.0], &[0.0, 1.0], &bad).unwrap_err(), OdeError::BadBound);
    }

    #[test]
    fn dde_without_lag_matches_ode() {
        struct Sin;
        impl VectorField for Sin {
            fn dim(&self) -> usize {
                1
            }
            fn n_params(&self) -> usize {
                0
            }
            fn eval(&self, t: f64, x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) {
                o[0] = t.sin() - 0.3 * x[0];
            }
            fn delay(&self) -> Option<f64> {
                Some(1.5)
            }
        }
        let grid = linspace(0.0, 10.0, 101);
        let h = HistoryFunction::constant(vec![2.0], 0.0, 1.5).unwrap();
        let a = dde_solve(&Sin, &[], &h, &grid, &SolverSettings::default()).unwrap();
        let b = rk4_solve(&Sin, &[], &[2.0], &grid, &SolverSettings::default()).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x[0] - y[0]).abs() < 1e-8);
        }
    }
}
