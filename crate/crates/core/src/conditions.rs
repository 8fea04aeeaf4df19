//! Orthogonal conditions e_ℓ(g, θ) = ⟨f(·, g, θ), φ_ℓ⟩ + ⟨g_i, φ̇_ℓ⟩.
//!
//! A [`ConditionSet`] fixes the model, the test functions, the target
//! equations and any boundary information. Binding it to a curve
//! ([`ConditionSet::bind`]) tabulates everything that does not depend on θ,
//! so objective and Jacobian evaluations only cost one pass of the field
//! over the quadrature nodes.
//!
//! Rows of the stacked condition vector are ordered equation-major: row
//! `k·L + ℓ` is member ℓ of the k-th target equation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError, Order, TestFunctionBasis};
use crate::curve::Curve;
use crate::models::{ModelError, ModelSpec};
use crate::odesim::{lagged_jacobian, param_jacobian, state_jacobian, VectorField};
use crate::quadrature::{QuadratureError, QuadratureRule, QuadratureSettings};
use crate::smoother::SplineFit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("{conditions} conditions cannot identify {params} parameters")]
    TooFewConditions { conditions: usize, params: usize },
    #[error("equation index {0} out of range")]
    BadEquation(usize),
    #[error("no target equation selected")]
    NoEquations,
    #[error("test functions are active at the {0} endpoint but no boundary value is known there")]
    MissingBoundary(&'static str),
    #[error("boundary value supplied at the {0} endpoint but no test function is active there")]
    UnusedBoundary(&'static str),
    #[error("boundary vector has {got} entries, state dimension is {dim}")]
    BoundaryDimension { got: usize, dim: usize },
    #[error("known-derivative condition unsupported: {0}")]
    NeumannUnsupported(&'static str),
    #[error("test-function domain [{a}, {b}] does not fit the data interval [{lo}, {hi}] (delay {tau})")]
    Window {
        a: f64,
        b: f64,
        lo: f64,
        hi: f64,
        tau: f64,
    },
    #[error("curve covers [{0}, {1}], conditions need [{2}, {3}]")]
    CurveCoverage(f64, f64, f64, f64),
    #[error("curve has dimension {got}, model has {dim}")]
    CurveDimension { got: usize, dim: usize },
    #[error("field is not finite along the curve at t = {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Known data at the right endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RightBoundary {
    /// Known state x(b).
    State(Vec<f64>),
    /// Known derivative ẋ(b); the right-active member then uses the
    /// second-order identity φ(b)ẋ(b) = ⟨f_x f, φ⟩ + ⟨f, φ̇⟩.
    Derivative(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    /// Known state x(a).
    pub left: Option<Vec<f64>>,
    pub right: Option<RightBoundary>,
}

#[derive(Clone, Debug)]
pub struct ConditionSet {
    model: ModelSpec,
    basis: TestFunctionBasis,
    quadrature: QuadratureSettings,
    equations: Vec<usize>,
    boundary: BoundaryData,
}

impl ConditionSet {
    /// Conditions on all state equations, default quadrature, no boundary data.
    pub fn new(model: ModelSpec, basis: TestFunctionBasis) -> Result<Self, ConditionError> {
        Self::with_data(model, basis, BoundaryData::default())
    }

    /// Conditions on all state equations using known boundary values.
    pub fn with_data(model: ModelSpec, basis: TestFunctionBasis, boundary: BoundaryData) -> Result<Self, ConditionError> {
        let equations = (0..model.dim()).collect();
        let set = Self {
            model,
            basis,
            quadrature: QuadratureSettings::default(),
            equations,
            boundary,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_equations(mut self, equations: Vec<usize>) -> Result<Self, ConditionError> {
        self.equations = equations;
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary(mut self, boundary: BoundaryData) -> Result<Self, ConditionError> {
        self.boundary = boundary;
        self.validate()?;
        Ok(self)
    }

    pub fn with_quadrature(mut self, quadrature: QuadratureSettings) -> Result<Self, ConditionError> {
        self.quadrature = quadrature;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), ConditionError> {
        let d = self.model.dim();
        let p = self.model.n_params();
        if self.equations.is_empty() {
            return Err(ConditionError::NoEquations);
        }
        if let Some(&bad) = self.equations.iter().find(|&&e| e >= d) {
            return Err(ConditionError::BadEquation(bad));
        }
        let total = self.len();
        if total < p {
            return Err(ConditionError::TooFewConditions {
                conditions: total,
                params: p,
            });
        }
        if self.quadrature.panels == 0 || self.quadrature.nodes_per_panel == 0 {
            return Err(QuadratureError::EmptyRule.into());
        }
        let flags = self.basis.flags();
        match (&self.boundary.left, flags.left) {
            (None, true) => return Err(ConditionError::MissingBoundary("left")),
            (Some(_), false) => return Err(ConditionError::UnusedBoundary("left")),
            (Some(v), true) if v.len() != d => {
                return Err(ConditionError::BoundaryDimension { got: v.len(), dim: d })
            }
            _ => {}
        }
        match (&self.boundary.right, flags.right) {
            (None, true) => return Err(ConditionError::MissingBoundary("right")),
            (Some(_), false) => return Err(ConditionError::UnusedBoundary("right")),
            (Some(RightBoundary::State(v) | RightBoundary::Derivative(v)), true) if v.len() != d => {
                return Err(ConditionError::BoundaryDimension { got: v.len(), dim: d })
            }
            _ => {}
        }
        if self.neumann_member().is_some() {
            let f = self.model.weak();
            if !f.autonomous() {
                return Err(ConditionError::NeumannUnsupported("the field depends on time"));
            }
            if f.delay().is_some() {
                return Err(ConditionError::NeumannUnsupported("the field has a delay"));
            }
            if self.model.adjustment.is_some() {
                return Err(ConditionError::NeumannUnsupported("the field has a forcing discontinuity"));
            }
        }
        let (a, b) = self.basis.domain();
        let (lo, hi) = self.model.interval;
        let tau = self.model.delay().unwrap_or(0.0);
        let slack = 1e-9 * (hi - lo).abs().max(1.0);
        if a - tau < lo - slack || b > hi + slack {
            return Err(ConditionError::Window { a, b, lo, hi, tau });
        }
        Ok(())
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn basis(&self) -> &TestFunctionBasis {
        &self.basis
    }

    pub fn equations(&self) -> &[usize] {
        &self.equations
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.boundary
    }

    pub fn quadrature(&self) -> QuadratureSettings {
        self.quadrature
    }

    /// Number of test functions per equation.
    pub fn members(&self) -> usize {
        self.basis.len()
    }

    /// Total number of stacked conditions.
    pub fn len(&self) -> usize {
        self.basis.len() * self.equations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Member carrying the known-derivative identity, if any.
    pub fn neumann_member(&self) -> Option<usize> {
        match &self.boundary.right {
            Some(RightBoundary::Derivative(_)) => self.basis.right_member(),
            _ => None,
        }
    }

    /// Whether e is affine in θ, so one linear solve minimizes the objective.
    pub fn is_affine(&self) -> bool {
        self.model.affine_in_params && self.neumann_member().is_none()
    }

    /// Region the curve must cover.
    pub fn required_span(&self) -> (f64, f64) {
        let (a, b) = self.basis.domain();
        (a - self.model.delay().unwrap_or(0.0), b)
    }

    /// Tabulates the θ-independent parts of the conditions on `curve`.
    /// `breaks` are extra quadrature break points (curve knots); for delay
    /// equations their τ-shifts are added automatically.
    pub fn bind<'a>(&'a self, curve: &dyn Curve, breaks: &[f64]) -> Result<BoundConditions<'a>, ConditionError> {
        let d = self.model.dim();
        if curve.dim() != d {
            return Err(ConditionError::CurveDimension { got: curve.dim(), dim: d });
        }
        let (lo, hi) = self.required_span();
        if !curve.covers(lo, hi) {
            let (c0, c1) = curve.domain();
            return Err(ConditionError::CurveCoverage(c0, c1, lo, hi));
        }
        let (a, b) = self.basis.domain();
        let tau = self.model.delay();
        let mut all_breaks = self.basis.breakpoints();
        all_breaks.extend_from_slice(breaks);
        if let Some(tau) = tau {
            all_breaks.extend(breaks.iter().map(|k| k + tau));
        }
        // fixed kinks of the trajectory and of the integrand
        for f in [self.model.field.as_ref(), self.model.weak()] {
            if !f.moving_discontinuities() {
                all_breaks.extend(f.discontinuities(&self.model.true_params));
            }
        }
        let rule = QuadratureRule::from_settings(a, b, self.quadrature, &all_breaks)?;
        let nodes = rule.nodes().to_vec();
        let weights = rule.weights().to_vec();
        let nq = nodes.len();
        let phi = self.basis.eval_basis(&nodes, Order::Value)?.values;
        let dphi = self.basis.eval_basis(&nodes, Order::Derivative)?.values;
        let mut g = vec![0.0; nq * d];
        let mut glag = if tau.is_some() { vec![0.0; nq * d] } else { Vec::new() };
        for (q, &t) in nodes.iter().enumerate() {
            curve.value_into(t, &mut g[q * d..(q + 1) * d]);
            if let Some(tau) = tau {
                curve.value_into(t - tau, &mut glag[q * d..(q + 1) * d]);
            }
        }
        if let Some(q) = g.iter().chain(&glag).position(|v| !v.is_finite()) {
            return Err(ConditionError::NonFinite(nodes[(q / d).min(nq - 1)]));
        }
        let l = self.members();
        let neumann = self.neumann_member();
        let phi_a = self.basis.eval(a, Order::Value)?;
        let phi_b = self.basis.eval(b, Order::Value)?;
        let mut constant = DVector::zeros(self.len());
        for (k, &i) in self.equations.iter().enumerate() {
            for m in 0..l {
                let row = k * l + m;
                if Some(m) == neumann {
                    if let Some(RightBoundary::Derivative(v)) = &self.boundary.right {
                        constant[row] = -phi_b[m] * v[i];
                    }
                    continue;
                }
                let mut acc = 0.0;
                for q in 0..nq {
                    acc += weights[q] * g[q * d + i] * dphi[(q, m)];
                }
                if let Some(left) = &self.boundary.left {
                    acc += left[i] * phi_a[m];
                }
                if let Some(RightBoundary::State(right)) = &self.boundary.right {
                    acc -= right[i] * phi_b[m];
                }
                constant[row] = acc;
            }
        }
        Ok(BoundConditions {
            set: self,
            nodes,
            weights,
            phi,
            dphi,
            g,
            glag,
            constant,
        })
    }

    /// [`bind`](Self::bind) on a spline fit, breaking quadrature at its knots.
    pub fn bind_fit<'a>(&'a self, fit: &SplineFit) -> Result<BoundConditions<'a>, ConditionError> {
        self.bind(fit, &fit.knots().breakpoints())
    }
}

/// A condition set tabulated on one curve.
pub struct BoundConditions<'a> {
    set: &'a ConditionSet,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    phi: DMatrix<f64>,
    dphi: DMatrix<f64>,
    g: Vec<f64>,
    glag: Vec<f64>,
    constant: DVector<f64>,
}

const FD_REL: f64 = 6e-6;

impl<'a> BoundConditions<'a> {
    pub fn set(&self) -> &ConditionSet {
        self.set
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    fn field(&self) -> &dyn VectorField {
        self.set.model.weak()
    }

    fn state(&self, q: usize) -> (&[f64], &[f64]) {
        let d = self.set.model.dim();
        let x = &self.g[q * d..(q + 1) * d];
        let lag: &[f64] = if self.glag.is_empty() {
            &[]
        } else {
            &self.glag[q * d..(q + 1) * d]
        };
        (x, lag)
    }

    /// f_x f at one node (the second derivative of the solution).
    fn second_order(&self, t: f64, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let f = self.field();
        let d = f.dim();
        let mut fv = vec![0.0; d];
        f.eval(t, x, &[], theta, &mut fv);
        let fx = state_jacobian(f, t, x, &[], theta);
        (0..d).map(|i| (0..d).map(|j| fx[(i, j)] * fv[j]).sum()).collect()
    }

    /// The stacked condition vector at θ.
    pub fn eval(&self, theta: &[f64]) -> Result<DVector<f64>, ConditionError> {
        let set = self.set;
        let f = self.field();
        let d = f.dim();
        let nq = self.nodes.len();
        let l = set.members();
        let neumann = set.neumann_member();
        let mut wf = DMatrix::zeros(nq, d);
        let mut wff = if neumann.is_some() { DMatrix::zeros(nq, d) } else { DMatrix::zeros(0, 0) };
        let mut fv = vec![0.0; d];
        for q in 0..nq {
            let t = self.nodes[q];
            let (x, lag) = self.state(q);
            f.eval(t, x, lag, theta, &mut fv);
            if fv.iter().any(|v| !v.is_finite()) {
                return Err(ConditionError::NonFinite(t));
            }
            for i in 0..d {
                wf[(q, i)] = self.weights[q] * fv[i];
            }
            if neumann.is_some() {
                let s = self.second_order(t, x, theta);
                for i in 0..d {
                    wff[(q, i)] = self.weights[q] * s[i];
                }
            }
        }
        let proj = self.phi.transpose() * &wf; // L × d
        let mut e = self.constant.clone();
        let mut adj = vec![0.0; l];
        for (k, &i) in set.equations.iter().enumerate() {
            for m in 0..l {
                let row = k * l + m;
                if Some(m) == neumann {
                    let mut acc = 0.0;
                    for q in 0..nq {
                        acc += wff[(q, i)] * self.phi[(q, m)] + wf[(q, i)] * self.dphi[(q, m)];
                    }
                    e[row] += acc;
                } else {
                    e[row] += proj[(m, i)];
                }
            }
            if let Some(a) = &set.model.adjustment {
                adj.iter_mut().for_each(|v| *v = 0.0);
                a.add_value(i, &set.basis, theta, &mut adj);
                for m in 0..l {
                    if Some(m) != neumann {
                        e[k * l + m] += adj[m];
                    }
                }
            }
        }
        Ok(e)
    }

    /// J_θ, the (stacked) L × p Jacobian of the conditions in θ.
    pub fn jacobian(&self, theta: &[f64]) -> Result<DMatrix<f64>, ConditionError> {
        let set = self.set;
        let f = self.field();
        let p = theta.len();
        let nq = self.nodes.len();
        let l = set.members();
        let neumann = set.neumann_member();
        let mut jac = DMatrix::zeros(set.len(), p);
        // per equation: nq × p weighted parameter gradients
        let mut wft: Vec<DMatrix<f64>> = set.equations.iter().map(|_| DMatrix::zeros(nq, p)).collect();
        let mut wfft: Vec<DMatrix<f64>> = if neumann.is_some() {
            set.equations.iter().map(|_| DMatrix::zeros(nq, p)).collect()
        } else {
            Vec::new()
        };
        let mut tp = theta.to_vec();
        for q in 0..nq {
            let t = self.nodes[q];
            let (x, lag) = self.state(q);
            let ft = param_jacobian(f, t, x, lag, theta);
            if ft.iter().any(|v| !v.is_finite()) {
                return Err(ConditionError::NonFinite(t));
            }
            for (k, &i) in set.equations.iter().enumerate() {
                for j in 0..p {
                    wft[k][(q, j)] = self.weights[q] * ft[(i, j)];
                }
            }
            if neumann.is_some() {
                for j in 0..p {
                    let h = FD_REL * theta[j].abs().max(1.0);
                    tp[j] = theta[j] + h;
                    let sp = self.second_order(t, x, &tp);
                    tp[j] = theta[j] - h;
                    let sm = self.second_order(t, x, &tp);
                    tp[j] = theta[j];
                    for (k, &i) in set.equations.iter().enumerate() {
                        wfft[k][(q, j)] = self.weights[q] * (sp[i] - sm[i]) / (2.0 * h);
                    }
                }
            }
        }
        for (k, &i) in set.equations.iter().enumerate() {
            let block = self.phi.transpose() * &wft[k]; // L × p
            let mut adj = DMatrix::zeros(l, p);
            if let Some(a) = &set.model.adjustment {
                a.add_jacobian(i, &set.basis, theta, &mut adj);
            }
            for m in 0..l {
                let row = k * l + m;
                if Some(m) == neumann {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for q in 0..nq {
                            acc += wfft[k][(q, j)] * self.phi[(q, m)] + wft[k][(q, j)] * self.dphi[(q, m)];
                        }
                        jac[(row, j)] = acc;
                    }
                } else {
                    for j in 0..p {
                        jac[(row, j)] = block[(m, j)] + adj[(m, j)];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Matrices D_j (one per state dimension, rows = conditions, columns =
    /// spline coefficients of `basis`) with e(g + p·h) ≈ e(g) + Σ_j D_j h_j.
    /// Exact for fields linear in the state.
    pub fn coefficient_matrices(&self, basis: &BSplineBasis, theta: &[f64]) -> Result<Vec<DMatrix<f64>>, ConditionError> {
        let set = self.set;
        let f = self.field();
        let d = f.dim();
        let nq = self.nodes.len();
        let l = set.members();
        let kk = basis.len();
        let neumann = set.neumann_member();
        let pmat = basis.design_matrix(&self.nodes, Order::Value)?;
        let tau = set.model.delay();
        let plag = match tau {
            Some(tau) => {
                let (lo, _) = basis.domain();
                let shifted: Vec<f64> = self.nodes.iter().map(|t| (t - tau).max(lo)).collect();
                Some(basis.design_matrix(&shifted, Order::Value)?)
            }
            None => None,
        };
        // weighted state / lag Jacobian entries per node
        let mut fx = vec![DMatrix::zeros(nq, d); d]; // fx[i][(q, j)]
        let mut fl = vec![DMatrix::zeros(nq, d); d];
        let mut ffx = if neumann.is_some() { vec![DMatrix::zeros(nq, d); d] } else { Vec::new() };
        for q in 0..nq {
            let t = self.nodes[q];
            let (x, lag) = self.state(q);
            let jx = state_jacobian(f, t, x, lag, theta);
            let jl = lagged_jacobian(f, t, x, lag, theta);
            for i in 0..d {
                for j in 0..d {
                    fx[i][(q, j)] = self.weights[q] * jx[(i, j)];
                    fl[i][(q, j)] = self.weights[q] * jl[(i, j)];
                }
            }
            if neumann.is_some() {
                let mut xp = x.to_vec();
                for j in 0..d {
                    let h = FD_REL * x[j].abs().max(1.0);
                    xp[j] = x[j] + h;
                    let sp = self.second_order(t, &xp, theta);
                    xp[j] = x[j] - h;
                    let sm = self.second_order(t, &xp, theta);
                    xp[j] = x[j];
                    for i in 0..d {
                        ffx[i][(q, j)] = self.weights[q] * (sp[i] - sm[i]) / (2.0 * h);
                    }
                }
            }
        }
        let wdphi = DMatrix::from_fn(nq, l, |q, m| self.weights[q] * self.dphi[(q, m)]);
        let dphi_p = wdphi.transpose() * &pmat; // L × K
        let mut out = vec![DMatrix::zeros(set.len(), kk); d];
        for (k, &i) in set.equations.iter().enumerate() {
            for j in 0..d {
                let wa = DMatrix::from_fn(nq, l, |q, m| fx[i][(q, j)] * self.phi[(q, m)]);
                let mut blk = wa.transpose() * &pmat;
                if let Some(pl) = &plag {
                    let wb = DMatrix::from_fn(nq, l, |q, m| fl[i][(q, j)] * self.phi[(q, m)]);
                    blk += wb.transpose() * pl;
                }
                if i == j {
                    blk += &dphi_p;
                }
                if let Some(nm) = neumann {
                    // second-order identity row: ⟨∂x(f_x f) h, φ⟩ + ⟨f_x h, φ̇⟩
                    for c in 0..kk {
                        let mut acc = 0.0;
                        for q in 0..nq {
                            acc += (ffx[i][(q, j)] * self.phi[(q, nm)] + fx[i][(q, j)] * self.dphi[(q, nm)]) * pmat[(q, c)];
                        }
                        blk[(nm, c)] = acc;
                    }
                }
                out[j].rows_mut(k * l, l).copy_from(&blk);
            }
        }
        Ok(out)
    }
}

/// e_L(g, θ) on an arbitrary curve.
pub fn eval_conditions(set: &ConditionSet, curve: &dyn Curve, breaks: &[f64], theta: &[f64]) -> Result<DVector<f64>, ConditionError> {
    set.bind(curve, breaks)?.eval(theta)
}

/// J_θ on an arbitrary curve.
pub fn eval_jacobian_theta(set: &ConditionSet, curve: &dyn Curve, breaks: &[f64], theta: &[f64]) -> Result<DMatrix<f64>, ConditionError> {
    set.bind(curve, breaks)?.jacobian(theta)
}

/// Coefficient-direction matrices (A(θ), B(θ), … one per state) on a fit.
pub fn linear_condition_matrices(set: &ConditionSet, fit: &SplineFit, theta: &[f64]) -> Result<Vec<DMatrix<f64>>, ConditionError> {
    set.bind_fit(fit)?.coefficient_matrices(fit.basis(), theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_sine_basis, uniform_bspline_testfuncs, BoundaryFlags, KnotVector};
    use crate::curve::FnCurve;
    use crate::models::{alpha_pinene, exponential, linear2d_default, ricatti};
    use crate::odesim::{rk4_dense, SolverSettings};
    use crate::smoother::{fit, Observations};

    fn fine() -> SolverSettings {
        SolverSettings {
            max_step: Some(1e-3),
            ..Default::default()
        }
    }

    #[test]
    fn exp_curve_with_zero_field() {
        let set = ConditionSet::new(exponential(), make_sine_basis(1, (0.0, 1.0)).unwrap()).unwrap();
        let curve = FnCurve::scalar((0.0, 1.0), f64::exp, f64::exp);
        let e = eval_conditions(&set, &curve, &[], &[0.0]).unwrap();
        let expected = -2f64.sqrt() * std::f64::consts::PI * (std::f64::consts::E + 1.0) / (1.0 + std::f64::consts::PI.powi(2));
        assert!((e[0] - expected).abs() < 1e-12);
        assert!((e[0] + 1.519824).abs() < 1e-6);
    }

    #[test]
    fn exact_solution_annihilates() {
        let m = exponential();
        let set = ConditionSet::new(m.clone(), make_sine_basis(10, (0.0, 1.0)).unwrap()).unwrap();
        let curve = FnCurve::scalar((0.0, 1.0), f64::exp, f64::exp);
        let e = eval_conditions(&set, &curve, &[], &[1.0]).unwrap();
        assert!(e.amax() < 1e-10);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = ricatti(false);
        let basis = make_sine_basis(6, (0.0, 14.0)).unwrap();
        let set = ConditionSet::new(m.clone(), basis).unwrap();
        let grid: Vec<f64> = (0..=140).map(|i| i as f64 * 0.1).collect();
        let dense = rk4_dense(m.field.as_ref(), &m.true_params, &[-1.0], &grid, &fine()).unwrap();
        let bound = set.bind(&dense, &[]).unwrap();
        let th = [0.1, 0.1, 1.8, 5.2];
        let j = bound.jacobian(&th).unwrap();
        for c in 0..4 {
            let h = 1e-6 * th[c].abs().max(1.0);
            let mut tp = th;
            tp[c] += h;
            let ep = bound.eval(&tp).unwrap();
            tp[c] -= 2.0 * h;
            let em = bound.eval(&tp).unwrap();
            let fd = (ep - em) / (2.0 * h);
            let err = (fd - j.column(c)).amax();
            assert!(err <= 1e-6 * j.column(c).amax().max(1.0), "col {c}: {err}");
        }
        // the change-point column is d′·φ(T_r)
        let phi = set.basis().eval(5.2, Order::Value).unwrap();
        for l in 0..6 {
            assert!((j[(l, 3)] - 1.8 * phi[l]).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_assembly_matches_direct() {
        let m = linear2d_default();
        let grid: Vec<f64> = (0..200).map(|i| 10.0 * i as f64 / 199.0).collect();
        let tr = crate::odesim::rk4_solve(m.field.as_ref(), &m.true_params, &[1.0, 0.0], &grid, &fine()).unwrap();
        let mut vals = tr.matrix();
        for (i, v) in vals.iter_mut().enumerate() {
            *v += 0.05 * ((i * 7919 % 101) as f64 / 101.0 - 0.5);
        }
        let obs = Observations::new(grid, vals).unwrap();
        let f = fit(&obs, &KnotVector::uniform(0.0, 10.0, 12, 3).unwrap(), None).unwrap();
        let set = ConditionSet::new(m.clone(), make_sine_basis(8, (0.0, 10.0)).unwrap()).unwrap();
        let th = [0.25, 0.9, 1.1, 0.3];
        let e = eval_conditions(&set, &f, &f.knots().breakpoints(), &th).unwrap();
        let ds = linear_condition_matrices(&set, &f, &th).unwrap();
        let mut asm = DVector::zeros(e.len());
        for (j, dj) in ds.iter().enumerate() {
            asm += dj * f.coefficients().column(j);
        }
        assert!((asm - &e).amax() < 1e-10 * e.amax().max(1.0));
    }

    #[test]
    fn zero_coefficients_leave_derivative_rows() {
        let m = linear2d_default();
        let set = ConditionSet::new(m, make_sine_basis(4, (0.0, 10.0)).unwrap()).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| 10.0 * i as f64 / 49.0).collect();
        let obs = Observations::new(grid.clone(), DMatrix::from_fn(50, 2, |i, j| (grid[i] + j as f64).sin())).unwrap();
        let f = fit(&obs, &KnotVector::uniform(0.0, 10.0, 5, 3).unwrap(), None).unwrap();
        let ds = linear_condition_matrices(&set, &f, &[0.0; 4]).unwrap();
        // B block (state 2 in equation 1) vanishes; A rows are ⟨φ̇_ℓ, p_k⟩
        assert!(ds[1].rows(0, 4).amax() < 1e-15);
        let rule = QuadratureRule::with_breaks(0.0, 10.0, 400, 6, &f.knots().breakpoints()).unwrap();
        for m in 0..4 {
            for k in 0..f.coefficient_count() {
                let direct = rule
                    .integrate(|t| {
                        set.basis().eval_member(m, t, Order::Derivative).unwrap() * f.basis().eval(t, Order::Value).unwrap()[k]
                    })
                    .unwrap();
                assert!((ds[0][(m, k)] - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn left_boundary_member_with_known_state() {
        let m = alpha_pinene();
        let th = m.true_params.clone();
        let grid: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let dense = rk4_dense(m.field.as_ref(), &th, m.initial.values(), &grid, &fine()).unwrap();
        let basis = uniform_bspline_testfuncs((0.0, 100.0), 6, 3, BoundaryFlags::LEFT).unwrap();
        let mk = |x0: Vec<f64>| {
            ConditionSet::with_data(
                m.clone(),
                basis.clone(),
                BoundaryData {
                    left: Some(x0),
                    right: None,
                },
            )
            .unwrap()
        };
        let good = mk(m.initial.values().to_vec());
        let e = eval_conditions(&good, &dense, &[], &th).unwrap();
        assert!(e.amax() < 1e-6, "{}", e.amax());
        let e1 = eval_conditions(&mk(vec![101.0, 0.0, 0.0, 0.0, 0.0]), &dense, &[], &th).unwrap();
        let e2 = eval_conditions(&mk(vec![102.0, 0.0, 0.0, 0.0, 0.0]), &dense, &[], &th).unwrap();
        assert!(e1[0].abs() > 1e-3);
        assert!((e2[0] - 2.0 * e1[0]).abs() < 1e-6);
    }

    #[test]
    fn neumann_member_vanishes_at_stationarity() {
        // x(t) = e^{-t}: ẋ(b) is small at b = 20 but not zero; the identity
        // uses the exact value
        let m = exponential().with_interval((0.0, 20.0));
        let basis = uniform_bspline_testfuncs((0.0, 20.0), 5, 3, BoundaryFlags::RIGHT).unwrap();
        let xb = (-20.0f64).exp();
        let set = ConditionSet::with_data(
            m,
            basis,
            BoundaryData {
                left: None,
                right: Some(RightBoundary::Derivative(vec![-xb])),
            },
        )
        .unwrap();
        assert!(!set.is_affine());
        let curve = FnCurve::scalar((0.0, 20.0), |t| (-t).exp(), |t| -(-t).exp());
        let bound = set.bind(&curve, &[]).unwrap();
        assert!(bound.eval(&[-1.0]).unwrap().amax() < 1e-10);
        let j = bound.jacobian(&[-0.9]).unwrap();
        let h = 1e-6;
        let fd = (bound.eval(&[-0.9 + h]).unwrap() - bound.eval(&[-0.9 - h]).unwrap()) / (2.0 * h);
        assert!((fd - j.column(0)).amax() < 1e-6);
    }

    #[test]
    fn validation_errors() {
        let m = exponential();
        assert!(matches!(
            ConditionSet::new(m.clone(), uniform_bspline_testfuncs((0.0, 1.0), 3, 3, BoundaryFlags::LEFT).unwrap()),
            Err(ConditionError::MissingBoundary("left"))
        ));
        let r = ricatti(false);
        assert!(matches!(
            ConditionSet::new(r.clone(), make_sine_basis(3, (0.0, 14.0)).unwrap()),
            Err(ConditionError::TooFewConditions { .. })
        ));
        let bad = ConditionSet::new(r, uniform_bspline_testfuncs((0.0, 14.0), 5, 3, BoundaryFlags::RIGHT).unwrap());
        assert!(bad.is_err());
        assert!(matches!(
            ConditionSet::new(m.clone(), make_sine_basis(3, (0.0, 2.0)).unwrap()),
            Err(ConditionError::Window { .. })
        ));
        let set = ConditionSet::new(m, make_sine_basis(3, (0.0, 1.0)).unwrap()).unwrap();
        let short = FnCurve::scalar((0.0, 0.5), f64::exp, f64::exp);
        assert!(matches!(set.bind(&short, &[]), Err(ConditionError::CurveCoverage(..))));
    }
}
