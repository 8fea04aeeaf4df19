//! Registry of benchmark vector fields.
//!
//! A [`ModelSpec`] bundles the field used for simulation, an optional
//! smooth part used inside condition integrals together with an analytic
//! correction for the remainder (the change-point forcing of the Ricatti
//! model), reference parameters, box bounds and the default initial data.

use nalgebra::DMatrix;
use std::sync::Arc;
use thiserror::Error;

use crate::basis::{Order, TestFunctionBasis};
use crate::odesim::{dde_dense, rk4_dense, DenseSolution, HistoryFunction, OdeError, SharedField, SolverSettings, Trajectory, VectorField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("parameter vector has {got} entries, model expects {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("parameter {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBox {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
}

/// Analytic terms added to the conditions of one equation.
pub trait ConditionAdjustment: Send + Sync {
    /// Adds the term for every member of `basis` to `out` (length L).
    fn add_value(&self, eq: usize, basis: &TestFunctionBasis, theta: &[f64], out: &mut [f64]);
    /// Adds ∂term/∂θ to the L × p block `out`.
    fn add_jacobian(&self, eq: usize, basis: &TestFunctionBasis, theta: &[f64], out: &mut DMatrix<f64>);
}

/// How the trajectory starts.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    State(Vec<f64>),
    /// Constant history on [t₀ − τ, t₀].
    ConstantHistory(Vec<f64>),
}

impl InitialData {
    pub fn values(&self) -> &[f64] {
        match self {
            InitialData::State(v) | InitialData::ConstantHistory(v) => v,
        }
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub field: SharedField,
    /// Part of the field integrated by quadrature inside the conditions;
    /// `None` means the full field.
    pub weak_field: Option<SharedField>,
    pub adjustment: Option<Arc<dyn ConditionAdjustment>>,
    pub param_names: Vec<String>,
    pub true_params: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: InitialData,
    pub interval: (f64, f64),
    /// Whether the true parameters are published estimates rather than a
    /// simulation truth chosen here.
    pub externally_sourced: bool,
    /// Whether the plain conditions are affine in θ.
    pub affine_in_params: bool,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("true_params", &self.true_params)
            .field("interval", &self.interval)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn n_params(&self) -> usize {
        self.field.n_params()
    }

    pub fn delay(&self) -> Option<f64> {
        self.field.delay()
    }

    pub fn weak(&self) -> &dyn VectorField {
        self.weak_field.as_deref().unwrap_or(self.field.as_ref())
    }

    /// Start of the integration window (history starts τ earlier).
    pub fn t0(&self) -> f64 {
        self.interval.0
    }

    pub fn check_params(&self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::ParamCount {
                got: theta.len(),
                expected: self.n_params(),
            });
        }
        for (i, &v) in theta.iter().enumerate() {
            if !(v >= self.lower[i] && v <= self.upper[i]) {
                return Err(ModelError::OutOfBox {
                    index: i,
                    value: v,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (i, v) in theta.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn with_true_params(mut self, theta: Vec<f64>) -> Result<Self, ModelError> {
        self.check_params(&theta)?;
        self.true_params = theta;
        Ok(self)
    }

    pub fn with_interval(mut self, interval: (f64, f64)) -> Self {
        self.interval = interval;
        self
    }

    pub fn with_initial(mut self, initial: InitialData) -> Self {
        self.initial = initial;
        self
    }

    /// Dense solution from t₀ through `t_end`. For delay models the result
    /// also covers the history window.
    pub fn solve_dense(
        &self,
        theta: &[f64],
        initial: &InitialData,
        t_end: f64,
        settings: &SolverSettings,
    ) -> Result<DenseSolution, OdeError> {
        let t0 = self.t0();
        match (self.delay(), initial) {
            (Some(tau), InitialData::ConstantHistory(h) | InitialData::State(h)) => {
                let history = HistoryFunction::constant(h.clone(), t0, tau)?;
                let step = settings.max_step.unwrap_or(tau / 20.0).min(tau / settings.substeps.max(1) as f64);
                dde_dense(self.field.as_ref(), theta, &history, t_end, step, settings)
            }
            (None, InitialData::State(x0) | InitialData::ConstantHistory(x0)) => {
                let count = (((t_end - t0) / (self.interval.1 - self.interval.0)) * 400.0).ceil().max(1.0) as usize;
                let grid: Vec<f64> = (0..=count).map(|i| t0 + (t_end - t0) * i as f64 / count as f64).collect();
                rk4_dense(self.field.as_ref(), theta, x0, &grid, settings)
            }
        }
    }

    /// Trajectory at `times` (all ≥ t₀), started from `initial` at t₀.
    pub fn simulate(
        &self,
        theta: &[f64],
        initial: &InitialData,
        times: &[f64],
        settings: &SolverSettings,
    ) -> Result<Trajectory, OdeError> {
        let t0 = self.t0();
        if times.is_empty() || times[0] < t0 - 1e-12 * t0.abs().max(1.0) {
            return Err(OdeError::BadGrid);
        }
        match self.delay() {
            Some(_) => {
                let end = times[times.len() - 1].max(t0 + 1e-9);
                let dense = self.solve_dense(theta, initial, end, settings)?;
                Ok(dense.sample(times))
            }
            None => {
                // integrate on the observation grid, prefixed with t₀ if needed
                let prefix = times[0] > t0;
                let mut grid = Vec::with_capacity(times.len() + 1);
                if prefix {
                    grid.push(t0);
                }
                grid.extend_from_slice(times);
                let dense = rk4_dense(self.field.as_ref(), theta, initial.values(), &grid, settings)?;
                let mut tr = dense.sample(&grid);
                if prefix && !tr.is_empty() {
                    tr.times.remove(0);
                    tr.states.remove(0);
                }
                Ok(tr)
            }
        }
    }
}

/// Names accepted by [`model_by_name`].
pub const MODEL_NAMES: &[&str] = &[
    "exponential",
    "alpha_pinene",
    "ricatti",
    "ricatti_unknown_tr",
    "fitzhugh_nagumo",
    "blowfly",
    "linear2d",
];

pub fn model_by_name(name: &str) -> Result<ModelSpec, ModelError> {
    Ok(match name {
        "exponential" => exponential(),
        "alpha_pinene" => alpha_pinene(),
        "ricatti" => ricatti(true),
        "ricatti_unknown_tr" => ricatti(false),
        "fitzhugh_nagumo" | "fhn" => fitzhugh_nagumo(),
        "blowfly" => blowfly(),
        "linear2d" => linear2d_default(),
        other => return Err(ModelError::UnknownModel(other.to_string())),
    })
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- ẋ = θx

struct Exponential;

impl VectorField for Exponential {
    fn dim(&self) -> usize {
        1
    }
    fn autonomous(&self) -> bool {
        true
    }
    fn n_params(&self) -> usize {
        1
    }
    fn eval(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) {
        o[0] = th[0] * x[0];
    }
    fn jac_state(&self, _t: f64, _x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        o[0] = th[0];
        true
    }
    fn jac_params(&self, _t: f64, x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) -> bool {
        o[0] = x[0];
        true
    }
}

/// ẋ = θx on [0, 1], x(0) = 1, θ* = 1.
pub fn exponential() -> ModelSpec {
    ModelSpec {
        name: "exponential".into(),
        field: Arc::new(Exponential),
        weak_field: None,
        adjustment: None,
        param_names: names(&["theta"]),
        true_params: vec![1.0],
        lower: vec![-10.0],
        upper: vec![10.0],
        initial: InitialData::State(vec![1.0]),
        interval: (0.0, 1.0),
        externally_sourced: false,
        affine_in_params: true,
    }
}

// ---------------------------------------------------------------- α-pinene

struct AlphaPinene;

impl AlphaPinene {
    fn matrix(th: &[f64]) -> [[f64; 5]; 5] {
        let mut a = [[0.0; 5]; 5];
        a[0][0] = -(th[0] + th[1]);
        a[1][0] = th[0];
        a[2][0] = th[1];
        a[2][2] = -(th[2] + th[3]);
        a[2][4] = th[4];
        a[3][2] = th[2];
        a[4][2] = th[3];
        a[4][4] = -th[4];
        a
    }
}

impl VectorField for AlphaPinene {
    fn dim(&self) -> usize {
        5
    }
    fn autonomous(&self) -> bool {
        true
    }
    fn n_params(&self) -> usize {
        5
    }
    fn eval(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) {
        let a = Self::matrix(th);
        for i in 0..5 {
            o[i] = (0..5).map(|j| a[i][j] * x[j]).sum();
        }
    }
    fn jac_state(&self, _t: f64, _x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let a = Self::matrix(th);
        for i in 0..5 {
            for j in 0..5 {
                o[i * 5 + j] = a[i][j];
            }
        }
        true
    }
    fn jac_params(&self, _t: f64, x: &[f64], _l: &[f64], _th: &[f64], o: &mut [f64]) -> bool {
        o.iter_mut().for_each(|v| *v = 0.0);
        let p = 5;
        o[0] = -x[0];
        o[1] = -x[0];
        o[p] = x[0];
        o[2 * p + 1] = x[0];
        o[2 * p + 2] = -x[2];
        o[2 * p + 3] = -x[2];
        o[2 * p + 4] = x[4];
        o[3 * p + 2] = x[2];
        o[4 * p + 3] = x[2];
        o[4 * p + 4] = -x[4];
        true
    }
}

/// Five-state linear isomerization network on [0, 100] from (100, 0, 0, 0, 0).
///
/// The reference rates are literature values (in 10⁻³ per time unit) and
/// are configurable.
pub fn alpha_pinene() -> ModelSpec {
    ModelSpec {
        name: "alpha_pinene".into(),
        field: Arc::new(AlphaPinene),
        weak_field: None,
        adjustment: None,
        param_names: names(&["theta1", "theta2", "theta3", "theta4", "theta5"]),
        true_params: vec![5.93e-2, 2.96e-2, 2.05e-2, 27.5e-2, 4.0e-2],
        lower: vec![0.0; 5],
        upper: vec![2.0; 5],
        initial: InitialData::State(vec![100.0, 0.0, 0.0, 0.0, 0.0]),
        interval: (0.0, 100.0),
        externally_sourced: true,
        affine_in_params: true,
    }
}

// ---------------------------------------------------------------- Ricatti

/// Where the change point comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ChangePoint {
    Fixed(f64),
    Param(usize),
}

impl ChangePoint {
    fn at(&self, th: &[f64]) -> f64 {
        match *self {
            ChangePoint::Fixed(t) => t,
            ChangePoint::Param(i) => th[i],
        }
    }
}

/// a x² + c √t − d′ 𝟙[T_r, ∞)(t), θ = (a, c, d′[, T_r]).
struct Ricatti {
    change: ChangePoint,
    forcing: bool,
}

impl VectorField for Ricatti {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        match self.change {
            ChangePoint::Fixed(_) => 3,
            ChangePoint::Param(_) => 4,
        }
    }
    fn eval(&self, t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) {
        let mut v = th[0] * x[0] * x[0] + th[1] * t.max(0.0).sqrt();
        if self.forcing && t >= self.change.at(th) {
            v -= th[2];
        }
        o[0] = v;
    }
    fn jac_state(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        o[0] = 2.0 * th[0] * x[0];
        true
    }
    fn jac_params(&self, t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        o.iter_mut().for_each(|v| *v = 0.0);
        o[0] = x[0] * x[0];
        o[1] = t.max(0.0).sqrt();
        if self.forcing && t >= self.change.at(th) {
            o[2] = -1.0;
        }
        // the T_r column is a Dirac mass; conditions handle it analytically
        true
    }
    fn discontinuities(&self, th: &[f64]) -> Vec<f64> {
        if self.forcing {
            vec![self.change.at(th)]
        } else {
            Vec::new()
        }
    }
    fn moving_discontinuities(&self) -> bool {
        self.forcing && matches!(self.change, ChangePoint::Param(_))
    }
}

/// −d′ ∫ 𝟙[T_r, ∞) φ = −d′ (φ̃(b) − φ̃(T_r)).
struct ChangePointTerm {
    change: ChangePoint,
}

impl ConditionAdjustment for ChangePointTerm {
    fn add_value(&self, _eq: usize, basis: &TestFunctionBasis, th: &[f64], out: &mut [f64]) {
        let (a, b) = basis.domain();
        let tr = self.change.at(th).clamp(a, b);
        let hi = basis.eval(b, Order::Antiderivative).expect("endpoint in domain");
        let lo = basis.eval(tr, Order::Antiderivative).expect("clamped into domain");
        for l in 0..out.len() {
            out[l] -= th[2] * (hi[l] - lo[l]);
        }
    }

    fn add_jacobian(&self, _eq: usize, basis: &TestFunctionBasis, th: &[f64], out: &mut DMatrix<f64>) {
        let (a, b) = basis.domain();
        let raw = self.change.at(th);
        let tr = raw.clamp(a, b);
        let hi = basis.eval(b, Order::Antiderivative).expect("endpoint in domain");
        let lo = basis.eval(tr, Order::Antiderivative).expect("clamped into domain");
        let phi = basis.eval(tr, Order::Value).expect("clamped into domain");
        for l in 0..out.nrows() {
            out[(l, 2)] -= hi[l] - lo[l];
            if let ChangePoint::Param(i) = self.change {
                if raw > a && raw < b {
                    out[(l, i)] += th[2] * phi[l];
                }
            }
        }
    }
}

/// Change-point Ricatti equation on [0, 14] from x(0) = −1.
///
/// With a known change point T_r = 5 the parameters are (a, c, d′);
/// otherwise T_r is appended as a fourth parameter.
pub fn ricatti(change_point_known: bool) -> ModelSpec {
    let (change, names_v, truth, lower, upper) = if change_point_known {
        (
            ChangePoint::Fixed(5.0),
            names(&["a", "c", "d"]),
            vec![0.11, 0.09, 2.0],
            vec![-1.0, -1.0, 0.0],
            vec![1.0, 1.0, 10.0],
        )
    } else {
        (
            ChangePoint::Param(3),
            names(&["a", "c", "d", "t_r"]),
            vec![0.11, 0.09, 2.0, 5.0],
            vec![-1.0, -1.0, 0.0, 1.0],
            vec![1.0, 1.0, 10.0, 13.0],
        )
    };
    ModelSpec {
        name: if change_point_known {
            "ricatti".into()
        } else {
            "ricatti_unknown_tr".into()
        },
        field: Arc::new(Ricatti { change, forcing: true }),
        weak_field: Some(Arc::new(Ricatti {
            change,
            forcing: false,
        })),
        adjustment: Some(Arc::new(ChangePointTerm { change })),
        param_names: names_v,
        true_params: truth,
        lower,
        upper,
        initial: InitialData::State(vec![-1.0]),
        interval: (0.0, 14.0),
        externally_sourced: false,
        affine_in_params: change_point_known,
    }
}

// ---------------------------------------------------------------- FitzHugh-Nagumo

/// V̇ = c(V − V³/3 + R), Ṙ = −(V − a + bR)/c.
struct FitzHughNagumo;

impl VectorField for FitzHughNagumo {
    fn dim(&self) -> usize {
        2
    }
    fn autonomous(&self) -> bool {
        true
    }
    fn n_params(&self) -> usize {
        3
    }
    fn eval(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        o[0] = c * (v - v * v * v / 3.0 + r);
        o[1] = -(v - a + b * r) / c;
    }
    fn jac_state(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let (b, c) = (th[1], th[2]);
        o[0] = c * (1.0 - x[0] * x[0]);
        o[1] = c;
        o[2] = -1.0 / c;
        o[3] = -b / c;
        true
    }
    fn jac_params(&self, _t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        o[0] = 0.0;
        o[1] = 0.0;
        o[2] = v - v * v * v / 3.0 + r;
        o[3] = 1.0 / c;
        o[4] = -r / c;
        o[5] = (v - a + b * r) / (c * c);
        true
    }
}

/// FitzHugh-Nagumo on [0, 20] from (V, R) = (−1, 1), θ* = (0.2, 0.2, 3).
pub fn fitzhugh_nagumo() -> ModelSpec {
    ModelSpec {
        name: "fitzhugh_nagumo".into(),
        field: Arc::new(FitzHughNagumo),
        weak_field: None,
        adjustment: None,
        param_names: names(&["a", "b", "c"]),
        true_params: vec![0.2, 0.2, 3.0],
        lower: vec![-1.0, -1.0, 0.5],
        upper: vec![1.0, 1.0, 10.0],
        initial: InitialData::State(vec![-1.0, 1.0]),
        interval: (0.0, 20.0),
        externally_sourced: false,
        affine_in_params: false,
    }
}

// ---------------------------------------------------------------- blowfly

/// Ṅ = P N(t−τ) exp(−N(t−τ)/N₀) − δ N(t).
struct Blowfly {
    tau: f64,
}

impl VectorField for Blowfly {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        3
    }
    fn delay(&self) -> Option<f64> {
        Some(self.tau)
    }
    fn eval(&self, _t: f64, x: &[f64], lag: &[f64], th: &[f64], o: &mut [f64]) {
        let nl = lag[0];
        o[0] = th[0] * nl * (-nl / th[1]).exp() - th[2] * x[0];
    }
    fn jac_state(&self, _t: f64, _x: &[f64], _lag: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        o[0] = -th[2];
        true
    }
    fn jac_lagged(&self, _t: f64, _x: &[f64], lag: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let nl = lag[0];
        o[0] = th[0] * (-nl / th[1]).exp() * (1.0 - nl / th[1]);
        true
    }
    fn jac_params(&self, _t: f64, x: &[f64], lag: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let nl = lag[0];
        let e = (-nl / th[1]).exp();
        o[0] = nl * e;
        o[1] = th[0] * nl * e * nl / (th[1] * th[1]);
        o[2] = -x[0];
        true
    }
}

/// Delay constant of the blowfly model.
pub const BLOWFLY_TAU: f64 = 14.8;

/// Nicholson blowfly DDE with τ = 14.8 on [40, 218] and a constant history
/// of 1000 on [40 − τ, 40]; reference parameters (7.81, 381.8, 0.154).
pub fn blowfly() -> ModelSpec {
    ModelSpec {
        name: "blowfly".into(),
        field: Arc::new(Blowfly { tau: BLOWFLY_TAU }),
        weak_field: None,
        adjustment: None,
        param_names: names(&["P", "N0", "delta"]),
        true_params: vec![7.81, 381.8, 0.154],
        lower: vec![0.1, 1.0, 1e-3],
        upper: vec![100.0, 1e4, 2.0],
        initial: InitialData::ConstantHistory(vec![1000.0]),
        interval: (40.0, 218.0),
        externally_sourced: true,
        affine_in_params: false,
    }
}

// ---------------------------------------------------------------- linear 2-d

pub type CoefValue = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type CoefGradient = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A coefficient function of (t, θ) and its θ-gradient.
#[derive(Clone)]
pub struct Coefficient {
    pub value: CoefValue,
    pub gradient: CoefGradient,
}

impl Coefficient {
    pub fn new(value: CoefValue, gradient: CoefGradient) -> Self {
        Self { value, gradient }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            value: Arc::new(move |_, _| c),
            gradient: Arc::new(|_, _, g| g.iter_mut().for_each(|v| *v = 0.0)),
        }
    }

    /// c₀ + Σ wᵢ θ_{kᵢ}.
    pub fn affine(c0: f64, terms: Vec<(usize, f64)>) -> Self {
        let t2 = terms.clone();
        Self {
            value: Arc::new(move |_, th| c0 + terms.iter().map(|&(k, w)| w * th[k]).sum::<f64>()),
            gradient: Arc::new(move |_, _, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                for &(k, w) in &t2 {
                    g[k] += w;
                }
            }),
        }
    }
}

/// ẋ₁ = a x₁ + b x₂, ẋ₂ = c x₁ + d x₂ with coefficients in (t, θ).
struct Linear2d {
    coef: [Coefficient; 4],
    p: usize,
}

impl VectorField for Linear2d {
    fn dim(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        self.p
    }
    fn eval(&self, t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) {
        let c: Vec<f64> = self.coef.iter().map(|k| (k.value)(t, th)).collect();
        o[0] = c[0] * x[0] + c[1] * x[1];
        o[1] = c[2] * x[0] + c[3] * x[1];
    }
    fn jac_state(&self, t: f64, _x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        for (i, k) in self.coef.iter().enumerate() {
            o[i] = (k.value)(t, th);
        }
        true
    }
    fn jac_params(&self, t: f64, x: &[f64], _l: &[f64], th: &[f64], o: &mut [f64]) -> bool {
        let p = self.p;
        let mut g = vec![0.0; p];
        o.iter_mut().for_each(|v| *v = 0.0);
        for (i, k) in self.coef.iter().enumerate() {
            (k.gradient)(t, th, &mut g);
            let row = i / 2;
            let xv = x[i % 2];
            for j in 0..p {
                o[row * p + j] += g[j] * xv;
            }
        }
        true
    }
}

/// General two-state linear model.
pub fn linear2d(
    a: Coefficient,
    b: Coefficient,
    c: Coefficient,
    d: Coefficient,
    true_params: Vec<f64>,
    x0: Vec<f64>,
    interval: (f64, f64),
) -> ModelSpec {
    let p = true_params.len();
    ModelSpec {
        name: "linear2d".into(),
        field: Arc::new(Linear2d { coef: [a, b, c, d], p }),
        weak_field: None,
        adjustment: None,
        param_names: (1..=p).map(|i| format!("theta{i}")).collect(),
        true_params,
        lower: vec![-5.0; p],
        upper: vec![5.0; p],
        initial: InitialData::State(x0),
        interval,
        externally_sourced: false,
        affine_in_params: true,
    }
}

/// ẋ₁ = −θ₁x₁ + θ₂x₂, ẋ₂ = −θ₃x₁ − θ₄x₂ on [0, 10] from (1, 0),
/// θ* = (0.3, 1, 1, 0.2): a damped oscillator.
pub fn linear2d_default() -> ModelSpec {
    linear2d(
        Coefficient::affine(0.0, vec![(0, -1.0)]),
        Coefficient::affine(0.0, vec![(1, 1.0)]),
        Coefficient::affine(0.0, vec![(2, -1.0)]),
        Coefficient::affine(0.0, vec![(3, -1.0)]),
        vec![0.3, 1.0, 1.0, 0.2],
        vec![1.0, 0.0],
        (0.0, 10.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odesim::{param_jacobian, state_jacobian};
    use crate::basis::make_sine_basis;
    use crate::quadrature::QuadratureRule;
    use rand::{Rng, SeedableRng};

    fn eval(m: &ModelSpec, t: f64, x: &[f64], lag: &[f64], th: &[f64]) -> Vec<f64> {
        let mut o = vec![0.0; m.dim()];
        m.field.eval(t, x, lag, th, &mut o);
        o
    }

    #[test]
    fn direct_evaluations() {
        let ap = alpha_pinene();
        let th = ap.true_params.clone();
        let f = eval(&ap, 0.0, &[100.0, 0.0, 0.0, 0.0, 0.0], &[], &th);
        assert!((f[0] + (th[0] + th[1]) * 100.0).abs() < 1e-12);
        assert!(eval(&ap, 3.0, &[0.0; 5], &[], &th).iter().all(|v| *v == 0.0));

        let r = ricatti(false);
        let th = [0.11, 0.09, 2.0, 5.0];
        assert!((eval(&r, 0.0, &[-1.0], &[], &th)[0] - 0.11).abs() < 1e-15);
        assert!((eval(&r, 9.0, &[0.0], &[], &th)[0] + 1.73).abs() < 1e-12);

        let fhn = fitzhugh_nagumo();
        assert_eq!(eval(&fhn, 0.0, &[0.0, 0.0], &[], &[0.0, 0.2, 3.0]), vec![0.0, 0.0]);

        let bf = blowfly();
        let th = bf.true_params.clone();
        assert!((eval(&bf, 0.0, &[200.0], &[0.0], &th)[0] + th[2] * 200.0).abs() < 1e-12);
        let n0 = th[1];
        let v = eval(&bf, 0.0, &[200.0], &[n0], &th)[0];
        assert!((v - (th[0] * n0 / std::f64::consts::E - th[2] * 200.0)).abs() < 1e-9);
        assert_eq!(th, vec![7.81, 381.8, 0.154]);

        let osc = linear2d(
            Coefficient::constant(0.0),
            Coefficient::constant(1.0),
            Coefficient::constant(1.0),
            Coefficient::constant(0.0),
            vec![],
            vec![1.0, 0.0],
            (0.0, 1.0),
        );
        assert_eq!(eval(&osc, 0.3, &[1.0, 0.0], &[], &[]), vec![0.0, 1.0]);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for name in MODEL_NAMES {
            let m = model_by_name(name).unwrap();
            let d = m.dim();
            for _ in 0..20 {
                let t = rng.random_range(m.interval.0 + 0.1..m.interval.1 - 0.1);
                let scale = m.initial.values().iter().fold(1.0f64, |a, v| a.max(v.abs()));
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
                let lag: Vec<f64> = if m.delay().is_some() {
                    (0..d).map(|_| rng.random_range(0.0..2.0) * scale).collect()
                } else {
                    Vec::new()
                };
                let th: Vec<f64> = m
                    .true_params
                    .iter()
                    .map(|v| v * rng.random_range(0.8..1.2))
                    .collect();
                // keep away from the change point where θ-derivatives are singular
                if m.field.discontinuities(&th).iter().any(|&s| (s - t).abs() < 0.05) {
                    continue;
                }
                let mut buf = vec![0.0; d * d];
                assert!(m.field.jac_state(t, &x, &lag, &th, &mut buf));
                let analytic = DMatrix::from_row_slice(d, d, &buf);
                struct NoJac<'a>(&'a dyn VectorField);
                impl VectorField for NoJac<'_> {
                    fn dim(&self) -> usize {
                        self.0.dim()
                    }
                    fn n_params(&self) -> usize {
                        self.0.n_params()
                    }
                    fn eval(&self, t: f64, x: &[f64], l: &[f64], th: &[f64], o: &mut [f64]) {
                        self.0.eval(t, x, l, th, o)
                    }
                    fn delay(&self) -> Option<f64> {
                        self.0.delay()
                    }
                }
                let plain = NoJac(m.field.as_ref());
                let fd = state_jacobian(&plain, t, &x, &lag, &th);
                let tol = 1e-5 * crate::linalg::max_abs(&analytic).max(1.0);
                assert!(crate::linalg::max_abs(&(&analytic - &fd)) < tol, "{name} jac_state");
                let analytic = param_jacobian(m.field.as_ref(), t, &x, &lag, &th);
                let fd = param_jacobian(&plain, t, &x, &lag, &th);
                let tol = 1e-5 * crate::linalg::max_abs(&analytic).max(1.0);
                assert!(crate::linalg::max_abs(&(&analytic - &fd)) < tol, "{name} jac_params");
                if !lag.is_empty() {
                    let a = crate::odesim::lagged_jacobian(m.field.as_ref(), t, &x, &lag, &th);
                    let f = crate::odesim::lagged_jacobian(&plain, t, &x, &lag, &th);
                    assert!(crate::linalg::max_abs(&(&a - &f)) < 1e-5 * crate::linalg::max_abs(&a).max(1.0));
                }
            }
        }
    }

    #[test]
    fn change_point_term_matches_quadrature() {
        let m = ricatti(false);
        let basis = make_sine_basis(6, (0.0, 14.0)).unwrap();
        let th = [0.11, 0.09, 2.0, 5.3];
        let mut analytic = vec![0.0; 6];
        m.adjustment.as_ref().unwrap().add_value(0, &basis, &th, &mut analytic);
        let rule = QuadratureRule::with_breaks(0.0, 14.0, 400, 6, &[5.3]).unwrap();
        for l in 0..6 {
            let direct = rule
                .integrate(|t| {
                    let ind = if t >= 5.3 { 1.0 } else { 0.0 };
                    -2.0 * ind * basis.eval_member(l, t, Order::Value).unwrap()
                })
                .unwrap();
            assert!((direct - analytic[l]).abs() < 1e-9);
        }
    }

    #[test]
    fn registry() {
        for name in MODEL_NAMES {
            let m = model_by_name(name).unwrap();
            m.check_params(&m.true_params).unwrap();
            assert_eq!(m.lower.len(), m.n_params());
        }
        assert!(matches!(model_by_name("nope"), Err(ModelError::UnknownModel(_))));
    }
}
