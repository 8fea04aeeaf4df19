//! Parameter estimation for ordinary and delay differential equations
//! from the weak (variational) form: a spline proxy of the trajectory is
//! plugged into a finite set of orthogonal conditions
//! ⟨f(·, ĝ, θ), φ_ℓ⟩ + ⟨ĝ, φ̇_ℓ⟩, which are then driven to zero in θ.
//!
//! Two-step gradient matching and nonlinear least squares are provided
//! as baselines, along with a Monte Carlo harness for comparing them.

// `!(a > b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod basis;
pub mod conditions;
pub mod curve;
pub mod linalg;
pub mod lm;
pub mod mc;
pub mod models;
pub mod oc_estimator;
pub mod odesim;
pub mod quadrature;
pub mod smoother;
pub mod stats;

pub use baselines::{nls_estimate, ts_estimate, BaselineError, BaselineEstimate, NlsInitial, NlsSettings, WeightFunction};
pub use basis::{make_bspline_testfuncs, make_sine_basis, uniform_bspline_testfuncs, BSplineBasis, BoundaryFlags, KnotVector, Order, TestFunctionBasis, TestFunctionKind};
pub use conditions::{BoundaryData, ConditionError, ConditionSet, RightBoundary};
pub use curve::{Curve, FnCurve};
pub use lm::{LmSettings, Termination};
pub use mc::{generate_data, run_experiment, ExperimentConfig, MCReport, McError};
pub use models::{model_by_name, InitialData, ModelError, ModelSpec, MODEL_NAMES};
pub use oc_estimator::{
    condition_covariance, estimate, estimator_covariance, minimize, select_l, weighted_two_stage, OCEstimate, OcError, OcSettings, WeightMatrix,
};
pub use odesim::{dde_solve, rk4_solve, OdeError, SolverSettings, Trajectory, VectorField};
pub use quadrature::{QuadratureRule, QuadratureSettings};
pub use smoother::{fit, gcv_select, BoundaryConstraint, Observations, SplineFit};
