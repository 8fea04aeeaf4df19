//! The orthogonal-conditions estimator: minimization of ‖e_L‖²_W, the
//! asymptotic covariance of the estimate and the choice of L.
//!
//! The weighted covariance uses the textbook GMM sandwich
//! (JᵀWJ)⁻¹JᵀW V_e W J(JᵀWJ)⁻¹, which reduces to M V_e Mᵀ with
//! M = (JᵀJ)⁻¹Jᵀ for the identity weight.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::conditions::{BoundConditions, ConditionError, ConditionSet};
use crate::curve::Curve;
use crate::linalg::{cholesky_upper, inverse_spd, lstsq, pinv, singular_values, symmetrize};
use crate::lm::{levenberg_marquardt, multistart_points, Bounds, LmError, LmSettings, Termination};
use crate::models::{InitialData, ModelError};
use crate::odesim::{dde_solve, HistoryFunction, SolverSettings};
use crate::smoother::{Observations, SplineFit};
use crate::stats::{chi2_quantile, two_sided_z};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcError {
    #[error(transparent)]
    Conditions(#[from] ConditionError),
    #[error(transparent)]
    Optimizer(#[from] LmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Jacobian is rank deficient at the optimum (singular values {singular_values:?})")]
    RankDeficient { theta: Vec<f64>, singular_values: Vec<f64> },
    #[error("optimizer stopped after {iterations} iterations without converging")]
    NotConverged { iterations: usize, theta: Vec<f64> },
    #[error("weight matrix has dimension {got}, conditions have {expected}")]
    WeightDimension { got: usize, expected: usize },
    #[error("no candidate condition sets")]
    NoCandidates,
    #[error("every candidate failed: {0:?}")]
    AllCandidatesFailed(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    Identity,
    InverseConditionCovariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: DMatrix<f64>,
    kind: WeightKind,
    ridge: f64,
    // upper factor R with W = RᵀR
    root: Option<DMatrix<f64>>,
}

/// Relative ridge added before inverting a condition covariance.
pub const WEIGHT_RIDGE: f64 = 1e-10;

impl WeightMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            kind: WeightKind::Identity,
            ridge: 0.0,
            root: None,
        }
    }

    /// (V + ridge·I)⁻¹ with ridge = 1e-10·tr(V)/L.
    pub fn inverse_of(v: &DMatrix<f64>) -> Self {
        let n = v.nrows();
        let trace = v.trace().max(0.0);
        let mut ridge = WEIGHT_RIDGE * trace / n.max(1) as f64;
        if !(ridge > 0.0) {
            ridge = f64::MIN_POSITIVE.sqrt();
        }
        let mut reg = symmetrize(v);
        for i in 0..n {
            reg[(i, i)] += ridge;
        }
        let mut w = symmetrize(&inverse_spd(&reg));
        let mut root = cholesky_upper(&w);
        if root.is_none() {
            // pseudo-inverse fallback lost definiteness; lift the spectrum
            let eig = w.clone().symmetric_eigen();
            let floor = eig.eigenvalues.amax() * 1e-14;
            let vals = eig.eigenvalues.map(|x| x.max(floor));
            w = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()));
            root = cholesky_upper(&w);
        }
        Self {
            matrix: w,
            kind: WeightKind::InverseConditionCovariance,
            ridge,
            root,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn whiten_vec(&self, e: DVector<f64>) -> DVector<f64> {
        match &self.root {
            Some(r) => r * e,
            None => e,
        }
    }

    fn whiten_mat(&self, j: DMatrix<f64>) -> DMatrix<f64> {
        match &self.root {
            Some(r) => r * j,
            None => j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSettings {
    pub lm: LmSettings,
    /// Confidence level of the reported intervals.
    pub level: f64,
    /// Cross-dimension noise covariance; diag(σ̂²) from the fit by default.
    pub noise_covariance: Option<Vec<Vec<f64>>>,
    /// Singular-value ratio below which the column-scaled Jacobian counts
    /// as rank deficient.
    pub rank_rtol: f64,
    /// Additional random starts for non-affine problems.
    pub extra_starts: usize,
    pub start_dispersion: f64,
    pub seed: u64,
}

impl Default for OcSettings {
    fn default() -> Self {
        Self {
            lm: LmSettings::default(),
            level: 0.95,
            noise_covariance: None,
            rank_rtol: 1e-10,
            extra_starts: 0,
            start_dispersion: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolvePath {
    /// One linear least-squares solve (affine conditions, interior optimum).
    Linear,
    Iterative,
}

/// Minimizer of ‖e_L(g, θ)‖²_W on a bound curve.
#[derive(Debug, Clone)]
pub struct ConditionFit {
    pub theta: Vec<f64>,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub objective: f64,
    /// ‖JᵀWe‖ at θ̂.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub step_norm: f64,
    pub termination: Termination,
    pub path: SolvePath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OCEstimate {
    pub theta: Vec<f64>,
    pub members: usize,
    pub residual: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub condition_covariance: DMatrix<f64>,
    pub m_matrix: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    /// Singular values of the column-normalized Jacobian.
    pub singular_values: Vec<f64>,
    pub iterations: usize,
    pub step_norm: f64,
    pub termination: Termination,
    pub path: SolvePath,
    pub weight: WeightKind,
    pub warnings: Vec<String>,
}

impl OCEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.theta.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Whether `value` lies in the i-th interval. Degenerate (zero-width)
    /// intervals count as hits.
    pub fn interval_covers(&self, i: usize, value: f64) -> bool {
        interval_hit(self.intervals[i], value)
    }

    /// Whether `theta` lies in the joint ellipse at the estimate's level.
    pub fn ellipse_covers(&self, theta: &[f64]) -> bool {
        ellipse_hit(&self.theta, &self.covariance, theta, self.level)
    }
}

pub fn interval_hit(interval: (f64, f64), value: f64) -> bool {
    if interval.1 - interval.0 <= 0.0 {
        return true;
    }
    value >= interval.0 && value <= interval.1
}

/// (θ̂ − θ)ᵀ V⁺ (θ̂ − θ) ≤ χ²_p(level); a zero covariance counts as a hit.
pub fn ellipse_hit(center: &[f64], cov: &DMatrix<f64>, theta: &[f64], level: f64) -> bool {
    let p = center.len();
    if cov.amax() == 0.0 {
        return true;
    }
    let d = DVector::from_iterator(p, (0..p).map(|i| center[i] - theta[i]));
    let (vi, _) = pinv(cov, 1e-12);
    let q = d.dot(&(vi * &d));
    q <= chi2_quantile(p, level)
}

fn check_weight(bound: &BoundConditions, weight: &WeightMatrix) -> Result<(), OcError> {
    if weight.len() != bound.len() {
        return Err(OcError::WeightDimension {
            got: weight.len(),
            expected: bound.len(),
        });
    }
    Ok(())
}

fn box_of(set: &ConditionSet) -> Bounds {
    Bounds {
        lower: set.model().lower.clone(),
        upper: set.model().upper.clone(),
    }
}

/// Midpoint of the parameter box.
pub fn box_midpoint(set: &ConditionSet) -> Vec<f64> {
    let m = set.model();
    m.lower.iter().zip(&m.upper).map(|(l, u)| 0.5 * (l + u)).collect()
}

fn finish_fit(bound: &BoundConditions, weight: &WeightMatrix, theta: Vec<f64>, iterations: usize, step_norm: f64, termination: Termination, path: SolvePath) -> Result<ConditionFit, OcError> {
    let e = bound.eval(&theta)?;
    let j = bound.jacobian(&theta)?;
    let we = weight.matrix() * &e;
    let gradient_norm = (j.transpose() * &we).norm();
    let objective = e.dot(&we);
    Ok(ConditionFit {
        theta,
        residual: e,
        jacobian: j,
        objective,
        gradient_norm,
        iterations,
        step_norm,
        termination,
        path,
    })
}

/// Closed-form minimizer for affine conditions:
/// θ = θ_ref − (JᵀWJ)⁻¹JᵀW e(θ_ref), not projected.
pub fn linear_solve(bound: &BoundConditions, theta_ref: &[f64], weight: &WeightMatrix) -> Result<Vec<f64>, OcError> {
    check_weight(bound, weight)?;
    let e = weight.whiten_vec(bound.eval(theta_ref)?);
    let j = weight.whiten_mat(bound.jacobian(theta_ref)?);
    let (delta, _) = lstsq(&j, &(-e));
    Ok(theta_ref.iter().zip(delta.iter()).map(|(t, d)| t + d).collect())
}

/// Levenberg-Marquardt on the whitened conditions from `theta_init`.
pub fn iterative_solve(bound: &BoundConditions, theta_init: &[f64], weight: &WeightMatrix, lm: &LmSettings) -> Result<ConditionFit, OcError> {
    check_weight(bound, weight)?;
    let bounds = box_of(bound.set());
    let rep = levenberg_marquardt(
        |th| bound.eval(th).ok().map(|e| weight.whiten_vec(e)),
        |th, _| bound.jacobian(th).ok().map(|j| weight.whiten_mat(j)),
        theta_init,
        &bounds,
        lm,
    )?;
    if !rep.converged() {
        return Err(OcError::NotConverged {
            iterations: rep.iterations,
            theta: rep.x,
        });
    }
    finish_fit(bound, weight, rep.x, rep.iterations, rep.step_norm, rep.termination, SolvePath::Iterative)
}

/// Minimizes ‖e_L‖²_W on a bound curve. Affine systems take the linear
/// path whenever the solution is inside the box; otherwise LM runs from
/// `theta_init` (box midpoint by default) plus any extra starts.
pub fn solve_conditions(bound: &BoundConditions, theta_init: Option<&[f64]>, weight: &WeightMatrix, settings: &OcSettings) -> Result<ConditionFit, OcError> {
    check_weight(bound, weight)?;
    let set = bound.set();
    let bounds = box_of(set);
    let center = match theta_init {
        Some(t) => {
            let mut t = t.to_vec();
            bounds.project(&mut t);
            t
        }
        None => box_midpoint(set),
    };
    if set.is_affine() {
        let theta = linear_solve(bound, &center, weight)?;
        if set.model().check_params(&theta).is_ok() {
            return finish_fit(bound, weight, theta, 0, 0.0, Termination::Gradient, SolvePath::Linear);
        }
        let mut start = theta;
        bounds.project(&mut start);
        return iterative_solve(bound, &start, weight, &settings.lm);
    }
    let starts = multistart_points(&center, &bounds, 1 + settings.extra_starts, settings.start_dispersion, settings.seed);
    let mut best: Option<ConditionFit> = None;
    let mut last_err = None;
    for s in &starts {
        match iterative_solve(bound, s, weight, &settings.lm) {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.objective < b.objective) {
                    best = Some(f);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start"))
}

/// Singular values of J with unit-norm columns.
pub fn scaled_singular_values(j: &DMatrix<f64>) -> Vec<f64> {
    let mut js = j.clone();
    for mut c in js.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    singular_values(&js)
}

fn rank_deficient(sv: &[f64], rtol: f64) -> bool {
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) => !(hi > 0.0) || lo < rtol * hi,
        _ => true,
    }
}

fn noise_matrix(fit: &SplineFit, noise: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match noise {
        Some(s) => s.clone(),
        None => DMatrix::from_diagonal(&DVector::from_row_slice(fit.sigma2())),
    }
}

/// V̂_{e,L} = Σ_{i,j} Σ_ij D_i G D_jᵀ from the coefficient-direction
/// matrices D_j and the fit's unscaled coefficient covariance G.
pub fn condition_covariance(bound: &BoundConditions, fit: &SplineFit, theta: &[f64], noise: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>, OcError> {
    let ds = bound.coefficient_matrices(fit.basis(), theta)?;
    let g = fit.unscaled_covariance();
    let sigma = noise_matrix(fit, noise);
    let d = ds.len();
    let n = bound.len();
    let mut v = DMatrix::zeros(n, n);
    let dg: Vec<DMatrix<f64>> = ds.iter().map(|di| di * g).collect();
    for i in 0..d {
        for j in 0..d {
            let s = sigma[(i, j)];
            if s != 0.0 {
                v += s * &dg[i] * ds[j].transpose();
            }
        }
    }
    Ok(symmetrize(&v))
}

/// Estimator covariance and intervals.
#[derive(Debug, Clone)]
pub struct CovarianceSummary {
    pub m_matrix: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub intervals: Vec<(f64, f64)>,
}

/// M̂ = (JᵀWJ)⁻¹JᵀW, V̂(θ̂) = M̂ V̂_e M̂ᵀ and θ̂ᵢ ± z·V̂ᵢᵢ^{1/2}.
pub fn estimator_covariance(theta: &[f64], jacobian: &DMatrix<f64>, v_e: &DMatrix<f64>, weight: &WeightMatrix, level: f64) -> CovarianceSummary {
    let jtw = jacobian.transpose() * weight.matrix();
    let info = symmetrize(&(&jtw * jacobian));
    let m = inverse_spd(&info) * jtw;
    let cov = symmetrize(&(&m * v_e * m.transpose()));
    let z = two_sided_z(level);
    let intervals = (0..theta.len())
        .map(|i| {
            let half = z * cov[(i, i)].max(0.0).sqrt();
            (theta[i] - half, theta[i] + half)
        })
        .collect();
    CovarianceSummary {
        m_matrix: m,
        covariance: cov,
        intervals,
    }
}

fn noise_from_settings(settings: &OcSettings) -> Option<DMatrix<f64>> {
    settings.noise_covariance.as_ref().map(|rows| {
        let d = rows.len();
        DMatrix::from_fn(d, d, |i, j| rows[i][j])
    })
}

fn assemble(bound: &BoundConditions, fit: &SplineFit, cf: ConditionFit, weight: &WeightMatrix, settings: &OcSettings) -> Result<OCEstimate, OcError> {
    let sv = scaled_singular_values(&cf.jacobian);
    if rank_deficient(&sv, settings.rank_rtol) {
        return Err(OcError::RankDeficient {
            theta: cf.theta,
            singular_values: sv,
        });
    }
    let noise = noise_from_settings(settings);
    let v_e = condition_covariance(bound, fit, &cf.theta, noise.as_ref())?;
    let cs = estimator_covariance(&cf.theta, &cf.jacobian, &v_e, weight, settings.level);
    Ok(OCEstimate {
        theta: cf.theta,
        members: bound.set().members(),
        residual: cf.residual,
        objective: cf.objective,
        gradient_norm: cf.gradient_norm,
        condition_covariance: v_e,
        m_matrix: cs.m_matrix,
        covariance: cs.covariance,
        intervals: cs.intervals,
        level: settings.level,
        singular_values: sv,
        iterations: cf.iterations,
        step_norm: cf.step_norm,
        termination: cf.termination,
        path: cf.path,
        weight: weight.kind(),
        warnings: Vec::new(),
    })
}

/// OC estimate on a spline fit with a given weight.
pub fn minimize(set: &ConditionSet, fit: &SplineFit, theta_init: Option<&[f64]>, weight: &WeightMatrix, settings: &OcSettings) -> Result<OCEstimate, OcError> {
    let bound = set.bind_fit(fit)?;
    let cf = solve_conditions(&bound, theta_init, weight, settings)?;
    assemble(&bound, fit, cf, weight, settings)
}

/// Identity-weight OC estimate.
pub fn estimate(set: &ConditionSet, fit: &SplineFit, theta_init: Option<&[f64]>, settings: &OcSettings) -> Result<OCEstimate, OcError> {
    minimize(set, fit, theta_init, &WeightMatrix::identity(set.len()), settings)
}

/// OC estimate on an arbitrary curve (no covariance).
pub fn estimate_on_curve(set: &ConditionSet, curve: &dyn Curve, breaks: &[f64], theta_init: Option<&[f64]>, settings: &OcSettings) -> Result<ConditionFit, OcError> {
    let bound = set.bind(curve, breaks)?;
    solve_conditions(&bound, theta_init, &WeightMatrix::identity(set.len()), settings)
}

/// Stage 1 with the identity weight, stage 2 with W = (V̂_e(θ̂₁) + ridge)⁻¹.
pub fn weighted_two_stage(set: &ConditionSet, fit: &SplineFit, theta_init: Option<&[f64]>, settings: &OcSettings) -> Result<OCEstimate, OcError> {
    let bound = set.bind_fit(fit)?;
    let identity = WeightMatrix::identity(set.len());
    let first = solve_conditions(&bound, theta_init, &identity, settings)?;
    let noise = noise_from_settings(settings);
    let v1 = condition_covariance(&bound, fit, &first.theta, noise.as_ref())?;
    let w = WeightMatrix::inverse_of(&v1);
    let second = solve_conditions(&bound, Some(&first.theta), &w, settings)?;
    assemble(&bound, fit, second, &w, settings)
}

/// Result of the L sweep.
#[derive(Debug, Clone)]
pub struct LSelection {
    pub best: OCEstimate,
    pub index: usize,
    pub members: Vec<usize>,
    /// Prediction SSE per candidate; +∞ for blow-ups and failures.
    pub scores: Vec<f64>,
    pub failures: Vec<(usize, String)>,
}

/// Prediction SSE Σᵢ‖yᵢ − φ(tᵢ, φ̂₀, θ)‖², started from the fitted curve.
/// Delay models use the fit on [t₀, t₀ + τ] as history and score the
/// observations after t₀ + τ.
pub fn prediction_sse(set: &ConditionSet, fit: &SplineFit, obs: &Observations, theta: &[f64], solver: &SolverSettings) -> f64 {
    let model = set.model();
    let t0 = fit.knots().start().max(model.t0());
    let traj = match model.delay() {
        None => {
            let x0 = fit.value(t0);
            let m = model.clone().with_interval((t0, model.interval.1));
            let Ok(sub) = obs.restrict(t0, f64::INFINITY) else {
                return f64::INFINITY;
            };
            m.simulate(theta, &InitialData::State(x0), sub.times(), solver).map(|t| (t, sub))
        }
        Some(tau) => {
            let start = t0 + tau;
            let Ok(sub) = obs.restrict(start, f64::INFINITY) else {
                return f64::INFINITY;
            };
            let curve: Arc<dyn Curve> = Arc::new(fit.clone());
            match HistoryFunction::new(curve, start, tau) {
                Ok(h) => dde_solve(model.field.as_ref(), theta, &h, sub.times(), solver).map(|t| (t, sub)),
                Err(e) => Err(e),
            }
        }
    };
    let Ok((traj, sub)) = traj else {
        return f64::INFINITY;
    };
    if traj.blew_up() || traj.len() != sub.len() {
        return f64::INFINITY;
    }
    let y = sub.values();
    let mut sse = 0.0;
    for (i, s) in traj.states.iter().enumerate() {
        for (j, v) in s.iter().enumerate() {
            sse += (y[(i, j)] - v).powi(2);
        }
    }
    if sse.is_finite() {
        sse
    } else {
        f64::INFINITY
    }
}

/// Fits every candidate set and keeps the one with the smallest prediction
/// SSE; ties go to the smaller L.
pub fn select_l(
    sets: &[ConditionSet],
    fit: &SplineFit,
    obs: &Observations,
    theta_init: Option<&[f64]>,
    settings: &OcSettings,
    weighted: bool,
    solver: &SolverSettings,
) -> Result<LSelection, OcError> {
    if sets.is_empty() {
        return Err(OcError::NoCandidates);
    }
    let runs: Vec<Result<OCEstimate, OcError>> = sets
        .par_iter()
        .map(|set| {
            if weighted {
                weighted_two_stage(set, fit, theta_init, settings)
            } else {
                estimate(set, fit, theta_init, settings)
            }
        })
        .collect();
    if sets.len() == 1 {
        return match runs.into_iter().next().unwrap() {
            Ok(best) => Ok(LSelection {
                members: vec![best.members],
                best,
                index: 0,
                scores: vec![f64::NAN],
                failures: Vec::new(),
            }),
            Err(e) => Err(e),
        };
    }
    let scores: Vec<f64> = runs
        .par_iter()
        .zip(sets.par_iter())
        .map(|(r, set)| match r {
            Ok(est) => prediction_sse(set, fit, obs, &est.theta, solver),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let mut failures = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        if let Err(e) = r {
            failures.push((i, e.to_string()));
        }
    }
    let mut index = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        match index {
            None => index = Some(i),
            Some(b) => {
                let sb: f64 = scores[b];
                if s < sb - 1e-12 * sb.abs().max(f64::MIN_POSITIVE) {
                    index = Some(i);
                }
            }
        }
    }
    let Some(index) = index else {
        return Err(OcError::AllCandidatesFailed(
            runs.iter()
                .map(|r| match r {
                    Ok(_) => "prediction blew up".to_string(),
                    Err(e) => e.to_string(),
                })
                .collect(),
        ));
    };
    let members: Vec<usize> = sets.iter().map(|s| s.members()).collect();
    let mut best = runs[index].clone().expect("finite score implies success");
    let se = best.standard_errors();
    for (i, r) in runs.iter().enumerate() {
        if let Ok(e) = r {
            if i != index && e.theta.iter().zip(&best.theta).zip(&se).any(|((a, b), s)| (a - b).abs() > *s && *s > 0.0) {
                best.warnings.push(format!(
                    "estimate drifts by more than one standard error between L = {} and L = {}; interval coverage may be affected by bias",
                    members[i], members[index]
                ));
                break;
            }
        }
    }
    Ok(LSelection {
        best,
        index,
        members,
        scores,
        failures,
    })
}
