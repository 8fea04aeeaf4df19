//! Regression-spline smoothing of observed trajectories.
//!
//! Each state dimension is fit by least squares on a shared B-spline basis.
//! The fit keeps what the variance formulas need: the design matrix, the
//! (possibly constrained) generalized inverse of the normal matrix and the
//! per-dimension residual variances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError, KnotVector, Order};
use crate::curve::Curve;
use crate::linalg::{pinv, PINV_RTOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmootherError {
    #[error("observation times must be strictly increasing and finite")]
    UnsortedTimes,
    #[error("observation values must be finite")]
    NonFiniteValue,
    #[error("{rows} value rows for {times} observation times")]
    ShapeMismatch { rows: usize, times: usize },
    #[error("need more observations than basis functions (n = {n}, K = {k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("observation time {0} lies outside the knot interval")]
    OutsideInterval(f64),
    #[error("constraint point {0} lies outside the knot interval")]
    ConstraintOutsideDomain(f64),
    #[error("constraint has {got} values for {dim} dimensions")]
    ConstraintDimension { got: usize, dim: usize },
    #[error("constraint row is not identifiable from the data")]
    DegenerateConstraint,
    #[error("no candidate knot count given")]
    EmptyCandidates,
    #[error("no candidate knot count is admissible for n = {0}")]
    NoAdmissibleCandidate(usize),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Observation times and an n × d value matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl Observations {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self, SmootherError> {
        if values.nrows() != times.len() {
            return Err(SmootherError::ShapeMismatch {
                rows: values.nrows(),
                times: times.len(),
            });
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmootherError::UnsortedTimes);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SmootherError::NonFiniteValue);
        }
        Ok(Self { times, values })
    }

    /// From rows `[y_1, …, y_d]`, one per time.
    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self, SmootherError> {
        let d = rows.first().map_or(0, |r| r.len());
        let mut values = DMatrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(SmootherError::ShapeMismatch {
                    rows: r.len(),
                    times: d,
                });
            }
            for (j, v) in r.iter().enumerate() {
                values[(i, j)] = *v;
            }
        }
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    /// Sub-sample keeping the observations with `lo ≤ t ≤ hi`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Result<Self, SmootherError> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.times[i] >= lo && self.times[i] <= hi)
            .collect();
        let times = idx.iter().map(|&i| self.times[i]).collect();
        let values = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.values[(idx[r], c)]);
        Self::new(times, values)
    }
}

/// Known state value at one time, imposed exactly on every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConstraint {
    pub t: f64,
    pub values: Vec<f64>,
}

/// A least-squares spline fit of every dimension on one basis.
#[derive(Debug, Clone)]
pub struct SplineFit {
    basis: BSplineBasis,
    times: Vec<f64>,
    design: DMatrix<f64>,
    // maps Pᵀy to ĉ (minus the constraint offset); V(ĉ_j) = σ̂²_j · g
    g: DMatrix<f64>,
    coefficients: DMatrix<f64>,
    hat_trace: f64,
    rss: Vec<f64>,
    sigma2: Vec<f64>,
    rank: usize,
    constraint: Option<BoundaryConstraint>,
}

/// Least-squares spline fit of `obs` on the B-spline basis of `knots`.
pub fn fit(
    obs: &Observations,
    knots: &KnotVector,
    constraint: Option<&BoundaryConstraint>,
) -> Result<SplineFit, SmootherError> {
    let basis = BSplineBasis::new(knots.clone());
    let (a, b) = basis.domain();
    let slack = 1e-12 * (b - a).max(1.0);
    for &t in obs.times() {
        if t < a - slack || t > b + slack {
            return Err(SmootherError::OutsideInterval(t));
        }
    }
    let n = obs.len();
    let k = basis.len();
    if n <= k {
        return Err(SmootherError::TooFewObservations { n, k });
    }
    let p = basis.design_matrix(obs.times(), Order::Value)?;
    let pt = p.transpose();
    let normal = &pt * &p;
    let (ninv, rank) = pinv(&normal, PINV_RTOL);
    let pty = &pt * obs.values();
    let mut coefficients = &ninv * &pty;
    let mut g = ninv.clone();
    if let Some(con) = constraint {
        if con.values.len() != obs.dim() {
            return Err(SmootherError::ConstraintDimension {
                got: con.values.len(),
                dim: obs.dim(),
            });
        }
        if con.t < a - slack || con.t > b + slack {
            return Err(SmootherError::ConstraintOutsideDomain(con.t));
        }
        let row = DMatrix::from_row_slice(1, k, &basis.eval(con.t, Order::Value)?);
        let nc = &ninv * row.transpose(); // K × 1
        let denom = (&row * &nc)[(0, 0)];
        if !(denom > 1e-14 * crate::linalg::max_abs(&ninv)) {
            return Err(SmootherError::DegenerateConstraint);
        }
        for j in 0..obs.dim() {
            let gap = (&row * coefficients.column(j))[(0, 0)] - con.values[j];
            let corr = &nc * (gap / denom);
            let mut col = coefficients.column_mut(j);
            col -= corr.column(0);
        }
        g -= &nc * nc.transpose() / denom;
    }
    let fitted = &p * &coefficients;
    let resid = obs.values() - &fitted;
    let hat_trace = (&normal * &g).trace();
    let dof = n as f64 - hat_trace;
    if !(dof > 0.0) {
        return Err(SmootherError::TooFewObservations { n, k });
    }
    let rss: Vec<f64> = (0..obs.dim()).map(|j| resid.column(j).norm_squared()).collect();
    let sigma2 = rss.iter().map(|r| r / dof).collect();
    Ok(SplineFit {
        basis,
        times: obs.times().to_vec(),
        design: p,
        g,
        coefficients,
        hat_trace,
        rss,
        sigma2,
        rank,
        constraint: constraint.cloned(),
    })
}

/// GCV(K) = Σ_j n·RSS_j / (n − tr H)².
pub fn gcv_score(fit: &SplineFit) -> f64 {
    let n = fit.times.len() as f64;
    let denom = (n - fit.hat_trace).powi(2);
    fit.rss.iter().map(|r| n * r / denom).sum()
}

/// Uniform knot vector minimizing GCV over `candidates` (interior knot
/// counts). `forced` knots are added to every candidate. Candidates with
/// n ≤ K are skipped; near-ties go to the smaller count.
pub fn gcv_select(
    obs: &Observations,
    domain: (f64, f64),
    degree: usize,
    candidates: &[usize],
    forced: &[f64],
    constraint: Option<&BoundaryConstraint>,
) -> Result<KnotVector, SmootherError> {
    if candidates.is_empty() {
        return Err(SmootherError::EmptyCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = obs.len() as f64;
    let scale: f64 = (0..obs.dim())
        .map(|j| obs.values().column(j).norm_squared() / n)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, KnotVector)> = None;
    for &count in &sorted {
        let knots = KnotVector::uniform(domain.0, domain.1, count, degree)?.with_extra_knots(forced)?;
        if knots.basis_count() >= obs.len() {
            continue;
        }
        let f = match fit(obs, &knots, constraint) {
            Ok(f) => f,
            Err(SmootherError::TooFewObservations { .. }) => continue,
            Err(e) => return Err(e),
        };
        let score = gcv_score(&f);
        let better = match &best {
            None => true,
            Some((s, _)) => score < *s - 1e-12 * scale,
        };
        if better {
            best = Some((score, knots));
        }
    }
    best.map(|(_, k)| k).ok_or(SmootherError::NoAdmissibleCandidate(obs.len()))
}

/// Values (order 0) or derivatives (order 1) of the fit on `grid`,
/// one row per grid point.
pub fn eval_fit(fit: &SplineFit, grid: &[f64], order: Order) -> Result<DMatrix<f64>, SmootherError> {
    let p = fit.basis.design_matrix(grid, order)?;
    Ok(p * &fit.coefficients)
}

/// Hat matrix H with fitted values = H·Y (plus the constraint offset).
pub fn hat_matrix(fit: &SplineFit) -> DMatrix<f64> {
    &fit.design * &fit.g * fit.design.transpose()
}

impl SplineFit {
    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn knots(&self) -> &KnotVector {
        self.basis.knots()
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn coefficient_count(&self) -> usize {
        self.basis.len()
    }

    pub fn hat_trace(&self) -> f64 {
        self.hat_trace
    }

    pub fn rss(&self) -> &[f64] {
        &self.rss
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn constraint(&self) -> Option<&BoundaryConstraint> {
        self.constraint.as_ref()
    }

    /// Unscaled coefficient covariance, shared by all dimensions.
    pub fn unscaled_covariance(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// V(ĉ_j) = σ̂²_j · G.
    pub fn coefficient_covariance(&self, j: usize) -> DMatrix<f64> {
        &self.g * self.sigma2[j]
    }

    /// Same fit with the residual variances replaced, e.g. by known noise levels.
    pub fn with_sigma2(mut self, sigma2: Vec<f64>) -> Self {
        assert_eq!(sigma2.len(), self.sigma2.len());
        self.sigma2 = sigma2;
        self
    }

    pub fn fitted(&self) -> DMatrix<f64> {
        &self.design * &self.coefficients
    }

    pub fn eval(&self, grid: &[f64], order: Order) -> Result<DMatrix<f64>, SmootherError> {
        eval_fit(self, grid, order)
    }

    fn eval_point(&self, t: f64, order: Order, out: &mut [f64]) {
        let (a, b) = self.basis.domain();
        let t = t.clamp(a, b);
        let row = self.basis.eval(t, order).expect("clamped into domain");
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.coefficients.column(j).iter().zip(&row).map(|(c, r)| c * r).sum();
        }
    }
}

impl Curve for SplineFit {
    fn dim(&self) -> usize {
        self.coefficients.ncols()
    }

    fn domain(&self) -> (f64, f64) {
        self.basis.domain()
    }

    fn value_into(&self, t: f64, out: &mut [f64]) {
        self.eval_point(t, Order::Value, out)
    }

    fn derivative_into(&self, t: f64, out: &mut [f64]) {
        self.eval_point(t, Order::Derivative, out)
    }
}
