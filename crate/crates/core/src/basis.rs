//! Knot vectors, B-spline bases and test-function families.
//!
//! Two families of test functions are provided: the sine basis of H¹₀ mapped
//! affinely onto the working interval, and B-spline test functions
//! orthonormalized in L² by modified Gram-Schmidt. Both expose exact values,
//! first derivatives and antiderivatives (anchored at the left endpoint).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::quadrature::{gauss_legendre, QuadratureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("test-function count must be positive")]
    EmptyBasis,
    #[error("degenerate interval [{0}, {1}]")]
    DegenerateInterval(f64, f64),
    #[error("knot {0} lies outside the open interval ({1}, {2})")]
    KnotOutsideInterval(f64, f64, f64),
    #[error("interior knots must be non-decreasing")]
    UnsortedKnots,
    #[error("knot {knot} has multiplicity {multiplicity}, above degree + 1 = {max}")]
    KnotMultiplicity {
        knot: f64,
        multiplicity: usize,
        max: usize,
    },
    #[error("{available} interior test functions available, {requested} requested")]
    InsufficientKnots { available: usize, requested: usize },
    #[error("{available} interior test functions available but only {requested} requested; adjust the knot vector")]
    KnotCountMismatch { available: usize, requested: usize },
    #[error("boundary activity is incompatible with this basis: {0}")]
    IncompatibleBoundary(String),
    #[error("evaluation point {0} lies outside the domain [{1}, {2}]")]
    OutsideDomain(f64, f64, f64),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Which derivative to evaluate: the antiderivative vanishing at the left
/// endpoint, the values, or the first derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    Antiderivative,
    Value,
    Derivative,
}

impl Order {
    /// Maps the integer convention −1 / 0 / 1.
    pub fn from_int(order: i32) -> Option<Self> {
        match order {
            -1 => Some(Order::Antiderivative),
            0 => Some(Order::Value),
            1 => Some(Order::Derivative),
            _ => None,
        }
    }
}

const DOMAIN_TOL: f64 = 1e-12;

fn check_in_domain(t: f64, a: f64, b: f64) -> Result<f64, BasisError> {
    let slack = DOMAIN_TOL * (b - a).abs().max(1.0);
    if !(t >= a - slack && t <= b + slack) {
        return Err(BasisError::OutsideDomain(t, a, b));
    }
    Ok(t.clamp(a, b))
}

/// Interval, interior knots and degree. The expanded (clamped) sequence
/// repeats each endpoint `degree + 1` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    start: f64,
    end: f64,
    interior: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(start: f64, end: f64, interior: Vec<f64>, degree: usize) -> Result<Self, BasisError> {
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(BasisError::DegenerateInterval(start, end));
        }
        for &k in &interior {
            if !(k > start && k < end) {
                return Err(BasisError::KnotOutsideInterval(k, start, end));
            }
        }
        if interior.windows(2).any(|w| w[1] < w[0]) {
            return Err(BasisError::UnsortedKnots);
        }
        let mut i = 0;
        while i < interior.len() {
            let mut j = i;
            while j < interior.len() && interior[j] == interior[i] {
                j += 1;
            }
            if j - i > degree + 1 {
                return Err(BasisError::KnotMultiplicity {
                    knot: interior[i],
                    multiplicity: j - i,
                    max: degree + 1,
                });
            }
            i = j;
        }
        Ok(Self {
            start,
            end,
            interior,
            degree,
        })
    }

    /// `count` equally spaced interior knots.
    pub fn uniform(start: f64, end: f64, count: usize, degree: usize) -> Result<Self, BasisError> {
        let h = (end - start) / (count as f64 + 1.0);
        let interior = (1..=count).map(|i| start + h * i as f64).collect();
        Self::new(start, end, interior, degree)
    }

    /// Same interval and degree with additional interior knots merged in.
    pub fn with_extra_knots(&self, extra: &[f64]) -> Result<Self, BasisError> {
        let mut interior = self.interior.clone();
        interior.extend_from_slice(extra);
        interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self::new(self.start, self.end, interior, self.degree)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn basis_count(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    pub fn expanded(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.interior.len() + 2 * (self.degree + 1));
        t.extend(std::iter::repeat_n(self.start, self.degree + 1));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat_n(self.end, self.degree + 1));
        t
    }

    /// Distinct interior break points.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.interior.clone();
        b.dedup();
        b
    }
}

/// Dense B-spline basis on a clamped knot sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knots: KnotVector,
    expanded: Vec<f64>,
    // degree + 1 basis on the sequence with one extra knot at each end
    raised: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(knots: KnotVector) -> Self {
        let expanded = knots.expanded();
        let mut raised = Vec::with_capacity(expanded.len() + 2);
        raised.push(knots.start);
        raised.extend_from_slice(&expanded);
        raised.push(knots.end);
        Self {
            knots,
            expanded,
            raised,
        }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.basis_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn degree(&self) -> usize {
        self.knots.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        self.knots.domain()
    }

    /// Values (or derivative / antiderivative) of all basis functions at `t`.
    pub fn eval_into(&self, t: f64, order: Order, out: &mut [f64]) -> Result<(), BasisError> {
        let (a, b) = self.domain();
        let t = check_in_domain(t, a, b)?;
        let k = self.degree();
        let n = self.len();
        debug_assert_eq!(out.len(), n);
        out.iter_mut().for_each(|v| *v = 0.0);
        match order {
            Order::Value | Order::Derivative => {
                let nd = usize::from(order == Order::Derivative);
                let span = find_span(&self.expanded, k, n, t);
                let ders = basis_derivatives(&self.expanded, span, t, k, nd);
                for (j, v) in ders[nd].iter().enumerate() {
                    out[span - k + j] = *v;
                }
            }
            Order::Antiderivative => {
                let span = find_span(&self.raised, k + 1, n + 1, t);
                let vals = basis_derivatives(&self.raised, span, t, k + 1, 0);
                let mut raised = vec![0.0; n + 1];
                for (j, v) in vals[0].iter().enumerate() {
                    raised[span - (k + 1) + j] = *v;
                }
                // ∫_a^t B_i = (t_{i+k+1} − t_i)/(k+1) · Σ_{j>i} B^raised_j(t)
                let mut tail = 0.0;
                for i in (0..n).rev() {
                    tail += raised[i + 1];
                    let width = self.expanded[i + k + 1] - self.expanded[i];
                    out[i] = width / (k as f64 + 1.0) * tail;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, order: Order) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, order, &mut out)?;
        Ok(out)
    }

    /// Design matrix: rows are points of `grid`, columns basis functions.
    pub fn design_matrix(&self, grid: &[f64], order: Order) -> Result<DMatrix<f64>, BasisError> {
        let n = self.len();
        let mut m = DMatrix::zeros(grid.len(), n);
        let mut row = vec![0.0; n];
        for (i, &t) in grid.iter().enumerate() {
            self.eval_into(t, order, &mut row)?;
            for j in 0..n {
                m[(i, j)] = row[j];
            }
        }
        Ok(m)
    }

    /// Exact L² Gram matrix of the basis (per-span Gauss rule of degree+1 nodes).
    pub fn gram(&self) -> Result<DMatrix<f64>, BasisError> {
        let n = self.len();
        let k = self.degree();
        let (gx, gw) = gauss_legendre(k + 1);
        let mut g = DMatrix::zeros(n, n);
        let mut row = vec![0.0; n];
        let mut edges = vec![self.knots.start];
        edges.extend(self.knots.breakpoints());
        edges.push(self.knots.end);
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (x, wt) in gx.iter().zip(&gw) {
                let t = mid + half * x;
                self.eval_into(t, Order::Value, &mut row)?;
                for i in 0..n {
                    if row[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        g[(i, j)] += half * wt * row[i] * row[j];
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Knot-span index μ with t_μ ≤ x < t_{μ+1}, restricted to non-empty spans.
fn find_span(knots: &[f64], degree: usize, n_basis: usize, x: f64) -> usize {
    let last = n_basis - 1;
    if x >= knots[last + 1] {
        // right endpoint: last non-degenerate span
        let mut s = last;
        while s > degree && knots[s] >= knots[s + 1] {
            s -= 1;
        }
        return s;
    }
    let (mut lo, mut hi) = (degree, last + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Non-zero basis functions of `degree` at `x` on span `span` and their
/// derivatives up to `nd` (table rows).
fn basis_derivatives(knots: &[f64], span: usize, x: f64, degree: usize, nd: usize) -> Vec<Vec<f64>> {
    let p = degree;
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = if ndu[j][r] != 0.0 { ndu[r][j - 1] / ndu[j][r] } else { 0.0 };
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = vec![vec![0.0; p + 1]; nd + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    if nd == 0 {
        return ders;
    }
    let mut a = vec![vec![0.0; p + 1]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=nd.min(p) {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = p - k;
            if r >= k {
                let den = ndu[pk + 1][rk as usize];
                a[s2][0] = if den != 0.0 { a[s1][0] / den } else { 0.0 };
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                let den = ndu[pk + 1][idx];
                a[s2][j] = if den != 0.0 { (a[s1][j] - a[s1][j - 1]) / den } else { 0.0 };
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                let den = ndu[pk + 1][r];
                a[s2][k] = if den != 0.0 { -a[s1][k - 1] / den } else { 0.0 };
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for k in 1..=nd.min(p) {
        for j in 0..=p {
            ders[k][j] *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Family of test functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunctionKind {
    Sine,
    Bspline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundaryFlags {
    pub left: bool,
    pub right: bool,
}

impl BoundaryFlags {
    pub const NONE: Self = Self {
        left: false,
        right: false,
    };
    pub const LEFT: Self = Self {
        left: true,
        right: false,
    };
    pub const RIGHT: Self = Self {
        left: false,
        right: true,
    };

    pub fn count(&self) -> usize {
        usize::from(self.left) + usize::from(self.right)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Representation {
    Sine,
    Spline {
        basis: BSplineBasis,
        // K × L coefficients of each orthonormal member in the B-spline basis
        coefficients: DMatrix<f64>,
    },
}

/// An orthonormal family φ_1..φ_L on `[a, b]`.
///
/// Members are ordered with the left-active member first and the
/// right-active member last when the corresponding flags are set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionBasis {
    kind: TestFunctionKind,
    count: usize,
    domain: (f64, f64),
    flags: BoundaryFlags,
    repr: Representation,
}

/// Sine family √(2/w)·sin(ℓπ(t−a)/w), w = b − a. On [0, 1] this is √2·sin(ℓπt).
pub fn make_sine_basis(count: usize, domain: (f64, f64)) -> Result<TestFunctionBasis, BasisError> {
    if count == 0 {
        return Err(BasisError::EmptyBasis);
    }
    let (a, b) = domain;
    if !(b > a) || !a.is_finite() || !b.is_finite() {
        return Err(BasisError::DegenerateInterval(a, b));
    }
    Ok(TestFunctionBasis {
        kind: TestFunctionKind::Sine,
        count,
        domain,
        flags: BoundaryFlags::NONE,
        repr: Representation::Sine,
    })
}

/// B-spline test functions built on `knots`, orthonormalized in L².
///
/// Interior members are the B-splines that vanish at both endpoints (all but
/// the first and last of the clamped basis); their number must equal
/// `count - flags.count()`. A left (right) flag adds the first (last)
/// B-spline, which is non-zero at `a` (`b`).
pub fn make_bspline_testfuncs(
    knots: KnotVector,
    count: usize,
    flags: BoundaryFlags,
) -> Result<TestFunctionBasis, BasisError> {
    if count == 0 {
        return Err(BasisError::EmptyBasis);
    }
    if knots.degree() < 2 {
        return Err(BasisError::IncompatibleBoundary(format!(
            "degree {} B-splines are not C¹",
            knots.degree()
        )));
    }
    let basis = BSplineBasis::new(knots);
    let k_count = basis.len();
    let interior_available = k_count.saturating_sub(2);
    if count < flags.count() {
        return Err(BasisError::EmptyBasis);
    }
    let interior_requested = count - flags.count();
    if interior_available < interior_requested {
        return Err(BasisError::InsufficientKnots {
            available: interior_available,
            requested: interior_requested,
        });
    }
    if interior_available > interior_requested {
        return Err(BasisError::KnotCountMismatch {
            available: interior_available,
            requested: interior_requested,
        });
    }
    // Gram-Schmidt order: interior members first so that they stay in H¹₀.
    let mut order: Vec<usize> = (1..k_count - 1).collect();
    if flags.left {
        order.push(0);
    }
    if flags.right {
        order.push(k_count - 1);
    }
    let gram = basis.gram()?;
    let mut q: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(count);
    for &col in &order {
        let mut v = nalgebra::DVector::zeros(k_count);
        v[col] = 1.0;
        for prev in &q {
            let proj = (prev.transpose() * &gram * &v)[(0, 0)];
            v -= prev * proj;
        }
        let norm2 = (v.transpose() * &gram * &v)[(0, 0)];
        if !(norm2 > 0.0) {
            return Err(BasisError::IncompatibleBoundary(
                "boundary member is linearly dependent on interior members".into(),
            ));
        }
        v /= norm2.sqrt();
        q.push(v);
    }
    // output order: left, interior..., right
    let n_int = interior_requested;
    let mut members: Vec<&nalgebra::DVector<f64>> = Vec::with_capacity(count);
    if flags.left {
        members.push(&q[n_int]);
    }
    members.extend(q[..n_int].iter());
    if flags.right {
        members.push(&q[n_int + usize::from(flags.left)]);
    }
    let coefficients = DMatrix::from_columns(&members.into_iter().cloned().collect::<Vec<_>>());
    let domain = basis.domain();
    Ok(TestFunctionBasis {
        kind: TestFunctionKind::Bspline,
        count,
        domain,
        flags,
        repr: Representation::Spline { basis, coefficients },
    })
}

/// Cubic B-spline test functions on uniform knots, with the knot count
/// derived from `count` and `flags`.
pub fn uniform_bspline_testfuncs(
    domain: (f64, f64),
    count: usize,
    degree: usize,
    flags: BoundaryFlags,
) -> Result<TestFunctionBasis, BasisError> {
    if count == 0 || count < flags.count() {
        return Err(BasisError::EmptyBasis);
    }
    let interior_members = count - flags.count();
    // K − 2 = interior members, K = knots + degree + 1
    let n_knots = (interior_members + 2).checked_sub(degree + 1).ok_or(BasisError::InsufficientKnots {
        available: 1usize.saturating_sub(degree.saturating_sub(1)),
        requested: interior_members,
    })?;
    let knots = KnotVector::uniform(domain.0, domain.1, n_knots, degree)?;
    make_bspline_testfuncs(knots, count, flags)
}

impl TestFunctionBasis {
    pub fn kind(&self) -> TestFunctionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn flags(&self) -> BoundaryFlags {
        self.flags
    }

    /// Index of the left-active member, if any.
    pub fn left_member(&self) -> Option<usize> {
        self.flags.left.then_some(0)
    }

    /// Index of the right-active member, if any.
    pub fn right_member(&self) -> Option<usize> {
        self.flags.right.then_some(self.count - 1)
    }

    /// Knots of the underlying spline basis (empty for sines).
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.repr {
            Representation::Sine => Vec::new(),
            Representation::Spline { basis, .. } => basis.knots().breakpoints(),
        }
    }

    pub fn knots(&self) -> Option<&KnotVector> {
        match &self.repr {
            Representation::Sine => None,
            Representation::Spline { basis, .. } => Some(basis.knots()),
        }
    }

    /// All members at `t`.
    pub fn eval_into(&self, t: f64, order: Order, out: &mut [f64]) -> Result<(), BasisError> {
        let (a, b) = self.domain;
        let t = check_in_domain(t, a, b)?;
        match &self.repr {
            Representation::Sine => {
                let w = b - a;
                let s = (t - a) / w;
                let amp = (2.0 / w).sqrt();
                for (i, v) in out.iter_mut().enumerate() {
                    let freq = (i + 1) as f64 * PI;
                    *v = match order {
                        Order::Value => amp * (freq * s).sin(),
                        Order::Derivative => amp * freq / w * (freq * s).cos(),
                        Order::Antiderivative => amp * w / freq * (1.0 - (freq * s).cos()),
                    };
                }
            }
            Representation::Spline { basis, coefficients } => {
                let raw = basis.eval(t, order)?;
                for (l, v) in out.iter_mut().enumerate() {
                    *v = coefficients
                        .column(l)
                        .iter()
                        .zip(&raw)
                        .map(|(c, r)| c * r)
                        .sum();
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, order: Order) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.count];
        self.eval_into(t, order, &mut out)?;
        Ok(out)
    }

    pub fn eval_member(&self, member: usize, t: f64, order: Order) -> Result<f64, BasisError> {
        Ok(self.eval(t, order)?[member])
    }

    /// The members ψ_j = Σ_i φ_i q_ij for an orthogonal L × L matrix `q`,
    /// another orthonormal basis of the same span. Only B-spline families
    /// without boundary-active members can be rotated.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self, BasisError> {
        if q.nrows() != self.count || q.ncols() != self.count {
            return Err(BasisError::IncompatibleBoundary(format!(
                "rotation is {}×{}, basis has {} members",
                q.nrows(),
                q.ncols(),
                self.count
            )));
        }
        if self.flags.count() > 0 {
            return Err(BasisError::IncompatibleBoundary("boundary-active members cannot be mixed".into()));
        }
        match &self.repr {
            Representation::Sine => Err(BasisError::IncompatibleBoundary("the sine family has a fixed form".into())),
            Representation::Spline { basis, coefficients } => Ok(Self {
                repr: Representation::Spline {
                    basis: basis.clone(),
                    coefficients: coefficients * q,
                },
                ..self.clone()
            }),
        }
    }

    /// Member values at every grid point.
    pub fn eval_basis(&self, grid: &[f64], order: Order) -> Result<BasisMatrix, BasisError> {
        eval_basis(self, grid, order)
    }
}

/// Rows = evaluation points, columns = basis members.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
}

pub fn eval_basis(
    basis: &TestFunctionBasis,
    grid: &[f64],
    order: Order,
) -> Result<BasisMatrix, BasisError> {
    let mut values = DMatrix::zeros(grid.len(), basis.len());
    let mut row = vec![0.0; basis.len()];
    for (i, &t) in grid.iter().enumerate() {
        basis.eval_into(t, order, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    Ok(BasisMatrix {
        grid: grid.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadratureRule;
    use std::f64::consts::SQRT_2;

    fn gram_of(basis: &TestFunctionBasis, panels: usize) -> DMatrix<f64> {
        let (a, b) = basis.domain();
        let rule = QuadratureRule::with_breaks(a, b, panels, 6, &basis.breakpoints()).unwrap();
        let l = basis.len();
        let mut g = DMatrix::zeros(l, l);
        for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
            let v = basis.eval(t, Order::Value).unwrap();
            for i in 0..l {
                for j in 0..l {
                    g[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        g
    }

    #[test]
    fn sine_examples() {
        let b1 = make_sine_basis(1, (0.0, 1.0)).unwrap();
        assert!((b1.eval_member(0, 0.5, Order::Value).unwrap() - SQRT_2).abs() < 1e-15);
        assert!(b1.eval_member(0, 0.0, Order::Value).unwrap().abs() < 1e-15);
        assert!(b1.eval_member(0, 1.0, Order::Value).unwrap().abs() < 1e-15);
        let b2 = make_sine_basis(2, (0.0, 1.0)).unwrap();
        assert!(b2.eval_member(1, 0.5, Order::Value).unwrap().abs() < 1e-15);
        assert!((b1.eval_member(0, 0.0, Order::Derivative).unwrap() - SQRT_2 * PI).abs() < 1e-14);
        assert!(
            (b1.eval_member(0, 1.0, Order::Antiderivative).unwrap() - 2.0 * SQRT_2 / PI).abs()
                < 1e-15
        );
        assert_eq!(b1.eval_member(0, 0.0, Order::Antiderivative).unwrap(), 0.0);
    }

    #[test]
    fn sine_errors() {
        assert_eq!(make_sine_basis(0, (0.0, 1.0)), Err(BasisError::EmptyBasis));
        assert!(matches!(
            make_sine_basis(3, (1.0, 1.0)),
            Err(BasisError::DegenerateInterval(..))
        ));
        let b = make_sine_basis(3, (0.0, 1.0)).unwrap();
        assert!(matches!(
            b.eval_basis(&[0.5, 1.2], Order::Value),
            Err(BasisError::OutsideDomain(..))
        ));
    }

    #[test]
    fn sine_gram_is_identity() {
        for &l in &[1usize, 7, 30] {
            for &dom in &[(0.0, 1.0), (40.0, 220.0)] {
                let b = make_sine_basis(l, dom).unwrap();
                let g = gram_of(&b, 256);
                let err = crate::linalg::max_abs(&(g - DMatrix::identity(l, l)));
                assert!(err < 1e-10, "L={l} dom={dom:?} err={err}");
            }
        }
    }

    #[test]
    fn bspline_members_vanish_and_are_orthonormal() {
        let b = uniform_bspline_testfuncs((0.0, 20.0), 5, 3, BoundaryFlags::NONE).unwrap();
        assert_eq!(b.len(), 5);
        for v in b.eval(0.0, Order::Value).unwrap().into_iter().chain(b.eval(20.0, Order::Value).unwrap()) {
            assert!(v.abs() < 1e-12);
        }
        let g = gram_of(&b, 400);
        assert!(crate::linalg::max_abs(&(g - DMatrix::identity(5, 5))) < 1e-10);
    }

    #[test]
    fn left_active_member() {
        let b = uniform_bspline_testfuncs((0.0, 20.0), 5, 3, BoundaryFlags::LEFT).unwrap();
        let at0 = b.eval(0.0, Order::Value).unwrap();
        let at20 = b.eval(20.0, Order::Value).unwrap();
        assert!(at0[0].abs() > 1e-3);
        assert!(at20[0].abs() < 1e-12);
        for l in 1..5 {
            assert!(at0[l].abs() < 1e-12 && at20[l].abs() < 1e-12);
        }
        let g = gram_of(&b, 400);
        assert!(crate::linalg::max_abs(&(g - DMatrix::identity(5, 5))) < 1e-10);
        let r = uniform_bspline_testfuncs((0.0, 100.0), 4, 3, BoundaryFlags::RIGHT).unwrap();
        assert!(r.eval(100.0, Order::Value).unwrap()[3].abs() > 1e-3);
        assert!(r.eval(0.0, Order::Value).unwrap()[3].abs() < 1e-12);
    }

    #[test]
    fn bspline_knot_errors() {
        let knots = KnotVector::uniform(0.0, 1.0, 2, 3).unwrap();
        assert!(matches!(
            make_bspline_testfuncs(knots.clone(), 6, BoundaryFlags::NONE),
            Err(BasisError::InsufficientKnots { .. })
        ));
        assert!(matches!(
            make_bspline_testfuncs(knots, 2, BoundaryFlags::NONE),
            Err(BasisError::KnotCountMismatch { .. })
        ));
        let linear = KnotVector::uniform(0.0, 1.0, 3, 1).unwrap();
        assert!(matches!(
            make_bspline_testfuncs(linear, 2, BoundaryFlags::LEFT),
            Err(BasisError::IncompatibleBoundary(_))
        ));
        assert!(matches!(
            KnotVector::new(0.0, 1.0, vec![0.5, 0.2], 3),
            Err(BasisError::UnsortedKnots)
        ));
        assert!(matches!(
            KnotVector::new(0.0, 1.0, vec![1.0], 3),
            Err(BasisError::KnotOutsideInterval(..))
        ));
        assert!(matches!(
            KnotVector::new(0.0, 1.0, vec![0.5; 5], 3),
            Err(BasisError::KnotMultiplicity { .. })
        ));
    }

    #[test]
    fn partition_of_unity_and_antiderivative_total() {
        let kv = KnotVector::new(0.0, 14.0, vec![2.0, 5.0, 5.0, 5.0, 9.0], 3).unwrap();
        let b = BSplineBasis::new(kv.clone());
        for &t in &[0.0, 1.3, 4.999, 5.0, 5.001, 13.9, 14.0] {
            let v = b.eval(t, Order::Value).unwrap();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-13, "t={t}");
            let d = b.eval(t, Order::Derivative).unwrap();
            assert!(d.iter().sum::<f64>().abs() < 1e-11);
        }
        let total = b.eval(14.0, Order::Antiderivative).unwrap();
        let t = kv.expanded();
        for (i, v) in total.iter().enumerate() {
            let expected = (t[i + 4] - t[i]) / 4.0;
            assert!((v - expected).abs() < 1e-13);
        }
        assert!(b.eval(0.0, Order::Antiderivative).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn spline_gram_matches_quadrature() {
        let b = BSplineBasis::new(KnotVector::uniform(0.0, 3.0, 4, 3).unwrap());
        let g = b.gram().unwrap();
        let rule = QuadratureRule::with_breaks(0.0, 3.0, 300, 6, &b.knots().breakpoints()).unwrap();
        let p = b.design_matrix(rule.nodes(), Order::Value).unwrap();
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(rule.weights()));
        let g2 = p.transpose() * w * &p;
        assert!(crate::linalg::max_abs(&(g - g2)) < 1e-13);
    }
}
