//! Vector-valued curves t ↦ g(t) ∈ ℝᵈ that conditions can be evaluated on.

/// A differentiable curve on a closed interval. Evaluation slightly outside
/// the domain is clamped; callers validate coverage up front.
pub trait Curve: Send + Sync {
    fn dim(&self) -> usize;
    fn domain(&self) -> (f64, f64);
    fn value_into(&self, t: f64, out: &mut [f64]);
    fn derivative_into(&self, t: f64, out: &mut [f64]);

    fn value(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.value_into(t, &mut v);
        v
    }

    fn derivative(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.derivative_into(t, &mut v);
        v
    }

    fn covers(&self, a: f64, b: f64) -> bool {
        let (lo, hi) = self.domain();
        let slack = 1e-9 * (hi - lo).abs().max(1.0);
        lo <= a + slack && hi >= b - slack
    }
}

type CurveFn = Box<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Curve given by closures for its value and derivative.
pub struct FnCurve {
    dim: usize,
    domain: (f64, f64),
    value: CurveFn,
    derivative: CurveFn,
}

impl FnCurve {
    pub fn new<V, D>(dim: usize, domain: (f64, f64), value: V, derivative: D) -> Self
    where
        V: Fn(f64, &mut [f64]) + Send + Sync + 'static,
        D: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            domain,
            value: Box::new(value),
            derivative: Box::new(derivative),
        }
    }

    /// Scalar curve from a value and a derivative function.
    pub fn scalar<V, D>(domain: (f64, f64), value: V, derivative: D) -> Self
    where
        V: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(1, domain, move |t, o| o[0] = value(t), move |t, o| o[0] = derivative(t))
    }
}

impl Curve for FnCurve {
    fn dim(&self) -> usize {
        self.dim
    }

    fn domain(&self) -> (f64, f64) {
        self.domain
    }

    fn value_into(&self, t: f64, out: &mut [f64]) {
        (self.value)(t, out)
    }

    fn derivative_into(&self, t: f64, out: &mut [f64]) {
        (self.derivative)(t, out)
    }
}

impl<C: Curve + ?Sized> Curve for &C {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn domain(&self) -> (f64, f64) {
        (**self).domain()
    }
    fn value_into(&self, t: f64, out: &mut [f64]) {
        (**self).value_into(t, out)
    }
    fn derivative_into(&self, t: f64, out: &mut [f64]) {
        (**self).derivative_into(t, out)
    }
}
