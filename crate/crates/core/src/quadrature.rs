//! Composite Gauss-Legendre quadrature on an interval.
//!
//! Every L² inner product in the estimators goes through a [`QuadratureRule`].
//! Rules can be split at arbitrary break points (spline knots, forcing
//! discontinuities) so that each panel sees a smooth integrand.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("degenerate interval [{0}, {1}]")]
    DegenerateInterval(f64, f64),
    #[error("panel count and nodes per panel must be positive")]
    EmptyRule,
    #[error("integrand is not finite at t = {0}")]
    NonFinite(f64),
}

/// Panel layout used when a rule is built for a particular domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    pub panels: usize,
    pub nodes_per_panel: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            panels: 200,
            nodes_per_panel: 5,
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A flattened composite Gauss-Legendre rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    start: f64,
    end: f64,
    panel_edges: Vec<f64>,
    nodes_per_panel: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Uniform panels on `[a, b]`.
    pub fn composite(
        a: f64,
        b: f64,
        panels: usize,
        nodes_per_panel: usize,
    ) -> Result<Self, QuadratureError> {
        Self::with_breaks(a, b, panels, nodes_per_panel, &[])
    }

    /// Uniform panels on `[a, b]` with extra panel edges inserted at `breaks`.
    /// Break points outside the open interval are ignored.
    pub fn with_breaks(
        a: f64,
        b: f64,
        panels: usize,
        nodes_per_panel: usize,
        breaks: &[f64],
    ) -> Result<Self, QuadratureError> {
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(QuadratureError::DegenerateInterval(a, b));
        }
        if panels == 0 || nodes_per_panel == 0 {
            return Err(QuadratureError::EmptyRule);
        }
        let width = b - a;
        let mut edges: Vec<f64> = (0..=panels)
            .map(|i| a + width * i as f64 / panels as f64)
            .collect();
        edges[panels] = b;
        edges.extend(breaks.iter().copied().filter(|&t| t > a && t < b));
        edges.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let merge_tol = 1e-12 * width;
        let mut merged: Vec<f64> = Vec::with_capacity(edges.len());
        for e in edges {
            match merged.last() {
                Some(&last) if e - last <= merge_tol => {
                    // keep exact break locations in preference to grid points
                    if breaks.contains(&e) && e < b {
                        *merged.last_mut().unwrap() = e;
                    }
                }
                _ => merged.push(e),
            }
        }
        *merged.first_mut().unwrap() = a;
        *merged.last_mut().unwrap() = b;

        let (gx, gw) = gauss_legendre(nodes_per_panel);
        let mut nodes = Vec::with_capacity((merged.len() - 1) * nodes_per_panel);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for pair in merged.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (x, w) in gx.iter().zip(&gw) {
                nodes.push(mid + half * x);
                weights.push(half * w);
            }
        }
        Ok(Self {
            start: a,
            end: b,
            panel_edges: merged,
            nodes_per_panel,
            nodes,
            weights,
        })
    }

    pub fn from_settings(
        a: f64,
        b: f64,
        settings: QuadratureSettings,
        breaks: &[f64],
    ) -> Result<Self, QuadratureError> {
        Self::with_breaks(a, b, settings.panels, settings.nodes_per_panel, breaks)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn panel_count(&self) -> usize {
        self.panel_edges.len() - 1
    }

    pub fn panel_edges(&self) -> &[f64] {
        &self.panel_edges
    }

    pub fn nodes_per_panel(&self) -> usize {
        self.nodes_per_panel
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, QuadratureError> {
        integrate(f, self)
    }
}

/// Composite Gauss-Legendre approximation of `∫ f` over the rule's domain.
pub fn integrate<F: Fn(f64) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64, QuadratureError> {
    let mut acc = 0.0;
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(t);
        if !v.is_finite() {
            return Err(QuadratureError::NonFinite(t));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `⟨f, g⟩ = ∫ f g` over the rule's domain.
pub fn inner_product<F, G>(f: F, g: G, rule: &QuadratureRule) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    integrate(|t| f(t) * g(t), rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn unit() -> QuadratureRule {
        QuadratureRule::composite(0.0, 1.0, 200, 5).unwrap()
    }

    #[test]
    fn constant_and_linear() {
        let r = unit();
        assert!((r.integrate(|_| 1.0).unwrap() - 1.0).abs() < 1e-13);
        assert!((r.integrate(|t| t).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn exp_sine_closed_form() {
        let expected = PI * (E + 1.0) / (1.0 + PI * PI);
        let got = unit().integrate(|t| t.exp() * (PI * t).sin()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((expected - 1.074678).abs() < 1e-6);
    }

    #[test]
    fn inner_products() {
        let r = unit();
        let s = |t: f64| (PI * t).sin();
        assert!((inner_product(s, s, &r).unwrap() - 0.5).abs() < 1e-13);
        let s1 = |t: f64| 2f64.sqrt() * (PI * t).sin();
        let s2 = |t: f64| 2f64.sqrt() * (2.0 * PI * t).sin();
        assert!(inner_product(s1, s2, &r).unwrap().abs() < 1e-13);
        let expected = -2f64.sqrt() * PI * (E + 1.0) / (1.0 + PI * PI);
        let got = inner_product(f64::exp, |t| 2f64.sqrt() * PI * (PI * t).cos(), &r).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got + 1.519824).abs() < 1e-6);
    }

    #[test]
    fn weights_positive_and_sum_to_width() {
        let r = QuadratureRule::with_breaks(-2.0, 5.0, 37, 4, &[0.3, 1.0, 1.0, 4.999]).unwrap();
        assert!(r.weights().iter().all(|&w| w > 0.0));
        let s: f64 = r.weights().iter().sum();
        assert!((s - 7.0).abs() < 1e-12);
        for pair in r.panel_edges().windows(2) {
            assert!(pair[1] > pair[0]);
        }
        assert!(r.panel_edges().contains(&0.3));
    }

    #[test]
    fn polynomial_exactness() {
        for npp in 1..=8 {
            let r = QuadratureRule::composite(0.0, 1.0, 3, npp).unwrap();
            let deg = 2 * npp - 1;
            let got = r.integrate(|t| t.powi(deg as i32)).unwrap();
            assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-12, "npp {npp}");
        }
    }

    #[test]
    fn panel_refinement_is_stable() {
        let f = |t: f64| (3.0 * t).cos() * (-t).exp() + t.sqrt().sin();
        let a = QuadratureRule::composite(0.5, 3.0, 200, 5).unwrap().integrate(f).unwrap();
        let b = QuadratureRule::composite(0.5, 3.0, 400, 5).unwrap().integrate(f).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn breaks_capture_discontinuity() {
        let step = |t: f64| if t >= 5.0 { 1.0 } else { 0.0 };
        let r = QuadratureRule::with_breaks(0.0, 14.0, 7, 3, &[5.0]).unwrap();
        assert!((r.integrate(step).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(
            QuadratureRule::composite(1.0, 1.0, 4, 4).unwrap_err(),
            QuadratureError::DegenerateInterval(1.0, 1.0)
        );
        assert_eq!(
            QuadratureRule::composite(0.0, 1.0, 0, 4).unwrap_err(),
            QuadratureError::EmptyRule
        );
        let r = unit();
        assert!(matches!(
            r.integrate(|t| 1.0 / (t - r.nodes()[3])),
            Err(QuadratureError::NonFinite(_))
        ));
    }
}
