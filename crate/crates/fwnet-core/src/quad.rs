//! Gauss-Hermite quadrature for Gaussian expectations.
//!
//! Nodes and weights come from the Golub-Welsch eigenvalue method: the
//! physicists' Hermite recurrence gives a symmetric tridiagonal Jacobi matrix
//! with zero diagonal and off-diagonal `sqrt(k/2)`; its eigenvalues are the
//! nodes and the squared first eigenvector components (times `sqrt(pi)`) the
//! weights. A rule of order `n` integrates `exp(-x^2)` times any polynomial
//! of degree `2n - 1` exactly.

use nalgebra::{DMatrix, SymmetricEigen};
use std::sync::{Mutex, OnceLock};

/// A one-dimensional Gauss-Hermite rule with weight function `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Default order used by the kernel map. Tensorized tanh-kernel values
    /// converge like a stretched exponential in the order with a rate set by
    /// the largest marginal variance; at this order, doubling shifts no entry
    /// by more than 1e-9 for marginal variances up to 4 (asserted in the
    /// kernel tests; see the convergence table in the kernel module docs).
    pub const DEFAULT_ORDER: usize = 320;

    pub fn new(order: usize) -> GaussHermite {
        assert!(order >= 1, "quadrature order must be >= 1");
        if order == 1 {
            return GaussHermite {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            };
        }
        let mut jacobi = DMatrix::zeros(order, order);
        for k in 1..order {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| {
                let node = eig.eigenvalues[i];
                let first = eig.eigenvectors[(0, i)];
                (node, std::f64::consts::PI.sqrt() * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Pair the rule across the origin so node[i] == -node[n-1-i] exactly;
        // the kernel quadrature halves its outer loop on that symmetry.
        for i in 0..order / 2 {
            let j = order - 1 - i;
            let node = 0.5 * (pairs[j].0 - pairs[i].0);
            let weight = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-node, weight);
            pairs[j] = (node, weight);
        }
        if order % 2 == 1 {
            pairs[order / 2].0 = 0.0;
        }
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// A process-wide cached rule; orders repeat heavily across kernel builds.
    pub fn cached(order: usize) -> GaussHermite {
        static CACHE: OnceLock<Mutex<Vec<GaussHermite>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
        let mut guard = cache.lock().unwrap();
        if let Some(rule) = guard.iter().find(|r| r.order() == order) {
            return rule.clone();
        }
        let rule = GaussHermite::new(order);
        guard.push(rule.clone());
        rule
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `integral of exp(-x^2) f(x) dx` over the real line.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `E[f(Z)]` for standard normal `Z` (substitution `z = sqrt(2) x`).
    pub fn gaussian_expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(std::f64::consts::SQRT_2 * x))
            .sum::<f64>()
            * inv_sqrt_pi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for order in [1, 2, 5, 20, 40, 80] {
            let q = GaussHermite::new(order);
            let total: f64 = q.weights().iter().sum();
            assert!(
                (total - std::f64::consts::PI.sqrt()).abs() < 1e-12,
                "order {order}: {total}"
            );
        }
    }

    #[test]
    fn low_order_rules_match_closed_forms() {
        // Order 2: nodes +-1/sqrt(2), weights sqrt(pi)/2.
        let q = GaussHermite::new(2);
        assert!((q.nodes()[0] + 1.0 / 2f64.sqrt()).abs() < 1e-14);
        assert!((q.nodes()[1] - 1.0 / 2f64.sqrt()).abs() < 1e-14);
        assert!((q.weights()[0] - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
        // Order 3: nodes {-sqrt(3/2), 0, sqrt(3/2)}, center weight 2sqrt(pi)/3.
        let q3 = GaussHermite::new(3);
        assert!((q3.nodes()[1]).abs() < 1e-14);
        assert!((q3.nodes()[2] - (1.5f64).sqrt()).abs() < 1e-13);
        assert!((q3.weights()[1] - 2.0 * std::f64::consts::PI.sqrt() / 3.0).abs() < 1e-13);
    }

    #[test]
    fn integrates_even_moments_exactly() {
        let q = GaussHermite::new(12);
        // E[Z^2] = 1, E[Z^4] = 3, E[Z^6] = 15 for standard normal Z.
        assert!((q.gaussian_expectation(|z| z * z) - 1.0).abs() < 1e-12);
        assert!((q.gaussian_expectation(|z| z.powi(4)) - 3.0).abs() < 1e-12);
        assert!((q.gaussian_expectation(|z| z.powi(6)) - 15.0).abs() < 1e-11);
    }

    #[test]
    fn erf_expectation_matches_closed_form() {
        // E[erf(a Z)] for Z ~ N(0, 1) vanishes by symmetry; E[erf(aZ)^2]
        // equals (2/pi) asin(2a^2 / (1 + 2a^2)).
        let q = GaussHermite::new(80);
        let a = 0.83;
        let got = q.gaussian_expectation(|z| libm::erf(a * z).powi(2));
        let want = 2.0 / std::f64::consts::PI * (2.0 * a * a / (1.0 + 2.0 * a * a)).asin();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn rules_are_exactly_symmetric() {
        for order in [2usize, 7, 40, 321] {
            let q = GaussHermite::new(order);
            for i in 0..order / 2 {
                let j = order - 1 - i;
                assert_eq!(q.nodes()[i], -q.nodes()[j], "order {order} node {i}");
                assert_eq!(q.weights()[i], q.weights()[j], "order {order} weight {i}");
            }
            if order % 2 == 1 {
                assert_eq!(q.nodes()[order / 2], 0.0);
            }
        }
    }

    #[test]
    fn cache_returns_equal_rules() {
        let a = GaussHermite::cached(17);
        let b = GaussHermite::cached(17);
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.weights(), b.weights());
    }
}
