//! Gauss rules used for integrals against the mutation measure.

use std::f64::consts::PI;

/// Nodes and weights of a one-dimensional rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

const NEWTON_EPS: f64 = 3.0e-15;
const NEWTON_MAX: usize = 100;

/// Gauss-Hermite rule for the standard normal weight: `E[h(Z)] ~ sum w_i h(z_i)`.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    assert!(n >= 1, "rule order must be positive");
    // Physicists' rule for exp(-x^2), orthonormal recurrence.
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..NEWTON_MAX {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let scale = 2.0f64.sqrt();
    let norm = PI.sqrt();
    let mut rule = Rule {
        nodes: x.iter().map(|v| v * scale).collect(),
        weights: w.iter().map(|v| v / norm).collect(),
    };
    // Ascending order.
    rule.nodes.reverse();
    rule.weights.reverse();
    rule
}

/// Gauss-Legendre rule on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Rule {
    let base = gauss_legendre_unit(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    Rule {
        nodes: base.nodes.iter().map(|t| mid + half * t).collect(),
        weights: base.weights.iter().map(|w| w * half).collect(),
    }
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Rule {
    assert!(n >= 1, "rule order must be positive");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    for i in 1..=m {
        let mut z = (PI * (i as f64 - 0.25) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..NEWTON_MAX {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS {
                break;
            }
        }
        x[i - 1] = -z;
        x[n - i] = z;
        w[i - 1] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - i] = w[i - 1];
    }
    Rule { nodes: x, weights: w }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite_normal(64);
        let m = |k: i32| -> f64 { r.nodes.iter().zip(&r.weights).map(|(z, w)| w * z.powi(k)).sum() };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
        assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn hermite_small_orders_match_closed_form() {
        // n = 2: nodes +-1, weights 1/2 for the standard normal.
        let r = gauss_hermite_normal(2);
        assert!((r.nodes[1] - 1.0).abs() < 1e-14);
        assert!((r.weights[0] - 0.5).abs() < 1e-14);
        // n = 3: nodes 0, +-sqrt(3), weights 2/3, 1/6.
        let r = gauss_hermite_normal(3);
        assert!(r.nodes[1].abs() < 1e-14);
        assert!((r.nodes[2] - 3f64.sqrt()).abs() < 1e-13);
        assert!((r.weights[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let r = gauss_legendre(8, -1.0, 2.0);
        let int: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * (x.powi(7) - 3.0 * x * x + 1.0))
            .sum();
        // antiderivative x^8/8 - x^3 + x on [-1, 2]
        let f = |x: f64| x.powi(8) / 8.0 - x.powi(3) + x;
        assert!((int - (f(2.0) - f(-1.0))).abs() < 1e-12);
    }
}
