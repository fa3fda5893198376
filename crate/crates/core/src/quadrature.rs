//! Fixed-node quadrature for duration laws.
//!
//! A [`DurationRule`] is a finite discrete measure (nodes with positive
//! weights summing to one) standing in for a continuous duration law. Travel
//! times use Gauss-Legendre nodes over a +-8 sd window of the truncated
//! normal; exponential service times use Gauss-Laguerre nodes. Sums of
//! independent durations are tensor products of rules.

use std::f64::consts::PI;

/// Node count used by the anticipation evaluator and the chain builder.
pub const DEFAULT_NODES: usize = 64;

/// Half-width of the travel-time integration window, in standard deviations.
pub const WINDOW_SDS: f64 = 8.0;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp;
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss-Laguerre nodes and weights for `int_0^inf e^{-x} f(x) dx`.
pub fn gauss_laguerre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0_f64; n];
    let mut w = vec![0.0_f64; n];
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..n {
        // Initial guesses follow the usual asymptotic spacing of Laguerre roots.
        z = match i {
            0 => 3.0 / (1.0 + 2.4 * nf),
            1 => z + 15.0 / (1.0 + 2.5 * nf),
            _ => {
                let ai = (i - 1) as f64;
                z + (1.0 + 2.55 * ai) / (1.9 * ai) * (z - x[i - 2])
            }
        };
        let mut converged = false;
        let (mut pp, mut p2) = (0.0, 0.0);
        for _ in 0..200 {
            let mut p1 = 1.0;
            p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0 - z) * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = (nf * p1 - nf * p2) / z;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        assert!(converged, "Gauss-Laguerre root {i} of {n} did not converge");
        x[i] = z;
        w[i] = -1.0 / (pp * nf * p2);
    }
    (x, w)
}

/// Discrete stand-in for a nonnegative duration law.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl DurationRule {
    pub fn from_parts(nodes: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(nodes.len(), weights.len());
        assert!(!nodes.is_empty());
        Self { nodes, weights }
    }

    pub fn point_mass(value: f64) -> Self {
        Self::from_parts(vec![value], vec![1.0])
    }

    /// Zero duration, the travel part of a stay.
    pub fn zero() -> Self {
        Self::point_mass(0.0)
    }

    /// Normal(mean, sd) conditioned on being positive. `sd == 0` is a point mass.
    pub fn truncated_normal(mean: f64, sd: f64, n: usize) -> Self {
        assert!(mean > 0.0 && sd >= 0.0, "travel law needs mean > 0, sd >= 0");
        if sd == 0.0 {
            return Self::point_mass(mean);
        }
        let lo = (mean - WINDOW_SDS * sd).max(0.0);
        let hi = mean + WINDOW_SDS * sd;
        let (x, w) = gauss_legendre(n);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let nodes: Vec<f64> = x.iter().map(|&u| mid + half * u).collect();
        let mut weights: Vec<f64> = nodes
            .iter()
            .zip(&w)
            .map(|(&t, &wk)| {
                let z = (t - mean) / sd;
                wk * half * (-0.5 * z * z).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for wk in &mut weights {
            *wk /= total;
        }
        Self { nodes, weights }
    }

    /// Exponential law with the given rate.
    pub fn exponential(rate: f64, n: usize) -> Self {
        assert!(rate > 0.0);
        let (x, mut w) = gauss_laguerre(n);
        let nodes = x.iter().map(|&u| u / rate).collect();
        // Large rules lose mass to underflowing tail weights.
        let total: f64 = w.iter().sum();
        for wk in &mut w {
            *wk /= total;
        }
        Self { nodes, weights: w }
    }

    /// Law of the sum of independent draws from `self` and `other`.
    pub fn convolve(&self, other: &Self) -> Self {
        let mut nodes = Vec::with_capacity(self.len() * other.len());
        let mut weights = Vec::with_capacity(self.len() * other.len());
        for (a, wa) in self.iter() {
            for (b, wb) in other.iter() {
                nodes.push(a + b);
                weights.push(wa * wb);
            }
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(t, w)| w * f(t)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|t| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // x^14 is exact for 8 nodes (degree <= 15)
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((i - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn laguerre_moments_are_factorials() {
        for n in [16, 64, 128] {
            let (x, w) = gauss_laguerre(n);
            let mut fact = 1.0;
            for k in 0..6 {
                if k > 0 {
                    fact *= k as f64;
                }
                let mk: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
                assert!((mk - fact).abs() < 1e-10 * fact, "n={n} k={k} got {mk}");
            }
            assert!(x.windows(2).all(|p| p[0] < p[1]));
            assert!(w.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn degenerate_travel_is_point_mass() {
        let r = DurationRule::truncated_normal(2.0, 0.0, 64);
        assert_eq!(r.len(), 1);
        assert_eq!(r.mean(), 2.0);
    }

    #[test]
    fn truncated_normal_mean_far_from_zero() {
        let r = DurationRule::truncated_normal(6.0, 0.1, 64);
        assert!((r.mean() - 6.0).abs() < 1e-12);
        let var = r.expect(|t| (t - 6.0).powi(2));
        assert!((var - 0.01).abs() < 1e-12);
    }

    #[test]
    fn exponential_mean() {
        let r = DurationRule::exponential(1.0 / 3.0, 64);
        assert!((r.mean() - 3.0).abs() < 1e-12);
        assert!((r.expect(|t| t * t) - 18.0).abs() < 1e-9);
    }

    #[test]
    fn convolution_adds_means() {
        let a = DurationRule::truncated_normal(2.0, 0.5, 32);
        let b = DurationRule::exponential(0.5, 32);
        let c = a.convolve(&b);
        assert_eq!(c.len(), 32 * 32);
        assert!((c.mean() - a.mean() - b.mean()).abs() < 1e-12);
        assert!((c.expect(|_| 1.0) - 1.0).abs() < 1e-13);
    }
}
