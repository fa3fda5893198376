//! Closed classes and stationary laws of a finite chain given as sparse rows.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::{Error, Result};

/// Sparse transition rows: `rows[y]` lists `(target, probability)`.
pub type SparseRows = [Vec<(usize, f64)>];

/// Classes up to this size are solved by a dense LU factorization.
const DENSE_LIMIT: usize = 1200;
const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITER: usize = 500_000;
const ABSORB_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedClass {
    pub states: Vec<usize>,
    /// Stationary law on `states`, in the same order.
    pub distribution: Vec<f64>,
    /// Probability of ending up in this class from the initial law.
    pub weight: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stationary {
    /// Limit law from the initial distribution: class laws mixed by absorption weights.
    pub pi: Vec<f64>,
    pub classes: Vec<ClosedClass>,
    pub transient_states: usize,
    /// `max_y |(pi P)_y - pi_y|`.
    pub residual: f64,
}

impl Stationary {
    pub fn reducible(&self) -> bool {
        self.classes.len() > 1 || self.transient_states > 0
    }

    /// Number of classes reached with positive probability.
    pub fn reached_classes(&self) -> usize {
        self.classes.iter().filter(|c| c.weight > 0.0).count()
    }
}

/// `pi P` for a row vector `pi`.
pub fn apply(rows: &SparseRows, pi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pi.len()];
    for (y, row) in rows.iter().enumerate() {
        let mass = pi[y];
        if mass == 0.0 {
            continue;
        }
        for &(z, p) in row {
            out[z] += mass * p;
        }
    }
    out
}

pub fn residual(rows: &SparseRows, pi: &[f64]) -> f64 {
    apply(rows, pi)
        .iter()
        .zip(pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Largest `|sum_z P(y, z) - 1|` over rows.
pub fn row_sum_error(rows: &SparseRows) -> f64 {
    rows.iter()
        .map(|r| (r.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Strongly connected components with no outgoing edges, each sorted.
pub fn closed_classes(rows: &SparseRows) -> Vec<Vec<usize>> {
    let n = rows.len();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, rows.iter().map(Vec::len).sum());
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for (y, row) in rows.iter().enumerate() {
        for &(z, p) in row {
            if p > 0.0 {
                graph.add_edge(nodes[y], nodes[z], ());
            }
        }
    }
    let mut component = vec![usize::MAX; n];
    let sccs = tarjan_scc(&graph);
    for (c, scc) in sccs.iter().enumerate() {
        for node in scc {
            component[node.index()] = c;
        }
    }
    let mut classes: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|(c, scc)| {
            scc.iter().all(|node| {
                rows[node.index()]
                    .iter()
                    .all(|&(z, p)| p <= 0.0 || component[z] == *c)
            })
        })
        .map(|(_, scc)| {
            let mut s: Vec<usize> = scc.iter().map(|n| n.index()).collect();
            s.sort_unstable();
            s
        })
        .collect();
    classes.sort();
    classes
}

/// Stationary law of the chain restricted to the closed class `states`.
pub fn class_distribution(rows: &SparseRows, states: &[usize]) -> Result<(Vec<f64>, f64)> {
    let n = states.len();
    let mut local = vec![usize::MAX; rows.len()];
    for (k, &y) in states.iter().enumerate() {
        local[y] = k;
    }
    let sub: Vec<Vec<(usize, f64)>> = states
        .iter()
        .map(|&y| rows[y].iter().map(|&(z, p)| (local[z], p)).collect())
        .collect();

    // Rows that leak mass cannot reach a residual below their own row-sum error.
    let tol = POWER_TOL.max(4.0 * row_sum_error(&sub));
    let mut pi = if n <= DENSE_LIMIT {
        dense_solve(&sub)?
    } else {
        vec![1.0 / n as f64; n]
    };
    if residual(&sub, &pi) > tol {
        pi = power_iterate(&sub, pi, tol)?;
    }
    let r = residual(&sub, &pi);
    Ok((pi, r))
}

fn dense_solve(sub: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = sub.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (y, row) in sub.iter().enumerate() {
        for &(z, p) in row {
            a[(z, y)] += p;
        }
        a[(y, y)] -= 1.0;
    }
    for y in 0..n {
        a[(n - 1, y)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular system for a closed class".into()))?;
    let mut pi: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= total;
    }
    Ok(pi)
}

/// Lazy power iteration `pi <- pi (I + P) / 2`, which shares the stationary
/// law of `P` and cannot cycle on periodic classes.
fn power_iterate(sub: &[Vec<(usize, f64)>], mut pi: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
    for _ in 0..POWER_MAX_ITER {
        let next = apply(sub, &pi);
        let mut diff = 0.0_f64;
        for (p, q) in pi.iter_mut().zip(&next) {
            diff = diff.max((q - *p).abs());
            *p = 0.5 * (*p + q);
        }
        if diff < tol {
            let total: f64 = pi.iter().sum();
            for p in &mut pi {
                *p /= total;
            }
            return Ok(pi);
        }
    }
    Err(Error::Numerical(format!(
        "power iteration did not reach residual {tol} in {POWER_MAX_ITER} steps"
    )))
}

/// Absorption probabilities into each class starting from `initial`.
fn absorption(rows: &SparseRows, classes: &[Vec<usize>], initial: &[(usize, f64)]) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut class_of = vec![usize::MAX; n];
    for (c, states) in classes.iter().enumerate() {
        for &y in states {
            class_of[y] = c;
        }
    }
    let mut weights = vec![0.0; classes.len()];
    let mut mass = vec![0.0; n];
    for &(y, p) in initial {
        mass[y] += p;
    }
    for _ in 0..POWER_MAX_ITER {
        let mut transient = 0.0;
        for y in 0..n {
            if class_of[y] != usize::MAX {
                weights[class_of[y]] += mass[y];
                mass[y] = 0.0;
            } else {
                transient += mass[y];
            }
        }
        if transient < ABSORB_TOL {
            let total: f64 = weights.iter().sum();
            return Ok(weights.iter().map(|w| w / total).collect());
        }
        mass = apply(rows, &mass);
    }
    Err(Error::Numerical("transient mass did not drain".into()))
}

/// Closed classes, their stationary laws, and the limit law from `initial`.
pub fn stationary(rows: &SparseRows, initial: &[(usize, f64)]) -> Result<Stationary> {
    let n = rows.len();
    let class_states = closed_classes(rows);
    let weights = absorption(rows, &class_states, initial)?;
    let mut pi = vec![0.0; n];
    let mut classes = Vec::with_capacity(class_states.len());
    let mut in_class = 0;
    for (states, weight) in class_states.into_iter().zip(weights) {
        let (distribution, r) = class_distribution(rows, &states)?;
        for (&y, &p) in states.iter().zip(&distribution) {
            pi[y] += weight * p;
        }
        in_class += states.len();
        classes.push(ClosedClass {
            states,
            distribution,
            weight,
            residual: r,
        });
    }
    let r = residual(rows, &pi);
    Ok(Stationary {
        pi,
        classes,
        transient_states: n - in_class,
        residual: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> Vec<Vec<(usize, f64)>> {
        rows.iter()
            .map(|r| r.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(z, &p)| (z, p)).collect())
            .collect()
    }

    #[test]
    fn doubly_stochastic_is_uniform() {
        let p = dense(&[&[0.2, 0.5, 0.3], &[0.3, 0.2, 0.5], &[0.5, 0.3, 0.2]]);
        let s = stationary(&p, &[(0, 1.0)]).unwrap();
        for x in &s.pi {
            assert!((x - 1.0 / 3.0).abs() < 1e-14);
        }
        assert!(!s.reducible());
    }

    #[test]
    fn two_state_closed_form() {
        let (a, b) = (0.3, 0.05);
        let p = dense(&[&[1.0 - a, a], &[b, 1.0 - b]]);
        let s = stationary(&p, &[(0, 1.0)]).unwrap();
        assert!((s.pi[0] - b / (a + b)).abs() < 1e-14);
        assert!(s.residual < 1e-15);
    }

    #[test]
    fn periodic_class_via_power_iteration() {
        let n = 5;
        let rows: Vec<Vec<(usize, f64)>> = (0..n).map(|y| vec![((y + 1) % n, 1.0)]).collect();
        let pi = power_iterate(&rows, vec![1.0, 0.0, 0.0, 0.0, 0.0], POWER_TOL).unwrap();
        for x in pi {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_chain_mixes_by_absorption() {
        // 0 is transient, splitting 1/4 : 3/4 between absorbing {1} and the class {2, 3}.
        let p = dense(&[&[0.0, 0.25, 0.75, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5], &[0.0, 0.0, 1.0, 0.0]]);
        let s = stationary(&p, &[(0, 1.0)]).unwrap();
        assert_eq!(s.classes.len(), 2);
        assert_eq!(s.transient_states, 1);
        assert!(s.reducible());
        assert!((s.pi[1] - 0.25).abs() < 1e-14);
        assert!((s.pi[2] - 0.75 * 2.0 / 3.0).abs() < 1e-14);
        assert!((s.pi[3] - 0.75 / 3.0).abs() < 1e-14);
    }
}
