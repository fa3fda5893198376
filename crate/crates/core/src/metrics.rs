//! Fairness and efficiency summaries of terminal utilities, and a
//! multi-seed convergence check on trajectories.

use serde::Serialize;

use crate::sim::Trajectory;

/// Totals below this magnitude make the price of fairness undefined.
pub const POF_FLOOR: f64 = 1e-9;

/// Largest pairwise terminal deviation accepted as agreement between seeds.
pub const DEVIATION_TOLERANCE: f64 = 0.05;

/// Largest movement over the final tenth of a run accepted as settled.
pub const TAIL_TOLERANCE: f64 = 0.02;

/// `max_i u_i / min_j u_j - 1` on the floored utilities `max(delta, Ubar)`.
pub fn mof(averages: &[f64], delta: f64) -> f64 {
    let (lo, hi) = averages
        .iter()
        .map(|&u| u.max(delta))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u), hi.max(u)));
    if averages.is_empty() {
        return 0.0;
    }
    (hi / lo - 1.0).max(0.0)
}

/// `(sum Ubar_alpha - sum Ubar_0) / sum Ubar_0`, or `None` when the reference total is ~0.
pub fn pof(fair: &[f64], efficient: &[f64]) -> Option<f64> {
    let base: f64 = efficient.iter().sum();
    if base.abs() < POF_FLOOR {
        return None;
    }
    let total: f64 = fair.iter().sum();
    Some((total - base) / base)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Per station: largest `|Ubar^a - Ubar^b|` at the last snapshot over trajectory pairs.
    pub terminal_deviation: Vec<f64>,
    /// Per station: largest movement of `Ubar` over the last 10% of epochs, over trajectories.
    pub tail_movement: Vec<f64>,
    /// Fewest snapshots any trajectory had inside its tail window.
    pub tail_snapshots: usize,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn max_deviation(&self) -> f64 {
        self.terminal_deviation.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_tail_movement(&self) -> f64 {
        self.tail_movement.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares trajectories of one configuration run under different seeds.
///
/// A run is flagged unconverged if the seeds disagree at the end, if `Ubar`
/// is still moving in the last tenth of the run, or if the tail holds fewer
/// than two snapshots to judge from.
pub fn convergence_report(trajectories: &[Trajectory]) -> ConvergenceReport {
    assert!(trajectories.len() >= 2, "need at least two trajectories");
    let m = trajectories[0].stations();
    let mut terminal_deviation = vec![0.0_f64; m];
    let finals: Vec<&[f64]> = trajectories
        .iter()
        .map(|t| t.snapshots.last().expect("trajectory has a final snapshot").ubar.as_slice())
        .collect();
    for (a, fa) in finals.iter().enumerate() {
        for fb in &finals[a + 1..] {
            for i in 0..m {
                terminal_deviation[i] = terminal_deviation[i].max((fa[i] - fb[i]).abs());
            }
        }
    }

    let mut tail_movement = vec![0.0_f64; m];
    let mut tail_snapshots = usize::MAX;
    for t in trajectories {
        let last = t.snapshots.last().unwrap();
        let start = last.epoch - last.epoch / 10;
        let tail: Vec<_> = t.snapshots.iter().filter(|s| s.epoch >= start).collect();
        tail_snapshots = tail_snapshots.min(tail.len());
        for i in 0..m {
            let (lo, hi) = tail
                .iter()
                .map(|s| s.ubar[i])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u), hi.max(u)));
            tail_movement[i] = tail_movement[i].max(hi - lo);
        }
    }

    let converged = tail_snapshots >= 2
        && terminal_deviation.iter().all(|&d| d <= DEVIATION_TOLERANCE)
        && tail_movement.iter().all(|&d| d <= TAIL_TOLERANCE);
    ConvergenceReport {
        terminal_deviation,
        tail_movement,
        tail_snapshots,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mof_examples() {
        assert_eq!(mof(&[0.7, 0.7, 0.7], 0.01), 0.0);
        assert_eq!(mof(&[2.0, 1.0], 0.01), 1.0);
        assert_eq!(mof(&[-0.5, 0.001, 0.0], 0.01), 0.0);
        assert!((mof(&[-0.5, 0.5], 0.01) - 49.0).abs() < 1e-12);
    }

    #[test]
    fn pof_examples() {
        assert_eq!(pof(&[1.0, 2.0], &[1.0, 2.0]), Some(0.0));
        let p = pof(&[0.95, 1.9], &[1.0, 2.0]).unwrap();
        assert!((p + 0.05).abs() < 1e-12);
        assert_eq!(pof(&[1.0, 2.0], &[1.0, -1.0]), None);
    }
}
