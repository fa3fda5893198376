//! The fair opportunistic dispatch rule.
//!
//! At each epoch every station `i` is scored with
//!
//! ```text
//! O_i = I_i / u_i^alpha - sum_j l_j(i) / u_j^alpha,    u = max(delta, Ubar)
//! ```
//!
//! and the server moves to a maximizer, ties broken uniformly. `Ubar` follows
//! the decreasing-step recursion `Ubar_k = Ubar_{k-1} + (u_k - Ubar_{k-1}) / k^gamma`
//! driven by anticipated utilities.

use rand::Rng;

use crate::anticipation::AnticipationEvaluator;
use crate::model::{Decision, SystemState};

pub const DEFAULT_TIE_TOLERANCE: f64 = 1e-12;

/// `max(delta, u_i)` componentwise.
pub fn floor_utilities(averages: &[f64], delta: f64) -> Vec<f64> {
    averages.iter().map(|&u| u.max(delta)).collect()
}

/// Per-station fairness weights `u_i^{-alpha}`.
pub fn fairness_weights(floored: &[f64], alpha: f64) -> Vec<f64> {
    floored.iter().map(|&u| u.powf(-alpha)).collect()
}

/// Score of one candidate. `losses[j]` is the loss at `j` if the candidate is chosen.
#[inline]
pub(crate) fn index_value(gain: f64, own_weight: f64, losses: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let mut penalty = 0.0;
    for (l, w) in losses.zip(weights) {
        penalty += l * w;
    }
    gain * own_weight - penalty
}

/// Scores `O_i` together with the floored utilities they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FairIndex {
    pub values: Vec<f64>,
    pub floored: Vec<f64>,
    pub alpha: f64,
}

impl FairIndex {
    /// `gains[i] = I_i`, `losses[i][j] = l_j(i)` (loss at `j` when `i` is chosen).
    pub fn from_parts(gains: &[f64], losses: &[Vec<f64>], floored: Vec<f64>, alpha: f64) -> Self {
        let weights = fairness_weights(&floored, alpha);
        let values = gains
            .iter()
            .zip(losses)
            .enumerate()
            .map(|(i, (&g, row))| index_value(g, weights[i], row.iter().copied(), &weights))
            .collect();
        Self {
            values,
            floored,
            alpha,
        }
    }

    /// Stations within `tolerance` of the best score, in index order.
    pub fn argmax_set(&self, tolerance: f64) -> Vec<usize> {
        argmax_within(&self.values, tolerance)
    }
}

pub(crate) fn argmax_within(values: &[f64], tolerance: f64) -> Vec<usize> {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - tolerance)
        .map(|(i, _)| i)
        .collect()
}

/// Gains `I_i(z)` and losses `l_j(i, z)` for every candidate `i`.
pub fn index_parts(state: &SystemState, evaluator: &AnticipationEvaluator) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = state.queues.len();
    let gains = (0..m).map(|i| evaluator.expected_gain(i, state)).collect();
    let losses = (0..m)
        .map(|i| (0..m).map(|j| evaluator.expected_loss(j, i, state)).collect())
        .collect();
    (gains, losses)
}

/// Computes the fair index for the current state and running averages.
pub fn fair_index(
    state: &SystemState,
    evaluator: &AnticipationEvaluator,
    averages: &[f64],
    alpha: f64,
    delta: f64,
) -> FairIndex {
    let (gains, losses) = index_parts(state, evaluator);
    FairIndex::from_parts(&gains, &losses, floor_utilities(averages, delta), alpha)
}

/// Allocation-free scorer for the simulation hot loop. Produces the same bits as [`fair_index`].
#[derive(Debug, Clone, Default)]
pub(crate) struct IndexScratch {
    weights: Vec<f64>,
    losses: Vec<f64>,
    pub values: Vec<f64>,
}

impl IndexScratch {
    pub fn compute(
        &mut self,
        state: &SystemState,
        evaluator: &AnticipationEvaluator,
        floored: &[f64],
        alpha: f64,
    ) -> &[f64] {
        let m = state.queues.len();
        self.weights.clear();
        self.weights.extend(floored.iter().map(|&u| u.powf(-alpha)));
        self.values.clear();
        self.losses.resize(m, 0.0);
        for i in 0..m {
            let route = state.route_to(i);
            for j in 0..m {
                self.losses[j] = evaluator.loss(j, state.queues[j], route);
            }
            let gain = evaluator.gain(i, state.queues[i], route);
            let v = index_value(gain, self.weights[i], self.losses.iter().copied(), &self.weights);
            self.values.push(v);
        }
        &self.values
    }
}

/// Uniform decision over the argmax set, plus one station sampled from it.
pub fn choose_station<R: Rng + ?Sized>(index: &FairIndex, tolerance: f64, rng: &mut R) -> (Decision, usize) {
    choose_from_values(&index.values, tolerance, rng)
}

pub(crate) fn choose_from_values<R: Rng + ?Sized>(
    values: &[f64],
    tolerance: f64,
    rng: &mut R,
) -> (Decision, usize) {
    let support = argmax_within(values, tolerance);
    let pick = if support.len() == 1 {
        support[0]
    } else {
        support[rng.random_range(0..support.len())]
    };
    (Decision::uniform(values.len(), support), pick)
}

/// Running averages: anticipated `Ubar` (decreasing step `1/k^gamma`) and the
/// plain time average `Vbar` of realized utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityTracker {
    anticipated: Vec<f64>,
    realized_sum: Vec<f64>,
    epochs: u64,
    gamma: f64,
}

impl UtilityTracker {
    pub fn new(m: usize, initial: f64, gamma: f64) -> Self {
        Self::from_initial(vec![initial; m], gamma)
    }

    pub fn from_initial(initial: Vec<f64>, gamma: f64) -> Self {
        let m = initial.len();
        Self {
            anticipated: initial,
            realized_sum: vec![0.0; m],
            epochs: 0,
            gamma,
        }
    }

    /// `Ubar_k`.
    pub fn averages(&self) -> &[f64] {
        &self.anticipated
    }

    /// `Vbar_k`, the arithmetic mean of realized utilities so far (zero before any update).
    pub fn realized_mean(&self) -> Vec<f64> {
        if self.epochs == 0 {
            return vec![0.0; self.realized_sum.len()];
        }
        let k = self.epochs as f64;
        self.realized_sum.iter().map(|s| s / k).collect()
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Advances both recursions by one epoch.
    pub fn update(&mut self, anticipated: &[f64], realized: &[f64]) {
        self.epochs += 1;
        let step = if self.gamma == 1.0 {
            1.0 / self.epochs as f64
        } else {
            (self.epochs as f64).powf(-self.gamma)
        };
        for (u, &a) in self.anticipated.iter_mut().zip(anticipated) {
            *u += step * (a - *u);
        }
        for (s, &r) in self.realized_sum.iter_mut().zip(realized) {
            *s += r;
        }
    }
}

/// The wireless alpha-fair scheduler used as a reference for the averaging
/// machinery: every epoch draws a utility vector, allocates to the user with
/// the largest `U_n / Ubar_n^alpha` (ties uniform), and updates
/// `Ubar_n += (U_n beta_n - Ubar_n) / k`.
pub mod wireless {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub struct WirelessRun {
        pub averages: Vec<f64>,
        pub allocations: Vec<u64>,
        pub epochs: u64,
    }

    /// Runs the recursion. `floor` keeps the weights finite when an average is zero.
    pub fn wireless_reference<R, F>(
        mut sample: F,
        alpha: f64,
        epochs: u64,
        initial: &[f64],
        floor: f64,
        rng: &mut R,
    ) -> WirelessRun
    where
        R: Rng + ?Sized,
        F: FnMut(&mut R) -> Vec<f64>,
    {
        let m = initial.len();
        let mut averages = initial.to_vec();
        let mut allocations = vec![0u64; m];
        let mut scores = vec![0.0; m];
        for k in 1..=epochs {
            let u = sample(rng);
            assert_eq!(u.len(), m, "utility sampler returned wrong dimension");
            for n in 0..m {
                scores[n] = u[n] / averages[n].max(floor).powf(alpha);
            }
            let (_, pick) = choose_from_values(&scores, 0.0, rng);
            allocations[pick] += 1;
            let step = 1.0 / k as f64;
            for n in 0..m {
                let gained = if n == pick { u[n] } else { 0.0 };
                averages[n] += step * (gained - averages[n]);
            }
        }
        WirelessRun {
            averages,
            allocations,
            epochs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::wireless::wireless_reference;
    use super::*;
    use crate::kernels::{Purpose, RngStream};
    use crate::model::{Condition, SystemConfig};

    #[test]
    fn floor_examples() {
        assert_eq!(floor_utilities(&[-0.3, 0.5], 0.01), vec![0.01, 0.5]);
        assert_eq!(floor_utilities(&[0.2, 0.5], 0.01), vec![0.2, 0.5]);
        assert_eq!(floor_utilities(&[-1.0, 0.001], 0.01), vec![0.01, 0.01]);
    }

    #[test]
    fn alpha_zero_two_stations() {
        let idx = FairIndex::from_parts(&[6.0, 0.0], &[vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.3, 2.0], 0.0);
        assert_eq!(idx.values, vec![6.0, 0.0]);
    }

    #[test]
    fn symmetric_state_scores_equal() {
        let mut c = SystemConfig::fig2(4, 2.0);
        c.p_good = SystemConfig::destination_matrix(&[0.5; 4]);
        let ev = AnticipationEvaluator::new(&c);
        let s = SystemState {
            server: 0,
            queues: vec![2, 2, 2, 2],
            conditions: vec![Condition::Stay, Condition::Good, Condition::Good, Condition::Good],
            epoch: 5,
        };
        let idx = fair_index(&s, &ev, &[0.4; 4], 2.0, 0.01);
        assert_eq!(idx.values[1], idx.values[2]);
        assert_eq!(idx.values[2], idx.values[3]);
    }

    #[test]
    fn scratch_matches_fair_index_bits() {
        let c = SystemConfig::fig3(4, 1.5);
        let ev = AnticipationEvaluator::new(&c);
        let s = SystemState {
            server: 2,
            queues: vec![0, 3, 1, 4],
            conditions: vec![Condition::Good, Condition::Bad, Condition::Stay, Condition::Bad],
            epoch: 5,
        };
        let avg = [0.3, -0.2, 1.1, 0.05];
        let idx = fair_index(&s, &ev, &avg, 1.5, 0.01);
        let mut scratch = IndexScratch::default();
        let v = scratch.compute(&s, &ev, &floor_utilities(&avg, 0.01), 1.5);
        let a: Vec<u64> = idx.values.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn dispatch_examples() {
        let mut rng = RngStream::new(1, 0, Purpose::TieBreak);
        let idx = FairIndex {
            values: vec![3.0, 1.0, 1.0],
            floored: vec![1.0; 3],
            alpha: 1.0,
        };
        let (d, j) = choose_station(&idx, DEFAULT_TIE_TOLERANCE, &mut rng);
        assert_eq!(d.support, vec![0]);
        assert_eq!(j, 0);

        let tie = FairIndex {
            values: vec![2.0, 2.0],
            floored: vec![1.0; 2],
            alpha: 1.0,
        };
        let mut first = 0;
        let n = 10_000;
        for _ in 0..n {
            let (d, j) = choose_station(&tie, DEFAULT_TIE_TOLERANCE, &mut rng);
            assert_eq!(d.probabilities, vec![0.5, 0.5]);
            first += usize::from(j == 0);
        }
        let se = (0.25 / n as f64).sqrt();
        assert!((first as f64 / n as f64 - 0.5).abs() < 3.5 * se);

        let near = FairIndex {
            values: vec![1.0, 1.0 + 1e-13, 1.0 - 1e-13],
            floored: vec![1.0; 3],
            alpha: 1.0,
        };
        let (d, _) = choose_station(&near, DEFAULT_TIE_TOLERANCE, &mut rng);
        assert_eq!(d.support, vec![0, 1, 2]);
    }

    #[test]
    fn first_update_replaces_initial_value() {
        let mut t = UtilityTracker::new(2, 0.7, 1.0);
        t.update(&[0.2, -0.1], &[0.0, 1.0]);
        assert!((t.averages()[0] - 0.2).abs() < 1e-15);
        assert!((t.averages()[1] + 0.1).abs() < 1e-15);
        assert_eq!(t.realized_mean(), vec![0.0, 1.0]);
    }

    #[test]
    fn constant_input_contracts_monotonically() {
        let mut t = UtilityTracker::new(1, 5.0, 1.01);
        let mut prev = (5.0_f64 - 1.0).abs();
        // k = 1 jumps straight to the target, so start from the second step.
        t.update(&[3.0], &[0.0]);
        for _ in 0..1000 {
            t.update(&[1.0], &[0.0]);
            let gap = (t.averages()[0] - 1.0).abs();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn gamma_one_is_running_mean() {
        let mut rng = RngStream::new(3, 0, Purpose::Oracle);
        let mut t = UtilityTracker::new(3, 0.01, 1.0);
        let mut sum = [0.0; 3];
        let n = 5000;
        for _ in 0..n {
            let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
            for i in 0..3 {
                sum[i] += u[i];
            }
            t.update(&u, &u);
        }
        for i in 0..3 {
            assert!((t.averages()[i] - sum[i] / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn wireless_deterministic_alpha_zero() {
        let mut rng = RngStream::new(4, 0, Purpose::Oracle);
        let run = wireless_reference(|_| vec![2.0, 1.0], 0.0, 10_000, &[1.0, 1.0], 1e-9, &mut rng);
        assert_eq!(run.allocations, vec![10_000, 0]);
        assert!((run.averages[0] - 2.0).abs() < 1e-12);
        assert_eq!(run.averages[1], 0.0);
    }

    #[test]
    fn wireless_symmetric_users_equalize() {
        for alpha in [0.0, 1.0, 3.0] {
            let mut rng = RngStream::new(5, 0, Purpose::Oracle);
            let run = wireless_reference(
                |r: &mut RngStream| vec![r.random::<f64>(), r.random::<f64>()],
                alpha,
                200_000,
                &[0.5, 0.5],
                1e-9,
                &mut rng,
            );
            assert!((run.averages[0] - run.averages[1]).abs() < 0.01, "alpha {alpha}: {:?}", run.averages);
        }
    }
}
