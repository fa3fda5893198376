//! Anticipated gains and losses.
//!
//! For station `i` and a decision to move to station `j`, the scheduler needs
//!
//! * the expected gain `I_i`: the reward `w` times the probability that a
//!   customer is waiting when the server gets to `i`;
//! * the expected loss `l_i(j)`: the mean overflow `(A + n_i - b_i)^+` where
//!   `A` is Poisson with random mean `lambda_i * D` and `D` is the travel time
//!   to `j` (zero for a stay) plus one service or wait time.
//!
//! Both depend on the state only through `(n_i, route class)`, so the
//! [`AnticipationEvaluator`] tabulates them once per configuration.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::kernels::{apply_arrivals, sample_arrivals, sample_service_time, sample_travel_time};
use crate::model::{Condition, Decision, SystemConfig, SystemState};
use crate::quadrature::{DurationRule, DEFAULT_NODES};
use crate::Result;

/// `E[(N - headroom)^+]` for `N ~ Poisson(mean)`.
///
/// Uses the finite complement `mean - k + sum_{j<k} (k-j) P(N=j)` when the
/// mean is at least the headroom, and the direct tail sum otherwise, so both
/// regimes avoid cancellation.
pub fn overflow_mean(mean: f64, headroom: u32) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let k = headroom as usize;
    if k == 0 {
        return mean;
    }
    let log_mean = mean.ln();
    if mean >= k as f64 {
        let mut log_p = -mean;
        let mut below = 0.0;
        for j in 0..k {
            if j > 0 {
                log_p += log_mean - (j as f64).ln();
            }
            below += (k - j) as f64 * log_p.exp();
        }
        return (mean - k as f64 + below).max(0.0);
    }
    // mean < k: terms beyond k decay at least geometrically with ratio mean/(j+1) < 1.
    let mut log_p = -mean;
    for j in 1..=k {
        log_p += log_mean - (j as f64).ln();
    }
    let mut sum = 0.0;
    let mut j = k;
    loop {
        j += 1;
        log_p += log_mean - (j as f64).ln();
        let term = (j - k) as f64 * log_p.exp();
        sum += term;
        let ratio = mean / (j + 1) as f64;
        // Remaining tail is bounded by term * sum_{r>=1} (1 + r) ratio^r.
        let tail = term * ratio * (2.0 - ratio) / ((1.0 - ratio) * (1.0 - ratio));
        if tail <= 1e-17 * sum || term == 0.0 {
            return sum;
        }
    }
}

/// Node counts for the travel and service quadrature rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureSettings {
    pub travel_nodes: usize,
    pub service_nodes: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            travel_nodes: DEFAULT_NODES,
            service_nodes: DEFAULT_NODES,
        }
    }
}

impl QuadratureSettings {
    pub fn doubled(self) -> Self {
        Self {
            travel_nodes: 2 * self.travel_nodes,
            service_nodes: 2 * self.service_nodes,
        }
    }
}

/// Quadrature rules for every duration the anticipation needs.
#[derive(Debug, Clone)]
pub struct DurationRules {
    pub travel_good: DurationRule,
    pub travel_bad: DurationRule,
    /// One service or wait time.
    pub hold: DurationRule,
    pub epoch_good: DurationRule,
    pub epoch_bad: DurationRule,
}

impl DurationRules {
    pub fn new(config: &SystemConfig, settings: QuadratureSettings) -> Self {
        let travel = |law: crate::TravelLaw| {
            DurationRule::truncated_normal(law.mean, law.sd, settings.travel_nodes)
        };
        let hold = DurationRule::exponential(config.service_rate, settings.service_nodes);
        Self::from_parts(travel(config.travel_good), travel(config.travel_bad), hold)
    }

    /// Assembles the rules from explicit travel and hold laws.
    pub fn from_parts(travel_good: DurationRule, travel_bad: DurationRule, hold: DurationRule) -> Self {
        Self {
            epoch_good: travel_good.convolve(&hold),
            epoch_bad: travel_bad.convolve(&hold),
            travel_good,
            travel_bad,
            hold,
        }
    }

    /// Travel time towards a station in the given condition (zero for a stay).
    pub fn travel(&self, condition: Condition) -> Option<&DurationRule> {
        match condition {
            Condition::Good => Some(&self.travel_good),
            Condition::Bad => Some(&self.travel_bad),
            Condition::Stay => None,
        }
    }

    /// Full epoch duration (travel plus hold) for the given route class.
    pub fn epoch(&self, route: Condition) -> &DurationRule {
        match route {
            Condition::Good => &self.epoch_good,
            Condition::Bad => &self.epoch_bad,
            Condition::Stay => &self.hold,
        }
    }
}

/// Expected gain at a station holding `queue` customers, reached via `condition`.
pub fn gain_value(reward: f64, lambda: f64, queue: u32, condition: Condition, rules: &DurationRules) -> f64 {
    if queue > 0 {
        return reward;
    }
    if lambda <= 0.0 {
        return 0.0;
    }
    match rules.travel(condition) {
        None => 0.0,
        Some(travel) => {
            let empty = travel.expect(|t| (-lambda * t).exp());
            reward * (1.0 - empty).clamp(0.0, 1.0)
        }
    }
}

/// Expected overflow at a station with `queue` of `buffer` slots over an epoch drawn from `epoch`.
pub fn loss_value(lambda: f64, queue: u32, buffer: u32, epoch: &DurationRule) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let headroom = buffer.saturating_sub(queue);
    epoch.expect(|d| overflow_mean(lambda * d, headroom))
}

/// `max_q lambda_q (mu_b + 1/mu_s)`, the uniform bound on anticipated losses.
pub fn loss_bound(config: &SystemConfig) -> f64 {
    let max_rate = config.lambda.iter().cloned().fold(0.0_f64, f64::max);
    max_rate * (config.travel_bad.mean + 1.0 / config.service_rate)
}

/// Tabulated anticipated gains and losses for one configuration.
///
/// Tables are filled at construction and read-only afterwards, so a shared
/// reference can be used from any number of threads.
#[derive(Debug, Clone)]
pub struct AnticipationEvaluator {
    reward: f64,
    lambda: Vec<f64>,
    buffers: Vec<u32>,
    bound: f64,
    rules: DurationRules,
    /// Per station and condition class: gain when the queue is empty.
    empty_gain: Vec<[f64; 3]>,
    /// Per station and route class: loss indexed by queue length.
    loss: Vec<[Vec<f64>; 3]>,
}

impl AnticipationEvaluator {
    pub fn new(config: &SystemConfig) -> Self {
        Self::with_settings(config, QuadratureSettings::default())
    }

    pub fn with_settings(config: &SystemConfig, settings: QuadratureSettings) -> Self {
        Self::with_rules(config, DurationRules::new(config, settings))
    }

    /// Builds the tables from explicit duration rules (e.g. point masses in tests).
    pub fn with_rules(config: &SystemConfig, rules: DurationRules) -> Self {
        let m = config.stations();
        let mut empty_gain = Vec::with_capacity(m);
        let mut loss = Vec::with_capacity(m);
        for i in 0..m {
            let (lambda, buffer) = (config.lambda[i], config.buffers[i]);
            let mut g = [0.0; 3];
            let mut l: [Vec<f64>; 3] = Default::default();
            for c in Condition::ALL {
                g[c.class_index()] = gain_value(config.reward, lambda, 0, c, &rules);
                l[c.class_index()] = (0..=buffer)
                    .map(|n| loss_value(lambda, n, buffer, rules.epoch(c)))
                    .collect();
            }
            empty_gain.push(g);
            loss.push(l);
        }
        Self {
            reward: config.reward,
            lambda: config.lambda.clone(),
            buffers: config.buffers.clone(),
            bound: loss_bound(config),
            rules,
            empty_gain,
            loss,
        }
    }

    pub fn stations(&self) -> usize {
        self.lambda.len()
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn rules(&self) -> &DurationRules {
        &self.rules
    }

    pub fn loss_bound(&self) -> f64 {
        self.bound
    }

    /// Gain at station `i` holding `queue` customers, reached via `condition`.
    #[inline]
    pub fn gain(&self, i: usize, queue: u32, condition: Condition) -> f64 {
        if queue > 0 {
            self.reward
        } else {
            self.empty_gain[i][condition.class_index()]
        }
    }

    /// Loss at station `i` holding `queue` customers when the epoch uses `route`.
    #[inline]
    pub fn loss(&self, i: usize, queue: u32, route: Condition) -> f64 {
        self.loss[i][route.class_index()][queue as usize]
    }

    /// `I_i(z)`.
    pub fn expected_gain(&self, i: usize, state: &SystemState) -> f64 {
        self.gain(i, state.queues[i], state.route_to(i))
    }

    /// `l_i(j, z)`: loss at `i` if the server moves to `j`.
    pub fn expected_loss(&self, i: usize, j: usize, state: &SystemState) -> f64 {
        self.loss(i, state.queues[i], state.route_to(j))
    }

    /// Anticipated utilities `u_i = beta_i I_i - sum_j beta_j l_i(j)`.
    pub fn anticipated_utilities(&self, decision: &Decision, state: &SystemState) -> Vec<f64> {
        let m = self.stations();
        (0..m)
            .map(|i| {
                let gain = decision.probabilities[i] * self.expected_gain(i, state);
                let loss: f64 = decision
                    .support
                    .iter()
                    .map(|&j| decision.probabilities[j] * self.expected_loss(i, j, state))
                    .sum();
                gain - loss
            })
            .collect()
    }

    /// Anticipated utilities of a pure move to `j`, written into `out`.
    pub(crate) fn anticipated_for_move(&self, j: usize, state: &SystemState, out: &mut [f64]) {
        let route = state.route_to(j);
        for (i, slot) in out.iter_mut().enumerate() {
            let gain = if i == j { self.gain(i, state.queues[i], route) } else { 0.0 };
            *slot = gain - self.loss(i, state.queues[i], route);
        }
    }

    pub fn table_rows(&self) -> Vec<TableRow> {
        let mut rows = Vec::new();
        for i in 0..self.stations() {
            for c in Condition::ALL {
                for n in 0..=self.buffers[i] {
                    rows.push(TableRow {
                        station: i + 1,
                        condition: c.label(),
                        n,
                        lambda: self.lambda[i],
                        b: self.buffers[i],
                        same_station: c == Condition::Stay,
                        gain: self.gain(i, n, c),
                        loss: self.loss(i, n, c),
                    });
                }
            }
        }
        rows
    }

    /// Dumps the evaluation table as CSV.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.table_rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub station: usize,
    pub condition: &'static str,
    pub n: u32,
    pub lambda: f64,
    pub b: u32,
    pub same_station: bool,
    pub gain: f64,
    pub loss: f64,
}

/// Monte-Carlo estimates of the same expectations, drawn through the
/// simulator's sampling kernels rather than the quadrature rules.
pub mod monte_carlo {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Estimate {
        pub mean: f64,
        pub se: f64,
        pub samples: usize,
    }

    impl Estimate {
        fn from_sums(sum: f64, sum_sq: f64, n: usize) -> Self {
            let nf = n as f64;
            let mean = sum / nf;
            let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
            Self {
                mean,
                se: (var / nf).sqrt(),
                samples: n,
            }
        }

        /// Whether `value` lies within `k` standard errors of the estimate.
        pub fn agrees(&self, value: f64, k: f64) -> bool {
            (value - self.mean).abs() <= k * self.se.max(f64::EPSILON * value.abs().max(1e-300))
        }
    }

    /// Gain at an empty station reached via travel under `condition`.
    pub fn gain<R: Rng + ?Sized>(
        config: &SystemConfig,
        lambda: f64,
        condition: Condition,
        samples: usize,
        rng: &mut R,
    ) -> Result<Estimate> {
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let t = sample_travel_time(condition, config, rng)?;
            let x = if sample_arrivals(lambda, t, rng) > 0 { config.reward } else { 0.0 };
            sum += x;
            sum_sq += x * x;
        }
        Ok(Estimate::from_sums(sum, sum_sq, samples))
    }

    /// Overflow at a station with `queue` of `buffer` over travel under
    /// `route` followed by one service time, applied in two phases.
    pub fn loss<R: Rng + ?Sized>(
        config: &SystemConfig,
        lambda: f64,
        queue: u32,
        buffer: u32,
        route: Condition,
        samples: usize,
        rng: &mut R,
    ) -> Result<Estimate> {
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let t = match route {
                Condition::Stay => 0.0,
                c => sample_travel_time(c, config, rng)?,
            };
            let (mid, lost_travel) = apply_arrivals(queue, sample_arrivals(lambda, t, rng), buffer)?;
            let hold = sample_service_time(config, rng);
            let (_, lost_hold) = apply_arrivals(mid, sample_arrivals(lambda, hold, rng), buffer)?;
            let x = (lost_travel + lost_hold) as f64;
            sum += x;
            sum_sq += x * x;
        }
        Ok(Estimate::from_sums(sum, sum_sq, samples))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Purpose, RngStream};

    /// Direct summation of the Poisson tail, independent of `overflow_mean`'s branches.
    fn overflow_brute(mean: f64, k: u32) -> f64 {
        let mut p = (-mean).exp();
        let mut s = 0.0;
        for j in 0..2000u32 {
            if j > 0 {
                p *= mean / j as f64;
            }
            if j > k {
                s += (j - k) as f64 * p;
            }
        }
        s
    }

    #[test]
    fn overflow_matches_brute_force() {
        for &mean in &[1e-6, 0.01, 0.3, 1.0, 2.5, 7.0, 30.0, 200.0] {
            for k in [0, 1, 2, 5, 10, 40] {
                let a = overflow_mean(mean, k);
                let b = overflow_brute(mean, k);
                assert!(
                    (a - b).abs() <= 1e-12 * b.max(1.0) + 1e-300,
                    "mean {mean} k {k}: {a} vs {b}"
                );
            }
        }
        assert_eq!(overflow_mean(0.0, 3), 0.0);
        assert_eq!(overflow_mean(2.0, 0), 2.0);
    }

    fn small_config() -> SystemConfig {
        SystemConfig::fig2(3, 1.0)
    }

    fn state(server: usize, queues: Vec<u32>, conditions: Vec<Condition>) -> SystemState {
        SystemState {
            server,
            queues,
            conditions,
            epoch: 1,
        }
    }

    #[test]
    fn gain_trivial_cases() {
        let c = small_config();
        let ev = AnticipationEvaluator::new(&c);
        let s = state(0, vec![0, 4, 0], vec![Condition::Stay, Condition::Good, Condition::Bad]);
        assert_eq!(ev.expected_gain(1, &s), c.reward);
        assert_eq!(ev.expected_gain(0, &s), 0.0);
        let g = ev.expected_gain(2, &s);
        assert!(g > 0.0 && g < c.reward);

        let mut busy = c.clone();
        busy.lambda = vec![1e3; 3];
        let ev = AnticipationEvaluator::new(&busy);
        let s = state(0, vec![0, 0, 0], vec![Condition::Stay, Condition::Good, Condition::Bad]);
        assert!((ev.expected_gain(1, &s) - busy.reward).abs() < 1e-12);
    }

    #[test]
    fn loss_trivial_cases() {
        let mut c = small_config();
        c.lambda = vec![0.0, 0.5, 0.5];
        let ev = AnticipationEvaluator::new(&c);
        let s = state(0, vec![5, 5, 5], vec![Condition::Stay, Condition::Good, Condition::Bad]);
        assert_eq!(ev.expected_loss(0, 2, &s), 0.0);

        // Full buffer, degenerate durations: every arrival overflows.
        let rules = DurationRules::from_parts(
            DurationRule::point_mass(2.0),
            DurationRule::point_mass(6.0),
            DurationRule::point_mass(3.0),
        );
        let ev = AnticipationEvaluator::with_rules(&c, rules);
        assert!((ev.expected_loss(1, 2, &s) - 0.5 * 9.0).abs() < 1e-12);
        assert!((ev.expected_loss(1, 1, &s) - 0.5 * 5.0).abs() < 1e-12);
        assert!((ev.expected_loss(1, 0, &s) - 0.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_matches_fresh_evaluation_exactly() {
        let c = small_config();
        let ev = AnticipationEvaluator::new(&c);
        for i in 0..3 {
            for cond in Condition::ALL {
                for n in 0..=c.buffers[i] {
                    let fresh = loss_value(c.lambda[i], n, c.buffers[i], ev.rules().epoch(cond));
                    assert_eq!(ev.loss(i, n, cond).to_bits(), fresh.to_bits());
                    let g = gain_value(c.reward, c.lambda[i], n, cond, ev.rules());
                    assert_eq!(ev.gain(i, n, cond).to_bits(), g.to_bits());
                }
            }
        }
    }

    #[test]
    fn doubling_nodes_changes_little() {
        let c = SystemConfig::fig3(4, 1.0);
        let a = AnticipationEvaluator::new(&c);
        let b = AnticipationEvaluator::with_settings(&c, QuadratureSettings::default().doubled());
        for (ra, rb) in a.table_rows().iter().zip(b.table_rows()) {
            assert!((ra.loss - rb.loss).abs() < 1e-8, "{ra:?} vs {rb:?}");
            assert!((ra.gain - rb.gain).abs() < 1e-8);
        }
    }

    #[test]
    fn point_mass_decision_utilities() {
        let mut c = small_config();
        c.lambda = vec![0.0; 3];
        let ev = AnticipationEvaluator::new(&c);
        let s = state(0, vec![1, 2, 0], vec![Condition::Stay, Condition::Good, Condition::Bad]);
        let u = ev.anticipated_utilities(&Decision::point(3, 1), &s);
        assert_eq!(u, vec![0.0, c.reward, 0.0]);
    }

    #[test]
    fn mixed_decision_is_average_of_points() {
        let c = small_config();
        let ev = AnticipationEvaluator::new(&c);
        let s = state(1, vec![5, 2, 0], vec![Condition::Good, Condition::Stay, Condition::Bad]);
        let a = ev.anticipated_utilities(&Decision::point(3, 0), &s);
        let b = ev.anticipated_utilities(&Decision::point(3, 2), &s);
        let mix = ev.anticipated_utilities(&Decision::uniform(3, vec![0, 2]), &s);
        for i in 0..3 {
            assert!((mix[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
        let mut buf = vec![0.0; 3];
        ev.anticipated_for_move(2, &s, &mut buf);
        assert_eq!(buf, b);
    }

    #[test]
    fn loss_bound_examples() {
        let mut c = SystemConfig::fig2(2, 1.0);
        c.lambda = vec![0.1, 0.2];
        assert!((loss_bound(&c) - 1.8).abs() < 1e-12);
        c.lambda = vec![0.3, 0.3];
        assert!((loss_bound(&c) - 0.3 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn bad_route_loses_more_when_spreads_match() {
        let c = SystemConfig::fig2(3, 1.0);
        let ev = AnticipationEvaluator::new(&c);
        for i in 0..3 {
            for n in 0..=c.buffers[i] {
                assert!(ev.loss(i, n, Condition::Bad) >= ev.loss(i, n, Condition::Good));
                assert!(ev.loss(i, n, Condition::Good) >= ev.loss(i, n, Condition::Stay));
            }
        }
    }

    #[test]
    fn monte_carlo_gain_and_loss_agree() {
        let c = SystemConfig::fig2(5, 1.0);
        let mut rng = RngStream::new(99, 0, Purpose::Oracle);
        let rules = DurationRules::new(&c, QuadratureSettings::default());
        let q = gain_value(c.reward, 0.134, 0, Condition::Good, &rules);
        let est = monte_carlo::gain(&c, 0.134, Condition::Good, 1_000_000, &mut rng).unwrap();
        assert!(est.agrees(q, 3.0), "gain {q} vs {est:?}");

        let q = loss_value(0.134, 2, 5, rules.epoch(Condition::Bad));
        let est = monte_carlo::loss(&c, 0.134, 2, 5, Condition::Bad, 1_000_000, &mut rng).unwrap();
        assert!(est.agrees(q, 3.0), "loss {q} vs {est:?}");
    }
}
