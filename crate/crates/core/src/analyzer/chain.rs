//! Enumeration of the frozen-policy chain `Y = (S, N, C)`.
//!
//! `S` is the server location before the decision, `N` the queue vector at the
//! decision epoch and `C` the route conditions from `S` to every other
//! station. Everything that does not depend on the frozen utility vector
//! (queue kernels, per-state gains and losses) lives in [`ChainSkeleton`];
//! [`FrozenChain`] only adds the decisions.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::anticipation::{AnticipationEvaluator, DurationRules, QuadratureSettings};
use crate::model::{Condition, SystemConfig, SystemState};
use crate::quadrature::DurationRule;
use crate::scheduler::{argmax_within, index_value, DEFAULT_TIE_TOLERANCE};
use crate::{Error, Result};

pub const DEFAULT_STATE_CAP: u64 = 100_000;
pub const MAX_STATIONS: usize = 4;

/// Largest number of stored queue-kernel entries.
const KERNEL_ENTRY_CAP: u64 = 50_000_000;

/// Mixed-radix indexing of chain states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSpace {
    buffers: Vec<u32>,
    strides: Vec<usize>,
    queue_count: usize,
    condition_count: usize,
}

impl ChainSpace {
    pub fn new(buffers: &[u32]) -> Self {
        let mut strides = Vec::with_capacity(buffers.len());
        let mut q = 1usize;
        for &b in buffers {
            strides.push(q);
            q *= b as usize + 1;
        }
        Self {
            buffers: buffers.to_vec(),
            strides,
            queue_count: q,
            condition_count: 1 << (buffers.len() - 1),
        }
    }

    /// `m * prod(b_i + 1) * 2^(m-1)`, without overflow.
    pub fn count_for(buffers: &[u32]) -> u64 {
        let m = buffers.len() as u64;
        let q: u64 = buffers.iter().map(|&b| u64::from(b) + 1).product();
        m.saturating_mul(q).saturating_mul(1u64 << (buffers.len().saturating_sub(1)))
    }

    pub fn stations(&self) -> usize {
        self.buffers.len()
    }

    pub fn len(&self) -> usize {
        self.stations() * self.queue_count * self.condition_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queue_count(&self) -> usize {
        self.queue_count
    }

    pub fn condition_count(&self) -> usize {
        self.condition_count
    }

    pub fn queue_index(&self, queues: &[u32]) -> usize {
        queues.iter().zip(&self.strides).map(|(&n, &s)| n as usize * s).sum()
    }

    pub fn queues_of(&self, mut q: usize) -> Vec<u32> {
        self.buffers
            .iter()
            .map(|&b| {
                let r = b as usize + 1;
                let n = q % r;
                q /= r;
                n as u32
            })
            .collect()
    }

    /// Bit `t` of the mask is set when the `t`-th station other than `server` is good.
    pub fn condition_mask(&self, server: usize, conditions: &[Condition]) -> usize {
        let mut mask = 0;
        let mut bit = 0;
        for (i, c) in conditions.iter().enumerate() {
            if i == server {
                continue;
            }
            if *c == Condition::Good {
                mask |= 1 << bit;
            }
            bit += 1;
        }
        mask
    }

    pub fn conditions_of(&self, server: usize, mask: usize) -> Vec<Condition> {
        let mut bit = 0;
        (0..self.stations())
            .map(|i| {
                if i == server {
                    return Condition::Stay;
                }
                let good = mask >> bit & 1 == 1;
                bit += 1;
                if good {
                    Condition::Good
                } else {
                    Condition::Bad
                }
            })
            .collect()
    }

    pub fn index(&self, server: usize, queue_index: usize, mask: usize) -> usize {
        (server * self.queue_count + queue_index) * self.condition_count + mask
    }

    pub fn index_of(&self, server: usize, queues: &[u32], conditions: &[Condition]) -> usize {
        self.index(server, self.queue_index(queues), self.condition_mask(server, conditions))
    }

    /// `(server, queue index, condition mask)`.
    pub fn split(&self, y: usize) -> (usize, usize, usize) {
        let mask = y % self.condition_count;
        let rest = y / self.condition_count;
        (rest / self.queue_count, rest % self.queue_count, mask)
    }

    pub fn state(&self, y: usize) -> SystemState {
        let (s, q, mask) = self.split(y);
        SystemState {
            server: s,
            queues: self.queues_of(q),
            conditions: self.conditions_of(s, mask),
            epoch: 0,
        }
    }

    /// Compact label such as `S=1 N=0|2 C=self|g`; stations are 1-based.
    pub fn label(&self, y: usize) -> String {
        let st = self.state(y);
        let n: Vec<String> = st.queues.iter().map(u32::to_string).collect();
        let c: Vec<&str> = st
            .conditions
            .iter()
            .map(|c| match c {
                Condition::Good => "g",
                Condition::Bad => "b",
                Condition::Stay => "self",
            })
            .collect();
        format!("S={} N={} C={}", st.server + 1, n.join("|"), c.join("|"))
    }
}

/// Probabilities of `min(n + Poisson(mean), cap)` as a vector over `n..=cap`.
fn capped_poisson(mean: f64, headroom: u32) -> Vec<f64> {
    let h = headroom as usize;
    let mut out = vec![0.0; h + 1];
    if mean <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    let mut p = (-mean).exp();
    let mut below = 0.0;
    for (k, slot) in out.iter_mut().enumerate().take(h) {
        if k > 0 {
            p *= mean / k as f64;
        }
        *slot = p;
        below += p;
    }
    out[h] = (1.0 - below).max(0.0);
    out
}

/// Distribution of the next queue length at a station that is not the
/// destination (or at the destination for a stay handled separately).
fn passive_next(n: u32, b: u32, mean: f64, out: &mut [f64]) {
    out.fill(0.0);
    for (k, p) in capped_poisson(mean, b - n).into_iter().enumerate() {
        out[n as usize + k] += p;
    }
}

/// Next queue length at the destination `j`: arrivals over travel `t` then
/// hold `d`, one departure if a customer was present when the server arrived.
fn destination_next(n: u32, b: u32, lambda: f64, t: f64, d: f64, out: &mut [f64]) {
    out.fill(0.0);
    if n >= 1 {
        for (k, p) in capped_poisson(lambda * (t + d), b - n).into_iter().enumerate() {
            out[n as usize + k - 1] += p;
        }
        return;
    }
    // Empty on departure: served iff at least one arrival during travel.
    let empty = (-lambda * t).exp();
    let hold_only = capped_poisson(lambda * d, b);
    let total = capped_poisson(lambda * (t + d), b);
    let bu = b as usize;
    for x in 0..=bu {
        let mut p = empty * hold_only[x];
        if x < bu {
            p += (total[x + 1] - empty * hold_only[x + 1]).max(0.0);
        }
        out[x] = p;
    }
}

/// Per-state quantities that do not depend on the frozen utilities.
#[derive(Debug, Clone)]
struct StateData {
    /// `gains[j]`: expected gain at `j` if `j` is chosen.
    gains: Vec<f64>,
    /// `losses[j * m + i]`: expected loss at `i` if `j` is chosen.
    losses: Vec<f64>,
}

/// The utility-independent part of the chain.
#[derive(Debug)]
pub struct ChainSkeleton {
    config: SystemConfig,
    space: ChainSpace,
    evaluator: AnticipationEvaluator,
    /// Keyed by `(queue index, destination, route class)`: next queue-vector law.
    kernels: Vec<Vec<f64>>,
    /// `condition_probs[j][mask]`: fresh conditions seen from `j`.
    condition_probs: Vec<Vec<f64>>,
    states: Vec<StateData>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub quadrature: QuadratureSettings,
    pub state_cap: u64,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            quadrature: QuadratureSettings::default(),
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

impl ChainSkeleton {
    pub fn new(config: &SystemConfig, settings: ChainSettings) -> Result<Self> {
        let m = config.stations();
        if config.buffers.len() != m || config.p_good.len() != m || config.p_good.iter().any(|r| r.len() != m) {
            return Err(Error::Contract("buffer and route-probability shapes must match the station count".into()));
        }
        let states = ChainSpace::count_for(&config.buffers);
        if states > settings.state_cap {
            return Err(Error::StateCap {
                states,
                cap: settings.state_cap,
            });
        }
        if !(2..=MAX_STATIONS).contains(&m) {
            return Err(Error::Contract(format!(
                "exact analysis supports 2 to {MAX_STATIONS} stations, got {m}"
            )));
        }
        let space = ChainSpace::new(&config.buffers);
        let q = space.queue_count() as u64;
        let entries = q * q * 3 * m as u64;
        if entries > KERNEL_ENTRY_CAP {
            return Err(Error::StateCap {
                states: entries,
                cap: KERNEL_ENTRY_CAP,
            });
        }

        let rules = DurationRules::new(config, settings.quadrature);
        let evaluator = AnticipationEvaluator::with_rules(config, rules.clone());

        let keys: Vec<(usize, usize, Condition)> = (0..space.queue_count())
            .flat_map(|qi| (0..m).flat_map(move |j| Condition::ALL.into_iter().map(move |c| (qi, j, c))))
            .collect();
        let kernels: Vec<Vec<f64>> = keys
            .par_iter()
            .map(|&(qi, j, c)| queue_kernel(config, &space, &rules, qi, j, c))
            .collect();

        let condition_probs = (0..m)
            .map(|j| {
                (0..space.condition_count())
                    .map(|mask| {
                        space
                            .conditions_of(j, mask)
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| *i != j)
                            .map(|(i, c)| {
                                let p = config.p_good[j][i];
                                if *c == Condition::Good {
                                    p
                                } else {
                                    1.0 - p
                                }
                            })
                            .product()
                    })
                    .collect()
            })
            .collect();

        let state_data = (0..space.len())
            .into_par_iter()
            .map(|y| {
                let st = space.state(y);
                let gains = (0..m).map(|j| evaluator.expected_gain(j, &st)).collect();
                let mut losses = vec![0.0; m * m];
                for j in 0..m {
                    for i in 0..m {
                        losses[j * m + i] = evaluator.expected_loss(i, j, &st);
                    }
                }
                StateData { gains, losses }
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            space,
            evaluator,
            kernels,
            condition_probs,
            states: state_data,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn space(&self) -> &ChainSpace {
        &self.space
    }

    pub fn evaluator(&self) -> &AnticipationEvaluator {
        &self.evaluator
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    fn kernel(&self, queue_index: usize, j: usize, route: Condition) -> &[f64] {
        let m = self.space.stations();
        &self.kernels[(queue_index * m + j) * 3 + route.class_index()]
    }

    /// Fair-index scores at state `y` under floored utilities `floored`.
    pub fn scores(&self, y: usize, floored: &[f64]) -> Vec<f64> {
        let m = self.space.stations();
        let weights: Vec<f64> = floored.iter().map(|&u| u.powf(-self.config.alpha)).collect();
        let data = &self.states[y];
        (0..m)
            .map(|j| {
                let row = &data.losses[j * m..(j + 1) * m];
                index_value(data.gains[j], weights[j], row.iter().copied(), &weights)
            })
            .collect()
    }

    /// Argmax set at every state under frozen utilities `ubar`.
    pub fn decisions(&self, ubar: &[f64], tolerance: f64) -> Vec<Vec<usize>> {
        let floored: Vec<f64> = ubar.iter().map(|&u| u.max(self.config.delta)).collect();
        (0..self.len())
            .into_par_iter()
            .map(|y| argmax_within(&self.scores(y, &floored), tolerance))
            .collect()
    }

    /// Anticipated utilities at `y` of a pure move to `j`.
    pub fn anticipated(&self, y: usize, j: usize) -> Vec<f64> {
        let m = self.space.stations();
        let data = &self.states[y];
        (0..m)
            .map(|i| {
                let gain = if i == j { data.gains[j] } else { 0.0 };
                gain - data.losses[j * m + i]
            })
            .collect()
    }

    /// Distribution over the initial chain state: server at station 0, empty
    /// queues, fresh conditions.
    pub fn initial_distribution(&self) -> Vec<(usize, f64)> {
        let q0 = 0;
        self.condition_probs[0]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(mask, &p)| (self.space.index(0, q0, mask), p))
            .collect()
    }
}

fn queue_kernel(
    config: &SystemConfig,
    space: &ChainSpace,
    rules: &DurationRules,
    queue_index: usize,
    j: usize,
    route: Condition,
) -> Vec<f64> {
    let m = space.stations();
    let queues = space.queues_of(queue_index);
    let zero = DurationRule::zero();
    let travel = rules.travel(route).unwrap_or(&zero);
    let mut joint = vec![0.0; space.queue_count()];
    let mut marginals: Vec<Vec<f64>> = config.buffers.iter().map(|&b| vec![0.0; b as usize + 1]).collect();
    let mut scratch = vec![0.0; space.queue_count()];
    let mut product = vec![0.0; space.queue_count()];
    for (t, wt) in travel.iter() {
        for (d, wd) in rules.hold.iter() {
            let w = wt * wd;
            for i in 0..m {
                let (n, b, lambda) = (queues[i], config.buffers[i], config.lambda[i]);
                if i == j {
                    destination_next(n, b, lambda, t, d, &mut marginals[i]);
                } else {
                    passive_next(n, b, lambda * (t + d), &mut marginals[i]);
                }
            }
            // Outer product of the marginals; station 0 varies fastest.
            let mut len = 1;
            product[0] = 1.0;
            for marg in &marginals {
                let r = marg.len();
                for (k, &pk) in marg.iter().enumerate() {
                    for x in 0..len {
                        scratch[k * len + x] = product[x] * pk;
                    }
                }
                len *= r;
                product[..len].copy_from_slice(&scratch[..len]);
            }
            for (acc, &p) in joint.iter_mut().zip(&product) {
                *acc += w * p;
            }
        }
    }
    joint
}

/// The chain under decisions frozen at `ubar`.
#[derive(Debug, Clone)]
pub struct FrozenChain {
    skeleton: Arc<ChainSkeleton>,
    ubar: Vec<f64>,
    supports: Vec<Vec<usize>>,
}

impl FrozenChain {
    pub fn new(skeleton: Arc<ChainSkeleton>, ubar: &[f64]) -> Self {
        let supports = skeleton.decisions(ubar, DEFAULT_TIE_TOLERANCE);
        Self {
            skeleton,
            ubar: ubar.to_vec(),
            supports,
        }
    }

    pub fn skeleton(&self) -> &ChainSkeleton {
        &self.skeleton
    }

    pub fn space(&self) -> &ChainSpace {
        self.skeleton.space()
    }

    pub fn ubar(&self) -> &[f64] {
        &self.ubar
    }

    pub fn len(&self) -> usize {
        self.skeleton.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skeleton.is_empty()
    }

    /// Argmax set of the frozen policy at `y`.
    pub fn support(&self, y: usize) -> &[usize] {
        &self.supports[y]
    }

    /// Sparse transition row of `y`: `(target, probability)` with positive probabilities.
    pub fn row(&self, y: usize) -> Vec<(usize, f64)> {
        let sk = &*self.skeleton;
        let space = sk.space();
        let (s, qi, mask) = space.split(y);
        let conditions = space.conditions_of(s, mask);
        let support = &self.supports[y];
        let share = 1.0 / support.len() as f64;
        let mut out = Vec::new();
        for &j in support {
            let route = if j == s { Condition::Stay } else { conditions[j] };
            let kernel = sk.kernel(qi, j, route);
            for (q2, &pq) in kernel.iter().enumerate() {
                if pq <= 0.0 {
                    continue;
                }
                for (mask2, &pc) in sk.condition_probs[j].iter().enumerate() {
                    let p = share * pq * pc;
                    if p > 0.0 {
                        out.push((space.index(j, q2, mask2), p));
                    }
                }
            }
        }
        out
    }

    /// All rows.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.len()).into_par_iter().map(|y| self.row(y)).collect()
    }

    /// Anticipated utilities at `y` under the frozen randomized decision.
    pub fn anticipated(&self, y: usize) -> Vec<f64> {
        let support = &self.supports[y];
        let share = 1.0 / support.len() as f64;
        let m = self.space().stations();
        let mut out = vec![0.0; m];
        for &j in support {
            for (o, u) in out.iter_mut().zip(self.skeleton.anticipated(y, j)) {
                *o += share * u;
            }
        }
        out
    }

    /// CSV of nonzero transitions with state labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let space = self.space();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["from", "from_label", "to", "to_label", "probability"])?;
        for y in 0..self.len() {
            let from = space.label(y);
            for (z, p) in self.row(y) {
                w.write_record([y.to_string(), from.clone(), z.to_string(), space.label(z), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_round_trips() {
        let space = ChainSpace::new(&[2, 1, 3]);
        assert_eq!(space.len(), 3 * 24 * 4);
        for y in 0..space.len() {
            let st = space.state(y);
            assert_eq!(space.index_of(st.server, &st.queues, &st.conditions), y);
        }
    }

    #[test]
    fn capped_poisson_sums_to_one() {
        for mean in [0.0, 0.1, 2.0, 40.0] {
            for h in 0..5 {
                let v = capped_poisson(mean, h);
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn destination_kernel_is_a_distribution() {
        let mut out = vec![0.0; 4];
        for n in 0..=3 {
            destination_next(n, 3, 0.4, 2.0, 1.5, &mut out);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        // Empty queue, no arrivals possible: nothing to serve.
        destination_next(0, 3, 0.0, 2.0, 1.5, &mut out);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
