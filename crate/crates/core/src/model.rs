//! Domain types for the lossy polling system and model-level diagnostics.
//!
//! Stations are indexed from 0 internally. Output files label them from 1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::quadrature::DurationRule;

/// Mean and spread of a travel-time law (normal, truncated to positive values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TravelLaw {
    pub mean: f64,
    pub sd: f64,
}

impl TravelLaw {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

/// Full parameter set of one polling system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Poisson arrival rate per station.
    pub lambda: Vec<f64>,
    /// Buffer capacity per station; arrivals to a full buffer are lost.
    pub buffers: Vec<u32>,
    /// Service (and idle-wait) times are exponential with mean `1 / service_rate`.
    pub service_rate: f64,
    pub travel_good: TravelLaw,
    pub travel_bad: TravelLaw,
    /// `p_good[i][j]`: probability that the route i -> j is good. Diagonal unused.
    pub p_good: Vec<Vec<f64>>,
    /// Gain per served customer.
    pub reward: f64,
    pub alpha: f64,
    /// Floor applied to average utilities before they enter the fairness weights.
    pub delta: f64,
    /// Step-size exponent of the average-utility recursion.
    pub gamma: f64,
    pub seed: u64,
}

impl SystemConfig {
    pub fn stations(&self) -> usize {
        self.lambda.len()
    }

    pub fn travel_law(&self, condition: Condition) -> Option<TravelLaw> {
        match condition {
            Condition::Good => Some(self.travel_good),
            Condition::Bad => Some(self.travel_bad),
            Condition::Stay => None,
        }
    }

    /// Expands a per-destination vector into a full matrix (`p[i][j] = v[j]`).
    pub fn destination_matrix(per_destination: &[f64]) -> Vec<Vec<f64>> {
        let m = per_destination.len();
        (0..m).map(|_| per_destination.to_vec()).collect()
    }

    /// Reference layout `fig2`: `m` stations, total rate 0.67 split evenly,
    /// the first two destinations good with probability 0.9, the rest 0.1.
    pub fn fig2(m: usize, alpha: f64) -> Self {
        let p: Vec<f64> = (0..m).map(|i| if i < 2 { 0.9 } else { 0.1 }).collect();
        Self {
            lambda: vec![0.67 / m as f64; m],
            buffers: vec![5; m],
            service_rate: 1.0 / 3.0,
            travel_good: TravelLaw::new(2.0, 0.1),
            travel_bad: TravelLaw::new(6.0, 0.1),
            p_good: Self::destination_matrix(&p),
            reward: 6.0,
            alpha,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            seed: 1,
        }
    }

    /// Reference layout `fig3`: first half of the stations are good
    /// (p = 0.9, rate 0.93/m), second half bad (p = 0.1, rate 0.37/m).
    pub fn fig3(m: usize, alpha: f64) -> Self {
        let half = m / 2;
        let p: Vec<f64> = (0..m).map(|i| if i < half { 0.9 } else { 0.1 }).collect();
        let lambda = (0..m)
            .map(|i| if i < half { 0.93 } else { 0.37 } / m as f64)
            .collect();
        Self {
            lambda,
            buffers: vec![4; m],
            service_rate: 1.0 / 3.0,
            travel_good: TravelLaw::new(2.0, 0.01),
            travel_bad: TravelLaw::new(6.0, 0.08),
            p_good: Self::destination_matrix(&p),
            reward: 4.0,
            alpha,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            seed: 1,
        }
    }
}

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_GAMMA: f64 = 1.01;

/// Travel condition towards a station, seen from the server's current location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Good,
    Bad,
    /// The station is the server's current location; no travel needed.
    Stay,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::Good => "good",
            Condition::Bad => "bad",
            Condition::Stay => "self",
        }
    }

    pub(crate) fn class_index(self) -> usize {
        match self {
            Condition::Good => 0,
            Condition::Bad => 1,
            Condition::Stay => 2,
        }
    }

    pub const ALL: [Condition; 3] = [Condition::Good, Condition::Bad, Condition::Stay];
}

/// Server location, queue contents and route conditions at a decision epoch.
///
/// The running averages live in [`crate::scheduler::UtilityTracker`]; together
/// the two make up the scheduler's full information set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemState {
    pub server: usize,
    pub queues: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub epoch: u64,
}

impl SystemState {
    /// Empty queues, server at station 0, conditions not yet drawn (all marked
    /// as `Bad` except the server's own entry).
    pub fn initial(m: usize) -> Self {
        let mut conditions = vec![Condition::Bad; m];
        conditions[0] = Condition::Stay;
        Self {
            server: 0,
            queues: vec![0; m],
            conditions,
            epoch: 1,
        }
    }

    /// Route class used when station `j` is chosen next.
    pub fn route_to(&self, j: usize) -> Condition {
        if j == self.server {
            Condition::Stay
        } else {
            self.conditions[j]
        }
    }

    pub fn check(&self, config: &SystemConfig) -> Result<(), crate::Error> {
        for (i, (&n, &b)) in self.queues.iter().zip(&config.buffers).enumerate() {
            if n > b {
                return Err(crate::Error::QueueBound {
                    station: i,
                    queue: n,
                    buffer: b,
                });
            }
        }
        let stays: Vec<usize> = self
            .conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Condition::Stay)
            .map(|(i, _)| i)
            .collect();
        if stays != [self.server] {
            return Err(crate::Error::Contract(format!(
                "condition vector must mark exactly the server location {} as self, found {:?}",
                self.server, stays
            )));
        }
        Ok(())
    }
}

/// A randomized decision: uniform over `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub probabilities: Vec<f64>,
    pub support: Vec<usize>,
}

impl Decision {
    pub fn uniform(m: usize, support: Vec<usize>) -> Self {
        assert!(!support.is_empty(), "decision support must be non-empty");
        let weight = 1.0 / support.len() as f64;
        let mut probabilities = vec![0.0; m];
        for &j in &support {
            probabilities[j] = weight;
        }
        Self {
            probabilities,
            support,
        }
    }

    pub fn point(m: usize, j: usize) -> Self {
        Self::uniform(m, vec![j])
    }
}

/// Everything that happened between two decision epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochOutcome {
    pub epoch: u64,
    pub from: usize,
    pub chosen: usize,
    pub conditions: Vec<Condition>,
    pub travel_time: f64,
    /// Service time, or waiting time when the chosen queue was empty.
    pub hold_time: f64,
    pub queues_before: Vec<u32>,
    pub queues_after: Vec<u32>,
    pub travel_arrivals: Vec<u64>,
    pub hold_arrivals: Vec<u64>,
    pub losses: Vec<u64>,
    pub served: bool,
    pub realized: Vec<f64>,
    pub anticipated: Vec<f64>,
}

impl EpochOutcome {
    pub fn arrivals(&self, i: usize) -> u64 {
        self.travel_arrivals[i] + self.hold_arrivals[i]
    }

    /// Checks arrivals = queue increase + losses + served departure at every station.
    pub fn conserves(&self) -> bool {
        (0..self.queues_before.len()).all(|i| {
            let departed = u64::from(self.served && i == self.chosen);
            let lhs = self.arrivals(i) as i64;
            let rhs = self.queues_after[i] as i64 - self.queues_before[i] as i64
                + self.losses[i] as i64
                + departed as i64;
            lhs == rhs
        })
    }
}

/// One failed configuration invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Result of [`validate_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Worst-case expected arrivals per epoch, using the truncated bad-travel mean.
    pub rho_b: f64,
    /// Same quantity with the raw bad-travel mean; the loss-vs-gain check uses this one.
    pub rho_b_raw: f64,
    pub loss_bound: f64,
    pub reward: f64,
    pub losses_below_gain: bool,
    pub violations: Vec<Violation>,
}

impl Diagnostics {
    /// No invariant is violated.
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Valid and the worst-case loss condition holds.
    pub fn passes(&self) -> bool {
        self.is_valid() && self.losses_below_gain
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rho_B (truncated travel mean) = {}", self.rho_b)?;
        writeln!(f, "rho_B (raw travel mean)       = {}", self.rho_b_raw)?;
        writeln!(f, "reward w                      = {}", self.reward)?;
        writeln!(
            f,
            "losses below gain (rho_B < w) = {}",
            if self.losses_below_gain { "pass" } else { "FAIL" }
        )?;
        writeln!(f, "anticipated loss bound l*     = {}", self.loss_bound)?;
        if self.violations.is_empty() {
            write!(f, "invariants                    = ok")
        } else {
            write!(f, "invariant violations:")?;
            for v in &self.violations {
                write!(f, "\n  - {v}")?;
            }
            Ok(())
        }
    }
}

/// Checks every configuration invariant and computes the worst-case load
/// `rho_B = sum_j lambda_j * (E[T | bad] + 1/mu_s)` and the loss bound.
pub fn validate_config(config: &SystemConfig) -> Diagnostics {
    let mut violations = Vec::new();
    let mut bad = |field: &str, message: String| {
        violations.push(Violation {
            field: field.to_string(),
            message,
        })
    };
    let m = config.stations();
    if m < 2 {
        bad("m", format!("need at least 2 stations, got {m}"));
    }
    for (i, &l) in config.lambda.iter().enumerate() {
        if !(l.is_finite() && l > 0.0) {
            bad("lambda", format!("station {} rate must be > 0, got {l}", i + 1));
        }
    }
    if config.buffers.len() != m {
        bad(
            "buffers",
            format!("expected {m} entries, got {}", config.buffers.len()),
        );
    }
    for (i, &b) in config.buffers.iter().enumerate() {
        if b < 1 {
            bad("buffers", format!("station {} buffer must be >= 1", i + 1));
        }
    }
    if !(config.service_rate.is_finite() && config.service_rate > 0.0) {
        bad(
            "service_rate",
            format!("must be > 0, got {}", config.service_rate),
        );
    }
    for (name, law) in [
        ("travel_good", config.travel_good),
        ("travel_bad", config.travel_bad),
    ] {
        if !(law.mean.is_finite() && law.mean > 0.0) {
            bad(name, format!("mean must be > 0, got {}", law.mean));
        }
        if !(law.sd.is_finite() && law.sd >= 0.0) {
            bad(name, format!("sd must be >= 0, got {}", law.sd));
        }
    }
    if config.travel_good.mean >= config.travel_bad.mean {
        bad(
            "travel_bad",
            format!(
                "good mean {} must be below bad mean {}",
                config.travel_good.mean, config.travel_bad.mean
            ),
        );
    }
    if config.p_good.len() != m || config.p_good.iter().any(|row| row.len() != m) {
        bad("p_good", format!("must be an {m} x {m} matrix"));
    } else {
        for (i, row) in config.p_good.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if i != j && !(p > 0.0 && p < 1.0) {
                    bad(
                        "p_good",
                        format!("p[{}][{}] = {p} must lie in (0, 1)", i + 1, j + 1),
                    );
                }
            }
        }
    }
    if !(config.reward.is_finite() && config.reward > 0.0) {
        bad("reward", format!("must be > 0, got {}", config.reward));
    }
    if !(config.alpha.is_finite() && config.alpha >= 0.0) {
        bad("alpha", format!("must be >= 0, got {}", config.alpha));
    }
    if !(config.delta.is_finite() && config.delta > 0.0) {
        bad("delta", format!("must be > 0, got {}", config.delta));
    }
    if !(config.gamma.is_finite() && config.gamma >= 1.0) {
        bad("gamma", format!("must be >= 1, got {}", config.gamma));
    }

    let total_rate: f64 = config.lambda.iter().map(|l| l.max(0.0)).sum();
    let hold_mean = if config.service_rate > 0.0 {
        1.0 / config.service_rate
    } else {
        f64::INFINITY
    };
    let law = config.travel_bad;
    let truncated_mean = if law.mean > 0.0 && law.sd >= 0.0 && law.sd.is_finite() {
        DurationRule::truncated_normal(law.mean, law.sd, crate::quadrature::DEFAULT_NODES).mean()
    } else {
        f64::NAN
    };
    let rho_b = total_rate * (truncated_mean + hold_mean);
    let rho_b_raw = total_rate * (law.mean + hold_mean);
    let max_rate = config.lambda.iter().cloned().fold(0.0_f64, f64::max);
    Diagnostics {
        rho_b,
        rho_b_raw,
        loss_bound: max_rate * (law.mean + hold_mean),
        reward: config.reward,
        losses_below_gain: rho_b_raw < config.reward,
        violations,
    }
}
