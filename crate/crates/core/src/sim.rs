//! The decision-epoch simulator.
//!
//! One epoch: draw route conditions, score stations, pick one, travel there
//! (arrivals everywhere during the trip), hold for a service or idle-wait time
//! (arrivals everywhere again), serve one customer if one was waiting on
//! arrival, then update the running averages.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anticipation::AnticipationEvaluator;
use crate::kernels::{
    apply_arrivals, sample_arrivals, sample_conditions_into, sample_service_time, sample_travel_time, Streams,
};
use crate::metrics::mof;
use crate::model::{validate_config, Condition, EpochOutcome, SystemConfig, SystemState};
use crate::scheduler::{choose_from_values, IndexScratch, UtilityTracker, DEFAULT_TIE_TOLERANCE};
use crate::{Error, Result};

/// Which anticipated utility vector feeds the `Ubar` recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AverageDrive {
    /// The pure move actually taken.
    #[default]
    Realized,
    /// The randomized decision (uniform over the argmax set).
    Mixed,
}

/// Where the fairness weights come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Policy {
    /// Weights from the running average `Ubar`.
    #[default]
    Adaptive,
    /// Weights from a fixed vector; `Ubar` is still tracked.
    Frozen(Vec<f64>),
}

/// How route conditions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditionMode {
    #[default]
    Random,
    /// Every route is good (an idealized system with no bad travel).
    AllGood,
}

pub const DEFAULT_THIN: u64 = 100;

/// Epochs at which the smallest visit count is recorded.
pub const VISIT_CHECKPOINTS: [u64; 3] = [1_000, 10_000, 100_000];

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub tie_tolerance: f64,
    pub drive: AverageDrive,
    pub policy: Policy,
    pub conditions: ConditionMode,
    /// Snapshot interval in epochs; 0 keeps only the final state.
    pub thin: u64,
    /// Keep every [`EpochOutcome`] in the trajectory.
    pub record_outcomes: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tie_tolerance: DEFAULT_TIE_TOLERANCE,
            drive: AverageDrive::Realized,
            policy: Policy::Adaptive,
            conditions: ConditionMode::Random,
            thin: DEFAULT_THIN,
            record_outcomes: false,
        }
    }
}

/// State after epoch `epoch`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub epoch: u64,
    /// Location before the move.
    pub server: usize,
    pub chosen: usize,
    pub queues: Vec<u32>,
    pub ubar: Vec<f64>,
    pub vbar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_state: SystemState,
    pub outcomes: Vec<EpochOutcome>,
}

impl Trajectory {
    pub fn stations(&self) -> usize {
        self.final_state.queues.len()
    }

    /// CSV with columns `epoch, server, chosen, N_i.., Ubar_i.., Vbar_i..`; stations are 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = self.stations();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "server".into(), "chosen".into()];
        for prefix in ["N", "Ubar", "Vbar"] {
            header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
        }
        w.write_record(&header)?;
        for s in &self.snapshots {
            let mut rec = vec![s.epoch.to_string(), (s.server + 1).to_string(), (s.chosen + 1).to_string()];
            rec.extend(s.queues.iter().map(|n| n.to_string()));
            rec.extend(s.ubar.iter().map(|u| u.to_string()));
            rec.extend(s.vbar.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub replication: u64,
    pub epochs: u64,
    pub ubar: Vec<f64>,
    pub vbar: Vec<f64>,
    pub visits: Vec<u64>,
    pub losses: Vec<u64>,
    pub services: Vec<u64>,
    pub mof: f64,
    /// `sum_i Ubar_i`.
    pub server_utility: f64,
    /// `(epoch, smallest visit count)` at each checkpoint reached.
    pub min_visits: Vec<(u64, u64)>,
    /// Epochs where an anticipated utility left `[-loss bound, w]`.
    pub bound_violations: u64,
    /// Epochs failing arrivals = queue change + losses + departures.
    pub conservation_failures: u64,
}

/// Runs epochs against a fixed configuration, reusing its buffers between epochs.
pub struct Simulator<'a> {
    config: &'a SystemConfig,
    evaluator: &'a AnticipationEvaluator,
    options: SimOptions,
    state: SystemState,
    tracker: UtilityTracker,
    streams: Streams,
    scratch: IndexScratch,
    floored: Vec<f64>,
    outcome: EpochOutcome,
}

impl<'a> Simulator<'a> {
    /// Starts from station 0 with empty queues and `Ubar = delta`.
    pub fn new(
        config: &'a SystemConfig,
        evaluator: &'a AnticipationEvaluator,
        seed: u64,
        replication: u64,
        options: SimOptions,
    ) -> Self {
        let m = config.stations();
        let tracker = UtilityTracker::new(m, config.delta, config.gamma);
        Self::from_parts(
            config,
            evaluator,
            SystemState::initial(m),
            tracker,
            Streams::new(seed, replication),
            options,
        )
    }

    pub fn from_parts(
        config: &'a SystemConfig,
        evaluator: &'a AnticipationEvaluator,
        state: SystemState,
        tracker: UtilityTracker,
        streams: Streams,
        options: SimOptions,
    ) -> Self {
        let m = config.stations();
        let outcome = EpochOutcome {
            epoch: 0,
            from: state.server,
            chosen: state.server,
            conditions: vec![Condition::Stay; m],
            travel_time: 0.0,
            hold_time: 0.0,
            queues_before: vec![0; m],
            queues_after: vec![0; m],
            travel_arrivals: vec![0; m],
            hold_arrivals: vec![0; m],
            losses: vec![0; m],
            served: false,
            realized: vec![0.0; m],
            anticipated: vec![0.0; m],
        };
        Self {
            config,
            evaluator,
            options,
            state,
            tracker,
            streams,
            scratch: IndexScratch::default(),
            floored: vec![0.0; m],
            outcome,
        }
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn tracker(&self) -> &UtilityTracker {
        &self.tracker
    }

    pub fn into_parts(self) -> (SystemState, UtilityTracker, Streams) {
        (self.state, self.tracker, self.streams)
    }

    /// Runs one epoch and returns what happened.
    pub fn advance(&mut self) -> Result<&EpochOutcome> {
        let config = self.config;
        let ev = self.evaluator;
        let m = config.stations();
        let s = self.state.server;
        let out = &mut self.outcome;

        match self.options.conditions {
            ConditionMode::Random => {
                sample_conditions_into(s, config, &mut self.streams.conditions, &mut self.state.conditions)
            }
            ConditionMode::AllGood => {
                for (i, c) in self.state.conditions.iter_mut().enumerate() {
                    *c = if i == s { Condition::Stay } else { Condition::Good };
                }
            }
        }

        let base = match &self.options.policy {
            Policy::Adaptive => self.tracker.averages(),
            Policy::Frozen(u) => u.as_slice(),
        };
        for (f, &u) in self.floored.iter_mut().zip(base) {
            *f = u.max(config.delta);
        }
        let values = self.scratch.compute(&self.state, ev, &self.floored, config.alpha);
        let (decision, j) = choose_from_values(values, self.options.tie_tolerance, &mut self.streams.tie_break);

        match self.options.drive {
            AverageDrive::Realized => ev.anticipated_for_move(j, &self.state, &mut out.anticipated),
            AverageDrive::Mixed => {
                let u = ev.anticipated_utilities(&decision, &self.state);
                out.anticipated.copy_from_slice(&u);
            }
        }

        out.epoch = self.state.epoch;
        out.from = s;
        out.chosen = j;
        out.conditions.clone_from(&self.state.conditions);
        out.queues_before.clone_from(&self.state.queues);
        out.losses.fill(0);

        let route = self.state.route_to(j);
        out.travel_time = if j == s {
            0.0
        } else {
            sample_travel_time(route, config, &mut self.streams.travel)?
        };
        add_arrivals(
            config,
            &mut self.state.queues,
            out.travel_time,
            &mut out.travel_arrivals,
            &mut out.losses,
            &mut self.streams.arrivals,
        )?;

        out.served = self.state.queues[j] >= 1;
        out.hold_time = sample_service_time(config, &mut self.streams.service);
        add_arrivals(
            config,
            &mut self.state.queues,
            out.hold_time,
            &mut out.hold_arrivals,
            &mut out.losses,
            &mut self.streams.arrivals,
        )?;
        if out.served {
            self.state.queues[j] -= 1;
        }

        for i in 0..m {
            let gain = if i == j && out.served { config.reward } else { 0.0 };
            out.realized[i] = gain - out.losses[i] as f64;
        }
        out.queues_after.clone_from(&self.state.queues);
        self.tracker.update(&out.anticipated, &out.realized);
        self.state.server = j;
        self.state.epoch += 1;
        // Conditions for the next epoch are drawn when it starts.
        for (i, c) in self.state.conditions.iter_mut().enumerate() {
            *c = if i == j { Condition::Stay } else { Condition::Bad };
        }
        Ok(&self.outcome)
    }
}

fn add_arrivals<R: rand::Rng + ?Sized>(
    config: &SystemConfig,
    queues: &mut [u32],
    duration: f64,
    arrivals: &mut [u64],
    losses: &mut [u64],
    rng: &mut R,
) -> Result<()> {
    for i in 0..queues.len() {
        let a = if duration > 0.0 {
            sample_arrivals(config.lambda[i], duration, rng)
        } else {
            0
        };
        let (n, lost) = apply_arrivals(queues[i], a, config.buffers[i]).map_err(|e| match e {
            Error::QueueBound { queue, buffer, .. } => Error::QueueBound {
                station: i,
                queue,
                buffer,
            },
            other => other,
        })?;
        queues[i] = n;
        arrivals[i] = a;
        losses[i] += lost;
    }
    Ok(())
}

/// One epoch from `state` with the given tracker and streams.
///
/// Convenience wrapper over [`Simulator::advance`] for callers that manage
/// their own state; it produces exactly the same draws.
pub fn step(
    state: &SystemState,
    config: &SystemConfig,
    evaluator: &AnticipationEvaluator,
    tracker: &mut UtilityTracker,
    streams: &mut Streams,
    options: &SimOptions,
) -> Result<(SystemState, EpochOutcome)> {
    state.check(config)?;
    let mut sim = Simulator::from_parts(
        config,
        evaluator,
        state.clone(),
        tracker.clone(),
        streams.clone(),
        options.clone(),
    );
    let outcome = sim.advance()?.clone();
    let (next, t, s) = sim.into_parts();
    *tracker = t;
    *streams = s;
    Ok((next, outcome))
}

/// Runs `epochs` epochs from the initial state with replication index 0.
pub fn run_replication(
    config: &SystemConfig,
    epochs: u64,
    seed: u64,
    options: &SimOptions,
) -> Result<(ReplicationResult, Trajectory)> {
    let evaluator = AnticipationEvaluator::new(config);
    run_replication_with(config, &evaluator, epochs, seed, 0, options)
}

/// Like [`run_replication`] with a shared evaluator and explicit replication index.
pub fn run_replication_with(
    config: &SystemConfig,
    evaluator: &AnticipationEvaluator,
    epochs: u64,
    seed: u64,
    replication: u64,
    options: &SimOptions,
) -> Result<(ReplicationResult, Trajectory)> {
    if epochs == 0 {
        return Err(Error::Contract("epochs must be at least 1".into()));
    }
    let diagnostics = validate_config(config);
    if !diagnostics.is_valid() {
        return Err(Error::InvalidConfig(diagnostics));
    }
    if let Policy::Frozen(u) = &options.policy {
        if u.len() != config.stations() {
            return Err(Error::Contract(format!(
                "frozen utility vector has {} entries for {} stations",
                u.len(),
                config.stations()
            )));
        }
    }

    let m = config.stations();
    let lower = -evaluator.loss_bound() * (1.0 + 1e-9) - 1e-12;
    let upper = config.reward * (1.0 + 1e-12);
    let mut sim = Simulator::new(config, evaluator, seed, replication, options.clone());
    let mut visits = vec![0u64; m];
    let mut losses = vec![0u64; m];
    let mut services = vec![0u64; m];
    let mut min_visits = Vec::new();
    let mut bound_violations = 0;
    let mut conservation_failures = 0;
    let mut snapshots = Vec::new();
    let mut outcomes = Vec::new();

    for k in 1..=epochs {
        let out = sim.advance()?;
        visits[out.chosen] += 1;
        services[out.chosen] += u64::from(out.served);
        for (l, &x) in losses.iter_mut().zip(&out.losses) {
            *l += x;
        }
        if out.anticipated.iter().any(|&u| u < lower || u > upper) {
            bound_violations += 1;
        }
        if !out.conserves() {
            conservation_failures += 1;
        }
        let (from, chosen) = (out.from, out.chosen);
        if options.record_outcomes {
            outcomes.push(out.clone());
        }
        if VISIT_CHECKPOINTS.contains(&k) {
            min_visits.push((k, visits.iter().copied().min().unwrap_or(0)));
        }
        let thinned = options.thin > 0 && k % options.thin == 0;
        if thinned || k == epochs {
            snapshots.push(Snapshot {
                epoch: k,
                server: from,
                chosen,
                queues: sim.state().queues.clone(),
                ubar: sim.tracker().averages().to_vec(),
                vbar: sim.tracker().realized_mean(),
            });
        }
    }

    let ubar = sim.tracker().averages().to_vec();
    let result = ReplicationResult {
        seed,
        replication,
        epochs,
        mof: mof(&ubar, config.delta),
        server_utility: ubar.iter().sum(),
        vbar: sim.tracker().realized_mean(),
        ubar,
        visits,
        losses,
        services,
        min_visits,
        bound_violations,
        conservation_failures,
    };
    let trajectory = Trajectory {
        snapshots,
        final_state: sim.state().clone(),
        outcomes,
    };
    Ok((result, trajectory))
}
