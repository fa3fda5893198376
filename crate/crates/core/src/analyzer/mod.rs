//! Exact analysis of small instances.
//!
//! With the fairness weights frozen at a vector `ubar`, the dispatch rule is a
//! fixed stationary policy and `(S, N, C)` is a finite Markov chain. The
//! stationary expectation of the anticipated utilities under that chain is the
//! map `F(ubar)`; the running averages of the adaptive scheduler are expected
//! to settle at a fixed point `ubar = F(ubar)`.

mod chain;
mod stationary;

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

pub use chain::{ChainSettings, ChainSkeleton, ChainSpace, FrozenChain, DEFAULT_STATE_CAP, MAX_STATIONS};
pub use stationary::{
    apply, class_distribution, closed_classes, residual, row_sum_error, stationary, ClosedClass, SparseRows,
    Stationary,
};

use crate::metrics::mof;
use crate::model::SystemConfig;
use crate::quadrature::DurationRule;
use crate::scheduler::DEFAULT_TIE_TOLERANCE;
use crate::Result;

pub const DEFAULT_DAMPING: f64 = 0.3;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 2000;
pub const DEFAULT_MARGIN_EPSILON: f64 = 1e-3;
pub const DEFAULT_SLIDING_ITER: usize = 10_000;
pub const DEFAULT_SLIDING_TOLERANCE: f64 = 1e-3;
const MIN_DAMPING: f64 = 1e-4;
/// Converged starts closer than this (or ten sliding residuals) are reported as one fixed point.
const DISTINCT_TOLERANCE: f64 = 1e-6;
/// States with less stationary mass are ignored by the interiority check.
const SUPPORT_MASS: f64 = 1e-12;

/// The frozen chain at `ubar`.
pub fn build_chain(ubar: &[f64], config: &SystemConfig) -> Result<FrozenChain> {
    Ok(Analyzer::new(config)?.freeze(ubar))
}

/// Closed classes and the limit law from the initial state (server at the
/// first station, empty queues, fresh conditions).
pub fn stationary_distribution(chain: &FrozenChain) -> Result<Stationary> {
    stationary(&chain.rows(), &chain.skeleton().initial_distribution())
}

pub fn fixed_point_map(ubar: &[f64], config: &SystemConfig) -> Result<Vec<f64>> {
    Analyzer::new(config)?.map(ubar)
}

pub fn solve_fixed_point(config: &SystemConfig, damping: f64, tolerance: f64, max_iter: usize) -> Result<FixedPointReport> {
    Analyzer::new(config)?.solve(&SolveOptions {
        damping,
        tolerance,
        max_iter,
        ..SolveOptions::default()
    })
}

pub fn ergodic_interior_margin(ubar: &[f64], config: &SystemConfig, epsilon: f64) -> Result<MarginReport> {
    Analyzer::new(config)?.margin(ubar, epsilon)
}

/// Solves the fixed point at `alpha` and compares its MoF with `B^{1/alpha} - 1`.
pub fn theorem2_bound(config: &SystemConfig, alpha: f64) -> Result<BoundReport> {
    let mut c = config.clone();
    c.alpha = alpha;
    let report = Analyzer::new(&c)?.solve(&SolveOptions::default())?;
    Ok(BoundReport::new(&c, &report))
}

#[derive(Debug, Clone)]
pub struct MapEvaluation {
    pub value: Vec<f64>,
    pub chain: FrozenChain,
    pub stationary: Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Starting points; `None` uses `delta * 1`, `w * 1` and two staggered vectors.
    pub starts: Option<Vec<Vec<f64>>>,
    pub margin_epsilon: f64,
    /// Decreasing-step iterations tried when the damped iteration stalls; 0 disables.
    pub sliding_iter: usize,
    pub sliding_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            damping: DEFAULT_DAMPING,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
            starts: None,
            margin_epsilon: DEFAULT_MARGIN_EPSILON,
            sliding_iter: DEFAULT_SLIDING_ITER,
            sliding_tolerance: DEFAULT_SLIDING_TOLERANCE,
        }
    }
}

/// How a solver run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointKind {
    /// `ubar = F(ubar)` up to the tolerance.
    Pointwise,
    /// `ubar` sits on a decision boundary and equals an average of the map
    /// values on either side; `F(ubar)` itself need not equal `ubar`.
    Sliding,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub ubar: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kind: FixedPointKind,
    /// For sliding limits, `|mean iterate - mean map value|` over the averaging window.
    pub sliding_residual: f64,
    pub final_damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub size: usize,
    pub weight: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub epsilon: f64,
    /// No decision changes on stationary-support states under any `+-epsilon` perturbation.
    pub interior: bool,
    pub changed_states: usize,
    pub changed_support_states: usize,
    /// Smallest gap between the best and second-best score over support states.
    pub min_gap: f64,
    pub tied_support_states: usize,
    pub support_states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub ubar: Vec<f64>,
    /// `max_i |ubar_i - F(ubar)_i|`, recomputed from a fresh chain at `ubar`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kind: FixedPointKind,
    pub sliding_residual: f64,
    pub mof: f64,
    pub margin: MarginReport,
    pub classes: Vec<ClassSummary>,
    pub transient_states: usize,
    pub states: usize,
    pub starts: Vec<StartReport>,
    /// Distinct limits among converged starts.
    pub fixed_points: Vec<Vec<f64>>,
}

impl FixedPointReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha: f64,
    /// `max(1, w / (lambda_min E[T | good])) * (1 + 1e-6)`; infinite when inapplicable.
    pub b: f64,
    pub bound: f64,
    pub mof: f64,
    pub ubar: Vec<f64>,
    pub fixed_point_converged: bool,
    pub residual: f64,
    pub applicable: bool,
    pub pass: bool,
}

impl BoundReport {
    pub fn constant(config: &SystemConfig) -> Option<f64> {
        let lambda_min = config.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lambda_min > 0.0) {
            return None;
        }
        let good = config.travel_good;
        let mean = DurationRule::truncated_normal(good.mean, good.sd, crate::quadrature::DEFAULT_NODES).mean();
        Some((config.reward / (lambda_min * mean)).max(1.0) * (1.0 + 1e-6))
    }

    pub fn bound_for(b: f64, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            f64::INFINITY
        } else {
            b.powf(1.0 / alpha) - 1.0
        }
    }

    pub fn new(config: &SystemConfig, report: &FixedPointReport) -> Self {
        let alpha = config.alpha;
        let (applicable, b) = match Self::constant(config) {
            Some(b) => (true, b),
            None => (false, f64::INFINITY),
        };
        let bound = Self::bound_for(b, alpha);
        Self {
            alpha,
            b,
            bound,
            mof: report.mof,
            ubar: report.ubar.clone(),
            fixed_point_converged: report.converged,
            residual: report.residual,
            applicable,
            pass: applicable && report.mof <= bound,
        }
    }
}

/// Exact analysis for one configuration; the skeleton is built once and reused.
#[derive(Debug, Clone)]
pub struct Analyzer {
    skeleton: Arc<ChainSkeleton>,
}

impl Analyzer {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        Self::with_settings(config, ChainSettings::default())
    }

    pub fn with_settings(config: &SystemConfig, settings: ChainSettings) -> Result<Self> {
        Ok(Self {
            skeleton: Arc::new(ChainSkeleton::new(config, settings)?),
        })
    }

    pub fn config(&self) -> &SystemConfig {
        self.skeleton.config()
    }

    pub fn skeleton(&self) -> &ChainSkeleton {
        &self.skeleton
    }

    pub fn freeze(&self, ubar: &[f64]) -> FrozenChain {
        FrozenChain::new(Arc::clone(&self.skeleton), ubar)
    }

    pub fn evaluate(&self, ubar: &[f64]) -> Result<MapEvaluation> {
        let chain = self.freeze(ubar);
        let st = stationary_distribution(&chain)?;
        let m = ubar.len();
        let mut value = vec![0.0; m];
        for (y, &p) in st.pi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (v, u) in value.iter_mut().zip(chain.anticipated(y)) {
                *v += p * u;
            }
        }
        Ok(MapEvaluation {
            value,
            chain,
            stationary: st,
        })
    }

    pub fn map(&self, ubar: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(ubar)?.value)
    }

    fn default_starts(&self) -> Vec<Vec<f64>> {
        let c = self.config();
        let m = c.stations();
        let (lo, hi) = (c.delta, c.reward);
        let rising: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
        let falling: Vec<f64> = rising.iter().rev().copied().collect();
        vec![vec![lo; m], vec![hi; m], rising, falling]
    }

    fn iterate(&self, start: &[f64], opts: &SolveOptions) -> Result<StartReport> {
        let mut u = start.to_vec();
        let mut eta = opts.damping;
        let mut prev = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iter {
            iterations += 1;
            let f = self.map(&u)?;
            let res = sup_distance(&u, &f);
            if res < opts.tolerance {
                converged = true;
                break;
            }
            if res >= prev {
                eta = (eta * 0.5).max(MIN_DAMPING);
            }
            prev = res;
            for (x, y) in u.iter_mut().zip(&f) {
                *x = (1.0 - eta) * *x + eta * y;
            }
        }
        let residual = sup_distance(&u, &self.map(&u)?);
        if converged || opts.sliding_iter == 0 {
            return Ok(StartReport {
                start: start.to_vec(),
                ubar: u,
                residual,
                iterations,
                converged,
                kind: if converged { FixedPointKind::Pointwise } else { FixedPointKind::None },
                sliding_residual: residual,
                final_damping: eta,
            });
        }

        // No pointwise fixed point nearby: the map jumps across a decision
        // boundary. A decreasing-step iteration chatters across it with
        // shrinking amplitude; its averages locate the point where a convex
        // combination of the one-sided map values balances.
        let m = u.len();
        let half = opts.sliding_iter / 2;
        let mut sum_u = vec![0.0; m];
        let mut sum_f = vec![0.0; m];
        for k in 0..opts.sliding_iter {
            let f = self.map(&u)?;
            if k >= half {
                for i in 0..m {
                    sum_u[i] += u[i];
                    sum_f[i] += f[i];
                }
            }
            let a = opts.damping / (1.0 + opts.damping * k as f64);
            for (x, y) in u.iter_mut().zip(&f) {
                *x += a * (y - *x);
            }
        }
        let count = (opts.sliding_iter - half) as f64;
        let avg_u: Vec<f64> = sum_u.iter().map(|s| s / count).collect();
        let avg_f: Vec<f64> = sum_f.iter().map(|s| s / count).collect();
        let sliding_residual = sup_distance(&avg_u, &avg_f);
        let residual = sup_distance(&avg_u, &self.map(&avg_u)?);
        let sliding = sliding_residual < opts.sliding_tolerance;
        Ok(StartReport {
            start: start.to_vec(),
            ubar: avg_u,
            residual,
            iterations: iterations + opts.sliding_iter,
            converged: sliding,
            kind: if sliding { FixedPointKind::Sliding } else { FixedPointKind::None },
            sliding_residual,
            final_damping: eta,
        })
    }

    /// Damped iteration `ubar <- (1 - eta) ubar + eta F(ubar)` from each start.
    /// The first start is the primary one reported at the top level.
    pub fn solve(&self, opts: &SolveOptions) -> Result<FixedPointReport> {
        let starts = opts.starts.clone().unwrap_or_else(|| self.default_starts());
        let runs = starts
            .iter()
            .map(|s| self.iterate(s, opts))
            .collect::<Result<Vec<_>>>()?;
        let mut fixed_points: Vec<Vec<f64>> = Vec::new();
        for r in runs.iter().filter(|r| r.converged) {
            let tol = DISTINCT_TOLERANCE.max(10.0 * r.sliding_residual);
            if fixed_points.iter().all(|p| sup_distance(p, &r.ubar) > tol) {
                fixed_points.push(r.ubar.clone());
            }
        }
        let primary = &runs[0];
        let eval = self.evaluate(&primary.ubar)?;
        let margin = self.margin_with(&primary.ubar, opts.margin_epsilon, &eval)?;
        Ok(FixedPointReport {
            ubar: primary.ubar.clone(),
            residual: sup_distance(&primary.ubar, &eval.value),
            iterations: primary.iterations,
            converged: primary.converged,
            kind: primary.kind,
            sliding_residual: primary.sliding_residual,
            mof: mof(&primary.ubar, self.config().delta),
            margin,
            classes: eval
                .stationary
                .classes
                .iter()
                .map(|c| ClassSummary {
                    size: c.states.len(),
                    weight: c.weight,
                    residual: c.residual,
                })
                .collect(),
            transient_states: eval.stationary.transient_states,
            states: self.skeleton.len(),
            starts: runs,
            fixed_points,
        })
    }

    /// Checks whether the frozen decisions on the stationary support survive
    /// `+-epsilon` perturbations of each component of `ubar`.
    pub fn margin(&self, ubar: &[f64], epsilon: f64) -> Result<MarginReport> {
        let eval = self.evaluate(ubar)?;
        self.margin_with(ubar, epsilon, &eval)
    }

    fn margin_with(&self, ubar: &[f64], epsilon: f64, eval: &MapEvaluation) -> Result<MarginReport> {
        let sk = &*self.skeleton;
        let n = sk.len();
        let support: Vec<bool> = eval.stationary.pi.iter().map(|&p| p > SUPPORT_MASS).collect();
        let mut changed = vec![false; n];
        for i in 0..ubar.len() {
            for sign in [-1.0, 1.0] {
                let mut v = ubar.to_vec();
                v[i] += sign * epsilon;
                let d = sk.decisions(&v, DEFAULT_TIE_TOLERANCE);
                for y in 0..n {
                    if d[y] != eval.chain.support(y) {
                        changed[y] = true;
                    }
                }
            }
        }
        let floored: Vec<f64> = ubar.iter().map(|&u| u.max(self.config().delta)).collect();
        let mut min_gap = f64::INFINITY;
        let mut tied = 0;
        for y in (0..n).filter(|&y| support[y]) {
            if eval.chain.support(y).len() > 1 {
                tied += 1;
                min_gap = 0.0;
                continue;
            }
            let mut s = sk.scores(y, &floored);
            s.sort_by(|a, b| b.total_cmp(a));
            min_gap = min_gap.min(s[0] - s[1]);
        }
        let changed_support = (0..n).filter(|&y| support[y] && changed[y]).count();
        Ok(MarginReport {
            epsilon,
            interior: changed_support == 0,
            changed_states: changed.iter().filter(|&&c| c).count(),
            changed_support_states: changed_support,
            min_gap,
            tied_support_states: tied,
            support_states: support.iter().filter(|&&s| s).count(),
        })
    }
}

/// CSV of the limit law: state index, label, probability.
pub fn write_stationary_csv<W: Write>(chain: &FrozenChain, st: &Stationary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "label", "probability"])?;
    for (y, p) in st.pi.iter().enumerate() {
        w.write_record([y.to_string(), chain.space().label(y), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
