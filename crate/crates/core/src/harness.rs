//! Experiment sweeps and report tables.
//!
//! A sweep runs every `(m, alpha, replication)` cell of a grid. Station counts
//! are filled from an ordered list of station classes, each contributing a
//! per-station rate `lambda_scale / m`, so the total rate of a class is
//! preserved as `m` grows. Seeds are derived from `(seed, m, replication)`,
//! plus `alpha` when common random numbers are off, so cells compared by the
//! price of fairness share their random streams by default.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::{Analyzer, BoundReport, FixedPointReport, FixedPointKind, SolveOptions};
use crate::anticipation::AnticipationEvaluator;
use crate::kernels::mix_seed;
use crate::metrics::pof;
use crate::model::{validate_config, SystemConfig, TravelLaw, DEFAULT_DELTA, DEFAULT_GAMMA};
use crate::sim::{run_replication_with, ReplicationResult, SimOptions};
use crate::{Error, Result};

/// Environment variable naming the worker count for sweeps.
pub const WORKERS_ENV: &str = "FOPS_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationClass {
    /// Fixed number of stations; otherwise `share` of `m` (rounded), otherwise the remainder.
    pub count: Option<usize>,
    pub share: Option<f64>,
    /// Probability that the route to a station of this class is good.
    pub p_good: f64,
    /// Per-station rate is `lambda_scale / m`.
    pub lambda_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub stations: Vec<usize>,
    pub alphas: Vec<f64>,
    pub replications: u64,
    pub epochs: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub crn: bool,
    pub buffers: u32,
    pub service_rate: f64,
    pub travel_good_mean: f64,
    pub travel_good_sd: f64,
    pub travel_bad_mean: f64,
    pub travel_bad_sd: f64,
    pub reward: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub classes: Vec<StationClass>,
}

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl SweepSpec {
    /// Grid over the `fig2` layout: two good destinations, the rest bad, total rate 0.67.
    pub fn fig2(stations: Vec<usize>, alphas: Vec<f64>, replications: u64, epochs: u64) -> Self {
        let c = SystemConfig::fig2(2, 0.0);
        Self::from_base(&c, stations, alphas, replications, epochs, vec![
            StationClass {
                count: Some(2),
                share: None,
                p_good: 0.9,
                lambda_scale: 0.67,
            },
            StationClass {
                count: None,
                share: None,
                p_good: 0.1,
                lambda_scale: 0.67,
            },
        ])
    }

    /// Grid over the `fig3` layout: half good stations with more demand, half bad.
    pub fn fig3(stations: Vec<usize>, alphas: Vec<f64>, replications: u64, epochs: u64) -> Self {
        let c = SystemConfig::fig3(2, 0.0);
        Self::from_base(&c, stations, alphas, replications, epochs, vec![
            StationClass {
                count: None,
                share: Some(0.5),
                p_good: 0.9,
                lambda_scale: 0.93,
            },
            StationClass {
                count: None,
                share: None,
                p_good: 0.1,
                lambda_scale: 0.37,
            },
        ])
    }

    fn from_base(
        c: &SystemConfig,
        stations: Vec<usize>,
        alphas: Vec<f64>,
        replications: u64,
        epochs: u64,
        classes: Vec<StationClass>,
    ) -> Self {
        Self {
            stations,
            alphas,
            replications,
            epochs,
            seed: 1,
            crn: true,
            buffers: c.buffers[0],
            service_rate: c.service_rate,
            travel_good_mean: c.travel_good.mean,
            travel_good_sd: c.travel_good.sd,
            travel_bad_mean: c.travel_bad.mean,
            travel_bad_sd: c.travel_bad.sd,
            reward: c.reward,
            delta: c.delta,
            gamma: c.gamma,
            classes,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::ConfigFile(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::ConfigFile(msg.to_string()));
        if self.stations.is_empty() || self.alphas.is_empty() {
            return bad("`stations` and `alphas` must be non-empty");
        }
        if self.replications == 0 || self.epochs == 0 {
            return bad("`replications` and `epochs` must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one station class is required");
        }
        let open = self.classes.iter().filter(|c| c.count.is_none() && c.share.is_none()).count();
        if open > 1 {
            return bad("at most one class may omit both `count` and `share`");
        }
        for &m in &self.stations {
            self.class_sizes(m)?;
        }
        Ok(())
    }

    /// Stations per class at size `m`.
    pub fn class_sizes(&self, m: usize) -> Result<Vec<usize>> {
        let mut sizes: Vec<Option<usize>> = self
            .classes
            .iter()
            .map(|c| c.count.or_else(|| c.share.map(|s| (s * m as f64).round() as usize)))
            .collect();
        let fixed: usize = sizes.iter().flatten().sum();
        if fixed > m {
            return Err(Error::ConfigFile(format!("station classes need {fixed} stations but m = {m}")));
        }
        let mut rest = m - fixed;
        for s in sizes.iter_mut().filter(|s| s.is_none()) {
            *s = Some(rest);
            rest = 0;
        }
        if rest != 0 {
            return Err(Error::ConfigFile(format!("station classes cover {fixed} of {m} stations")));
        }
        Ok(sizes.into_iter().map(|s| s.unwrap_or(0)).collect())
    }

    pub fn config_for(&self, m: usize, alpha: f64) -> Result<SystemConfig> {
        let sizes = self.class_sizes(m)?;
        let mut lambda = Vec::with_capacity(m);
        let mut p = Vec::with_capacity(m);
        for (class, &n) in self.classes.iter().zip(&sizes) {
            lambda.extend(std::iter::repeat_n(class.lambda_scale / m as f64, n));
            p.extend(std::iter::repeat_n(class.p_good, n));
        }
        Ok(SystemConfig {
            lambda,
            buffers: vec![self.buffers; m],
            service_rate: self.service_rate,
            travel_good: TravelLaw::new(self.travel_good_mean, self.travel_good_sd),
            travel_bad: TravelLaw::new(self.travel_bad_mean, self.travel_bad_sd),
            p_good: SystemConfig::destination_matrix(&p),
            reward: self.reward,
            alpha,
            delta: self.delta,
            gamma: self.gamma,
            seed: self.seed,
        })
    }

    pub fn seed_for(&self, m: usize, alpha: f64, replication: u64) -> u64 {
        sweep_seed(self.seed, m, alpha, replication, self.crn)
    }
}

/// Seed of one sweep cell. With common random numbers `alpha` is not part of the key.
pub fn sweep_seed(master: u64, m: usize, alpha: f64, replication: u64, crn: bool) -> u64 {
    if crn {
        mix_seed(&[master, m as u64, replication])
    } else {
        mix_seed(&[master, m as u64, alpha.to_bits(), replication])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub alpha: f64,
    pub replication: u64,
    pub seed: u64,
    pub result: std::result::Result<ReplicationResult, String>,
    /// Relative change in total utility against the `alpha = 0` cell of the same `(m, replication)`.
    pub pof: Option<f64>,
    /// Whether the cell's configuration satisfies the worst-case load condition.
    pub load_condition: bool,
}

impl SweepRow {
    pub fn ubar(&self) -> Option<&[f64]> {
        self.result.as_ref().ok().map(|r| r.ubar.as_slice())
    }

    pub fn mof(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.mof)
    }
}

fn run_cell(config: &SystemConfig, evaluator: &AnticipationEvaluator, epochs: u64, seed: u64) -> std::result::Result<ReplicationResult, String> {
    let opts = SimOptions {
        thin: 0,
        ..SimOptions::default()
    };
    run_replication_with(config, evaluator, epochs, seed, 0, &opts)
        .map(|(r, _)| r)
        .map_err(|e| e.to_string())
}

/// `(m, alpha, replication, seed, load condition, result)` of one finished cell.
type CellRun = (usize, f64, u64, u64, bool, std::result::Result<ReplicationResult, String>);

/// Runs the grid. `workers = None` uses rayon's default pool. Failed cells
/// are kept as error rows; the rest of the sweep continues.
pub fn run_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<Vec<SweepRow>> {
    spec.check()?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = workers {
            b = b.num_threads(n.max(1));
        }
        b.build().map_err(|e| Error::Contract(format!("worker pool: {e}")))?
    };

    let mut alphas = spec.alphas.clone();
    let reference_missing = !alphas.contains(&0.0);
    if reference_missing {
        alphas.push(0.0);
    }
    let mut cells = Vec::new();
    for &m in &spec.stations {
        for &alpha in &alphas {
            for r in 0..spec.replications {
                cells.push((m, alpha, r));
            }
        }
    }

    let results: Vec<CellRun> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, alpha, r)| {
                let seed = spec.seed_for(m, alpha, r);
                match spec.config_for(m, alpha) {
                    Ok(config) => {
                        let load = validate_config(&config).passes();
                        let ev = AnticipationEvaluator::new(&config);
                        (m, alpha, r, seed, load, run_cell(&config, &ev, spec.epochs, seed))
                    }
                    Err(e) => (m, alpha, r, seed, false, Err(e.to_string())),
                }
            })
            .collect()
    });

    let reference = |m: usize, r: u64| {
        results
            .iter()
            .find(|x| x.0 == m && x.1 == 0.0 && x.2 == r)
            .and_then(|x| x.5.as_ref().ok())
    };
    let rows = results
        .iter()
        .filter(|x| !(reference_missing && x.1 == 0.0))
        .map(|(m, alpha, r, seed, load, res)| {
            let pof = match (res, reference(*m, *r)) {
                (Ok(a), Some(z)) => pof(&a.ubar, &z.ubar),
                _ => None,
            };
            SweepRow {
                m: *m,
                alpha: *alpha,
                replication: *r,
                seed: *seed,
                result: res.clone(),
                pof,
                load_condition: *load,
            }
        })
        .collect();
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Columns: `m, alpha, replication, seed, mof, pof, server_utility, load_condition, status, ubar_1..ubar_M`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let width = rows.iter().map(|r| r.m).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["m", "alpha", "replication", "seed", "mof", "pof", "server_utility", "load_condition", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=width).map(|i| format!("ubar_{i}")));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.m.to_string(), row.alpha.to_string(), row.replication.to_string(), row.seed.to_string()];
        match &row.result {
            Ok(r) => {
                rec.push(r.mof.to_string());
                rec.push(opt(row.pof));
                rec.push(r.server_utility.to_string());
                rec.push(row.load_condition.to_string());
                rec.push("ok".into());
                rec.extend(r.ubar.iter().map(f64::to_string));
            }
            Err(e) => {
                rec.extend([String::new(), String::new(), String::new(), row.load_condition.to_string(), format!("error: {e}")]);
            }
        }
        rec.resize(header.len(), String::new());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Replication means for one `(m, alpha)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub m: usize,
    pub alpha: f64,
    pub replications: usize,
    pub failures: usize,
    pub mean_mof: f64,
    pub mean_pof: Option<f64>,
    pub mean_server_utility: f64,
    pub mean_ubar: Vec<f64>,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.m, r.alpha)) {
            keys.push((r.m, r.alpha));
        }
    }
    keys.into_iter()
        .map(|(m, alpha)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.m == m && r.alpha == alpha).collect();
            let ok: Vec<&ReplicationResult> = cell.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let n = ok.len().max(1) as f64;
            let pofs: Vec<f64> = cell.iter().filter_map(|r| r.pof).collect();
            let mut mean_ubar = vec![0.0; m];
            for r in &ok {
                for (a, u) in mean_ubar.iter_mut().zip(&r.ubar) {
                    *a += u / n;
                }
            }
            CellSummary {
                m,
                alpha,
                replications: cell.len(),
                failures: cell.len() - ok.len(),
                mean_mof: ok.iter().map(|r| r.mof).sum::<f64>() / n,
                mean_pof: (!pofs.is_empty()).then(|| pofs.iter().sum::<f64>() / pofs.len() as f64),
                mean_server_utility: ok.iter().map(|r| r.server_utility).sum::<f64>() / n,
                mean_ubar,
            }
        })
        .collect()
}

/// Columns: `m, alpha, replications, failures, mean_mof, mean_pof, mean_server_utility, mean_ubar_1..`.
pub fn write_summary_csv<W: Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let width = cells.iter().map(|c| c.m).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["m", "alpha", "replications", "failures", "mean_mof", "mean_pof", "mean_server_utility"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=width).map(|i| format!("mean_ubar_{i}")));
    w.write_record(&header)?;
    for c in cells {
        let mut rec = vec![
            c.m.to_string(),
            c.alpha.to_string(),
            c.replications.to_string(),
            c.failures.to_string(),
            c.mean_mof.to_string(),
            opt(c.mean_pof),
            c.mean_server_utility.to_string(),
        ];
        rec.extend(c.mean_ubar.iter().map(f64::to_string));
        rec.resize(header.len(), String::new());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of a single run as one CSV row.
pub fn write_result_csv<W: Write>(r: &ReplicationResult, out: W) -> Result<()> {
    let m = r.ubar.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["seed", "epochs", "mof", "server_utility", "bound_violations", "conservation_failures"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["ubar", "vbar", "visits", "losses", "services"] {
        header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    let mut rec = vec![
        r.seed.to_string(),
        r.epochs.to_string(),
        r.mof.to_string(),
        r.server_utility.to_string(),
        r.bound_violations.to_string(),
        r.conservation_failures.to_string(),
    ];
    rec.extend(r.ubar.iter().map(f64::to_string));
    rec.extend(r.vbar.iter().map(f64::to_string));
    rec.extend(r.visits.iter().map(u64::to_string));
    rec.extend(r.losses.iter().map(u64::to_string));
    rec.extend(r.services.iter().map(u64::to_string));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

/// Fixed-point report and bound check at one `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisEntry {
    pub report: FixedPointReport,
    pub bound: BoundReport,
}

/// Solves the fixed point at each `alpha` (the configuration's own `alpha` is ignored).
pub fn analyze(config: &SystemConfig, alphas: &[f64], options: &SolveOptions) -> Result<Vec<AnalysisEntry>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut c = config.clone();
            c.alpha = alpha;
            let report = Analyzer::new(&c)?.solve(options)?;
            let bound = BoundReport::new(&c, &report);
            Ok(AnalysisEntry { report, bound })
        })
        .collect()
}

/// Columns: `alpha, B, bound, mof, kind, converged, residual, sliding_residual, interior, pass`.
pub fn write_bound_table<W: Write>(entries: &[AnalysisEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "B", "bound", "mof", "kind", "converged", "residual", "sliding_residual", "interior", "pass"])?;
    for e in entries {
        let kind = match e.report.kind {
            FixedPointKind::Pointwise => "pointwise",
            FixedPointKind::Sliding => "sliding",
            FixedPointKind::None => "none",
        };
        w.write_record([
            e.bound.alpha.to_string(),
            e.bound.b.to_string(),
            e.bound.bound.to_string(),
            e.bound.mof.to_string(),
            kind.to_string(),
            e.report.converged.to_string(),
            e.report.residual.to_string(),
            e.report.sliding_residual.to_string(),
            e.report.margin.interior.to_string(),
            e.bound.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
