use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use polling_core::analyzer::{write_stationary_csv, Analyzer, SolveOptions};
use polling_core::config_file::load_config;
use polling_core::harness::{
    analyze, run_sweep, summarize, write_bound_table, write_result_csv, write_summary_csv, write_sweep_csv,
    SweepSpec, WORKERS_ENV,
};
use polling_core::sim::{run_replication, SimOptions, DEFAULT_THIN};
use polling_core::{validate_config, SystemConfig};

const DEFAULT_EPOCHS: u64 = 200_000;

#[derive(Parser)]
#[command(name = "fops-sim", version, about = "Fair opportunistic polling: simulation, sweeps and exact analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one replication and write its trajectory and result row.
    Run(RunArgs),
    /// Run an (m, alpha, replication) grid and write the MoF/PoF tables.
    Sweep(SweepArgs),
    /// Solve the frozen-chain fixed point and check the fairness bound.
    Analyze(AnalyzeArgs),
    /// Print configuration diagnostics.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Overrides {
    /// Fairness exponent, overriding the config file.
    #[arg(long)]
    alpha: Option<f64>,
    /// Step-size exponent of the utility average.
    #[arg(long)]
    gamma: Option<f64>,
    /// Utility floor.
    #[arg(long)]
    delta: Option<f64>,
}

impl Overrides {
    fn apply(&self, c: &mut SystemConfig) {
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        if let Some(d) = self.delta {
            c.delta = d;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// System configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Decision epochs to simulate.
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: u64,
    /// Master seed; defaults to the config file's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run even if the worst-case load condition fails.
    #[arg(long)]
    force: bool,
    /// Trajectory snapshot interval in epochs.
    #[arg(long, default_value_t = DEFAULT_THIN)]
    thin: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep specification (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the sweep file's epoch count.
    #[arg(long)]
    epochs: Option<u64>,
    /// Override the sweep file's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step-size exponent of the utility average.
    #[arg(long)]
    gamma: Option<f64>,
    /// Utility floor.
    #[arg(long)]
    delta: Option<f64>,
    /// Share random streams between alpha cells (default).
    #[arg(long, overrides_with = "no_crn")]
    crn: bool,
    /// Independent random streams per alpha.
    #[arg(long, overrides_with = "crn")]
    no_crn: bool,
    /// Worker threads; defaults to one per core.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// System configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Fairness exponents to analyze; defaults to the config file's `alpha`.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Step-size exponent of the utility average.
    #[arg(long)]
    gamma: Option<f64>,
    /// Utility floor.
    #[arg(long)]
    delta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// System configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn alpha_tag(alpha: f64) -> String {
    alpha.to_string().replace('.', "_")
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    args.overrides.apply(&mut config);
    let diagnostics = validate_config(&config);
    if !diagnostics.is_valid() {
        eprintln!("{diagnostics}");
        bail!("invalid configuration");
    }
    if !diagnostics.losses_below_gain {
        eprintln!("{diagnostics}");
        if !args.force {
            bail!(
                "worst-case load rho_B = {} is not below w = {}; pass --force to run anyway",
                diagnostics.rho_b_raw,
                config.reward
            );
        }
        eprintln!("warning: running with rho_B = {} >= w = {}", diagnostics.rho_b_raw, config.reward);
    }
    let seed = args.seed.unwrap_or(config.seed);
    let options = SimOptions {
        thin: args.thin,
        ..SimOptions::default()
    };
    let (result, trajectory) = run_replication(&config, args.epochs, seed, &options)?;

    fs::create_dir_all(&args.out)?;
    let traj_path = args.out.join("trajectory.csv");
    let result_path = args.out.join("result.csv");
    trajectory.write_csv(create(&traj_path)?)?;
    write_result_csv(&result, create(&result_path)?)?;
    println!("seed {seed}, {} epochs", result.epochs);
    println!("Ubar = {:?}", result.ubar);
    println!("MoF = {}, server utility = {}", result.mof, result.server_utility);
    println!("wrote {} and {}", traj_path.display(), result_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut spec = SweepSpec::load(&args.config)?;
    if let Some(e) = args.epochs {
        spec.epochs = e;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(g) = args.gamma {
        spec.gamma = g;
    }
    if let Some(d) = args.delta {
        spec.delta = d;
    }
    if args.crn {
        spec.crn = true;
    }
    if args.no_crn {
        spec.crn = false;
    }
    let rows = run_sweep(&spec, args.workers)?;
    let cells = summarize(&rows);

    fs::create_dir_all(&args.out)?;
    let rows_path = args.out.join("sweep.csv");
    let summary_path = args.out.join("summary.csv");
    write_sweep_csv(&rows, create(&rows_path)?)?;
    write_summary_csv(&cells, create(&summary_path)?)?;

    println!("{:>4} {:>8} {:>12} {:>12}", "m", "alpha", "mean MoF", "mean PoF");
    for c in &cells {
        let pof = c.mean_pof.map(|p| format!("{p:.6}")).unwrap_or_else(|| "-".into());
        println!("{:>4} {:>8} {:>12.6} {:>12}", c.m, c.alpha, c.mean_mof, pof);
    }
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see the status column");
    }
    println!("wrote {} and {}", rows_path.display(), summary_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    if let Some(g) = args.gamma {
        config.gamma = g;
    }
    if let Some(d) = args.delta {
        config.delta = d;
    }
    let alphas = if args.alpha.is_empty() { vec![config.alpha] } else { args.alpha.clone() };
    let options = SolveOptions::default();
    let entries = analyze(&config, &alphas, &options)?;

    fs::create_dir_all(&args.out)?;
    for e in &entries {
        let tag = alpha_tag(e.bound.alpha);
        e.report.write_json(create(&args.out.join(format!("fixed_point_alpha_{tag}.json")))?)?;
        let mut c = config.clone();
        c.alpha = e.bound.alpha;
        let analyzer = Analyzer::new(&c)?;
        let eval = analyzer.evaluate(&e.report.ubar)?;
        write_stationary_csv(&eval.chain, &eval.stationary, create(&args.out.join(format!("stationary_alpha_{tag}.csv")))?)?;
    }
    let table = args.out.join("bounds.csv");
    write_bound_table(&entries, create(&table)?)?;

    println!("{:>8} {:>12} {:>12} {:>10} {:>6}", "alpha", "MoF", "bound", "kind", "pass");
    for e in &entries {
        println!(
            "{:>8} {:>12.6} {:>12.6} {:>10} {:>6}",
            e.bound.alpha,
            e.bound.mof,
            e.bound.bound,
            format!("{:?}", e.report.kind),
            e.bound.pass
        );
    }
    println!("wrote {}", table.display());
    if entries.iter().all(|e| e.bound.pass) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("fairness bound check FAILED");
        Ok(ExitCode::from(2))
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    args.overrides.apply(&mut config);
    let diagnostics = validate_config(&config);
    println!("{diagnostics}");
    Ok(if diagnostics.passes() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
