use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const LIGHT: &str = r#"
stations = 2
lambda = [0.25, 0.15]
buffers = 2
service_rate = 0.3333333333333333
travel_good_mean = 2.0
travel_good_sd = 0.1
travel_bad_mean = 6.0
travel_bad_sd = 0.1
p_good = [0.9, 0.1]
reward = 6.0
alpha = 1.0
seed = 7
"#;

fn fops(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fops-sim"))
        .args(args)
        .env_remove("FOPS_WORKERS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn field<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let k = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    &row[k]
}

#[test]
fn validate_reports_load() {
    let dir = TempDir::new().unwrap();
    let ok = write(dir.path(), "ok.toml", LIGHT);
    let o = fops(&["validate", "--config", &ok]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rho_B"));
    assert!(stdout(&o).contains("pass"));

    let heavy = write(dir.path(), "heavy.toml", &LIGHT.replace("lambda = [0.25, 0.15]", "lambda = [5.0, 5.0]"));
    let o = fops(&["validate", "--config", &heavy]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));

    let typo = write(dir.path(), "typo.toml", &format!("{LIGHT}rewrad = 1.0\n"));
    let o = fops(&["validate", "--config", &typo]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rewrad"));
}

#[test]
fn run_writes_documented_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", LIGHT);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = fops(&["run", "--config", &cfg, "--epochs", "3000", "--thin", "50", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (header, rows) = csv_rows(&out_a.join("trajectory.csv"));
    assert_eq!(
        header,
        ["epoch", "server", "chosen", "N_1", "N_2", "Ubar_1", "Ubar_2", "Vbar_1", "Vbar_2"]
    );
    assert_eq!(rows.len(), 60);
    let (header, rows) = csv_rows(&out_a.join("result.csv"));
    assert_eq!(&header[..6], ["seed", "epochs", "mof", "server_utility", "bound_violations", "conservation_failures"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(field(&header, &rows[0], "seed"), "7");
    assert_eq!(field(&header, &rows[0], "conservation_failures"), "0");
    for name in ["trajectory.csv", "result.csv"] {
        assert_eq!(fs::read(out_a.join(name)).unwrap(), fs::read(out_b.join(name)).unwrap());
    }
}

#[test]
fn run_refuses_heavy_load_without_force() {
    let dir = TempDir::new().unwrap();
    let heavy = LIGHT.replace("lambda = [0.25, 0.15]", "lambda = [0.6, 0.2]");
    let cfg = write(dir.path(), "c.toml", &heavy);
    let out = dir.path().join("out");
    let o = fops(&["run", "--config", &cfg, "--epochs", "100", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rho_B = 7.2"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = fops(&["run", "--config", &cfg, "--epochs", "100", "--force", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("result.csv").exists());
}

const SWEEP: &str = r#"
stations = [2]
alphas = [0.0]
replications = 1
epochs = 4000
seed = 3
buffers = 2
service_rate = 0.3333333333333333
travel_good_mean = 2.0
travel_good_sd = 0.1
travel_bad_mean = 6.0
travel_bad_sd = 0.1
reward = 6.0

[[classes]]
count = 1
p_good = 0.9
lambda_scale = 0.5

[[classes]]
p_good = 0.1
lambda_scale = 0.3
"#;

#[test]
fn single_cell_sweep_matches_run() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "s.toml", SWEEP);
    let out = dir.path().join("sweep");
    let o = fops(&["sweep", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("sweep.csv"));
    assert_eq!(
        &header[..9],
        ["m", "alpha", "replication", "seed", "mof", "pof", "server_utility", "load_condition", "status"]
    );
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(field(&header, row, "status"), "ok");
    assert_eq!(field(&header, row, "pof"), "0");

    let config = r#"
stations = 2
lambda = [0.25, 0.15]
buffers = 2
service_rate = 0.3333333333333333
travel_good_mean = 2.0
travel_good_sd = 0.1
travel_bad_mean = 6.0
travel_bad_sd = 0.1
p_good = [0.9, 0.1]
reward = 6.0
alpha = 0.0
"#;
    let cfg = write(dir.path(), "c.toml", config);
    let run_out = dir.path().join("run");
    let seed = field(&header, row, "seed");
    let o = fops(&["run", "--config", &cfg, "--epochs", "4000", "--seed", seed, "--out", run_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (rh, rr) = csv_rows(&run_out.join("result.csv"));
    for (sweep_col, run_col) in [("mof", "mof"), ("server_utility", "server_utility"), ("ubar_1", "ubar_1"), ("ubar_2", "ubar_2")] {
        assert_eq!(field(&header, row, sweep_col), field(&rh, &rr[0], run_col), "{sweep_col}");
    }
}

#[test]
fn sweep_adds_reference_and_flags_crn() {
    let dir = TempDir::new().unwrap();
    let text = SWEEP.replace("alphas = [0.0]", "alphas = [1.0]").replace("epochs = 4000", "epochs = 1000");
    let spec = write(dir.path(), "s.toml", &text);
    let crn = dir.path().join("crn");
    let indep = dir.path().join("indep");
    let o = fops(&["sweep", "--config", &spec, "--out", crn.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fops(&["sweep", "--config", &spec, "--no-crn", "--out", indep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h1, r1) = csv_rows(&crn.join("sweep.csv"));
    let (h2, r2) = csv_rows(&indep.join("sweep.csv"));
    assert_eq!(r1.len(), 1);
    assert_eq!(field(&h1, &r1[0], "alpha"), "1");
    assert!(!field(&h1, &r1[0], "pof").is_empty());
    assert_ne!(field(&h1, &r1[0], "seed"), field(&h2, &r2[0], "seed"));
    let (sh, _) = csv_rows(&crn.join("summary.csv"));
    assert_eq!(&sh[..5], ["m", "alpha", "replications", "failures", "mean_mof"]);
}

#[test]
fn analyze_small_instance() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", &LIGHT.replace("buffers = 2", "buffers = 1"));
    let out = dir.path().join("an");
    let o = fops(&["analyze", "--config", &cfg, "--alpha", "0,1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let (header, rows) = csv_rows(&out.join("bounds.csv"));
    assert_eq!(
        header,
        ["alpha", "B", "bound", "mof", "kind", "converged", "residual", "sliding_residual", "interior", "pass"]
    );
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(field(&header, row, "pass"), "true");
        assert_eq!(field(&header, row, "converged"), "true");
    }
    assert!(out.join("fixed_point_alpha_0.json").exists());
    assert!(out.join("fixed_point_alpha_1.json").exists());
    let (sh, sr) = csv_rows(&out.join("stationary_alpha_1.csv"));
    assert_eq!(sh[0], "state");
    let total: f64 = sr.iter().map(|r| field(&sh, r, "probability").parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn analyze_refuses_large_instance_with_state_count() {
    let dir = TempDir::new().unwrap();
    let text = LIGHT
        .replace("stations = 2", "stations = 5")
        .replace("lambda = [0.25, 0.15]", "lambda = 0.1")
        .replace("buffers = 2", "buffers = 5")
        .replace("p_good = [0.9, 0.1]", "p_good = 0.5");
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("an");
    let o = fops(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("622080"), "{}", stderr(&o));
}
