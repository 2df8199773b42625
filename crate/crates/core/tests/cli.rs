use std::f64::consts::SQRT_2;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ifpt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifpt"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .env_remove("IFPT_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn column(path: &Path, k: usize) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[test]
fn verify_flat_curve_gives_neg_inf_barrier() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(&["verify", "--config", &config("flat.toml")], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let b = column(&dir.path().join("boundary.csv"), 1);
    assert!(!b.is_empty() && b.iter().all(|v| v == "-inf"));
}

#[test]
fn forward_constant_barrier_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(&["forward", "--config", &config("constant_barrier.toml")], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("forward_pde.csv")).unwrap();
    let mut worst: f64 = 0.0;
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        if v[0] >= 0.05 {
            // barrier -1 below the start 0, sigma = sqrt 2
            worst = worst.max((v[1] - (2.0 * phi(1.0 / (SQRT_2 * v[0].sqrt())) - 1.0)).abs());
        }
    }
    assert!(worst < 5e-3, "{worst}");
    // plot bundle: target, PDE and MC series, SE only for MC
    let plot = std::fs::read_to_string(dir.path().join("plotdata.csv")).unwrap();
    assert!(plot.starts_with("series,t,value,se\n"));
    let series: std::collections::BTreeSet<&str> = plot.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(series.into_iter().collect::<Vec<_>>(), ["forward_mc", "forward_pde", "target"]);
    let pde_rows = plot.lines().filter(|l| l.starts_with("forward_pde,")).count();
    assert_eq!(pde_rows, text.lines().count() - 1, "knot count preserved");
    assert!(plot.lines().filter(|l| l.starts_with("forward_mc,")).all(|l| !l.ends_with(',')));
    assert!(plot.lines().filter(|l| l.starts_with("forward_pde,")).all(|l| l.ends_with(',')));
}

#[test]
fn malformed_curve_csv_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curve.csv");
    std::fs::write(&csv, "t,p\n0,1\n0.5,0.8\n0.4,0.7\n").unwrap();
    let out = ifpt(
        &[
            "inverse",
            "--config",
            &config("exponential.toml"),
            "--set",
            "curve.kind=csv",
            "--set",
            &format!("curve.path=\"{}\"", csv.display()),
        ],
        &dir.path().join("out"),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(&["inverse", "--config", &config("exponential.toml"), "--set", "grid.dxx=0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dxx"));
}

#[test]
fn unreachable_strip_level_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(
        &[
            "hodograph",
            "--config",
            &config("exponential.toml"),
            "--set",
            "grid.dx=0.04",
            "--set",
            "grid.dt=0.004",
            "--set",
            "hodograph.z_eps=50.0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_metric_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(
        &[
            "forward",
            "--config",
            &config("constant_barrier.toml"),
            "--set",
            "forward.mc_paths=0",
            "--set",
            "forward.tolerance=1e-12",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"fail\"") || report.contains("\"Fail\""), "{report}");
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ifpt"))
        .args(["forward", "--config", &config("constant_barrier.toml"), "--set", "forward.mc_paths=0"])
        .env("IFPT_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn rerun_from_resolved_config_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let coarse = ["--set", "grid.dx=0.02", "--set", "grid.dt=0.002"];
    let mut args = vec!["inverse", "--config"];
    let first = config("exponential.toml");
    args.push(&first);
    args.extend(coarse);
    assert_eq!(ifpt(&args, &a).status.code(), Some(0));
    let resolved = a.join("resolved_config.toml").to_string_lossy().into_owned();
    assert_eq!(ifpt(&["inverse", "--config", &resolved], &b).status.code(), Some(0));
    for name in ["boundary.csv", "convergence.json", "report.json", "resolved_config.toml", "plotdata.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    for key in ["config_sha256", "version", "seed", "sigma_convention", "grid", "artifacts", "wall_time_s"] {
        assert!(manifest.get(key).is_some(), "{key}");
    }
}

#[test]
fn verify_writes_monte_carlo_series_with_standard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifpt(
        &[
            "verify",
            "--config",
            &config("exponential.toml"),
            "--set",
            "grid.dx=0.02",
            "--set",
            "grid.dt=0.002",
            "--set",
            "forward.mc_paths=2000",
        ],
        dir.path(),
    );
    assert!(matches!(out.status.code(), Some(0) | Some(4)), "{}", String::from_utf8_lossy(&out.stderr));
    let plot = std::fs::read_to_string(dir.path().join("plotdata.csv")).unwrap();
    assert!(plot.lines().any(|l| l.starts_with("round_trip_pde,")));
    assert!(plot.lines().filter(|l| l.starts_with("round_trip_mc,")).all(|l| !l.ends_with(',')));
    assert!(plot.lines().any(|l| l.starts_with("round_trip_mc,")));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    for key in ["z_eps", "h_values", "band", "neumann_bandwidth"] {
        assert!(manifest.contains(&format!("\"{key}\"")), "{key}");
    }
}
