//! Drives the same pipeline as `ifpt verify` from a TOML config with overrides,
//! then lists the artifacts it wrote.
//!
//! Run with `cargo run --release --example config_pipeline [-- path/to/config.toml]`.

use std::path::PathBuf;

use ifpt::cli::{run, Command};
use ifpt::config::RunConfig;

fn main() -> ifpt::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/exponential.toml")));
    // a coarser grid keeps the example quick
    let overrides = vec!["grid.dx=0.02".to_string(), "grid.dt=0.002".to_string(), "forward.mc_paths=0".to_string()];
    let mut cfg = RunConfig::load(&path, &overrides)?;
    cfg.output_dir = std::env::temp_dir().join("ifpt-config-pipeline");

    let outcome = run(Command::Verify, &cfg)?;
    for m in &outcome.report.metrics {
        println!("{:<32} {:?}", m.name, m.status);
    }
    println!("exit code would be {}", outcome.exit_code());
    let mut names: Vec<_> =
        std::fs::read_dir(&outcome.output_dir)?.filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
    names.sort();
    println!("artifacts in {}: {names:?}", outcome.output_dir.display());
    Ok(())
}
