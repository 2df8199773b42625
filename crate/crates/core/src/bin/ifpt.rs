use clap::{Args, Parser, Subcommand};
use ifpt::cli::{exit_code, run, Command, EXIT_VALIDATION};
use ifpt::config::{RunConfig, OUTPUT_DIR_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ifpt", version, about = "Inverse first-passage problems for one-dimensional diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Survival of a given barrier by PDE and, optionally, Monte Carlo.
    Forward(Common),
    /// Barrier reproducing a target survival curve.
    Inverse(Common),
    /// Inverse solve followed by the hodograph strip problem and bracketing family.
    Hodograph(Common),
    /// Inverse solve, forward round trip and regularity diagnostics.
    Diagnose(Common),
    /// Everything in `diagnose` plus the hodograph stage.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Forward(c) => (Command::Forward, c),
        Sub::Inverse(c) => (Command::Inverse, c),
        Sub::Hodograph(c) => (Command::Hodograph, c),
        Sub::Diagnose(c) => (Command::Diagnose, c),
        Sub::Verify(c) => (Command::Verify, c),
    };
    let mut cfg = match RunConfig::load(&common.config, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    if let Some(dir) = common.output_dir {
        cfg.output_dir = dir;
    }
    match run(command, &cfg) {
        Ok(outcome) => {
            for m in &outcome.report.metrics {
                let value = m.value.map_or("-".to_string(), |v| format!("{v:.4e}"));
                println!("{:<8} {:<32} {value}", format!("{:?}", m.status).to_uppercase(), m.name);
            }
            println!("artifacts in {}", outcome.output_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
