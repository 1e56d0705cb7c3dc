use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use casimir_cli::commands::{self, Artifacts};
use casimir_cli::config::{BandChoice, CarriersChoice, RunConfig};
use casimir_cli::Result;

#[derive(Parser)]
#[command(
    name = "casimir",
    version,
    about = "Casimir force theory, calibration and comparison runs"
)]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives the timestamped run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    carriers: Option<CarriersChoice>,
    #[arg(long, global = true, value_enum)]
    band: Option<BandChoice>,
    /// Relative tolerance for both the Matsubara sum and the quadratures.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Force-distance tables and permittivities for the configured stack.
    Theory,
    /// Imaginary-axis permittivities of the film.
    Permittivity,
    /// Synthetic AFM curves from the configured truth and force law.
    Synth,
    /// Calibration constants from a directory of curve files.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Calibration, extracted Casimir force and its error budget.
    Extract {
        #[arg(long)]
        data: PathBuf,
    },
    /// Theory band against an experiment table.
    Compare {
        #[arg(long)]
        theory: PathBuf,
        /// Carriers-off theory, for the reduction profile.
        #[arg(long)]
        theory_off: Option<PathBuf>,
        #[arg(long)]
        experiment: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("schema_version = 1\n", Path::new("."))?,
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(c) = cli.carriers {
        cfg.permittivity.carriers = c;
    }
    if let Some(b) = cli.band {
        cfg.permittivity.band = b;
    }
    if let Some(t) = cli.tolerance {
        cfg.tolerances.matsubara_rel = t;
        cfg.tolerances.quadrature_rel = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let (name, artifacts): (&str, Artifacts) = match &cli.command {
        Command::Theory => ("theory", commands::run_theory(&cfg)?),
        Command::Permittivity => ("permittivity", commands::run_permittivity(&cfg)?),
        Command::Synth => ("synth", commands::run_synth(&cfg)?),
        Command::Calibrate { data } => ("calibrate", commands::run_calibrate(&cfg, data)?),
        Command::Extract { data } => ("extract", commands::run_extract(&cfg, data)?),
        Command::Compare {
            theory,
            theory_off,
            experiment,
        } => (
            "compare",
            commands::run_compare(theory, theory_off.as_deref(), experiment)?,
        ),
    };
    let dir = commands::write_run(&cfg, name, &artifacts)?;
    print!("{}", artifacts.summary);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
