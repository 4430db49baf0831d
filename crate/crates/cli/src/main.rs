use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qvlbi_cli::commands::{self, EVENTS_DIR};
use qvlbi_cli::{CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "qvlbi", version, about = "Entanglement-assisted interferometry: predict, simulate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Keep only the first N baselines.
    #[arg(long, value_name = "N")]
    points: Option<usize>,
    /// Acquisition time per baseline.
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form and Fock-model visibility per baseline.
    Predict(Common),
    /// Time-tagged events for every baseline.
    Simulate(Common),
    /// Visibilities, autocorrelation and fit from an events directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/events`.
        events_dir: Option<PathBuf>,
    },
    /// predict, simulate and analyze, then compare with the configured source.
    Run {
        #[command(flatten)]
        common: Common,
        /// Further configs run after `--config`; fitted beam radii are compared.
        #[arg(value_name = "CONFIG")]
        more: Vec<PathBuf>,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            points: self.points,
            duration: self.duration,
        }
    }

    fn load(&self, path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match path {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Predict(c) => commands::cmd_predict(&c.load(c.config.as_deref())?).map(|_| ()),
        Command::Simulate(c) => commands::cmd_simulate(&c.load(c.config.as_deref())?).map(|_| ()),
        Command::Analyze { common, events_dir } => {
            let cfg = common.load(common.config.as_deref())?;
            let dir = events_dir.unwrap_or_else(|| cfg.output_dir.join(EVENTS_DIR));
            commands::cmd_analyze(&cfg, &dir).map(|_| ())
        }
        Command::Run { common, more } => {
            let paths: Vec<Option<PathBuf>> = match (&common.config, more.is_empty()) {
                (None, true) => vec![None],
                (first, _) => first.iter().cloned().chain(more).map(Some).collect(),
            };
            if paths.len() == 1 {
                let cfg = common.load(paths[0].as_deref())?;
                let name = paths[0].as_deref().map_or_else(|| "default".into(), stem);
                let dir = cfg.output_dir.clone();
                return commands::cmd_run(&[(name, cfg)], &dir).map(|_| ());
            }
            let base = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let mut configs = Vec::new();
            for p in paths.iter().flatten() {
                let name = stem(p);
                let mut cfg = common.load(Some(p))?;
                cfg.output_dir = base.join(&name);
                configs.push((name, cfg));
            }
            let combined = commands::cmd_run(&configs, &base)?;
            if combined.sigma_agreement.iter().any(|a| !a.consistent) {
                eprintln!("warning: fitted beam radii disagree across runs");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
