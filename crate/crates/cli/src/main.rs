mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{KChoice, RhoPreset, RunConfig, StudyPreset};

#[derive(Debug, Parser)]
#[command(name = "charfactor", version, about = "Characteristic-based latent factor models: fit, test, simulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the model and write the fitted quantities.
    Fit(Common),
    /// Run the test battery and write FDR bands.
    Test {
        #[command(flatten)]
        common: Common,
        /// Directory holding a previous `fit`; refit if absent.
        #[arg(long)]
        fit_dir: Option<PathBuf>,
    },
    /// Run a Monte Carlo coverage or power study.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        preset: Option<StudyPreset>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Print the factor count chosen by the eigenvalue-ratio rule.
    SelectRank(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OmegaArg {
    Simple,
    Structured,
}

#[derive(Debug, Args)]
struct Common {
    /// Long-format panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// TOML or JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of factors or `auto`.
    #[arg(long)]
    k: Option<KChoice>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, value_enum)]
    omega: Option<OmegaArg>,
    #[arg(long, value_enum)]
    rho_preset: Option<RhoPreset>,
    #[arg(long)]
    rho_c: Option<f64>,
    #[arg(long)]
    rho_kappa: Option<f64>,
    /// Comma-separated significance levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    bootstrap_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.k_max {
            cfg.k_max = Some(v);
        }
        if let Some(v) = self.omega {
            cfg.omega = match v {
                OmegaArg::Simple => charfactor::OmegaSpec::Simple,
                OmegaArg::Structured => charfactor::OmegaSpec::Structured,
            };
        }
        if let Some(v) = self.rho_preset {
            cfg.rho.preset = Some(v);
        }
        if let Some(v) = self.rho_c {
            cfg.rho.c = Some(v);
        }
        if let Some(v) = self.rho_kappa {
            cfg.rho.kappa = Some(v);
        }
        if let Some(v) = &self.levels {
            cfg.levels = v.clone();
        }
        if let Some(v) = self.bootstrap_draws {
            cfg.bootstrap_draws = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = Some(v);
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<commands::Outcome> {
    match cli.command {
        Command::Fit(common) => commands::fit(&common.resolve()?),
        Command::Test { common, fit_dir } => commands::test(&common.resolve()?, fit_dir.as_deref()),
        Command::Simulate { common, preset, reps } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = preset {
                cfg.study.preset = p;
            }
            if reps.is_some() {
                cfg.study.reps = reps;
            }
            commands::simulate(&cfg)
        }
        Command::SelectRank(common) => commands::select_rank(&common.resolve()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<charfactor::Error>() {
            return match e {
                charfactor::Error::Io(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    if err.root_cause().is::<std::io::Error>() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHARFACTOR_LOG", "warn")).init();
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Fit(c) | Command::SelectRank(c) => c.threads,
        Command::Test { common, .. } | Command::Simulate { common, .. } => common.threads,
    };
    match charfactor::parallel::with_threads(threads, || run(cli)) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::StudyFailed) => ExitCode::from(4),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
