use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cellnas::commands::{cmd_count, cmd_eval, cmd_export, cmd_retrain, cmd_search};
use cellnas::config::RunConfig;
use cellnas::eval::Protocol;
use cellnas::Error;

#[derive(Parser)]
#[command(name = "cellnas", version, about = "Cell-based architecture search, retraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat dotted keys); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key override, e.g. `--set search.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut config = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell architecture and write genotype.toml.
    Search {
        #[command(flatten)]
        common: Common,
        /// Continue from a search checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the discrete network of a genotype.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        /// Continue from a retrain checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a tracking protocol on held-out sequences.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// embedding, oracle or random.
        #[arg(long, default_value = "embedding")]
        protocol: Protocol,
    },
    /// Write one DOT graph per cell type.
    Export {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and MAC counts of a genotype's network.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long, default_value_t = 128)]
        input_size: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Search { common, resume } => {
            let config = common.load()?;
            let outcome = cmd_search(&config, &config.out_dir, resume.as_deref())?;
            println!("{}", outcome.genotype_path.display());
        }
        Command::Retrain { common, genotype, resume } => {
            let config = common.load()?;
            let outcome = cmd_retrain(&config, &genotype, &config.out_dir, resume.as_deref())?;
            println!("{}", outcome.weights_path.display());
        }
        Command::Eval {
            common,
            weights,
            protocol,
        } => {
            let config = common.load()?;
            let report = cmd_eval(&config, weights.as_deref(), protocol, &config.out_dir)?;
            println!("precision,success,norm_precision");
            println!("{},{},{}", report.precision, report.success, report.norm_precision);
        }
        Command::Export { genotype, out } => {
            for path in cmd_export(&genotype, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Count {
            common,
            genotype,
            input_size,
        } => {
            let config = common.load()?;
            let out = common.out.as_deref().map(Path::to_path_buf);
            print!("{}", cmd_count(&config, &genotype, input_size, out.as_deref())?.to_csv());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Parse(_) => 2,
        Error::Diverged { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
