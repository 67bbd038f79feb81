use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmr_core::experiment::{self, ExperimentConfig, Strategy, SweepAxis};
use dmr_core::memory::MemoryBank;
use dmr_core::Error;

/// Class-incremental learning over frozen features with distribution-level
/// memory replay.
#[derive(Parser)]
#[command(name = "dmr", version)]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out.dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace both the stream and the train seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report, memory bank and classifier.
    Run(RunArgs),
    /// Run one experiment per value of a fidelity or xi list.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategies (finetune, prior, d-std, dmr-lite, dmr).
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "xi",
            required_unless_present = "xi"
        )]
        fidelity: Vec<String>,
        /// Comma-separated xi values.
        #[arg(long, value_delimiter = ',')]
        xi: Vec<f64>,
    },
    /// Print a CSV table comparing two or more report.json files.
    Compare {
        #[arg(num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
    },
    /// Summarise a memory_bank.bin file.
    InspectMemory { bank: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::Stage { .. } | Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn prepare(args: &RunArgs) -> Result<(ExperimentConfig, serde_json::Value, PathBuf), Error> {
    let (mut cfg, raw) = experiment::load_config(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.override_seeds(seed);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, raw, out))
}

fn run_one(
    cfg: &ExperimentConfig,
    raw: &serde_json::Value,
    out: &Path,
    quiet: bool,
) -> Result<(), Error> {
    let result = experiment::run_experiment(cfg)?;
    let doc = result.document(cfg, raw);
    result.write(out, &doc)?;
    if !quiet {
        let r = &result.report;
        eprintln!(
            "{}: {} stages, mean accuracy {:.2}, final {:.2}, drop {:.2}, C_I total {:.4} -> {}",
            cfg.memory.fidelity.name(),
            r.stages.len(),
            r.mean_accuracy,
            r.final_accuracy,
            r.performance_drop,
            r.ci_total,
            out.display()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, raw, out) = prepare(&args)?;
            run_one(&cfg, &raw, &out, cli.quiet)
        }
        Command::Sweep { run, fidelity, xi } => {
            let (cfg, raw, out) = prepare(&run)?;
            let axis = if xi.is_empty() {
                let list = fidelity
                    .iter()
                    .map(|s| {
                        Strategy::parse(s).ok_or_else(|| {
                            Error::InvalidArgument(format!("unknown fidelity `{s}`"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                SweepAxis::Fidelity(list)
            } else {
                SweepAxis::Xi(xi)
            };
            for (label, cfg, raw) in experiment::sweep_variants(&cfg, &raw, &axis) {
                cfg.validate()?;
                run_one(&cfg, &raw, &out.join(&label), cli.quiet)?;
            }
            Ok(())
        }
        Command::Compare { reports } => {
            let docs = reports
                .iter()
                .map(|p| Ok((p.display().to_string(), experiment::read_report(p)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            print!("{}", experiment::compare(&docs)?);
            Ok(())
        }
        Command::InspectMemory { bank } => {
            print!("{}", MemoryBank::load(&bank)?.summary());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
