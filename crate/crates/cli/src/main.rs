use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfbf_cli::commands;
use dfbf_cli::config::RunConfig;
use dfbf_cli::rundir::RunDir;
use dfbf_core::error::Error;

#[derive(Parser)]
#[command(name = "dfbf", about = "Data-free backbone compression pipeline", version)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Overwrite an already-populated run directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model on the configured dataset.
    Train,
    /// Prune a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the configured prune ratio.
        #[arg(long)]
        ratio: Option<f64>,
        /// Write the prune plan JSON here.
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
    /// Synthesize the label-free dataset from a frozen checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune a pruned checkpoint against its teacher.
    Finetune {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Tap selection: all | every_second | output_only.
        #[arg(long)]
        taps: Option<String>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline: train, prune, synthesize, finetune, eval.
    Pipeline,
    /// Fine-tune once per gamma against a shared teacher.
    SweepGamma {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated gamma values.
        #[arg(long, default_value = "0,2,4,6,8")]
        gammas: String,
    },
    /// Print the header of a checkpoint or dataset file.
    Inspect {
        path: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Format(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::Graph(_) => 3,
    }
}

fn init_threads() {
    if let Ok(threads) = std::env::var("DFBF_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run(cli: Cli) -> dfbf_core::error::Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_seed(cli.seed);

    let mut rundir = RunDir::prepare(&cli.out, cli.force)?;

    match cli.command {
        Command::Train => {
            std::fs::write(rundir.file("config.resolved.json"), serde_json::to_string_pretty(&cfg)?)?;
            let mut metrics = dfbf_cli::metrics::MetricsWriter::create(&rundir.file("metrics.jsonl"))?;
            commands::cmd_train(&cfg, &rundir.checkpoint("baseline.dfbf"), Some(&mut metrics))?;
        }
        Command::Prune { checkpoint, ratio, plan_out } => {
            if let Some(ratio) = ratio {
                cfg.prune.ratio = ratio;
                cfg.validate()?;
            }
            commands::cmd_prune(&cfg, &checkpoint, &rundir.checkpoint("pruned.dfbf"), plan_out.as_deref())?;
        }
        Command::Synthesize { checkpoint } => {
            commands::cmd_synthesize(&cfg, &checkpoint, &rundir.dataset("synthetic.dfds"))?;
        }
        Command::Finetune { pruned, teacher, dataset, taps } => {
            if let Some(taps) = taps {
                cfg.distill.taps = commands::parse_tap_selection(&taps)?;
            }
            commands::cmd_finetune(
                &cfg,
                &pruned,
                &teacher,
                &dataset,
                &rundir.checkpoint("dfbf.dfbf"),
                Some(rundir.file("finetune_losses.jsonl").as_path()),
            )?;
        }
        Command::Eval { checkpoint } => {
            commands::cmd_eval(&cfg, &checkpoint)?;
        }
        Command::Pipeline => {
            commands::cmd_pipeline(&cfg, &mut rundir)?;
        }
        Command::SweepGamma { pruned, teacher, dataset, gammas } => {
            let gammas: Vec<f64> = gammas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("invalid gamma '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let rows = commands::cmd_sweep_gamma(&cfg, &gammas, &pruned, &teacher, &dataset)?;
            std::fs::write(rundir.file("sweep_gamma.json"), serde_json::to_string_pretty(&rows)?)?;
        }
        Command::Inspect { path } => {
            commands::cmd_inspect(&path)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
