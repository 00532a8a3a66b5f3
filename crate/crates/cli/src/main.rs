//! Command-line front end for the train/search/retrain pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bgnas::arch::{flops, flops_breakdown, GroupVector};
use bgnas::pipeline::{
    self, read_genome_file, RunConfig, SplitTag, StageContext, BEST_GENOME, SUPERNET_CKPT,
};
use bgnas::Error;

#[derive(Parser)]
#[command(name = "bgnas", version, about = "Binary group-convolution network search")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Deterministic mode: single-threaded execution, zeroed wall-clock
    /// columns; two runs with one seed produce bit-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to evaluate, search on, or resume from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Genome file (slot → group lines).
    #[arg(long, global = true)]
    genome: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the weight-sharing supernet with random groups per step.
    TrainSupernet,
    /// Evolutionary group search on a trained supernet checkpoint.
    Search,
    /// Retrain a genome from scratch and report test accuracy.
    Retrain,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Report the per-layer FLOP breakdown for a genome (default all-1s).
    Flops,
    /// Full pipeline: train-supernet, search, retrain, eval.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config <path> is required"))?;
    let mut run = RunConfig::from_toml_file(path)?;
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    if let Some(out) = &cli.out {
        run.out_dir = out.clone();
    }
    Ok(run)
}

fn genome_from_flag(cli: &Cli) -> Result<Option<GroupVector>, Error> {
    cli.genome.as_deref().map(read_genome_file).transpose()
}

fn run(cli: &Cli) -> Result<(), Error> {
    let run = load_config(cli)?;
    let ctx = StageContext::new(run, cli.deterministic)?;

    match cli.cmd {
        Cmd::TrainSupernet => {
            let ckpt = pipeline::train_supernet(&ctx, cli.checkpoint.as_deref())?;
            println!("supernet checkpoint: {}", ckpt.display());
        }
        Cmd::Search => {
            let supernet = cli
                .checkpoint
                .clone()
                .unwrap_or_else(|| ctx.artifact(SUPERNET_CKPT));
            let (genome, outcome) = pipeline::search(&ctx, &supernet)?;
            println!("best genome: {genome}");
            println!("best fitness: {}", outcome.best.fitness);
            println!("genome file: {}", ctx.artifact(BEST_GENOME).display());
        }
        Cmd::Retrain => {
            let genome = match genome_from_flag(cli)? {
                Some(g) => g,
                None => read_genome_file(&ctx.artifact(BEST_GENOME))?,
            };
            let (ckpt, top1, top5) = pipeline::retrain(&ctx, &genome, cli.checkpoint.as_deref())?;
            println!("retrain checkpoint: {}", ckpt.display());
            println!("test top1: {top1}");
            println!("test top5: {top5}");
        }
        Cmd::Eval => {
            let ckpt = cli
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::config("eval needs --checkpoint <path>"))?;
            let genome = genome_from_flag(cli)?;
            let (top1, top5) = pipeline::evaluate_checkpoint(&ctx, ckpt, genome, SplitTag::Test)?;
            println!("test top1: {top1}");
            println!("test top5: {top5}");
        }
        Cmd::Flops => {
            let genome = match genome_from_flag(cli)? {
                Some(g) => g,
                None => GroupVector::all_ones(ctx.net_config.num_slots()),
            };
            ctx.net_config.validate_genome(&genome)?;
            let rows = flops_breakdown(&ctx.net_config, &genome);
            println!("{:<12} {:>16} {:>16} {:>16}", "layer", "binary", "full_precision", "total");
            for row in &rows {
                println!(
                    "{:<12} {:>16.1} {:>16.1} {:>16.1}",
                    row.name,
                    row.binary,
                    row.full_precision,
                    row.total()
                );
            }
            let total = flops(&ctx.net_config, &genome);
            println!("total: {total:.1} ({total:.4e})");
        }
        Cmd::RunAll => {
            let summary = pipeline::run_all(&ctx)?;
            println!("searched genome: {}", summary.genome);
            println!(
                "genome flops: {:.4e} (budget {:.4e})",
                summary.genome_flops, summary.flop_budget
            );
            println!("search best fitness: {}", summary.search_best_fitness);
            println!("test top1: {}", summary.test_top1);
            println!("test top5: {}", summary.test_top5);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success; usage errors
            // map to the config exit code.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if cli.deterministic {
        // Sequential execution everywhere.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
