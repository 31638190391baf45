use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dadapt::cli::{cmd_eval, cmd_generate, cmd_report, cmd_run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "dadapt", version, about = "Decoupled adaptation loop on a synthetic two-domain detection benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target scenes plus target annotations.
    Generate {
        /// World config (TOML); the reference world when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on source and run the adaptation rounds.
    Run {
        /// Pipeline config (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated ablation names.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Reuse completed rounds found under `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a detector checkpoint on the target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output metrics file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory as CSV and SVG.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let m = cmd_generate(config.as_deref(), seed, &out)?;
            println!("wrote {} (config {})", out.display(), &m.config_hash[..12]);
        }
        Command::Run {
            config,
            data,
            out,
            seed,
            ablation,
            rounds,
            resume,
        } => {
            let opts = RunOptions {
                seed,
                ablations: ablation,
                rounds,
                resume,
            };
            cmd_run(config.as_deref(), &data, &out, &opts)?;
            let summary: dadapt::cli::RunSummary = dadapt::pipeline::read_json(&out.join("summary.json"))?;
            if let Some(m) = &summary.source_only {
                println!("source-only mAP {:.4}", m.map);
            }
            for r in &summary.rounds {
                if let Some(m) = &r.report {
                    println!("round {} mAP {:.4}", r.round, m.map);
                }
            }
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => {
            let m = cmd_eval(&checkpoint, &data, config.as_deref(), &out)?;
            println!("mAP {:.4}", m.map);
        }
        Command::Report { run } => {
            for p in cmd_report(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
