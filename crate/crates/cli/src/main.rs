use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrtb_core::harness::{
    analyze_tradeoff, generate_data, run_experiment, run_grid, run_reference_sweep, RunConfig, RunStatus,
};
use mrtb_core::Error;

#[derive(Parser)]
#[command(name = "mrtb", version, about = "Mixture-of-experts routing testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every (method, scope, strength, capacity) cell of the grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train reference-routed models across token split ratios.
    SweepReference {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank-correlate the combined metric with validation loss.
    Analyze { summary: PathBuf },
    /// Generate or ingest the corpus and write the packed cache.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    mrtb_core::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{}", e);
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn execute(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let record = run_experiment(&cfg)?;
            println!("{}", mrtb_core::harness::SUMMARY_HEADER);
            println!("{}", record.summary.to_row());
            Ok(if record.summary.status == RunStatus::Completed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Grid { config, workers } => {
            let cfg = RunConfig::from_file(&config)?;
            let rows = run_grid(&cfg, workers)?;
            let failed = rows.iter().filter(|r| r.status != RunStatus::Completed).count();
            println!("{} runs, {} not completed; summary in {}", rows.len(), failed, cfg.output_dir.join("summary.tsv").display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::SweepReference { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let rows = run_reference_sweep(&cfg, &cfg.sweep.ratios)?;
            println!("{}", mrtb_core::harness::SWEEP_HEADER);
            for r in &rows {
                println!("{}", r.to_row());
            }
            let failed = rows.iter().any(|r| r.status.starts_with("failed") || r.status.starts_with("diverged"));
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Analyze { summary } => {
            let (report, path) = analyze_tradeoff(&summary)?;
            println!("runs\tspearman\tkendall\tnote");
            let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
            println!("{}\t{}\t{}\t{}", report.runs, na(report.spearman), na(report.kendall), report.note);
            log::info!("report written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let packed = generate_data(&cfg)?;
            println!("{} sequences of length {}, vocabulary {}", packed.sequences.len(), packed.seq_len, packed.vocab_size);
            Ok(ExitCode::SUCCESS)
        }
    }
}
