//! `adann`: simulate drift scenarios, train the equalizer offline, run the
//! online adaptation and compare it against the baselines.
//!
//! Every command reads one JSON config (see `configs/`) and writes its
//! outputs plus a `manifest.json` into `--out-dir`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adann::pipeline::TraceSummary;
use adann_cli::commands::{self, WeightSource};
use adann_cli::{config, CliResult};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adann", version, about = "Adaptive NN equalizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "adann-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the set1/set2 drift datasets.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the equalizer on the leading share of set1.
    TrainOffline {
        #[command(flatten)]
        common: Common,
        /// Directory holding set1.json (as written by `simulate`).
        #[arg(long)]
        data: PathBuf,
    },
    /// Stream set1 then set2 through the online adaptation.
    RunOnline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run AdaNN and every baseline on the same data.
    ///
    /// Without --data the scenario is simulated; without --checkpoint the
    /// model is trained first.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-layer weight-change ratios from two checkpoints or from sums.
    AnalyzeWeights {
        #[arg(long, requires = "last", conflicts_with = "sums")]
        initial: Option<PathBuf>,
        #[arg(long = "final", requires = "initial")]
        last: Option<PathBuf>,
        /// CSV with S_init and S_delta columns.
        #[arg(long, required_unless_present = "initial")]
        sums: Option<PathBuf>,
        #[arg(long, default_value = "adann-out")]
        out_dir: PathBuf,
    },
}

fn load(common: &Common) -> CliResult<adann::experiment::ExperimentConfig> {
    let mut cfg = config::load(&common.config)?;
    config::apply_seed(&mut cfg, common.seed);
    config::validate(&cfg)?;
    Ok(cfg)
}

fn print_summary(s: &TraceSummary) {
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
    let conv = s
        .convergence_batches
        .map_or_else(|| "did not converge".to_string(), |c| format!("{c} batches"));
    println!(
        "{}: final BER set1 {} set2 {}, convergence {conv}",
        s.method,
        fmt(s.final_ber_set1),
        fmt(s.final_ber_set2)
    );
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load(&common)?;
            commands::simulate(&cfg, &common.out_dir)?;
            println!(
                "wrote {} symbols per set to {}",
                cfg.scenario.n_seq,
                common.out_dir.join("data").display()
            );
        }
        Command::TrainOffline { common, data } => {
            let ber = commands::train_offline(&load(&common)?, &data, &common.out_dir)?;
            println!("held-out BER {ber:.3e}");
        }
        Command::RunOnline {
            common,
            checkpoint,
            data,
        } => print_summary(&commands::run_online(&load(&common)?, &checkpoint, &data, &common.out_dir)?),
        Command::Compare {
            common,
            checkpoint,
            data,
        } => {
            let report = commands::compare(&load(&common)?, checkpoint.as_deref(), data.as_deref(), &common.out_dir)?;
            print!("{}", report.table_csv());
        }
        Command::AnalyzeWeights {
            initial,
            last,
            sums,
            out_dir,
        } => {
            let source = match (&initial, &last, &sums) {
                (Some(initial), Some(last), _) => WeightSource::Checkpoints { initial, last },
                (_, _, Some(sums)) => WeightSource::Sums(sums),
                _ => unreachable!("clap enforces one source"),
            };
            print!("{}", commands::analyze_weights(source, Path::new(&out_dir))?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
