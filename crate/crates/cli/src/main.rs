use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glioseg::autodiff::OpKind;
use glioseg_cli::config::{self, PipelineConfig, Preset, Sources};
use glioseg_cli::{selftest, stages, CliError};

#[derive(Parser)]
#[command(name = "glioseg", version, about = "Glioma segmentation, radiomics and classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-case stages (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, normalise and resize every case under the dataset root.
    Preprocess(Common),
    /// Train the segmentation network on preprocessed cases.
    Train(Common),
    /// Predict label maps with the trained checkpoint.
    Segment(Common),
    /// Score predictions against ground truth.
    Evaluate(Common),
    /// Shape features of every predicted region.
    Radiomics(Common),
    /// Train and score the fused-feature region classifier.
    Classify(Common),
    /// All stages in order.
    Run(Common),
    /// Write synthetic phantom cases in the dataset layout.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient checks and closed-form oracles.
    Selftest {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt one op's backward pass to confirm the check notices.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn load(c: &Common) -> Result<PipelineConfig, CliError> {
    config::load(&Sources {
        file: c.config.as_deref(),
        preset: c.preset,
        seed: c.seed,
        jobs: c.jobs,
        sets: &c.sets,
        dataset_root: c.dataset_root.as_deref(),
        output_root: c.output_root.as_deref(),
    })
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Preprocess(c) => {
            let m = stages::preprocess(&load(&c)?)?;
            println!("preprocessed {} cases, skipped {}", m.cases.len(), m.skipped.len());
            for s in &m.skipped {
                eprintln!("skipped {}: {}", s.case_id, s.reason);
            }
        }
        Command::Train(c) => println!("{}", json(&stages::train(&load(&c)?)?)),
        Command::Segment(c) => println!("{}", json(&stages::segment(&load(&c)?)?)),
        Command::Evaluate(c) => print!("{}", stages::evaluate(&load(&c)?)?.to_csv()),
        Command::Radiomics(c) => print!("{}", glioseg::radiomics::rows_to_csv(&stages::radiomics(&load(&c)?)?)),
        Command::Classify(c) => println!("{}", json(&stages::classify(&load(&c)?)?)),
        Command::Run(c) => {
            let cfg = load(&c)?;
            stages::run_all(&cfg)?;
            println!("outputs in {}", cfg.output_root.display());
        }
        Command::Phantom { out, cases, seed } => {
            let ids = stages::make_phantoms(&out, cases, seed)?;
            println!("wrote {} cases to {}", ids.len(), out.display());
        }
        Command::Selftest { seeds, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
                    let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                    CliError::config(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
                })?),
                None => None,
            };
            let checks = selftest::run(seeds, fault)?;
            print!("{}", selftest::table(&checks));
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::selftest(format!("failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
