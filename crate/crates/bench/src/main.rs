use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use cbac_core::bench::{
    run_atomicity_stress, run_decision_bench, run_emergency_bench, run_setup_bench, write_csv,
    BenchError, BenchResultRow, DecisionBenchConfig, SetupBenchConfig,
};
use cbac_core::ccam::OverlapMode;
use cbac_core::cpdp::EngineKind;
use cbac_core::ecdm::RelevanceModel;
use cbac_core::synth::{EmergencyFixtureSpec, WorkloadSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

const FULL_SCALE: usize = 10;

#[derive(Parser)]
#[command(name = "bench", about = "Consent engine experiments, emitted as CSV")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// CSV destination; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Multiply stream and model sizes by ten.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Overlap {
    Exact,
    Scope,
}

impl From<Overlap> for OverlapMode {
    fn from(o: Overlap) -> Self {
        match o {
            Overlap::Exact => OverlapMode::ExactTarget,
            Overlap::Scope => OverlapMode::ScopeOverlap,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mean per-consent admission time for growing stream sizes.
    Setup {
        #[arg(long, value_delimiter = ',', default_value = "2500,5000,7500,10000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        anomaly_rate: f64,
        #[arg(long, value_enum, default_value = "exact")]
        overlap: Overlap,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Request latency per engine across anomaly rates.
    Decide {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.10,0.15,0.20,0.25")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "cbac,baseline")]
        engines: Vec<EngineKind>,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
        #[arg(long, default_value_t = 0.6)]
        applicable: f64,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, value_enum, default_value = "exact")]
        overlap: Overlap,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Disclosure ratio of the emergency path per fixture case.
    Emergency {
        #[arg(long)]
        fixtures: PathBuf,
        /// Relevance configuration; the built-in model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Concurrent conflicting submissions against one repository.
    Stress {
        #[arg(long, default_value_t = 8)]
        threads: usize,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn emit(rows: &[BenchResultRow], out: Option<&PathBuf>) -> Result<(), BenchError> {
    match out {
        Some(path) => {
            let f = File::create(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
            write_csv(rows, f)
        }
        None => write_csv(rows, io::stdout().lock()),
    }
}

fn read(path: &PathBuf) -> Result<String, BenchError> {
    std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Setup { sizes, anomaly_rate, overlap, repetitions, seed, common } => {
            let scale = if common.full_scale { FULL_SCALE } else { 1 };
            let cfg = SetupBenchConfig {
                sizes: sizes.iter().map(|n| n * scale).collect(),
                anomaly_rate,
                episode_count: None,
                overlap_mode: overlap.into(),
                repetitions,
                seed,
            };
            let report = run_setup_bench(&cfg)?;
            for p in &report.points {
                eprintln!(
                    "n={} mean={:.3}us steady={:.3}us accepted={} rejected={}",
                    p.size, p.mean_us, p.steady_mean_us, p.accepted, p.rejected
                );
            }
            emit(&report.rows, common.out.as_ref())
        }
        Command::Decide { n, rates, engines, requests, applicable, warmup, repetitions, overlap, seed, common } => {
            let scale = if common.full_scale { FULL_SCALE } else { 1 };
            let cfg = DecisionBenchConfig {
                directive_count: n * scale,
                episode_count: n * scale,
                rates,
                engines,
                workload: WorkloadSpec { request_count: requests, applicable_fraction: applicable, seed },
                warmup,
                repetitions,
                overlap_mode: overlap.into(),
                seed,
            };
            let report = run_decision_bench(&cfg)?;
            for p in &report.points {
                eprintln!(
                    "rate={} engine={} mean={:.3}us steady={:.3}us scanned={:.2} permits={}",
                    p.rate, p.engine, p.mean_us, p.steady_mean_us, p.mean_scanned, p.permits
                );
            }
            emit(&report.rows, common.out.as_ref())
        }
        Command::Emergency { fixtures, model, common } => {
            let cases = EmergencyFixtureSpec::parse_list(&read(&fixtures)?)
                .map_err(|e| BenchError::Config(format!("{}: {e}", fixtures.display())))?;
            let g = match model {
                Some(path) => RelevanceModel::parse(&read(&path)?)
                    .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?,
                None => RelevanceModel::default_model(),
            };
            let report = run_emergency_bench(&cases, &g);
            for p in &report.points {
                eprintln!("{} {} |R|={} |D|={} {}", p.spec.case_id, p.spec.state, p.ratio.total, p.ratio.disclosed, p.ratio);
            }
            for (spec, reason) in &report.skipped {
                eprintln!("{} skipped: {reason}", spec.case_id);
            }
            emit(&report.rows, common.out.as_ref())
        }
        Command::Stress { threads, pairs, seed } => {
            let r = run_atomicity_stress(threads, pairs, seed)?;
            let mut out = io::stdout().lock();
            writeln!(
                out,
                "submitted={} accepted={} conflict={} redundant={} doubled={} violations={}",
                r.submitted, r.accepted, r.rejected_conflict, r.rejected_redundant, r.doubled_targets, r.violations
            )
            .map_err(|e| BenchError::Config(e.to_string()))?;
            if r.doubled_targets > 0 || r.violations > 0 || r.accepted != pairs {
                return Err(BenchError::Config("atomicity violated".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
