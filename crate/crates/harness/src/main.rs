use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnncl::checkpoint;
use bnncl::dataset::{load_dataset, make_synthetic, Dataset, Format, SyntheticConfig};
use bnncl::experiment::{pretrain, run_experiment, RunConfig, Start};
use bnncl::gradcheck;
use bnncl::metrics::{export_metrics, FileSink, MetricRow, MetricsFormat, MetricsSink};
use bnncl::scenario::Scenario;
use bnncl::sweep::{combined_rows, run_sweep};
use bnncl::HarnessError;
use bnncl_core::cwr::{Precision, QuantConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bnncl", version, about = "Continual learning on binary networks with a fixed-point CWR* head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train experience 1 only and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to write.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a full continual-learning experiment.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from a `pretrain` checkpoint instead of training experience 1.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference and kernel self-checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run lp = hp over 8, 16, 32 and float; write one combined table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "nc", value_parser = parse_scenario)]
    scenario: Scenario,
    /// Forward-pass head precision: 8, 16, 32 or float.
    #[arg(long, default_value = "float", value_parser = parse_precision)]
    lp_bits: Precision,
    /// Update-step head precision; defaults to --lp-bits.
    #[arg(long, value_parser = parse_precision)]
    hp_bits: Option<Precision>,
    /// Head learning rate.
    #[arg(long, default_value_t = QuantConfig::DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Backbone learning rate during experience 1.
    #[arg(long, default_value_t = 0.01)]
    backbone_lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs_first: usize,
    #[arg(long, default_value_t = 5)]
    epochs_rest: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Number of experiences; 5 for nc and 8 for ni by default.
    #[arg(long)]
    experiences: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// BNDS or text dataset file.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate the synthetic benchmark (the default when no dataset is given).
    #[arg(long)]
    synthetic: bool,
    /// Class-centre spread of the synthetic data.
    #[arg(long, default_value_t = SyntheticConfig::default().separation)]
    separation: f64,
    /// Seed of the synthetic data; defaults to --seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Metrics file, CSV unless it ends in .json.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Measure the per-experience gradient error.
    #[arg(long)]
    mae_instrumentation: bool,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    Precision::parse(s).ok_or_else(|| format!("expected 8, 16, 32 or float, got {s:?}"))
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let quant = QuantConfig::new(self.lp_bits, self.hp_bits.unwrap_or(self.lp_bits), self.lr)?;
        let mut c = RunConfig::new(self.scenario, quant);
        c.backbone_lr = self.backbone_lr;
        c.epochs_first = self.epochs_first;
        c.epochs_rest = self.epochs_rest;
        c.batch_size = self.batch_size;
        c.seed = self.seed;
        c.mae_instrumentation = self.mae_instrumentation;
        if let Some(n) = self.experiences {
            c.experiences = n;
        }
        Ok(c)
    }

    fn dataset(&self) -> Result<Dataset, HarnessError> {
        match &self.dataset {
            Some(path) => load_dataset(path, Format::Detect),
            None => Ok(make_synthetic(&SyntheticConfig {
                separation: self.separation,
                seed: self.data_seed.unwrap_or(self.seed),
                ..SyntheticConfig::default()
            })?),
        }
    }

    fn sink(&self) -> Result<Box<dyn MetricsSink>, HarnessError> {
        Ok(match &self.metrics_out {
            Some(path) => Box::new(FileSink::create(path)?),
            None => Box::new(Vec::<MetricRow>::new()),
        })
    }
}

fn print_rows(rows: &[MetricRow]) {
    println!("experience  accuracy  mae_percent");
    for r in rows {
        let mae = r.mae_percent.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
        println!("{:>10}  {:>8.2}  {:>11}", r.experience, r.accuracy, mae);
    }
}

fn fail(e: &HarnessError, partial: bool) -> ExitCode {
    eprintln!("error[{}]: {e}", e.category());
    if partial {
        eprintln!("note: metrics are partial");
    }
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { run, checkpoint } => cmd_pretrain(&run, &checkpoint),
        Command::Run { run, checkpoint } => cmd_run(&run, checkpoint.as_deref()),
        Command::Gradcheck { seed } => return cmd_gradcheck(seed),
        Command::Sweep { run } => cmd_sweep(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, partial)) => fail(&e, partial),
    }
}

type CmdResult = Result<(), (HarnessError, bool)>;

fn plain<T>(r: Result<T, HarnessError>) -> Result<T, (HarnessError, bool)> {
    r.map_err(|e| (e, false))
}

fn cmd_pretrain(args: &RunArgs, out: &Path) -> CmdResult {
    let config = plain(args.config())?;
    let dataset = plain(args.dataset())?;
    let mut sink = plain(args.sink())?;
    let outcome = pretrain(&dataset, &config, sink.as_mut()).map_err(|f| (f.error, true))?;
    plain(checkpoint::save(out, &outcome.backbone, Some(&outcome.state)))?;
    print_rows(&outcome.metrics.rows);
    Ok(())
}

fn cmd_run(args: &RunArgs, resume: Option<&Path>) -> CmdResult {
    let config = plain(args.config())?;
    let dataset = plain(args.dataset())?;
    let start = match resume {
        None => Start::Scratch,
        Some(path) => {
            let ck = plain(checkpoint::load(path))?;
            match ck.head {
                Some(head) => Start::Resume { backbone: ck.backbone, head },
                None => Start::Backbone(ck.backbone),
            }
        }
    };
    let mut sink = plain(args.sink())?;
    let outcome = run_experiment(&dataset, &config, start, sink.as_mut()).map_err(|f| (f.error, true))?;
    print_rows(&outcome.metrics.rows);
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> CmdResult {
    let config = plain(args.config())?;
    let dataset = plain(args.dataset())?;
    let results = plain(run_sweep(&dataset, &config, &Precision::SWEEP))?;
    let rows = combined_rows(&results);
    if let Some(path) = &args.metrics_out {
        plain(export_metrics(&rows, path, MetricsFormat::for_path(path)))?;
    }
    for (p, m) in Precision::SWEEP.iter().zip(&results) {
        println!("lp = hp = {p}");
        print_rows(&m.rows);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> ExitCode {
    let results = gradcheck::run_all(seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        eprintln!("error[check]: {} check(s) failed", results.iter().filter(|r| !r.passed).count());
        ExitCode::FAILURE
    }
}
