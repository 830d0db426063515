use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scope_core::experiment::{
    compare_runs, parse_choice, run_experiment, ConfigError, DataSource, ExperimentConfig, ExperimentError, RunResult,
};

const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "scope", version, about = "Distributed variance-reduced optimization runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or one role of a multi-process run).
    Run(Box<RunArgs>),
    /// Run two configurations on the same problem and line up their metrics.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct CompareArgs {
    /// Config of run A.
    a: PathBuf,
    /// Config of run B.
    b: PathBuf,
    /// Side-by-side CSV path (stdout if unset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct Flags {
    /// scope, svrg or dissvrg
    #[arg(long)]
    algorithm: Option<String>,
    /// toy_table1, synthetic_lr(n,d,seed) or an svmlight file
    #[arg(long)]
    data: Option<String>,
    /// logistic or smoothed_hinge
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    p: Option<u32>,
    /// shuffled_uniform, contiguous or label_sorted
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    /// Local steps per round (M)
    #[arg(long)]
    bigm: Option<u32>,
    /// Outer rounds (T)
    #[arg(long)]
    bigt: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Per-worker mini-batch size (dissvrg)
    #[arg(long)]
    batch: Option<u32>,
    /// last_iterate or average_iterate
    #[arg(long)]
    combine: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// inproc or tcp
    #[arg(long)]
    transport: Option<String>,
    /// Master address for tcp (default from SCOPE_BIND_ADDR)
    #[arg(long)]
    bind: Option<String>,
    /// Metrics CSV path
    #[arg(long)]
    out: Option<PathBuf>,
    /// File with w* coordinates, or `none`
    #[arg(long)]
    wstar: Option<String>,
    /// master or worker
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    worker_id: Option<u32>,
}

impl Flags {
    fn to_config(&self) -> Result<ExperimentConfig, ConfigError> {
        macro_rules! choice {
            ($f:expr) => {
                $f.as_deref().map(parse_choice).transpose()
            };
        }
        Ok(ExperimentConfig {
            algorithm: choice!(self.algorithm)?,
            data: self.data.as_deref().map(str::parse::<DataSource>).transpose()?,
            normalize: None,
            loss: choice!(self.loss)?,
            p: self.p,
            partition: choice!(self.partition)?,
            eta: self.eta,
            c: self.c,
            bigm: self.bigm,
            bigt: self.bigt,
            lambda: self.lambda,
            batch: self.batch,
            combine: choice!(self.combine)?,
            seed: self.seed,
            transport: choice!(self.transport)?,
            bind: self.bind.clone(),
            out: self.out.clone(),
            wstar: self.wstar.clone(),
            role: choice!(self.role)?,
            worker_id: self.worker_id,
        })
    }
}

fn run(args: &RunArgs) -> Result<u8, ExperimentError> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.overridden_by(&args.flags.to_config()?);
    match run_experiment(&cfg)? {
        RunResult::Master(report) => {
            println!("{}", report.summary());
            Ok(report.exit_code() as u8)
        }
        RunResult::Worker { worker_id, rounds } => {
            println!("worker={worker_id} rounds={rounds}");
            Ok(0)
        }
    }
}

fn compare(args: &CompareArgs) -> Result<u8, ExperimentError> {
    let a = ExperimentConfig::load(&args.a)?;
    let b = ExperimentConfig::load(&args.b)?;
    let report = compare_runs(&a, &b)?;
    match &args.out {
        Some(path) => fs::write(path, &report.csv)
            .map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?,
        None => print!("{}", report.csv),
    }
    println!("a: {}", report.a.summary());
    println!("b: {}", report.b.summary());
    println!("msgs_ratio={}", report.message_ratio());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
