//! Command-line front end: pretrain, decompose, run, inspect banks, report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imse::bank::DomainBank;
use imse::harness::{
    accuracy, execute, make_source_task, pretrain, read_records, write_report, CorruptionKind, ExperimentConfig,
    Method, Precision, Scenario,
};
use imse::model::{load_checkpoint, save_checkpoint, VisionTransformer};
use imse::spectral::MaskStrategy;
use imse::tensor::Real;
use imse::{Error, Result};

#[derive(Parser)]
#[command(name = "imse", version, about = "Spectral-expert test-time adaptation at desk scale")]
struct Cli {
    /// TOML experiment config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Float precision; overrides the config file and the environment.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense model on the synthetic source task.
    Pretrain(PretrainArgs),
    /// Factorize a dense checkpoint into spectral layers.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream corrupted test data through one method.
    Run(Box<RunArgs>),
    /// Inspect a persisted domain bank.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Rebuild summaries from a metrics file.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Decomposed checkpoint; a dense one is decomposed on load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated corruption kinds in stream order.
    #[arg(long, value_delimiter = ',')]
    stream: Option<Vec<CorruptionKind>>,
    #[arg(long)]
    severity: Option<u8>,
    /// Batches per segment.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dirichlet_alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_dm: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sam_rho: Option<f64>,
    #[arg(long)]
    mask_strategy: Option<MaskStrategy>,
    #[arg(long)]
    mask_r: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, summaries and the bank.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BankCommand {
    /// List entries with their labels and sizes.
    Inspect { file: PathBuf },
    /// Pairwise descriptor distances as CSV.
    DistanceMatrix { file: PathBuf },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_env()?;
    set(&mut cfg.run.precision, cli.precision);
    Ok(cfg)
}

fn apply_run_flags(cfg: &mut ExperimentConfig, a: &RunArgs) {
    if a.checkpoint.is_some() {
        cfg.run.checkpoint.clone_from(&a.checkpoint);
    }
    if a.out.is_some() {
        cfg.run.out.clone_from(&a.out);
    }
    set(&mut cfg.stream.scenario, a.scenario);
    set(&mut cfg.run.method, a.method);
    set(&mut cfg.stream.kinds, a.stream.clone());
    set(&mut cfg.stream.severity, a.severity);
    if a.batches.is_some() {
        cfg.stream.batches = a.batches;
    }
    set(&mut cfg.stream.batch_size, a.batch_size);
    set(&mut cfg.stream.dirichlet_alpha, a.dirichlet_alpha);
    set(&mut cfg.bank.tau, a.tau);
    set(&mut cfg.adapt.lambda_dm, a.lambda_dm);
    set(&mut cfg.adapt.learning_rate, a.lr);
    set(&mut cfg.adapt.sam_rho, a.sam_rho);
    set(&mut cfg.adapt.mask_strategy, a.mask_strategy);
    set(&mut cfg.adapt.mask_r, a.mask_r);
    set(&mut cfg.run.seed, a.seed);
}

fn cmd_pretrain<T: Real>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, test) = make_source_task(cfg.run.data_seed);
    let (model, report) = pretrain::<T>(&cfg.model, &train, &cfg.pretrain)?;
    for (i, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.4}", i + 1);
    }
    println!("clean accuracy {:.4}", accuracy(&model, &test, 200)?);
    save_checkpoint(&model, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_decompose<T: Real>(cfg: &ExperimentConfig, input: &Path, out: &Path) -> Result<()> {
    let dense: VisionTransformer<T> = load_checkpoint(input)?;
    let spectral = dense.decompose()?;
    let (_, test) = make_source_task(cfg.run.data_seed);
    println!("dense clean accuracy       {:.4}", accuracy(&dense, &test, 200)?);
    println!("decomposed clean accuracy  {:.4}", accuracy(&spectral, &test, 200)?);
    print_parameter_counts(&spectral);
    save_checkpoint(&spectral, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn print_parameter_counts<T: Real>(model: &VisionTransformer<T>) {
    let trainable = model.trainable_count();
    let dense = model.dense_parameter_count();
    println!(
        "trainable sigma entries {trainable} of {dense} dense parameters ({:.3}%); stored scalars {}",
        100.0 * trainable as f64 / dense as f64,
        model.parameter_count()
    );
}

fn cmd_run<T: Real>(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg
        .run
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("run needs --checkpoint".into()))?;
    let mut model: VisionTransformer<T> = load_checkpoint(path)?;
    if !model.is_decomposed() {
        log::info!("decomposing dense checkpoint {}", path.display());
        model = model.decompose()?;
    }
    let (train, test) = make_source_task(cfg.run.data_seed);
    let output = execute(cfg, &model, &train, &test)?;
    let out = cfg.run.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-{}-{}", cfg.stream.scenario, cfg.run.method, cfg.run.seed))
    });
    let summaries = write_report(&output.records, &out)?;
    save_checkpoint(&output.model, out.join("adapted.ckpt"))?;
    if let Some(bank) = &output.bank {
        bank.persist(out.join("bank.bin"))?;
    }
    print!("{}", imse::harness::summary_text(&summaries));
    println!("trainable sigma entries {}", output.trainable);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bank(command: &BankCommand) -> Result<()> {
    match command {
        BankCommand::Inspect { file } => {
            let bank = DomainBank::restore(file)?;
            println!("entries {}  alpha {}  tau {}  steps {}", bank.len(), bank.alpha(), bank.tau(), bank.steps());
            for (i, e) in bank.entries().iter().enumerate() {
                println!(
                    "{i:>3}  {:<24} channels {:>4}  code scalars {:>6}  bytes {}",
                    e.label,
                    e.descriptor.channels(),
                    e.code.scalar_count(),
                    DomainBank::entry_encoded_len(e)
                );
            }
        }
        BankCommand::DistanceMatrix { file } => print!("{}", DomainBank::restore(file)?.distance_matrix_csv()?),
    }
    Ok(())
}

fn cmd_report(metrics: &Path, out: Option<&Path>) -> Result<()> {
    let records = read_records(metrics)?;
    let dir = out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")));
    let summaries = write_report(&records, dir)?;
    print!("{}", imse::harness::summary_text(&summaries));
    Ok(())
}

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn main_inner(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Pretrain(a) => {
            set(&mut cfg.pretrain.epochs, a.epochs);
            set(&mut cfg.pretrain.learning_rate, a.lr);
            set(&mut cfg.pretrain.seed, a.seed);
            cfg.validate()?;
            dispatch!(cfg.run.precision, cmd_pretrain(&cfg, &a.out))
        }
        Command::Decompose { checkpoint, out } => dispatch!(cfg.run.precision, cmd_decompose(&cfg, checkpoint, out)),
        Command::Run(a) => {
            apply_run_flags(&mut cfg, a);
            cfg.validate()?;
            dispatch!(cfg.run.precision, cmd_run(&cfg))
        }
        Command::Bank { command } => cmd_bank(command),
        Command::Report { metrics, out } => cmd_report(metrics, out.as_deref()),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
