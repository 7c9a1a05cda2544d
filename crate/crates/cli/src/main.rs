use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgcma::checkpoint::{load_checkpoint, save_checkpoint};
use mgcma::data::{generate_synthetic, DatasetManifest, SyntheticConfig};
use mgcma::harness::{
    ablation_csv, confusion_csv, cross_validate, evaluate, export_embeddings, log_to_jsonl, metrics_csv,
    run_ablations, train, Tap, Variant,
};
use mgcma::pipeline::gradient_check_suite;
use mgcma::{Error, Result};

mod run_config;

use run_config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mgcma", version, about = "Multi-granularity speech/text alignment for emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train on a dataset and write a checkpoint and training log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cross-validate ablation and stage-order variants.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Dump utterance vectors as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    len_speech: usize,
    #[arg(long, default_value_t = 6)]
    len_text: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Scale of the per-session feature offset.
    #[arg(long, default_value_t = 0.0)]
    session_shift: f64,
}

/// Config file and overrides shared by training commands.
#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from the large-encoder hyperparameters instead of the desk ones.
    #[arg(long = "paper-scale")]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also run leave-one-session-out cross-validation.
    #[arg(long)]
    cross_validate: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "S0,S1,S2,S3,S4,S5,S6,S7,S8,S9")]
    variants: Vec<Variant>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "pooled")]
    tap: Tap,
    #[arg(long)]
    out: PathBuf,
}

/// Failures reported with exit code 2 rather than 1.
fn is_usage(err: &Error) -> bool {
    matches!(err, Error::InvalidConfig(_) | Error::UnknownVariant(_) | Error::Json(_))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if is_usage(&e) {
            Self::Usage(e.to_string())
        } else {
            Self::Runtime(e.to_string())
        }
    }
}

fn run(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate_cmd(a)?,
        Command::GradCheck(a) => grad_check_cmd(a)?,
        Command::ExportEmbeddings(a) => export_cmd(a)?,
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_pairs: a.pairs,
        n_classes: a.classes,
        dim: a.dim,
        len_speech: a.len_speech,
        len_text: a.len_text,
        separation: a.separation,
        seed: a.seed,
        session_shift: a.session_shift,
    };
    cfg.validate()?;
    let manifest = generate_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} pairs (dim {}) to {}",
        manifest.len(),
        manifest.dim,
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &ConfigArgs) -> std::result::Result<RunConfig, CliError> {
    let base = if a.full_scale {
        RunConfig::full_scale()
    } else {
        RunConfig::default()
    };
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(base, path).map_err(|e| match e {
            Error::Io(io) => CliError::Runtime(format!("{}: {io}", path.display())),
            other => CliError::Usage(format!("{}: {other}", path.display())),
        })?,
        None => base,
    };
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.model_dim {
        cfg.model_dim = v;
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> std::result::Result<PathBuf, CliError> {
    cfg.data
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> std::result::Result<(), CliError> {
    let mut run_cfg = resolve_config(&a.config)?;
    if let Some(o) = &a.out {
        run_cfg.out = Some(o.clone());
    }
    let cfg = run_cfg.train_config()?;
    let manifest = DatasetManifest::load(&data_dir(&run_cfg)?)?;
    let out = run_cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out`".into()))?;
    fs::create_dir_all(&out).map_err(Error::from)?;
    write_file(&out.join("config.json"), &serde_json::to_string_pretty(&run_cfg).map_err(Error::from)?)?;

    let outcome = train(&manifest, &cfg)?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    write_file(&out.join("train_log.jsonl"), &log_to_jsonl(&outcome.log)?)?;
    if let Some(last) = outcome.log.last() {
        println!("{}", serde_json::to_string(last).map_err(Error::from)?);
    }

    if a.cross_validate {
        let report = cross_validate(&manifest, &cfg)?;
        let mut rows = vec![("pooled".to_string(), &report.pooled)];
        for f in &report.folds {
            rows.push((format!("session{}", f.test_session), &f.metrics));
        }
        let table = metrics_csv(&rows);
        write_file(&out.join("cv_metrics.csv"), &table)?;
        write_file(&out.join("cv_confusion.csv"), &confusion_csv(&report.pooled))?;
        write_file(&out.join("cv_report.json"), &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
        print!("{table}");
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint::<f64>(&a.model)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let report = evaluate(&model, &manifest)?;
    print!("{}", metrics_csv(&[("all".to_string(), &report)]));
    print!("{}", confusion_csv(&report));
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> std::result::Result<(), CliError> {
    let run_cfg = resolve_config(&a.config)?;
    let cfg = run_cfg.train_config()?;
    let manifest = DatasetManifest::load(&data_dir(&run_cfg)?)?;
    let rows = run_ablations(&manifest, &cfg, &a.variants)?;
    let table = ablation_csv(&rows);
    if let Some(path) = &a.out {
        write_file(path, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> std::result::Result<(), CliError> {
    let reports = gradient_check_suite(a.seed, a.step)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        let ok = r.max_rel_error < a.tolerance;
        let worst = r.worst.as_ref().map(|(p, i)| format!("{p}[{i}]")).unwrap_or_default();
        println!(
            "{name}\t{}\tmax_rel_error={:.3e}\tchecked={}\tworst={worst}",
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked
        );
        if !ok {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check above {} for {}", a.tolerance, failed.join(", "))))
    }
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint::<f64>(&a.model)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let csv = export_embeddings(&model, &manifest, a.tap)?;
    write_file(&a.out, &csv)?;
    println!("wrote {} rows to {}", 2 * manifest.len(), a.out.display());
    Ok(())
}
