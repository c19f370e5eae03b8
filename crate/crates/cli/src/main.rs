mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use terntrain_core::data::Dataset;
use terntrain_core::model_io::{self, Checkpoint};
use terntrain_core::network::{ForwardMode, Model};
use terntrain_core::trainer::{self, append_metrics_csv, TrainState};
use terntrain_core::{gradcheck, inspect};

use crate::config::{load_source, ConfigError, RunConfig};

const BUILD_ID: &str = env!("TERNTRAIN_BUILD_ID");

#[derive(Parser)]
#[command(name = "terntrain", version, about = "Train ternary-weight networks with learned thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Float,
    Ternary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model and save a warm-start checkpoint
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `epochs` from the config
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Ternarize a pretrained checkpoint, learning weights and thresholds
    Quantize {
        #[arg(long)]
        config: PathBuf,
        /// Warm-start checkpoint (default: <output_dir>/pretrain.tnck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Initial threshold as a fraction of max|w| per layer
        #[arg(long)]
        init_frac: Option<f64>,
        /// Use the unit straight-through gradient instead of the 1/S one
        #[arg(long)]
        no_grad_correctness: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print top-1 accuracy of a checkpoint
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "ternary")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write the 2-bit packed model and a JSON size report
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Report path (default: stdout)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print per-layer statistics and weight histograms
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Gradcheck,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<terntrain_core::Error> for Failure {
    fn from(e: terntrain_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?.with_env_seed(&base_dir(path))?)
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), Failure> {
    let train = cfg.train.as_ref().ok_or_else(|| Failure::Usage("config has no training data".into()))?;
    let train = load_source(train, cfg.norm)?;
    let test = cfg.test.as_ref().map(|t| load_source(t, cfg.norm)).transpose()?;
    Ok((train, test))
}

fn write_run_info(cfg: &RunConfig, command: &str) -> CmdResult {
    fs::create_dir_all(&cfg.output_dir)?;
    let info = json!({
        "command": command,
        "seed": cfg.seed(),
        "build_id": BUILD_ID,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.entries,
    });
    let text = serde_json::to_string_pretty(&info).expect("json value");
    fs::write(cfg.output_dir.join(format!("{command}_run_info.json")), text + "\n")?;
    Ok(())
}

fn fresh_log(path: &Path) -> CmdResult {
    if path.exists() {
        fs::remove_file(path)?;
    }
    Ok(())
}

fn pretrain(config: &Path, epochs: Option<usize>) -> CmdResult {
    let cfg = load_config(config)?;
    let epochs = epochs.unwrap_or(cfg.epochs);
    let (train, test) = datasets(&cfg)?;
    let mut model = Model::build_from_config(&cfg.arch, cfg.seed()).map_err(|e| Failure::Usage(e.to_string()))?;
    write_run_info(&cfg, "pretrain")?;
    let result = trainer::pretrain(&mut model, &train, test.as_ref(), &cfg.train_cfg, epochs);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            let dump = cfg.output_dir.join("pretrain_diverged.tnck");
            model_io::save_checkpoint(&Checkpoint::new(model), &dump)?;
            return Err(Failure::Runtime(format!("{e}; state dumped to {}", dump.display())));
        }
    };
    let metrics = cfg.output_dir.join("pretrain_metrics.csv");
    fresh_log(&metrics)?;
    append_metrics_csv(&metrics, &log)?;
    let mut ckpt = Checkpoint::new(model).with_meta("epochs", epochs).with_meta("seed", cfg.seed());
    for (split, ds) in [("train", Some(&train)), ("test", test.as_ref())] {
        if let Some(ds) = ds {
            let acc = trainer::evaluate(&ckpt.model, ds, ForwardMode::Float)?;
            ckpt = ckpt.with_meta(format!("float_{split}_accuracy"), acc);
        }
    }
    let out = cfg.output_dir.join("pretrain.tnck");
    model_io::save_checkpoint(&ckpt, &out)?;
    for (k, v) in &ckpt.metadata {
        println!("{k}={v}");
    }
    println!("checkpoint={}", out.display());
    Ok(())
}

fn quantize(config: &Path, checkpoint: Option<PathBuf>, init_frac: Option<f64>, no_gc: bool, epochs: Option<usize>) -> CmdResult {
    let base = base_dir(config);
    let mut cfg = load_config(config)?;
    if let Some(f) = init_frac {
        cfg = cfg.with_override("init_frac", &f.to_string(), &base)?;
    }
    if no_gc {
        cfg = cfg.with_override("grad_correctness", "false", &base)?;
    }
    let epochs = epochs.unwrap_or(cfg.epochs);
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.output_dir.join("pretrain.tnck"));
    let warm = model_io::load_checkpoint(&ckpt_path)
        .map_err(|e| Failure::Runtime(format!("cannot load checkpoint {}: {e}", ckpt_path.display())))?;
    let (train, test) = datasets(&cfg)?;
    write_run_info(&cfg, "quantize")?;
    let mut state = TrainState::new(warm.model, cfg.train_cfg.clone())?;
    let log = match state.train(&train, test.as_ref(), epochs) {
        Ok(log) => log,
        Err(e) => {
            let dump = cfg.output_dir.join("quantize_diverged.tnck");
            model_io::save_checkpoint(&Checkpoint::new(state.into_model()), &dump)?;
            return Err(Failure::Runtime(format!("{e}; state dumped to {}", dump.display())));
        }
    };
    let metrics = cfg.output_dir.join("quantize_metrics.csv");
    fresh_log(&metrics)?;
    append_metrics_csv(&metrics, &log)?;
    let mut ckpt = Checkpoint::new(state.into_model())
        .with_meta("epochs", epochs)
        .with_meta("seed", cfg.seed())
        .with_meta("init_frac", cfg.train_cfg.init_fraction)
        .with_meta("grad_correctness", cfg.train_cfg.grad_correctness);
    for (split, ds) in [("train", Some(&train)), ("test", test.as_ref())] {
        if let Some(ds) = ds {
            let acc = trainer::evaluate(&ckpt.model, ds, ForwardMode::TERNARY)?;
            ckpt = ckpt.with_meta(format!("ternary_{split}_accuracy"), acc);
        }
    }
    let out = cfg.output_dir.join("ternary.tnck");
    model_io::save_checkpoint(&ckpt, &out)?;
    for (k, v) in &ckpt.metadata {
        println!("{k}={v}");
    }
    println!("checkpoint={}", out.display());
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, mode: Mode, split: Split) -> CmdResult {
    let cfg = load_config(config)?;
    let ckpt = model_io::load_checkpoint(checkpoint)?;
    let (train, test) = datasets(&cfg)?;
    let ds = match split {
        Split::Train => &train,
        Split::Test => test.as_ref().ok_or_else(|| Failure::Usage("config has no test data".into()))?,
    };
    let mode = match mode {
        Mode::Float => ForwardMode::Float,
        Mode::Ternary => {
            if ckpt.model.params().iter().any(|p| p.quant.is_some_and(|q| q.sigma() == 0.0)) {
                return Err(Failure::Runtime("checkpoint has uninitialized thresholds; run quantize first".into()));
            }
            ForwardMode::TERNARY
        }
    };
    println!("{}", trainer::evaluate(&ckpt.model, ds, mode)?);
    Ok(())
}

fn export(checkpoint: &Path, output: &Path, report: Option<&Path>) -> CmdResult {
    let ckpt = model_io::load_checkpoint(checkpoint)?;
    let report_value = model_io::export_packed(&ckpt.model, output)?;
    let text = serde_json::to_string_pretty(&report_value).expect("report serializes") + "\n";
    match report {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> CmdResult {
    let results = gradcheck::run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{} {} checked={} max_rel_err={:.3e} tol={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_err,
            r.tolerance
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}

fn run_inspect(checkpoint: &Path, as_json: bool) -> CmdResult {
    let ckpt = model_io::load_checkpoint(checkpoint)?;
    let layers = inspect::inspect_model(&ckpt.model)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&layers).expect("report serializes"));
    } else {
        print!("{}", inspect::render_text(&layers));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pretrain { config, epochs } => pretrain(&config, epochs),
        Command::Quantize { config, checkpoint, init_frac, no_grad_correctness, epochs } => {
            quantize(&config, checkpoint, init_frac, no_grad_correctness, epochs)
        }
        Command::Eval { config, checkpoint, mode, split } => eval(&config, &checkpoint, mode, split),
        Command::Export { checkpoint, output, report } => export(&checkpoint, &output, report.as_deref()),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::Inspect { checkpoint, json } => run_inspect(&checkpoint, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Gradcheck) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
    }
}
