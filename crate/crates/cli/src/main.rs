use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrnm::gradcheck::GradCheckConfig;
use nrnm::harness::{self, Axis, RunConfig};
use nrnm::tasks::Split;
use nrnm::Error;

#[derive(Parser)]
#[command(name = "nrnm", version, about = "Non-local recurrent memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(RunArgs),
    /// Score a checkpoint on one data split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare recorded gradients with finite differences (always f64).
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Sequences in the checked batch.
        #[arg(long = "gc-batch", default_value_t = 2)]
        gc_batch: usize,
        #[arg(long = "fd-eps", default_value_t = 1e-5)]
        fd_eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check at most this many entries per parameter.
        #[arg(long = "max-entries")]
        max_entries: Option<usize>,
    },
    /// Sweep one memory hyperparameter over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values, e.g. 4,6,8,10,12.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Write attention weights and memory states as JSON lines.
    ExportTraces {
        #[command(flatten)]
        run: RunArgs,
        /// Parameters to load; a fresh model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sequences to trace.
        #[arg(long = "sequences", default_value_t = 1)]
        sequences: usize,
        /// Output file; stdout when omitted.
        #[arg(long = "trace-out")]
        trace_out: Option<PathBuf>,
    },
}

/// `--config` plus per-key overrides of the configuration file.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long = "G")]
    gap: Option<usize>,
    #[arg(long = "K")]
    classes: Option<usize>,
    #[arg(long = "D")]
    dim: Option<usize>,
    #[arg(long = "motif-len")]
    motif_len: Option<usize>,
    #[arg(long = "n-train")]
    n_train: Option<usize>,
    #[arg(long = "n-val")]
    n_val: Option<usize>,
    #[arg(long = "n-test")]
    n_test: Option<usize>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    #[arg(long)]
    path: Option<String>,
    #[arg(long = "val-path")]
    val_path: Option<String>,
    #[arg(long = "test-path")]
    test_path: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    /// One size, or one per layer separated by commas.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    win: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "inject-layer")]
    inject_layer: Option<usize>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long = "extra-layers")]
    extra_layers: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        let s = |v: &Option<usize>| v.map(|x| x.to_string());
        push("task", self.task.clone());
        push("T", s(&self.steps));
        push("G", s(&self.gap));
        push("K", s(&self.classes));
        push("D", s(&self.dim));
        push("motif_len", s(&self.motif_len));
        push("n_train", s(&self.n_train));
        push("n_val", s(&self.n_val));
        push("n_test", s(&self.n_test));
        push("data_seed", self.data_seed.map(|x| x.to_string()));
        push("path", self.path.clone());
        push("val_path", self.val_path.clone());
        push("test_path", self.test_path.clone());
        push("model", self.model.clone());
        push("depth", s(&self.depth));
        push("hidden", self.hidden.clone());
        push("dropout", self.dropout.map(|x| x.to_string()));
        push("precision", self.precision.clone());
        push("order", s(&self.order));
        push("k", s(&self.k));
        push("s", s(&self.s));
        push("win", s(&self.win));
        push("m", s(&self.m));
        push("heads", s(&self.heads));
        push("inject_layer", s(&self.inject_layer));
        push("scale", self.scale.clone());
        push("extra_layers", self.extra_layers.clone());
        push("optimizer", self.optimizer.clone());
        push("lr", self.lr.map(|x| x.to_string()));
        push("clip", self.clip.map(|x| x.to_string()));
        push("epochs", s(&self.epochs));
        push("batch", s(&self.batch));
        push("eval_every", s(&self.eval_every));
        push("seed", self.seed.map(|x| x.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        out
    }

    fn resolve(&self) -> nrnm::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn parse_split(s: &str) -> nrnm::Result<Split> {
    s.parse().map_err(|m: String| Error::Config {
        field: "split".into(),
        message: m,
    })
}

fn run(cli: Cli) -> nrnm::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let dir = out_dir(&cfg, "runs/latest");
            let summary = harness::run_train(&cfg, &dir)?;
            println!(
                "run {}: best epoch {}, test accuracy {}",
                dir.display(),
                summary.best_epoch,
                summary
                    .test_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Eval { run, checkpoint, split } => {
            let cfg = run.resolve()?;
            let ev = harness::run_eval(&cfg, &checkpoint, parse_split(&split)?)?;
            println!("{split}: loss {:.6} accuracy {:.4} ({} sequences)", ev.loss, ev.accuracy, ev.count);
        }
        Command::Gradcheck {
            run,
            gc_batch,
            fd_eps,
            tolerance,
            max_entries,
        } => {
            let cfg = run.resolve()?;
            let gc = GradCheckConfig {
                eps: fd_eps,
                tolerance,
                max_entries,
                ..GradCheckConfig::default()
            };
            let report = harness::run_gradcheck(&cfg, &gc, gc_batch)?;
            println!("{report}");
            if let Some(dir) = &cfg.out {
                fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join("gradcheck.json");
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Usage(e.to_string()))?;
                fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            if !report.passed() {
                return Err(Error::Usage(format!(
                    "gradient check failed for: {}",
                    report.failures().map(|p| p.name.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Command::Ablate { run, axis, values, seeds } => {
            let cfg = run.resolve()?;
            let dir = out_dir(&cfg, "runs/ablate");
            let rows = harness::run_ablate(&cfg, axis, &values, &seeds, &dir)?;
            for p in harness::summarize(&rows, &values) {
                println!(
                    "{}={}: median {:.4} [{:.4}, {:.4}] over {} runs ({} failed)",
                    axis.as_str(),
                    p.value,
                    p.median,
                    p.min,
                    p.max,
                    p.runs,
                    p.failures
                );
            }
        }
        Command::ExportTraces {
            run,
            checkpoint,
            split,
            sequences,
            trace_out,
        } => {
            let cfg = run.resolve()?;
            let split = parse_split(&split)?;
            let written = match &trace_out {
                Some(path) => {
                    let file = fs::File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    let mut w = BufWriter::new(file);
                    harness::export_traces(&cfg, checkpoint.as_deref(), split, sequences, &mut w)?
                }
                None => {
                    let stdout = io::stdout();
                    let mut w = stdout.lock();
                    let n = harness::export_traces(&cfg, checkpoint.as_deref(), split, sequences, &mut w)?;
                    w.flush().ok();
                    n
                }
            };
            log::info!("wrote {written} block records");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
