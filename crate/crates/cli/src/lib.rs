//! Command-line front end: dataset generation, training, evaluation,
//! gradient checks and A/B comparison.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! (including a failed gradient check), 4 I/O or data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfadet::config::RunConfig;
use rfadet::data::{write_dataset, SceneSpec, CLASS_NAMES};
use rfadet::gradsuite::{run_suite, DEFAULT_TOLERANCE};
use rfadet::run::{compare_run, eval_run, train_run, EvalOptions};
use rfadet::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "rfadet", version, about = "Miniature multi-scale detector with receptive-field attention convolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a deterministic synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long = "img-size", default_value_t = 64)]
        img_size: usize,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
        /// Replay the labels as detections (upper bound, map50 = 1).
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference gradient checks at f64.
    Gradcheck {
        /// Run a single module; all modules when omitted.
        #[arg(long)]
        module: Option<String>,
        /// Maximum relative error; the full-detector composite is allowed 10x.
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate two configs on the same data and report deltas.
    Compare {
        #[arg(long = "config-a")]
        config_a: PathBuf,
        #[arg(long = "config-b")]
        config_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        Error::EmptyEvaluation | Error::Checkpoint(_) | Error::Data { .. } | Error::Io { .. } => EXIT_IO,
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn signed(v: f64) -> String {
    format!("{v:+.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Runs one parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: Error| (exit_code(&e), e.to_string());
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            seed,
            img_size,
        } => {
            let spec = SceneSpec::with_seed(seed, img_size);
            let manifest = write_dataset(&out, &spec, train, val).map_err(fail)?;
            println!(
                "wrote {} train + {} val images to {} (checksum {:08x})",
                manifest.n_train,
                manifest.n_val,
                out.display(),
                manifest.checksum
            );
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config).map_err(fail)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = train_run(&cfg, &out, &mut log).map_err(fail)?;
            let first = outcome.steps.first().map(|s| s.loss).unwrap_or(f64::NAN);
            let tail = rfadet::trainer::tail_mean_loss(&outcome.steps, 10);
            println!(
                "steps {}  loss {first:.4} -> {tail:.4}  train_seconds {:.1}",
                outcome.steps.len(),
                outcome.train_seconds
            );
            if let Some(e) = outcome.final_eval() {
                println!("mAP(50) {:.4}  mAP(50-95) {:.4}", e.summary.map50, e.summary.map50_95);
            }
            println!("run directory {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            conf,
            nms,
            oracle,
        } => {
            let opts = EvalOptions {
                conf_thresh: conf,
                nms_iou: nms,
                oracle,
            };
            let (s, nc) = eval_run(&checkpoint, &data, &out, opts, &mut log).map_err(fail)?;
            println!("mAP(50): {:.4}  mAP(50-95): {:.4}", s.map50, s.map50_95);
            for (k, ap) in s.ap50_by_class(nc).into_iter().enumerate() {
                println!("  AP50 {:<12} {}", CLASS_NAMES.get(k).copied().unwrap_or("?"), opt(ap));
            }
        }
        Command::Gradcheck { module, tol, seed } => {
            let results = run_suite(module.as_deref(), seed, tol).map_err(fail)?;
            let mut failed = Vec::new();
            println!(
                "{:<20} {:>12} {:>10} {:>8} {:>8}  result",
                "module", "max_rel_err", "tolerance", "coords", "seconds"
            );
            for r in &results {
                println!(
                    "{:<20} {:>12.3e} {:>10.1e} {:>8} {:>8.2}  {}",
                    r.name,
                    r.report.max_rel_err,
                    r.tolerance,
                    r.report.coords_checked,
                    r.seconds,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err((EXIT_NUMERICAL, format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Compare { config_a, config_b, out } => {
            let a = RunConfig::load(&config_a).map_err(fail)?;
            let b = RunConfig::load(&config_b).map_err(fail)?;
            let c = compare_run(&a, &b, &out, &mut log).map_err(fail)?;
            println!("{:<16} {:>10} {:>10} {:>10}", "", "a", "b", "delta");
            println!(
                "{:<16} {:>10.4} {:>10.4} {:>10}",
                "mAP(50)",
                c.a.map50,
                c.b.map50,
                signed(c.b.map50 - c.a.map50)
            );
            println!(
                "{:<16} {:>10.4} {:>10.4} {:>10}",
                "mAP(50-95)",
                c.a.map50_95,
                c.b.map50_95,
                signed(c.b.map50_95 - c.a.map50_95)
            );
            for (k, (x, y)) in c.a.ap50.iter().zip(&c.b.ap50).enumerate() {
                let name = format!("AP50 {}", CLASS_NAMES.get(k).copied().unwrap_or("?"));
                let d = x.zip(*y).map(|(x, y)| signed(y - x)).unwrap_or_else(|| "-".into());
                println!("{name:<16} {:>10} {:>10} {d:>10}", opt(*x), opt(*y));
            }
            println!(
                "{:<16} {:>10} {:>10} {:>+10}",
                "params",
                c.a.params,
                c.b.params,
                c.b.params as i64 - c.a.params as i64
            );
            println!(
                "{:<16} {:>10.1} {:>10.1} {:>+10.1}",
                "train_seconds",
                c.a.train_seconds,
                c.b.train_seconds,
                c.b.train_seconds - c.a.train_seconds
            );
            println!("wrote {}", out.join(rfadet::artifacts::COMPARE_CSV).display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; clap usage errors exit with 2.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
