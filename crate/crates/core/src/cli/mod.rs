//! The `fscil` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datagen::{export_stream, generate_stream};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::gradsuite::{op_names, run_suite, SuiteModule, SUITE_TOLERANCE};
use crate::plot::{metric_points, render_svg};
use crate::replay::distributions_to_snapshot;
use crate::sessions::{
    compare_runs, render_run, run_fscil_detailed, sessions_from_csv, ComparisonTable, RunMetrics,
    SessionMetrics, Variant,
};
use crate::snapshot::Snapshot;

pub use config::{parse_config, CliConfig, OutputConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fscil",
    version,
    about = "Few-shot class-incremental learning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Sectioned key = value configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed (both run and stream).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra KEY=VALUE overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain, run every session and write metrics.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Reuse pretrained encoders from a snapshot instead of pretraining.
        #[arg(long, value_name = "PATH")]
        encoders: Option<PathBuf>,
    },
    /// Run variants along one config axis and write a comparison table.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// KEY=V1,V2[,...], e.g. objective=infonce,cloob.
        #[arg(long, value_name = "KEY=V1,V2")]
        axis: String,
    },
    /// Finite-difference checks of the analytic gradients.
    Gradcheck {
        /// all, encoders, objectives, replay or classifier.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scales one operation's analytic gradient to exercise the failure path.
        #[arg(long, hide = true, value_name = "OP")]
        corrupt: Option<String>,
    },
    /// Plot one metric per session from metrics files (JSON or CSV) as SVG.
    Plot {
        #[arg(required = true, value_name = "METRICS")]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "val_acc")]
        metric: String,
        #[arg(long, value_name = "PATH", default_value = "plot.svg")]
        out: PathBuf,
    },
    /// Export the synthetic stream as line-delimited text files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the CLI with the process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with_io(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with_io<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { config, encoders } => cmd_run(&config, encoders.as_deref(), out),
        Command::Compare { config, axis } => cmd_compare(&config, &axis, out),
        Command::Gradcheck {
            module,
            seed,
            corrupt,
        } => cmd_gradcheck(&module, seed, corrupt.as_deref(), out),
        Command::Plot {
            inputs,
            metric,
            out: path,
        } => cmd_plot(&inputs, &metric, &path, out),
        Command::GenData { config } => cmd_gen_data(&config, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load_config(args: &ConfigArgs) -> std::result::Result<CliConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => CliConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.run = cfg.run.clone().with_seed(seed);
    }
    if let Some(dir) = &args.out {
        cfg.output.dir = dir.clone();
    }
    cfg.run.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_metrics(dir: &Path, metrics: &RunMetrics) -> Result<()> {
    write_file(&dir.join("metrics.json"), &(metrics.to_json()? + "\n"))?;
    write_file(&dir.join("metrics.csv"), &metrics.to_csv()?)
}

fn cmd_run(args: &ConfigArgs, encoders: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(args)?;
    let supplied = match encoders {
        Some(path) => Some(EncoderPair::from_snapshot(&Snapshot::load(path)?)?),
        None => None,
    };
    let outcome = run_fscil_detailed(&cfg.run, supplied)?;
    let dir = &cfg.output.dir;
    write_metrics(dir, &outcome.metrics)?;
    if cfg.output.plot {
        let pts = metric_points(&outcome.metrics.per_session, "val_acc")?;
        write_file(
            &dir.join("val_acc.svg"),
            &render_svg(&[(cfg.run.label(), pts)], "val_acc")?,
        )?;
    }
    if cfg.output.snapshots {
        write_file(
            &dir.join("encoders.txt"),
            &outcome.encoders.to_snapshot().to_text(),
        )?;
        write_file(&dir.join("head.txt"), &outcome.head.to_snapshot().to_text())?;
        write_file(
            &dir.join("distributions.txt"),
            &distributions_to_snapshot(&outcome.distributions).to_text(),
        )?;
    }
    let m = &outcome.metrics;
    let _ = writeln!(out, "{}", cfg.run.label());
    let _ = write!(out, "{}", render_run(m));
    let _ = writeln!(out, "average validation accuracy {:.4}", m.average_val_acc);
    let _ = writeln!(out, "forgetting {:.4}", m.forgetting);
    Ok(())
}

/// Splits `KEY=V1,V2[,...]` and resolves the key's short alias.
fn parse_axis(axis: &str) -> std::result::Result<(String, Vec<String>), Failure> {
    let (key, values) = axis
        .split_once('=')
        .ok_or_else(|| usage(format!("axis `{axis}` is not of the form KEY=V1,V2")))?;
    let key = config::resolve_alias(key.trim()).to_string();
    if !config::KEYS.contains(&key.as_str()) || key.starts_with("output.") {
        return Err(usage(format!("unknown axis `{key}`")));
    }
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.len() < 2 {
        return Err(usage(format!("axis `{key}` needs at least two values")));
    }
    Ok((key, values))
}

fn cmd_compare(args: &ConfigArgs, axis: &str, out: &mut dyn Write) -> CmdResult {
    let base = load_config(args)?;
    let (key, values) = parse_axis(axis)?;
    let mut variants = Vec::with_capacity(values.len());
    for v in &values {
        let mut cfg = base.clone();
        cfg.set(&key, v)
            .map_err(|m| usage(format!("--axis {key}: {m}")))?;
        // Seeds are shared across variants even when the axis is the seed itself.
        cfg.run.validate()?;
        let label = if key == "encoder_preset" {
            cfg.run.encoder_preset.to_string()
        } else {
            format!("{}+{v}", cfg.run.encoder_preset)
        };
        variants.push(Variant {
            label,
            config: cfg.run,
        });
    }
    let (table, runs) = compare_runs(&variants)?;
    let dir = &base.output.dir;
    write_file(&dir.join("comparison.csv"), &table.to_csv()?)?;
    for (v, m) in variants.iter().zip(&runs) {
        write_metrics(&dir.join(&v.label), m)?;
    }
    if base.output.plot {
        let series = variants
            .iter()
            .zip(&runs)
            .map(|(v, m)| Ok((v.label.clone(), metric_points(&m.per_session, "val_acc")?)))
            .collect::<Result<Vec<_>>>()?;
        write_file(
            &dir.join("comparison.svg"),
            &render_svg(&series, "val_acc")?,
        )?;
    }
    let _ = write!(out, "{}", table.render());
    write_averages(out, &table, &runs);
    Ok(())
}

fn write_averages(out: &mut dyn Write, table: &ComparisonTable, runs: &[RunMetrics]) {
    for (label, m) in table.variants.iter().zip(runs) {
        let _ = writeln!(
            out,
            "{label}: average validation accuracy {:.4}, forgetting {:.4}",
            m.average_val_acc, m.forgetting
        );
    }
}

fn cmd_gradcheck(module: &str, seed: u64, corrupt: Option<&str>, out: &mut dyn Write) -> CmdResult {
    let filter = match module {
        "all" => None,
        other => Some(other.parse::<SuiteModule>().map_err(usage)?),
    };
    if let Some(op) = corrupt {
        if !op_names().contains(&op) {
            return Err(usage(format!("unknown gradient check `{op}`")));
        }
    }
    let checks = run_suite(filter, seed, corrupt)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<44} {:>3} points  max rel error {:.3e}  {verdict}",
            c.op, c.points, c.max_rel_error
        );
        if !c.passed() {
            failed.push(c.op);
        }
    }
    if failed.is_empty() {
        let _ = writeln!(
            out,
            "all {} checks within {SUITE_TOLERANCE:e}",
            checks.len()
        );
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

/// Reads per-session rows from a metrics JSON document or CSV file.
fn load_sessions(path: &Path) -> Result<Vec<SessionMetrics>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let rows = if path.extension().is_some_and(|e| e == "json") {
        RunMetrics::from_json(&text)?.per_session
    } else {
        sessions_from_csv(&text)?
    };
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no sessions",
            path.display()
        )));
    }
    Ok(rows)
}

fn series_label(path: &Path) -> String {
    // metrics.json inside a variant directory is labelled by the directory.
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "metrics" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn cmd_plot(inputs: &[PathBuf], metric: &str, path: &Path, out: &mut dyn Write) -> CmdResult {
    let mut series = Vec::with_capacity(inputs.len());
    for input in inputs {
        let rows = load_sessions(input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
        series.push((series_label(input), metric_points(&rows, metric)?));
    }
    write_file(path, &render_svg(&series, metric)?)?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(args)?;
    let stream = generate_stream(&cfg.run.stream)?;
    for p in export_stream(&stream, &cfg.output.dir)? {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(())
}
