//! Sectioned `key = value` configuration files.
//!
//! ```text
//! seed = 3
//! classifier = prompt
//!
//! [stream]
//! ways = 5
//!
//! [replay]
//! mode = gaussian
//! ```
//!
//! Every key has a default, so an empty file is a complete configuration.
//! `#` starts a comment. Keys may also be written fully qualified
//! (`stream.ways`), which is the form taken by `--set` and `--axis`.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sessions::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write an SVG of validation accuracy per session.
    pub plot: bool,
    /// Also write encoder, head and distribution snapshots.
    pub snapshots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            plot: true,
            snapshots: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub output: OutputConfig,
}

/// Every accepted fully qualified key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "classifier",
    "encoder_preset",
    "stream.d_raw",
    "stream.d_tok",
    "stream.n_pretrain_classes",
    "stream.pretrain_per_class",
    "stream.n_base_classes",
    "stream.n_sessions",
    "stream.ways",
    "stream.shots",
    "stream.base_shots",
    "stream.test_per_class",
    "stream.noise_scale",
    "objective.kind",
    "objective.temperature",
    "objective.hopfield_beta",
    "pretrain.steps",
    "pretrain.batch_size",
    "pretrain.learning_rate",
    "session.base_steps",
    "session.steps",
    "session.learning_rate",
    "session.batch_size",
    "session.tau_cls",
    "session.prompt_length",
    "replay.mode",
    "replay.pseudo_per_class",
    "replay.synth_ratio",
    "replay.vae_latent_dim",
    "replay.vae_hidden_dim",
    "replay.vae_lambda_r",
    "replay.vae_steps",
    "replay.vae_learning_rate",
    "output.dir",
    "output.plot",
    "output.snapshots",
];

const SECTIONS: [&str; 6] = [
    "stream",
    "objective",
    "pretrain",
    "session",
    "replay",
    "output",
];

/// Short names accepted by `--axis`.
pub fn resolve_alias(key: &str) -> &str {
    match key {
        "objective" => "objective.kind",
        "replay" => "replay.mode",
        "encoder" | "preset" | "backbone" => "encoder_preset",
        other => other,
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

impl CliConfig {
    /// Sets one fully qualified key. The error string is a bare message; the
    /// callers attach line or flag context.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let r = &mut self.run;
        let v = value.trim();
        match key {
            "seed" => {
                let seed = parse_value(key, v)?;
                *r = r.clone().with_seed(seed);
            }
            "classifier" => r.classifier = parse_value(key, v)?,
            "encoder_preset" => r.encoder_preset = parse_value(key, v)?,
            "stream.d_raw" => r.stream.d_raw = parse_value(key, v)?,
            "stream.d_tok" => r.stream.d_tok = parse_value(key, v)?,
            "stream.n_pretrain_classes" => r.stream.n_pretrain_classes = parse_value(key, v)?,
            "stream.pretrain_per_class" => r.stream.pretrain_per_class = parse_value(key, v)?,
            "stream.n_base_classes" => r.stream.n_base_classes = parse_value(key, v)?,
            "stream.n_sessions" => r.stream.n_sessions = parse_value(key, v)?,
            "stream.ways" => r.stream.ways = parse_value(key, v)?,
            "stream.shots" => r.stream.shots = parse_value(key, v)?,
            "stream.base_shots" => r.stream.base_shots = parse_value(key, v)?,
            "stream.test_per_class" => r.stream.test_per_class = parse_value(key, v)?,
            "stream.noise_scale" => r.stream.noise_scale = parse_value(key, v)?,
            "objective.kind" => r.objective.kind = parse_value(key, v)?,
            "objective.temperature" => r.objective.temperature = parse_value(key, v)?,
            "objective.hopfield_beta" => r.objective.hopfield_beta = parse_value(key, v)?,
            "pretrain.steps" => r.pretrain.steps = parse_value(key, v)?,
            "pretrain.batch_size" => r.pretrain.batch_size = parse_value(key, v)?,
            "pretrain.learning_rate" => r.pretrain.learning_rate = parse_value(key, v)?,
            "session.base_steps" => r.session.base_steps = parse_value(key, v)?,
            "session.steps" => r.session.steps = parse_value(key, v)?,
            "session.learning_rate" => r.session.learning_rate = Some(parse_value(key, v)?),
            "session.batch_size" => r.session.batch_size = parse_value(key, v)?,
            "session.tau_cls" => r.session.tau_cls = parse_value(key, v)?,
            "session.prompt_length" => r.session.prompt_length = parse_value(key, v)?,
            "replay.mode" => r.replay.mode = parse_value(key, v)?,
            "replay.pseudo_per_class" => r.replay.pseudo_per_class = Some(parse_value(key, v)?),
            "replay.synth_ratio" => r.replay.synth_ratio = parse_value(key, v)?,
            "replay.vae_latent_dim" => r.replay.vae.latent_dim = parse_value(key, v)?,
            "replay.vae_hidden_dim" => r.replay.vae.hidden_dim = parse_value(key, v)?,
            "replay.vae_lambda_r" => r.replay.vae.lambda_r = parse_value(key, v)?,
            "replay.vae_steps" => r.replay.vae.steps = parse_value(key, v)?,
            "replay.vae_learning_rate" => r.replay.vae.learning_rate = parse_value(key, v)?,
            "output.dir" => {
                if v.is_empty() {
                    return Err("output.dir must not be empty".into());
                }
                self.output.dir = PathBuf::from(v);
            }
            "output.plot" => self.output.plot = parse_bool(v)?,
            "output.snapshots" => self.output.snapshots = parse_bool(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies a `--set KEY=VALUE` style override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override `{assignment}` is not of the form KEY=VALUE"
            ))
        })?;
        let key = resolve_alias(key.trim());
        self.set(key, value)
            .map_err(|message| Error::Config(format!("--set {key}: {message}")))
    }
}

/// Parses a configuration document on top of the defaults.
pub fn parse_config(text: &str) -> Result<CliConfig> {
    let mut cfg = CliConfig::default();
    let mut section: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    key: line.to_string(),
                    message: "unterminated section header".into(),
                })?;
            if !SECTIONS.contains(&name) {
                return Err(Error::Parse {
                    line: line_no,
                    key: name.to_string(),
                    message: format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                });
            }
            section = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            key: line.to_string(),
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let full = match section {
            Some(s) if !key.contains('.') => format!("{s}.{key}"),
            _ => key.to_string(),
        };
        cfg.set(&full, value).map_err(|message| Error::Parse {
            line: line_no,
            key: key.to_string(),
            message,
        })?;
    }
    Ok(cfg)
}
