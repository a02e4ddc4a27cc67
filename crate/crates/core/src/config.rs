//! Flat `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{format_float, SynthConfig};
use crate::error::{Error, Result};
use crate::training::{Optimizer, TrainConfig};

/// Momentum coefficient used when `optimizer = momentum` and no `momentum` key is set.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Missing rate applied by `split` and `sweep`.
    pub missing_rate: f64,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            missing_rate: 0.5,
            train: TrainConfig::default(),
            dataset: None,
            checkpoint: None,
            log: None,
            report: None,
        }
    }
}

/// Every accepted key, canonical spelling first.
pub const KEYS: &[&str] = &[
    "num_tasks",
    "num_classes",
    "input_dim",
    "class_separation",
    "task_shift",
    "train_per_class",
    "test_per_class",
    "data_seed",
    "missing_rate",
    "model",
    "embed_dim",
    "num_layers",
    "neighbors",
    "beta",
    "alpha_task",
    "alpha_class",
    "alpha_pair",
    "learning_rate",
    "batch_size",
    "iterations",
    "seed",
    "optimizer",
    "momentum",
    "init_scale",
    "decay",
    "dataset",
    "checkpoint",
    "log",
    "report",
];

/// Short spellings accepted anywhere a key is.
fn canonical(key: &str) -> &str {
    match key {
        "T" => "num_tasks",
        "C" => "num_classes",
        "d_in" => "input_dim",
        "gamma" => "missing_rate",
        "d" => "embed_dim",
        "L" => "num_layers",
        "k" => "neighbors",
        "lr" | "lambda" => "learning_rate",
        other => other,
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key; `--vary` and the file parser both go through here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical(key);
        let (s, t) = (&mut self.synth, &mut self.train);
        match key {
            "num_tasks" => s.num_tasks = parse_num(key, value)?,
            "num_classes" => s.num_classes = parse_num(key, value)?,
            "input_dim" => s.input_dim = parse_num(key, value)?,
            "class_separation" => s.class_separation = parse_num(key, value)?,
            "task_shift" => s.task_shift = parse_num(key, value)?,
            "train_per_class" => s.train_per_class = parse_num(key, value)?,
            "test_per_class" => s.test_per_class = parse_num(key, value)?,
            "data_seed" => s.seed = parse_num(key, value)?,
            "missing_rate" => self.missing_rate = parse_num(key, value)?,
            "model" => t.model = value.parse()?,
            "embed_dim" => t.embed_dim = parse_num(key, value)?,
            "num_layers" => t.num_layers = parse_num(key, value)?,
            "neighbors" => {
                t.neighbors = if value == "full" { None } else { Some(parse_num(key, value)?) }
            }
            "beta" => t.beta = parse_num(key, value)?,
            "alpha_task" => t.alpha_task = parse_auto(key, value)?,
            "alpha_class" => t.alpha_class = parse_auto(key, value)?,
            "alpha_pair" => t.alpha_pair = parse_auto(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "iterations" => t.iterations = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "optimizer" => {
                t.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "momentum" => match t.optimizer {
                        Optimizer::Momentum(m) => Optimizer::Momentum(m),
                        Optimizer::Sgd => Optimizer::Momentum(DEFAULT_MOMENTUM),
                    },
                    other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
                }
            }
            "momentum" => {
                let m = parse_num(key, value)?;
                t.optimizer = Optimizer::Momentum(m);
            }
            "init_scale" => t.init_scale = parse_num(key, value)?,
            "decay" => t.decay = parse_num(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "log" => self.log = Some(PathBuf::from(value)),
            "report" => self.report = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Sets the data, assignment and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!("missing_rate {} outside [0, 1)", self.missing_rate)));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.synth;
        for (k, v) in [
            ("num_tasks", s.num_tasks),
            ("num_classes", s.num_classes),
            ("input_dim", s.input_dim),
            ("train_per_class", s.train_per_class),
            ("test_per_class", s.test_per_class),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "class_separation = {}", format_float(s.class_separation));
        let _ = writeln!(out, "task_shift = {}", format_float(s.task_shift));
        let _ = writeln!(out, "data_seed = {}", s.seed);
        let _ = writeln!(out, "missing_rate = {}", format_float(self.missing_rate));
        out.push_str(&train_to_text(&self.train));
        for (k, v) in [
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
            ("log", &self.log),
            ("report", &self.report),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        out
    }
}

/// The training keys alone, as stored in checkpoints.
pub fn train_to_text(t: &TrainConfig) -> String {
    let mut out = String::new();
    let auto = |a: Option<f64>| a.map_or_else(|| "auto".to_owned(), format_float);
    let _ = writeln!(out, "model = {}", t.model);
    let _ = writeln!(out, "embed_dim = {}", t.embed_dim);
    let _ = writeln!(out, "num_layers = {}", t.num_layers);
    let _ = writeln!(out, "neighbors = {}", t.neighbors.map_or_else(|| "full".to_owned(), |k| k.to_string()));
    let _ = writeln!(out, "beta = {}", format_float(t.beta));
    let _ = writeln!(out, "alpha_task = {}", auto(t.alpha_task));
    let _ = writeln!(out, "alpha_class = {}", auto(t.alpha_class));
    let _ = writeln!(out, "alpha_pair = {}", auto(t.alpha_pair));
    let _ = writeln!(out, "learning_rate = {}", format_float(t.learning_rate));
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "iterations = {}", t.iterations);
    let _ = writeln!(out, "seed = {}", t.seed);
    match t.optimizer {
        Optimizer::Sgd => out.push_str("optimizer = sgd\n"),
        Optimizer::Momentum(m) => {
            let _ = writeln!(out, "optimizer = momentum\nmomentum = {}", format_float(m));
        }
    }
    let _ = writeln!(out, "init_scale = {}", format_float(t.init_scale));
    let _ = writeln!(out, "decay = {}", format_float(t.decay));
    out
}

/// Splits a `key = value` line, ignoring `#` comments; `None` for blank lines.
pub(crate) fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), ()>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => Err(()),
    })
}

/// Applies the `key = value` lines of `text` over the defaults.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let Some(kv) = split_line(line) else { continue };
        let (key, value) = kv.map_err(|_| Error::parse(path, i + 1, "expected `key = value`"))?;
        if !seen.insert(canonical(key).to_owned()) {
            return Err(Error::parse(path, i + 1, format!("duplicate key `{key}`")));
        }
        config
            .set(key, value)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
