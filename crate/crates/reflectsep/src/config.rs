//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys, with defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `variant` | `b3` | `b1`, `b2`, `b3` or `mask` |
//! | `mode` | `supervised` | `supervised` or `weak` (weak needs `mask`) |
//! | `kinds` | `all` | comma-separated synthesis models |
//! | `steps` | `1000` | total optimization steps |
//! | `batch_size` | `16` | pairs per step |
//! | `learning_rate` | `0.0002` | optimizer step size |
//! | `beta1`, `beta2` | `0.5`, `0.999` | moment decay rates |
//! | `lambda1`, `lambda2` | `100`, `100` | loss weights |
//! | `seed` | `0` | master seed |
//! | `checkpoint_every` | `100` | checkpoint period, 0 for final only |
//! | `width_divisor` | `1` | channel-width reduction |
//! | `image_size` | `128` | training resolution |
//! | `flip` | `true` | random left-right flips |
//! | `t_dir`, `r_dir` | required | image directories of the two scene categories |
//! | `out_dir` | required | checkpoints and `train.log` |
//! | `resume` | none | checkpoint to continue from |
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use reflectsep_core::synthesis::KindSet;
use reflectsep_core::training::TrainConfig;

use crate::error::{Error, Result};

pub const KEYS: [&str; 19] = [
    "variant",
    "mode",
    "kinds",
    "steps",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "lambda1",
    "lambda2",
    "seed",
    "checkpoint_every",
    "width_divisor",
    "image_size",
    "flip",
    "t_dir",
    "r_dir",
    "out_dir",
    "resume",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub t_dir: PathBuf,
    pub r_dir: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let err = |line: usize, message: String| Error::Config {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut train = TrainConfig::default();
        let (mut t_dir, mut r_dir, mut out_dir, mut resume) = (None, None, None, None);
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(line, format!("key `{key}` given twice")));
            }
            let resolve = || Some(base.join(value));
            let parsed: std::result::Result<(), String> = (|| {
                match key {
                    "variant" => train.variant = parse(value)?,
                    "mode" => train.mode = parse(value)?,
                    "kinds" => {
                        train.kinds = KindSet::parse_list(value).map_err(|e| e.to_string())?
                    }
                    "steps" => train.steps = parse(value)?,
                    "batch_size" => train.batch_size = parse(value)?,
                    "learning_rate" => train.learning_rate = parse(value)?,
                    "beta1" => train.beta1 = parse(value)?,
                    "beta2" => train.beta2 = parse(value)?,
                    "lambda1" => train.weights.lambda1 = parse(value)?,
                    "lambda2" => train.weights.lambda2 = parse(value)?,
                    "seed" => train.seed = parse(value)?,
                    "checkpoint_every" => train.checkpoint_every = parse(value)?,
                    "width_divisor" => train.width_divisor = parse(value)?,
                    "image_size" => train.image_size = parse(value)?,
                    "flip" => train.flip = parse_bool(value)?,
                    "t_dir" => t_dir = resolve(),
                    "r_dir" => r_dir = resolve(),
                    "out_dir" => out_dir = resolve(),
                    "resume" => resume = resolve(),
                    _ => unreachable!("key list checked above"),
                }
                Ok(())
            })();
            parsed.map_err(|m| err(line, format!("{key}: {m}")))?;
        }
        let required = |v: Option<PathBuf>, key: &str| {
            v.ok_or_else(|| err(0, format!("missing required key `{key}`")))
        };
        let config = Self {
            t_dir: required(t_dir, "t_dir")?,
            r_dir: required(r_dir, "r_dir")?,
            out_dir: required(out_dir, "out_dir")?,
            resume,
            train,
        };
        config.train.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Every key with its current value; parses back to an equal config when
    /// the paths are absolute.
    pub fn render(&self) -> String {
        let c = &self.train;
        let mut out = String::new();
        let mut put =
            |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").expect("string write");
        put("variant", &c.variant);
        put("mode", &c.mode);
        put("kinds", &c.kinds);
        put("steps", &c.steps);
        put("batch_size", &c.batch_size);
        put("learning_rate", &c.learning_rate);
        put("beta1", &c.beta1);
        put("beta2", &c.beta2);
        put("lambda1", &c.weights.lambda1);
        put("lambda2", &c.weights.lambda2);
        put("seed", &c.seed);
        put("checkpoint_every", &c.checkpoint_every);
        put("width_divisor", &c.width_divisor);
        put("image_size", &c.image_size);
        put("flip", &c.flip);
        put("t_dir", &self.t_dir.display());
        put("r_dir", &self.r_dir.display());
        put("out_dir", &self.out_dir.display());
        if let Some(r) = &self.resume {
            put("resume", &r.display());
        }
        out
    }
}
