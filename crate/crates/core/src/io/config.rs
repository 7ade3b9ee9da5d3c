use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Environment variables `GATED_GAN_<KEY>` override file values.
pub const ENV_PREFIX: &str = "GATED_GAN_";

/// Keys accepted in a config file, as environment overrides, and by `--set`.
pub const KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "k_d",
    "k_g",
    "iterations",
    "image_size",
    "scale_size",
    "lambda_cls",
    "lambda_tv",
    "lambda_r",
    "seed",
    "style_count",
    "width_scale",
    "branch_depth",
    "mode",
    "recon_source",
    "log_interval",
    "checkpoint_interval",
    "log_wall_time",
    "style_dirs",
    "style_names",
    "content_dir",
    "out_dir",
];

/// Everything a `train` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub style_dirs: Vec<PathBuf>,
    pub content_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            style_dirs: Vec::new(),
            content_dir: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Apply one `TrainConfig` key. Returns false for keys it does not own.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "k_d" => cfg.k_d = parse(key, value)?,
        "k_g" => cfg.k_g = parse(key, value)?,
        "iterations" => cfg.iterations = parse(key, value)?,
        "image_size" => cfg.image_size = parse(key, value)?,
        "scale_size" => cfg.scale_size = if value == "auto" { None } else { Some(parse(key, value)?) },
        "lambda_cls" => cfg.weights.lambda_cls = parse(key, value)?,
        "lambda_tv" => cfg.weights.lambda_tv = parse(key, value)?,
        "lambda_r" => cfg.weights.lambda_r = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "style_count" => cfg.style_count = parse(key, value)?,
        "style_names" => cfg.style_names = list(value),
        "width_scale" => cfg.width_scale = parse(key, value)?,
        "branch_depth" => cfg.branch_depth = parse(key, value)?,
        "mode" => cfg.mode = value.parse()?,
        "recon_source" => cfg.recon_source = value.parse()?,
        "log_interval" => cfg.log_interval = parse(key, value)?,
        "checkpoint_interval" => cfg.checkpoint_interval = parse(key, value)?,
        "log_wall_time" => cfg.log_wall_time = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `TrainConfig` as ordered key/value pairs; [`train_config_from_pairs`]
/// inverts it exactly.
pub fn train_config_pairs(cfg: &TrainConfig) -> Vec<(String, String)> {
    let mut out = vec![
        ("learning_rate", cfg.learning_rate.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("k_d", cfg.k_d.to_string()),
        ("k_g", cfg.k_g.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("image_size", cfg.image_size.to_string()),
        ("scale_size", cfg.scale_size.map_or("auto".into(), |s| s.to_string())),
        ("lambda_cls", cfg.weights.lambda_cls.to_string()),
        ("lambda_tv", cfg.weights.lambda_tv.to_string()),
        ("lambda_r", cfg.weights.lambda_r.to_string()),
        ("seed", cfg.seed.to_string()),
        ("style_count", cfg.style_count.to_string()),
        ("style_names", cfg.style_names.join(",")),
        ("width_scale", cfg.width_scale.to_string()),
        ("branch_depth", cfg.branch_depth.to_string()),
        ("mode", cfg.mode.to_string()),
        ("recon_source", cfg.recon_source.to_string()),
        ("log_interval", cfg.log_interval.to_string()),
        ("checkpoint_interval", cfg.checkpoint_interval.to_string()),
        ("log_wall_time", cfg.log_wall_time.to_string()),
    ];
    out.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn train_config_from_pairs(pairs: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in pairs {
        if !set_train_key(&mut cfg, k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    Ok(cfg)
}

impl RunConfig {
    /// Apply one key; relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let value = value.trim();
        if set_train_key(&mut self.train, key, value)? {
            return Ok(());
        }
        let path = |v: &str| if Path::new(v).is_absolute() { PathBuf::from(v) } else { base.join(v) };
        match key {
            "style_dirs" => self.style_dirs = list(value).iter().map(|v| path(v)).collect(),
            "content_dir" => self.content_dir = if value.is_empty() { None } else { Some(path(value)) },
            "out_dir" => self.out_dir = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v, base).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    /// File, then `GATED_GAN_*` variables from `env`, then `overrides`.
    pub fn load(
        path: &Path,
        env: impl Fn(&str) -> Option<String>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::default();
        cfg.out_dir = base.join("run");
        cfg.apply_text(&text, base)?;
        let cwd = Path::new(".");
        for key in KEYS {
            if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
                cfg.set(key, &v, cwd)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v, cwd)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Derive the style count from the collections and validate.
    pub fn finish(&mut self) -> Result<()> {
        if !self.style_dirs.is_empty() {
            self.train.style_count = self.style_dirs.len();
        }
        self.train.validate()
    }

    /// Style by index or by configured name.
    pub fn style_index(&self, s: &str) -> Result<usize> {
        resolve_style(s, &self.train.style_names, self.train.style_count)
    }
}

/// Parse a style given as an index or one of `names`.
pub fn resolve_style(s: &str, names: &[String], styles: usize) -> Result<usize> {
    let idx = match s.parse::<usize>() {
        Ok(i) => i,
        Err(_) => names.iter().position(|n| n == s).ok_or_else(|| Error::Index(format!("no style named {s:?}")))?,
    };
    if idx >= styles {
        return Err(Error::Index(format!("style {idx} of {styles}")));
    }
    Ok(idx)
}
