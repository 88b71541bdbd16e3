//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. The special key `profile`
//! (`full` or `desk`) picks the base values and is applied before every
//! other key regardless of its position. Unknown keys are errors.

use std::fs;
use std::path::Path;

use allmatch::invlearn::KScope;
use allmatch::trainer::{TrainConfig, NEVER};
use allmatch::{Error, Result};

/// Every recognised key with its default under the `full` profile.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "full"),
    ("train.epochs", "350"),
    ("train.batch", "24"),
    ("train.mu", "4"),
    ("train.lr", "0.00005"),
    ("train.momentum", "0.9"),
    ("train.seed", "0"),
    ("train.checkpoint_every", "50"),
    ("model.proj_dim", "64"),
    ("loss.alpha", "0.2"),
    ("loss.beta", "0.2"),
    ("loss.gamma", "1.0"),
    ("loss.omega_u", "1.0"),
    ("loss.tau_c", "0.95"),
    ("loss.tau_t", "0.1"),
    ("aug.rot_axis", "z"),
    ("aug.scale_min", "0.666667"),
    ("aug.scale_max", "1.5"),
    ("aug.translate_max", "0.2"),
    ("aug.jitter_sigma", "0.01"),
    ("aug.jitter_clip", "0.05"),
    ("aug.strong_kinds", "2"),
    ("aug.strength", "4"),
    ("aha.enabled", "true"),
    ("aha.kappa", "0.1"),
    ("aha.warmup", "50"),
    ("aha.apply_to_labeled", "false"),
    ("inv.enabled", "true"),
    ("inv.k_scope", "batch"),
    ("inv.low_conf_only", "false"),
    ("con.enabled", "true"),
    ("supcon.enabled", "true"),
    ("unsup.enabled", "true"),
];

/// Parsed `(key, value, line number)` entries in file order.
pub fn parse(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

pub fn profile(name: &str) -> Result<TrainConfig> {
    match name {
        "full" => Ok(TrainConfig::full()),
        "desk" => Ok(TrainConfig::desk()),
        _ => Err(Error::Config(format!(
            "profile must be full|desk, got `{name}`"
        ))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true|false, got `{v}`"
        ))),
    }
}

/// Applies one key to `cfg`.
pub fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "profile" => *cfg = profile(v)?,
        "train.epochs" => cfg.epochs = num(key, v)?,
        "train.batch" => cfg.batch = num(key, v)?,
        "train.mu" => cfg.mu = num(key, v)?,
        "train.lr" => cfg.lr = num(key, v)?,
        "train.momentum" => cfg.momentum = num(key, v)?,
        "train.seed" => cfg.seed = num(key, v)?,
        "train.checkpoint_every" => cfg.checkpoint_every = num(key, v)?,
        "model.proj_dim" => cfg.proj_dim = num(key, v)?,
        "loss.alpha" => cfg.loss.alpha = num(key, v)?,
        "loss.beta" => cfg.loss.beta = num(key, v)?,
        "loss.gamma" => cfg.loss.gamma = num(key, v)?,
        "loss.omega_u" => cfg.loss.omega_u = num(key, v)?,
        "loss.tau_c" => cfg.loss.tau_c = num(key, v)?,
        "loss.tau_t" => cfg.loss.tau_t = num(key, v)?,
        "aug.rot_axis" => cfg.aug.rot_axis = v.parse()?,
        "aug.scale_min" => cfg.aug.scale_min = num(key, v)?,
        "aug.scale_max" => cfg.aug.scale_max = num(key, v)?,
        "aug.translate_max" => cfg.aug.translate_max = num(key, v)?,
        "aug.jitter_sigma" => cfg.aug.jitter_sigma = num(key, v)?,
        "aug.jitter_clip" => cfg.aug.jitter_clip = num(key, v)?,
        "aug.strong_kinds" => cfg.aug.strong_kinds = num(key, v)?,
        "aug.strength" => cfg.aug.strength = num(key, v)?,
        "aha.enabled" => cfg.use_aha = flag(key, v)?,
        "aha.kappa" => cfg.aha_kappa = num(key, v)?,
        "aha.warmup" => cfg.aha_warmup = if v == "never" { NEVER } else { num(key, v)? },
        "aha.apply_to_labeled" => cfg.aha_apply_to_labeled = flag(key, v)?,
        "inv.enabled" => cfg.use_inverse = flag(key, v)?,
        "inv.k_scope" => cfg.inv_k_scope = v.parse::<KScope>()?,
        "inv.low_conf_only" => cfg.inv_low_conf_only = flag(key, v)?,
        "con.enabled" => cfg.use_contrastive = flag(key, v)?,
        "supcon.enabled" => cfg.use_supcon = flag(key, v)?,
        "unsup.enabled" => cfg.use_unsup = flag(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Builds a config from file text plus `key=value` overrides (applied after
/// the file, in order). A `profile` in either place resets the base before
/// the remaining keys are applied.
pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut entries = match text {
        Some(t) => parse(t)?,
        None => Vec::new(),
    };
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config(format!("override `{o}` is not key=value")));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        entries.push((k.to_string(), v.to_string(), 0));
    }
    let base = entries
        .iter()
        .rev()
        .find(|(k, _, _)| k == "profile")
        .map(|(_, v, _)| v.as_str())
        .unwrap_or("full");
    let mut cfg = profile(base)?;
    for (k, v, line) in entries.iter().filter(|(k, _, _)| k != "profile") {
        set(&mut cfg, k, v).map_err(|e| match (e, *line) {
            (Error::Config(m), l) if l > 0 => Error::Config(format!("line {l}: {m}")),
            (e, _) => e,
        })?;
    }
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}
