//! `key=value` run configuration files.
//!
//! Every [`TrainConfig`] field has a key; unknown keys are rejected. Blank
//! lines and lines starting with `#` are ignored. Resolution order is
//! built-in default, then file, then command-line overrides.
//!
//! | key | default |
//! |-----|---------|
//! | regime | alternate |
//! | epochs | 20 |
//! | batch_size | 40 |
//! | bptt_steps | 35 |
//! | emb_dim | 300 |
//! | hidden_dim | 650 |
//! | dropout | 0.3 |
//! | initial_lr | 20 |
//! | lr_halving | true |
//! | clip_norm | 0.25 |
//! | lambda_mse | 1 |
//! | mse_row_alignment | frequency-rank |
//! | seed | 1 |
//! | eval_batch_size | 10 |
//! | validation_fraction | 0.05 |

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const CONFIG_KEYS: [&str; 15] = [
    "regime",
    "epochs",
    "batch_size",
    "bptt_steps",
    "emb_dim",
    "hidden_dim",
    "dropout",
    "initial_lr",
    "lr_halving",
    "clip_norm",
    "lambda_mse",
    "mse_row_alignment",
    "seed",
    "eval_batch_size",
    "validation_fraction",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

pub fn set_field(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key {
        "regime" => config.regime = value.parse()?,
        "epochs" => config.epochs = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "bptt_steps" => config.bptt_steps = parse(key, value)?,
        "emb_dim" => config.emb_dim = parse(key, value)?,
        "hidden_dim" => config.hidden_dim = parse(key, value)?,
        "dropout" => config.dropout = parse(key, value)?,
        "initial_lr" => config.initial_lr = parse(key, value)?,
        "lr_halving" => config.lr_halving = parse_bool(key, value)?,
        "clip_norm" => config.clip_norm = parse(key, value)?,
        "lambda_mse" => config.lambda_mse = parse(key, value)?,
        "mse_row_alignment" => config.mse_row_alignment = value.parse()?,
        "seed" => config.seed = parse(key, value)?,
        "eval_batch_size" => config.eval_batch_size = parse(key, value)?,
        "validation_fraction" => config.validation_fraction = parse(key, value)?,
        other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parses `key=value` lines into pairs, rejecting unknown keys.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_owned(),
            line: i + 1,
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(err(format!("unknown config key {key:?}")));
        }
        // validate the value now so the error carries a line number
        set_field(&mut TrainConfig::default(), key, value).map_err(|e| err(e.to_string()))?;
        pairs.push((key.to_owned(), value.trim().to_owned()));
    }
    Ok(pairs)
}

pub fn load_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, &path.display().to_string())
}

/// Default, then `file` pairs, then `overrides`; validated.
pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (k, v) in file.iter().chain(overrides) {
        set_field(&mut config, k, v)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn to_config_text(c: &TrainConfig) -> String {
    format!(
        "regime={}\nepochs={}\nbatch_size={}\nbptt_steps={}\nemb_dim={}\nhidden_dim={}\ndropout={}\n\
         initial_lr={}\nlr_halving={}\nclip_norm={}\nlambda_mse={}\nmse_row_alignment={}\nseed={}\n\
         eval_batch_size={}\nvalidation_fraction={}\n",
        c.regime,
        c.epochs,
        c.batch_size,
        c.bptt_steps,
        c.emb_dim,
        c.hidden_dim,
        c.dropout,
        c.initial_lr,
        c.lr_halving,
        c.clip_norm,
        c.lambda_mse,
        c.mse_row_alignment,
        c.seed,
        c.eval_batch_size,
        c.validation_fraction
    )
}
