//! Flat `key = value` run configuration. Lines starting with `#` are
//! comments. Training keys may carry a `stage1.` or `stage2.` prefix to apply
//! to one stage only. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{OffError, Result};
use crate::net::OffConfig;
use crate::train::TrainConfig;

const NET_KEYS: &[&str] = &[
    "levels",
    "reduced_channels",
    "blocks_per_level",
    "classes",
    "ablate_off_layer",
    "input_channels",
    "backbone_channels",
    "trunk_channels",
];

const TRAIN_KEYS: &[&str] = &[
    "preset",
    "base_lr",
    "lr_milestones",
    "momentum",
    "batch_size",
    "total_iters",
    "alpha",
    "beta",
    "seed",
    "level_weights",
];

const PATH_KEYS: &[&str] = &["train_data", "test_data"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub net: OffConfig,
    /// Training entries in file order: `(stage, key, value)`, stage 0 = both.
    train_entries: Vec<(u8, String, String)>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| OffError::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn apply_net(net: &mut OffConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "levels" => net.levels = parse(key, value)?,
        "reduced_channels" => net.reduced_channels = parse(key, value)?,
        "blocks_per_level" => net.blocks_per_level = parse(key, value)?,
        "classes" => net.classes = parse(key, value)?,
        "ablate_off_layer" => net.ablate_off_layer = parse(key, value)?,
        "input_channels" => net.input_channels = parse(key, value)?,
        "backbone_channels" => net.backbone_channels = parse_list(key, value)?,
        "trunk_channels" => {
            net.trunk_channels = if value == "auto" { None } else { Some(parse(key, value)?) }
        }
        _ => return Err(OffError::config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn apply_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "preset" => {
            let stage = t.stage;
            *t = match value {
                "desk" => TrainConfig::desk(stage),
                "full" => TrainConfig::full(stage),
                _ => return Err(OffError::config(format!("`preset`: unknown preset `{value}` (desk|full)"))),
            }
        }
        "base_lr" => t.base_lr = parse(key, value)?,
        "lr_milestones" => t.lr_milestones = parse_list(key, value)?,
        "momentum" => t.momentum = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "total_iters" => t.total_iters = parse(key, value)?,
        "alpha" => t.alpha = parse(key, value)?,
        "beta" => t.beta = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "level_weights" => t.level_weights = parse_list(key, value)?,
        _ => return Err(OffError::config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

impl RunConfig {
    /// Parses config text; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| OffError::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if PATH_KEYS.contains(&key) {
                let p = base.join(value);
                if key == "train_data" {
                    cfg.train_data = Some(p);
                } else {
                    cfg.test_data = Some(p);
                }
            } else if NET_KEYS.contains(&key) {
                apply_net(&mut cfg.net, key, value)?;
            } else {
                let (stage, bare) = match key.split_once('.') {
                    Some(("stage1", k)) => (1, k),
                    Some(("stage2", k)) => (2, k),
                    _ => (0, key),
                };
                if !TRAIN_KEYS.contains(&bare) {
                    return Err(OffError::config(format!("unknown key `{key}`")));
                }
                // surface parse errors at load time rather than at train time
                apply_train(&mut TrainConfig::desk(1), bare, value)
                    .map_err(|_| OffError::config(format!("`{key}`: cannot parse `{value}`")))?;
                cfg.train_entries.push((stage, bare.to_string(), value.to_string()));
            }
        }
        cfg.net.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(OffError::io(format!("reading {}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Desk preset overlaid with the shared keys, then the stage's own keys.
    pub fn train_config(&self, stage: u8) -> Result<TrainConfig> {
        let mut t = TrainConfig::desk(stage);
        for pass in [0, stage] {
            for (s, k, v) in &self.train_entries {
                if *s == pass {
                    apply_train(&mut t, k, v)?;
                }
            }
        }
        t.validate()?;
        Ok(t)
    }
}
