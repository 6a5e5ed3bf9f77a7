//! Checkpoint directories: `manifest.txt` lists the network shape and every
//! parameter (`param NAME f32 N,C,H,W BYTE_OFFSET`); `params.bin` holds the
//! little-endian values back to back.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{OffError, Result};
use crate::net::{param_layout, OffConfig, ParamGroup, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const CKPT_MANIFEST: &str = "manifest.txt";
pub const CKPT_BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: OffConfig,
    pub params: ParamStore,
    pub stage: u8,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn has_off(&self) -> bool {
        self.params.iter().any(|(k, _)| ParamGroup::of(k) == Some(ParamGroup::Off))
    }

    /// Every parameter must belong to the layout with the right shape; the
    /// backbone and RGB head must be complete, the OFF group all or nothing.
    pub fn validate(&self) -> Result<()> {
        check_params(&self.config, &self.params, |name, reason| OffError::config(format!("`{name}`: {reason}")))
    }
}

fn check_params(
    config: &OffConfig,
    params: &ParamStore,
    err: impl Fn(&str, &str) -> OffError,
) -> Result<()> {
    config.validate()?;
    let layout = param_layout(config);
    for (name, t) in params.iter() {
        match layout.iter().find(|s| &s.name == name) {
            None => return Err(err(name, "not part of the network")),
            Some(s) if s.shape != t.shape() => {
                return Err(err(name, &format!("shape {} where {} is expected", t.shape(), s.shape)))
            }
            Some(_) => {}
        }
    }
    let has_off = params.iter().any(|(k, _)| ParamGroup::of(k) == Some(ParamGroup::Off));
    for spec in &layout {
        if (spec.group != ParamGroup::Off || has_off) && !params.contains(&spec.name) {
            return Err(err(&spec.name, "missing parameter"));
        }
    }
    Ok(())
}

fn config_lines(c: &OffConfig) -> Vec<(String, String)> {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    vec![
        ("levels".into(), c.levels.to_string()),
        ("reduced_channels".into(), c.reduced_channels.to_string()),
        ("blocks_per_level".into(), c.blocks_per_level.to_string()),
        ("classes".into(), c.classes.to_string()),
        ("ablate_off_layer".into(), c.ablate_off_layer.to_string()),
        ("input_channels".into(), c.input_channels.to_string()),
        ("backbone_channels".into(), list(&c.backbone_channels)),
        ("trunk_channels".into(), c.trunk_width().to_string()),
    ]
}

fn shape_str(s: Shape) -> String {
    format!("{},{},{},{}", s.n, s.c, s.h, s.w)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.validate()?;
    fs::create_dir_all(dir).map_err(OffError::io(format!("creating {}", dir.display())))?;
    let mut manifest = String::from("# off checkpoint\n");
    manifest.push_str(&format!("meta stage {}\n", ckpt.stage));
    manifest.push_str(&format!("meta iteration {}\n", ckpt.iteration));
    for (k, v) in config_lines(&ckpt.config) {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    let mut blob = Vec::with_capacity(ckpt.params.numel() * 4);
    for (name, t) in ckpt.params.iter() {
        manifest.push_str(&format!("param {name} f32 {} {}\n", shape_str(t.shape()), blob.len()));
        blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let mp = dir.join(CKPT_MANIFEST);
    fs::write(&mp, manifest).map_err(OffError::io(format!("writing {}", mp.display())))?;
    let bp = dir.join(CKPT_BLOB);
    fs::write(&bp, blob).map_err(OffError::io(format!("writing {}", bp.display())))
}

fn parse_shape(raw: &str) -> Option<Shape> {
    let d: Vec<usize> = raw.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    (d.len() == 4).then(|| Shape::new(d[0], d[1], d[2], d[3]))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(CKPT_MANIFEST);
    let text = fs::read_to_string(&mp).map_err(OffError::io(format!("reading {}", mp.display())))?;
    let bp = dir.join(CKPT_BLOB);
    let blob = fs::read(&bp).map_err(OffError::io(format!("reading {}", bp.display())))?;
    let bad = |entry: &str, reason: String| OffError::format(&mp, entry, reason);

    let mut config = OffConfig::default();
    let mut seen_keys = BTreeSet::new();
    let (mut stage, mut iteration) = (None, None);
    let mut entries: Vec<(String, Shape, usize)> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["meta", "stage", v] => stage = Some(v.parse::<u8>().map_err(|_| bad(line, "bad stage".into()))?),
            ["meta", "iteration", v] => {
                iteration = Some(v.parse::<usize>().map_err(|_| bad(line, "bad iteration".into()))?)
            }
            ["config", key, value] => {
                let num = || value.parse::<usize>().map_err(|_| bad(key, format!("bad value `{value}`")));
                match *key {
                    "levels" => config.levels = num()?,
                    "reduced_channels" => config.reduced_channels = num()?,
                    "blocks_per_level" => config.blocks_per_level = num()?,
                    "classes" => config.classes = num()?,
                    "input_channels" => config.input_channels = num()?,
                    "trunk_channels" => config.trunk_channels = Some(num()?),
                    "ablate_off_layer" => {
                        config.ablate_off_layer =
                            value.parse().map_err(|_| bad(key, format!("bad value `{value}`")))?
                    }
                    "backbone_channels" => {
                        config.backbone_channels = value
                            .split(',')
                            .map(|x| x.parse().ok())
                            .collect::<Option<_>>()
                            .ok_or_else(|| bad(key, format!("bad value `{value}`")))?
                    }
                    _ => return Err(bad(key, "unknown config key".into())),
                }
                seen_keys.insert(key.to_string());
            }
            ["param", name, dtype, shape, offset] => {
                if *dtype != "f32" {
                    return Err(bad(name, format!("unsupported dtype `{dtype}`")));
                }
                let shape = parse_shape(shape).ok_or_else(|| bad(name, format!("bad shape `{shape}`")))?;
                let offset: usize = offset.parse().map_err(|_| bad(name, format!("bad offset `{offset}`")))?;
                entries.push((name.to_string(), shape, offset));
            }
            _ => return Err(bad(line, "unrecognised line".into())),
        }
    }
    let stage = stage.ok_or_else(|| bad("meta stage", "missing".into()))?;
    let iteration = iteration.ok_or_else(|| bad("meta iteration", "missing".into()))?;
    for (k, _) in config_lines(&OffConfig::default()) {
        if !seen_keys.contains(&k) {
            return Err(bad(&k, "missing config key".into()));
        }
    }

    let mut params = ParamStore::new();
    let mut expected_end = 0;
    for (name, shape, offset) in entries {
        if params.contains(&name) {
            return Err(bad(&name, "duplicate parameter".into()));
        }
        let end = offset + shape.numel() * 4;
        if end > blob.len() {
            return Err(OffError::format(
                &bp,
                &name,
                format!("needs bytes {offset}..{end}, blob has {}", blob.len()),
            ));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?);
        expected_end = expected_end.max(end);
    }
    if expected_end != blob.len() {
        return Err(OffError::format(
            &bp,
            "params.bin",
            format!("{} trailing bytes", blob.len() - expected_end),
        ));
    }
    check_params(&config, &params, |name, reason| bad(name, reason.to_string()))?;
    Ok(Checkpoint {
        config,
        params,
        stage,
        iteration,
    })
}
