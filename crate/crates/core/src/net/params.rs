use std::collections::BTreeMap;

use rand::Rng;

use super::OffConfig;
use crate::error::{OffError, Result};
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

/// Which sub-network a parameter belongs to. Stage one trains `Backbone` and
/// `RgbHead`; stage two trains `Off` with the rest frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    RgbHead,
    Off,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next() {
            Some("backbone") => Some(ParamGroup::Backbone),
            Some("rgb_head") => Some(ParamGroup::RgbHead),
            Some("off") => Some(ParamGroup::Off),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform(-a, a), a = sqrt(gain / fan_in)
    Uniform { fan_in: usize, gain: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub group: ParamGroup,
    pub init: Init,
}

/// Variance gain of a ReLU layer: uniform(-a, a) with a = sqrt(6 / fan_in)
/// keeps the second moment of activations constant through depth.
pub const RELU_GAIN: f64 = 6.0;

fn push_conv(out: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    let group = ParamGroup::of(name).expect("layout names carry a group prefix");
    let fan_in = cin * k * k;
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: Shape::new(cout, cin, k, k),
        group,
        init: Init::Uniform { fan_in, gain: RELU_GAIN },
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: Shape::new(cout, 1, 1, 1),
        group,
        init: Init::Zero,
    });
}

/// Classifier heads start at zero so every initial logit is 0 and the loss is ln C.
fn push_head(out: &mut Vec<ParamSpec>, name: &str, classes: usize, d: usize) {
    let group = ParamGroup::of(name).expect("layout names carry a group prefix");
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: Shape::new(classes, d, 1, 1),
        group,
        init: Init::Zero,
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: Shape::new(classes, 1, 1, 1),
        group,
        init: Init::Zero,
    });
}

fn push_block(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, stride: usize) {
    push_conv(out, &format!("{name}.conv1"), cout, cin, 3);
    push_conv(out, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout || stride != 1 {
        push_conv(out, &format!("{name}.proj"), cout, cin, 1);
    }
}

/// Every learnable tensor of the network described by `config`.
pub fn param_layout(config: &OffConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut cin = config.input_channels;
    for (l, &c) in config.backbone_channels.iter().enumerate() {
        push_conv(&mut out, &format!("backbone.conv{l}"), c, cin, 3);
        cin = c;
    }
    push_head(&mut out, "rgb_head", config.classes, cin);

    let width = config.trunk_width();
    for l in 0..config.levels {
        let base = format!("off.level{l}");
        push_conv(
            &mut out,
            &format!("{base}.reduce"),
            config.reduced_channels,
            config.backbone_channels[l],
            1,
        );
        let mut cin = config.unit_input_channels(l);
        for b in 0..config.blocks_per_level {
            push_block(&mut out, &format!("{base}.block{b}"), cin, width, 1);
            cin = width;
        }
        push_head(&mut out, &format!("{base}.head"), config.classes, width);
        if l + 1 < config.levels {
            push_block(&mut out, &format!("off.down{l}"), width, width, 2);
        }
    }
    out
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Parameters of one group only.
    pub fn group(&self, group: ParamGroup) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| ParamGroup::of(k) == Some(group))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` over this store.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Registers every tensor on `tape` once. `trainable` decides which
    /// leaves require gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        BoundParams { vars }
    }
}

/// Samples the parameters of the requested groups. Layout order fixes the
/// order of draws, so equal seeds give equal stores.
pub fn init_params<R: Rng>(config: &OffConfig, groups: &[ParamGroup], rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in param_layout(config) {
        if !groups.contains(&spec.group) {
            continue;
        }
        let t = match spec.init {
            Init::Zero => Tensor::zeros(spec.shape),
            Init::Uniform { fan_in, gain } => {
                let a = (gain / fan_in as f64).sqrt();
                let data = (0..spec.shape.numel())
                    .map(|_| rng.gen_range(-a..a) as f32)
                    .collect();
                Tensor::from_vec(spec.shape, data).expect("layout shape")
            }
        };
        store.insert(spec.name, t);
    }
    store
}

/// Tape leaves for a store, by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| OffError::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Replaces one binding, e.g. with a leaf a gradient check perturbs.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvVars {
    fn resolve(p: &BoundParams, name: &str) -> Result<Self> {
        Ok(ConvVars {
            weight: p.get(&format!("{name}.weight"))?,
            bias: p.get(&format!("{name}.bias"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    /// 1×1 projection shortcut; `None` means identity.
    pub proj: Option<ConvVars>,
    pub stride: usize,
}

impl BlockVars {
    fn resolve(p: &BoundParams, name: &str, stride: usize) -> Result<Self> {
        let proj_name = format!("{name}.proj.weight");
        Ok(BlockVars {
            conv1: ConvVars::resolve(p, &format!("{name}.conv1"))?,
            conv2: ConvVars::resolve(p, &format!("{name}.conv2"))?,
            proj: if p.contains(&proj_name) {
                Some(ConvVars::resolve(p, &format!("{name}.proj"))?)
            } else {
                None
            },
            stride,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneVars {
    pub convs: Vec<ConvVars>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffLevelVars {
    pub reduce: ConvVars,
    pub blocks: Vec<BlockVars>,
    pub head: ConvVars,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffVars {
    pub levels: Vec<OffLevelVars>,
    /// Stride-2 blocks between consecutive levels.
    pub downs: Vec<BlockVars>,
}

/// Typed view of the bound parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetVars {
    pub backbone: BackboneVars,
    pub rgb_head: ConvVars,
    /// Absent for stores that only hold stage-one parameters.
    pub off: Option<OffVars>,
}

impl NetVars {
    pub fn resolve(p: &BoundParams, config: &OffConfig) -> Result<Self> {
        let backbone = BackboneVars {
            convs: (0..config.levels)
                .map(|l| ConvVars::resolve(p, &format!("backbone.conv{l}")))
                .collect::<Result<_>>()?,
        };
        let rgb_head = ConvVars::resolve(p, "rgb_head")?;
        let off = if p.contains("off.level0.reduce.weight") {
            let mut levels = Vec::with_capacity(config.levels);
            let mut downs = Vec::new();
            for l in 0..config.levels {
                let base = format!("off.level{l}");
                levels.push(OffLevelVars {
                    reduce: ConvVars::resolve(p, &format!("{base}.reduce"))?,
                    blocks: (0..config.blocks_per_level)
                        .map(|b| BlockVars::resolve(p, &format!("{base}.block{b}"), 1))
                        .collect::<Result<_>>()?,
                    head: ConvVars::resolve(p, &format!("{base}.head"))?,
                });
                if l + 1 < config.levels {
                    downs.push(BlockVars::resolve(p, &format!("off.down{l}"), 2)?);
                }
            }
            Some(OffVars { levels, downs })
        } else {
            None
        };
        Ok(NetVars {
            backbone,
            rgb_head,
            off,
        })
    }

    pub fn off(&self) -> Result<&OffVars> {
        self.off
            .as_ref()
            .ok_or_else(|| OffError::config("parameters hold no OFF sub-network"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_shapes_follow_config() {
        let config = OffConfig {
            levels: 2,
            reduced_channels: 3,
            blocks_per_level: 2,
            classes: 4,
            backbone_channels: vec![5, 6],
            ..OffConfig::default()
        };
        let layout = param_layout(&config);
        let find = |n: &str| layout.iter().find(|s| s.name == n).unwrap().shape;
        assert_eq!(find("backbone.conv1.weight"), Shape::new(6, 5, 3, 3));
        assert_eq!(find("off.level0.reduce.weight"), Shape::new(3, 5, 1, 1));
        // level 0: [Fx, Fy, Ft] = 9 channels projected to the trunk width 6
        assert_eq!(find("off.level0.block0.conv1.weight"), Shape::new(6, 9, 3, 3));
        assert_eq!(find("off.level0.block0.proj.weight"), Shape::new(6, 9, 1, 1));
        assert!(!layout.iter().any(|s| s.name == "off.level0.block1.proj.weight"));
        // level 1 appends the 6-channel trunk
        assert_eq!(find("off.level1.block0.conv1.weight"), Shape::new(6, 15, 3, 3));
        assert_eq!(find("off.down0.proj.weight"), Shape::new(6, 6, 1, 1));
        assert!(!layout.iter().any(|s| s.name.starts_with("off.down1")));
        assert_eq!(find("off.level1.head.weight"), Shape::new(4, 6, 1, 1));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let config = OffConfig::default();
        let groups = [ParamGroup::Backbone, ParamGroup::RgbHead, ParamGroup::Off];
        let a = init_params(&config, &groups, &mut ChaCha8Rng::seed_from_u64(3));
        let b = init_params(&config, &groups, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let w = a.get("backbone.conv1.weight").unwrap();
        let bound = (6.0f32 / (16.0 * 9.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("rgb_head.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resolve_reports_missing_names() {
        let config = OffConfig::default();
        let store = init_params(
            &config,
            &[ParamGroup::Backbone],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let err = NetVars::resolve(&bound, &config).unwrap_err();
        assert!(err.to_string().contains("rgb_head.weight"), "{err}");
    }
}
