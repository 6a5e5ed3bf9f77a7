use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{accuracy, gather_segments, lr_at, sample_train_batch, Checkpoint, Sgd, TrainConfig};
use crate::data::Clip;
use crate::error::{OffError, Result};
use crate::net::{init_params, network_forward, NetVars, OffConfig, ParamGroup, ParamStore, Streams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss_total: f64,
    /// Per-OFF-level losses; empty in stage 1.
    pub level_losses: Vec<f64>,
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// CSV text with header `iter,stage,lr,loss_total,loss_l0..,train_acc`.
pub fn metrics_csv(rows: &[MetricsRow], levels: usize) -> String {
    let mut out = String::from("iter,stage,lr,loss_total");
    for l in 0..levels {
        let _ = write!(out, ",loss_l{l}");
    }
    out.push_str(",train_acc\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.iter, r.stage, r.lr, r.loss_total);
        for l in 0..levels {
            match r.level_losses.get(l) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{}", r.train_acc);
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], levels: usize) -> Result<()> {
    std::fs::write(path, metrics_csv(rows, levels)).map_err(OffError::io(format!("writing {}", path.display())))
}

/// Labels must fit the class count and frames the network input.
pub fn check_dataset(config: &OffConfig, clips: &[Clip]) -> Result<()> {
    if clips.is_empty() {
        return Err(OffError::config("dataset holds no clips"));
    }
    let m = config.spatial_multiple();
    for (id, c) in clips.iter().enumerate() {
        if c.label >= config.classes {
            return Err(OffError::config(format!(
                "clip {id} has label {} but the network has {} classes",
                c.label, config.classes
            )));
        }
        let s = c.frames.shape();
        if s.c != config.input_channels {
            return Err(OffError::config(format!(
                "clip {id} has {} channels, the network expects {}",
                s.c, config.input_channels
            )));
        }
        if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
            return Err(OffError::config(format!(
                "clip {id} frames are {}x{}, not divisible by {m}",
                s.h, s.w
            )));
        }
    }
    Ok(())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Step {
    loss_total: f64,
    level_losses: Vec<f64>,
    train_acc: f64,
    grads: BTreeMap<String, Tensor<f32>>,
}

fn train_step(
    store: &ParamStore,
    config: &OffConfig,
    train: &TrainConfig,
    clips: &[Clip],
    ids: &[usize],
    frames: &[Vec<usize>],
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Step> {
    let labels: Vec<usize> = ids.iter().map(|&i| clips[i].label).collect();
    let segments = gather_segments(clips, ids, frames)?;
    let mut tape = Tape::<f32>::new();
    let bound = store.bind(&mut tape, trainable);
    let vars = NetVars::resolve(&bound, config)?;
    let segs: Vec<Var> = segments.into_iter().map(|s| tape.constant(s)).collect();

    let (total, level_losses, probs) = if train.stage == 1 {
        let scores = network_forward(&mut tape, &segs, &vars, config, Streams::RGB)?;
        let logits = scores.rgb.expect("rgb requested").last().aggregated;
        let (loss, probs) = tape.softmax_xent(logits, &labels)?;
        (loss, Vec::new(), probs)
    } else {
        let scores = network_forward(&mut tape, &segs, &vars, config, Streams::OFF)?;
        let off = scores.off.expect("off requested");
        let mut weighted = Vec::new();
        let mut values = Vec::new();
        let mut last_probs = None;
        for (l, level) in off.levels.iter().enumerate() {
            let (loss, probs) = tape.softmax_xent(level.aggregated, &labels)?;
            values.push(tape.value(loss).data()[0] as f64);
            weighted.push(tape.scale(loss, train.level_weight(l)));
            last_probs = Some(probs);
        }
        (tape.add_n(&weighted)?, values, last_probs.expect("at least one level"))
    };
    tape.backward(total)?;

    let mut grads = BTreeMap::new();
    for (name, &v) in bound.iter() {
        if trainable(name) {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            grads.insert(name.clone(), g);
        }
    }
    Ok(Step {
        loss_total: tape.value(total).data()[0] as f64,
        level_losses,
        train_acc: accuracy(&probs.argmax_rows(), &labels),
        grads,
    })
}

fn run(
    store: &mut ParamStore,
    config: &OffConfig,
    train: &TrainConfig,
    clips: &[Clip],
    trainable: &dyn Fn(&str) -> bool,
    mut after_step: impl FnMut(&ParamStore) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let mut rng = rng_for(train.seed, 2 * train.stage as u64 + 1);
    let mut sgd = Sgd::new(train.momentum);
    let mut rows = Vec::with_capacity(train.total_iters);
    let every = (train.total_iters / 10).max(1);
    for iter in 0..train.total_iters {
        let lr = lr_at(iter, train);
        let (ids, frames) = sample_train_batch(clips, train.batch_size, train.alpha, train.beta, &mut rng)?;
        let step = train_step(store, config, train, clips, &ids, &frames, trainable)?;
        if !step.loss_total.is_finite() {
            return Err(OffError::arg(format!("loss diverged at iteration {iter}")));
        }
        sgd.step(store, &step.grads, lr)?;
        after_step(store)?;
        if iter % every == 0 || iter + 1 == train.total_iters {
            log::info!(
                "stage {} iter {iter}/{} lr {lr:.5} loss {:.4} acc {:.3}",
                train.stage,
                train.total_iters,
                step.loss_total,
                step.train_acc
            );
        }
        rows.push(MetricsRow {
            iter,
            stage: train.stage,
            lr,
            loss_total: step.loss_total,
            level_losses: step.level_losses,
            train_acc: step.train_acc,
        });
    }
    Ok(rows)
}

/// Trains the backbone and RGB classifier on mean segment scores.
pub fn stage1_train(config: &OffConfig, train: &TrainConfig, clips: &[Clip]) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    if train.stage != 1 {
        return Err(OffError::config("stage1_train needs stage = 1"));
    }
    check_dataset(config, clips)?;
    let mut store = init_params(
        config,
        &[ParamGroup::Backbone, ParamGroup::RgbHead],
        &mut rng_for(train.seed, 2),
    );
    let trainable = |name: &str| matches!(ParamGroup::of(name), Some(ParamGroup::Backbone | ParamGroup::RgbHead));
    let metrics = run(&mut store, config, train, clips, &trainable, |_| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            params: store,
            stage: 1,
            iteration: train.total_iters,
        },
        metrics,
    })
}

/// Trains freshly initialised OFF parameters with every per-level loss on
/// top of the frozen stage-one backbone.
pub fn stage2_train(
    init: &Checkpoint,
    config: &OffConfig,
    train: &TrainConfig,
    clips: &[Clip],
) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    if train.stage != 2 {
        return Err(OffError::config("stage2_train needs stage = 2"));
    }
    let same_backbone = init.config.levels == config.levels
        && init.config.backbone_channels == config.backbone_channels
        && init.config.input_channels == config.input_channels
        && init.config.classes == config.classes;
    if !same_backbone {
        return Err(OffError::config(
            "stage-one checkpoint has a different backbone shape or class count",
        ));
    }
    check_dataset(config, clips)?;
    let mut frozen = init.params.group(ParamGroup::Backbone);
    frozen.merge(&init.params.group(ParamGroup::RgbHead));
    if frozen.is_empty() {
        return Err(OffError::arg("initial checkpoint holds no backbone"));
    }
    let mut store = frozen.clone();
    store.merge(&init_params(config, &[ParamGroup::Off], &mut rng_for(train.seed, 4)));
    Checkpoint {
        config: config.clone(),
        params: store.clone(),
        stage: 2,
        iteration: 0,
    }
    .validate()?;

    let trainable = |name: &str| ParamGroup::of(name) == Some(ParamGroup::Off);
    let metrics = run(&mut store, config, train, clips, &trainable, |s| {
        for (name, t) in frozen.iter() {
            let now = s.get(name).ok_or_else(|| OffError::config(format!("`{name}` vanished")))?;
            let same = now.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(OffError::config(format!("frozen parameter `{name}` changed")));
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            params: store,
            stage: 2,
            iteration: train.total_iters,
        },
        metrics,
    })
}
