//! Forward-only throughput of the backbone alone and of backbone plus OFF.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OffError, Result};
use crate::net::{init_params, network_forward, NetVars, OffConfig, ParamGroup, ParamStore, Streams};
use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: String,
    pub frames: usize,
    pub fps_backbone: f64,
    pub fps_off: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.fps_off / self.fps_backbone
    }

    pub fn csv(&self) -> String {
        format!(
            "config,fps_backbone,fps_off,ratio\n{},{:.3},{:.3},{:.6}\n",
            self.config,
            self.fps_backbone,
            self.fps_off,
            self.ratio()
        )
    }
}

fn label(config: &OffConfig, size: usize) -> String {
    let chans: Vec<String> = config.backbone_channels.iter().map(|c| c.to_string()).collect();
    format!(
        "levels{}-cr{}-blocks{}-backbone{}-{size}px",
        config.levels,
        config.reduced_channels,
        config.blocks_per_level,
        chans.join("x")
    )
}

fn time_forward(
    params: &ParamStore,
    config: &OffConfig,
    frames: &[Tensor<f32>],
    streams: Streams,
) -> Result<f64> {
    let start = Instant::now();
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, |_| false);
    let vars = NetVars::resolve(&bound, config)?;
    let segs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let scores = network_forward(&mut tape, &segs, &vars, config, streams)?;
    let out = match &scores.off {
        Some(off) => off.last().aggregated,
        None => scores.rgb.as_ref().expect("a stream").last().aggregated,
    };
    std::hint::black_box(tape.value(out));
    Ok(start.elapsed().as_secs_f64())
}

/// Best of `repeat` timed passes over `frames` random frames, after one
/// untimed warmup. Without a checkpoint the default network is initialised
/// from `seed`.
pub fn run_bench(ckpt: Option<&Checkpoint>, frames: usize, repeat: usize, size: usize, seed: u64) -> Result<BenchReport> {
    if repeat < 1 {
        return Err(OffError::arg("repeat must be at least 1"));
    }
    if frames < 2 {
        return Err(OffError::arg(format!("OFF needs at least 2 frames, got {frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (config, params) = match ckpt {
        Some(c) => {
            c.validate()?;
            if !c.has_off() {
                return Err(OffError::arg("benchmark checkpoint has no OFF parameters"));
            }
            (c.config.clone(), c.params.clone())
        }
        None => {
            let config = OffConfig::default();
            let groups = [ParamGroup::Backbone, ParamGroup::RgbHead, ParamGroup::Off];
            let params = init_params(&config, &groups, &mut rng);
            (config, params)
        }
    };
    let m = config.spatial_multiple();
    if size == 0 || !size.is_multiple_of(m) {
        return Err(OffError::arg(format!("frame size {size} is not a positive multiple of {m}")));
    }
    let shape = Shape::new(1, config.input_channels, size, size);
    let input: Vec<Tensor<f32>> = (0..frames)
        .map(|_| Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0)))
        .collect();

    let mut best = [f64::INFINITY; 2];
    for (i, streams) in [Streams::RGB, Streams::ALL].into_iter().enumerate() {
        time_forward(&params, &config, &input, streams)?;
        for _ in 0..repeat {
            best[i] = best[i].min(time_forward(&params, &config, &input, streams)?);
        }
    }
    Ok(BenchReport {
        config: label(&config, size),
        frames,
        fps_backbone: frames as f64 / best[0],
        fps_off: frames as f64 / best[1],
    })
}
