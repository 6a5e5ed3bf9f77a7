use super::{BackboneVars, FeaturePyramid, OffConfig};
use crate::error::{OffError, Result};
use crate::tensor::{Real, Tape, Var};

/// conv3x3 + relu per level, with a 2×2 max-pool in front of every level
/// after the first. Emits one feature map per level.
pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    frame: Var,
    config: &OffConfig,
    params: &BackboneVars,
) -> Result<FeaturePyramid> {
    let s = tape.shape(frame);
    let m = config.spatial_multiple();
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
        return Err(OffError::config(format!(
            "input {s} must have extents divisible by {m} for {} levels",
            config.levels
        )));
    }
    if params.convs.len() != config.levels {
        return Err(OffError::config(format!(
            "backbone has {} convolutions, config expects {} levels",
            params.convs.len(),
            config.levels
        )));
    }
    let mut levels = Vec::with_capacity(config.levels);
    let mut x = frame;
    for (l, conv) in params.convs.iter().enumerate() {
        if l > 0 {
            x = tape.maxpool2(x)?;
        }
        x = tape.conv3x3(x, conv.weight, conv.bias, 1)?;
        x = tape.relu(x);
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, pyramid_values, BoundParams, NetVars, ParamGroup};
    use crate::tensor::{finite_diff_report, Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(config: &OffConfig, tape: &mut Tape<f64>) -> (BoundParams, NetVars) {
        let store = init_params(config, &[ParamGroup::Backbone, ParamGroup::RgbHead], &mut ChaCha8Rng::seed_from_u64(5))
            .cast::<f64>();
        let bound = store.bind(tape, |_| true);
        let vars = NetVars::resolve(&bound, config).unwrap();
        (bound, vars)
    }

    fn frame(s: usize, phase: f64) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 1, s, s), |_, _, y, x| {
            0.5 + 0.5 * ((y * 3 + x * 5) as f64 * 0.21 + phase).sin()
        })
    }

    #[test]
    fn three_levels_halve_resolution() {
        let config = OffConfig::default();
        let mut tape = Tape::new();
        let (_, vars) = setup(&config, &mut tape);
        let f = tape.leaf(frame(32, 0.0), false);
        let p = backbone_forward(&mut tape, f, &config, &vars.backbone).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|&v| tape.shape(v)).collect();
        assert_eq!(
            sizes,
            vec![Shape::new(1, 16, 32, 32), Shape::new(1, 32, 16, 16), Shape::new(1, 32, 8, 8)]
        );
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let config = OffConfig::default();
        let mut tape = Tape::new();
        let (_, vars) = setup(&config, &mut tape);
        let f = tape.leaf(frame(30, 0.0), false);
        assert!(matches!(
            backbone_forward(&mut tape, f, &config, &vars.backbone),
            Err(OffError::Config(_))
        ));
    }

    #[test]
    fn segments_share_parameter_leaves() {
        let config = OffConfig::default();
        let mut tape = Tape::new();
        let (_, vars) = setup(&config, &mut tape);
        let fa = tape.leaf(frame(16, 0.0), false);
        let fb = tape.leaf(frame(16, 0.0), false);
        let pa = backbone_forward(&mut tape, fa, &config, &vars.backbone).unwrap();
        let pb = backbone_forward(&mut tape, fb, &config, &vars.backbone).unwrap();
        assert_eq!(pyramid_values(&tape, &pa), pyramid_values(&tape, &pb));
        let conv_a = tape.op_inputs(pa.levels[0]);
        let conv_b = tape.op_inputs(pb.levels[0]);
        let params_a = tape.op_inputs(conv_a[0]);
        let params_b = tape.op_inputs(conv_b[0]);
        assert_eq!(params_a[1..], params_b[1..]);
        assert_eq!(params_a[1], vars.backbone.convs[0].weight);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let config = OffConfig {
            levels: 2,
            backbone_channels: vec![3, 4],
            ..OffConfig::default()
        };
        let store = init_params(&config, &[ParamGroup::Backbone], &mut ChaCha8Rng::seed_from_u64(9)).cast::<f64>();
        let w1 = store.get("backbone.conv1.weight").unwrap().clone();
        let forward = |tape: &mut Tape<f64>, w: Var| {
            let mut bound = store.bind(tape, |_| false);
            bound.set("backbone.conv1.weight", w);
            let convs = (0..2)
                .map(|l| {
                    Ok(crate::net::ConvVars {
                        weight: bound.get(&format!("backbone.conv{l}.weight"))?,
                        bias: bound.get(&format!("backbone.conv{l}.bias"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let f = tape.leaf(frame(8, 0.3), false);
            let p = backbone_forward(tape, f, &config, &BackboneVars { convs })?;
            Ok(tape.sum(p.levels[1]))
        };
        let r = finite_diff_report(forward, &w1, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > r.skipped);
    }
}
