use off_core::data::SamplePlan;
use off_core::net::{
    aggregate_segments, backbone_forward, fuse_streams, init_params, off_layer, NetVars, OffConfig, ParamGroup,
    SOBEL_X, SOBEL_Y,
};
use off_core::tensor::{Shape, Tape, Tensor};
use off_core::train::{lr_at, sgd_momentum_step, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Shape, values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values).unwrap()
}

fn image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..3, 1usize..7, 1usize..7).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0f64..10.0, n * c * h * w).prop_map(move |v| tensor(Shape::new(n, c, h, w), v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sampling_layout_holds(len in 1usize..400, a in 1usize..40, b in 1usize..40, pick in 0.0f64..1.0) {
        let (alpha, beta) = (a.min(b), a.max(b));
        prop_assume!(len >= beta);
        let plan = SamplePlan::new(len, alpha, beta).unwrap();
        let interval = len / beta;
        prop_assert_eq!(plan.max_seed(), len - 1 - (alpha - 1) * interval);
        let seed = ((plan.max_seed() + 1) as f64 * pick) as usize;
        let train = plan.train_indices_from(seed).unwrap();
        let test = plan.test_indices();
        prop_assert_eq!(train.len(), alpha);
        prop_assert_eq!(test.len(), beta);
        for idx in [&train, &test] {
            prop_assert!(idx.iter().all(|&i| i < len));
            prop_assert!(idx.windows(2).all(|w| w[1] - w[0] == interval));
        }
        prop_assert!(plan.train_indices_from(plan.max_seed() + 1).is_err());
    }

    #[test]
    fn forward_ops_stay_finite(x in image()) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let s = x.shape();
        let w = tape.constant(Tensor::full(Shape::new(2, s.c, 3, 3), 0.25));
        let b = tape.constant(Tensor::full(Shape::new(2, 1, 1, 1), -0.5));
        let mut outs = vec![
            tape.conv3x3(v, w, b, 1).unwrap(),
            tape.conv3x3(v, w, b, 2).unwrap(),
            tape.conv2d_fixed3x3(v, &SOBEL_X).unwrap(),
            tape.conv2d_fixed3x3(v, &SOBEL_Y).unwrap(),
            tape.relu(v),
            tape.global_avg_pool(v).unwrap(),
            tape.sum(v),
        ];
        if s.h >= 2 && s.w >= 2 {
            outs.push(tape.maxpool2(v).unwrap());
        }
        for o in outs {
            prop_assert!(tape.value(o).all_finite());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..5, k in 2usize..9, raw in prop::collection::vec(-50.0f64..50.0, 40)) {
        let logits = tensor(Shape::matrix(n, k), raw[..n * k].to_vec());
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(logits);
        let (loss, probs) = tape.softmax_xent(v, &labels).unwrap();
        prop_assert!(tape.value(loss).data()[0] >= 0.0);
        for row in probs.data().chunks(k) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sobel_cancels_exactly_on_constant_axes(h in 1usize..8, w in 1usize..8, raw in prop::collection::vec(-1e3f64..1e3, 16)) {
        // varies along y only: the x derivative vanishes
        let col_const = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, _| raw[y]);
        // varies along x only: the y derivative vanishes
        let row_const = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, x| raw[8 + x]);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(col_const), tape.constant(row_const));
        let gx = tape.conv2d_fixed3x3(a, &SOBEL_X).unwrap();
        let gy = tape.conv2d_fixed3x3(b, &SOBEL_Y).unwrap();
        prop_assert!(tape.value(gx).data().iter().all(|&v| v == 0.0));
        prop_assert!(tape.value(gy).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_mean_ignores_order(raw in prop::collection::vec(-5.0f64..5.0, 4 * 6), shift in 1usize..4) {
        let parts: Vec<Tensor<f64>> = raw.chunks(6).map(|c| tensor(Shape::matrix(2, 3), c.to_vec())).collect();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = parts.into_iter().map(|p| tape.constant(p)).collect();
        let mut rotated = vars.clone();
        rotated.rotate_left(shift);
        let a = aggregate_segments(&mut tape, &vars).unwrap();
        let b = aggregate_segments(&mut tape, &rotated).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    /// Values on a 1/8 grid keep every sum exact, so ties cannot appear from rounding.
    #[test]
    fn fusing_class_constant_scores_keeps_argmax(raw in prop::collection::vec(-64i32..64, 12), c in -64i32..64) {
        let rgb = tensor(Shape::matrix(3, 4), raw.iter().map(|&v| v as f64 / 8.0).collect());
        let constant = Tensor::full(Shape::matrix(3, 4), c as f64 / 8.0);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(rgb.clone()), tape.constant(constant));
        let fused = fuse_streams(&mut tape, &[a, b]).unwrap();
        prop_assert_eq!(tape.value(fused).argmax_rows(), rgb.argmax_rows());
    }

    #[test]
    fn learning_rate_never_increases(m in prop::collection::btree_set(1usize..500, 0..4), i in 0usize..499) {
        let train = TrainConfig { lr_milestones: m.into_iter().collect(), total_iters: 500, ..TrainConfig::desk(1) };
        prop_assert!(lr_at(i + 1, &train) <= lr_at(i, &train));
        prop_assert!(lr_at(i, &train) > 0.0);
    }

    #[test]
    fn zero_gradient_without_velocity_is_stationary(p in prop::collection::vec(-1e3f32..1e3, 1..32), lr in 1e-4f64..1.0) {
        let mut params = p.clone();
        let mut velocity = vec![0.0; p.len()];
        sgd_momentum_step(&mut params, &vec![0.0; p.len()], &mut velocity, lr, 0.9).unwrap();
        prop_assert_eq!(params, p);
    }

    #[test]
    fn backward_is_bitwise_repeatable(x in image()) {
        let grad = || {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(x.clone(), true);
            let s = x.shape();
            let w = tape.constant(Tensor::from_fn(Shape::new(3, s.c, 3, 3), |a, b, c, d| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0));
            let b = tape.constant(Tensor::zeros(Shape::new(3, 1, 1, 1)));
            let y = tape.conv3x3(v, w, b, 1).unwrap();
            let r = tape.relu(y);
            let g = tape.global_avg_pool(r).unwrap();
            let loss = tape.sum(g);
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap().clone()
        };
        let (a, b) = (grad(), grad());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_segments_give_zero_ft_at_every_level(seed in any::<u64>(), raw in prop::collection::vec(0.0f32..1.0, 16 * 16)) {
        let config = OffConfig { reduced_channels: 3, backbone_channels: vec![4, 5, 6], ..OffConfig::default() };
        let groups = [ParamGroup::Backbone, ParamGroup::RgbHead, ParamGroup::Off];
        let params = init_params(&config, &groups, &mut ChaCha8Rng::seed_from_u64(seed));
        let frame = Tensor::from_vec(Shape::new(1, 1, 16, 16), raw).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, |_| false);
        let vars = NetVars::resolve(&bound, &config).unwrap();
        let a = tape.constant(frame.clone());
        let b = tape.constant(frame);
        let pa = backbone_forward(&mut tape, a, &config, &vars.backbone).unwrap();
        let pb = backbone_forward(&mut tape, b, &config, &vars.backbone).unwrap();
        let off = vars.off().unwrap();
        for l in 0..config.levels {
            let f = off_layer(&mut tape, pa.levels[l], pb.levels[l], &off.levels[l].reduce).unwrap();
            prop_assert!(tape.value(f.ft).data().iter().all(|&v| v.to_bits() == 0), "level {}", l);
        }
    }
}
