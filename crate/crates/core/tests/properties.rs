use hdanet::augment::{self, AugmentConfig, Transform};
use hdanet::dataset::cfar::{cfar_mask, make_pseudo_label, CfarConfig, PseudoLabelConfig};
use hdanet::dataset::synth::SceneModel;
use hdanet::dataset::{generate_chip, DatasetSpec};
use hdanet::eval::{self, CoalitionScores};
use hdanet::image::Image;
use hdanet::losses::{self, LossConfig};
use hdanet::model::{ForwardOptions, HdaNet, ModelConfig};
use hdanet::tensor::{BatchNormMode, RunningStats, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| Image::new(h, w, v).unwrap())
}

fn small_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        num_classes: 3,
        channels: [3, 4, 5],
        decoder_channels: [2, 2],
        primary_channels: 8,
        capsule_dim: 4,
        digit_dim: 4,
        align_dim: 8,
        projector_hidden: 16,
        predictor_hidden: 8,
        ..ModelConfig::default()
    }
}

fn norms(t: &Tensor<f64>, dim: usize) -> Vec<f64> {
    t.data().chunks(dim).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squash_norm_below_one_and_direction_kept(
        s in prop::collection::vec(-50.0f64..50.0, 4),
        alpha in 0.01f64..100.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 4], &s).unwrap());
        let y = tape.squash(x).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
        let xs = tape.constant(Tensor::from_f64(&[1, 4], &scaled).unwrap());
        let ys = tape.squash(xs).unwrap();
        let (a, b) = (tape.value(y).data().to_vec(), tape.value(ys).data().to_vec());
        let n = norms(tape.value(y), 4)[0];
        prop_assert!((0.0..1.0).contains(&n));
        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        let nb = norms(tape.value(ys), 4)[0];
        if n > 1e-12 && nb > 1e-12 {
            prop_assert!((dot / (n * nb) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_of_constant_image_is_constant(
        c in -2.0f64..2.0,
        kernel in prop::collection::vec(-1.0f64..1.0, 2 * 9),
        stride in 1usize..=2,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 8, 8], c));
        let k = tape.constant(Tensor::from_f64(&[2, 1, 3, 3], &kernel).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2], &[0.3, -0.1]).unwrap());
        let y = tape.conv2d_mirror(x, k, b, stride).unwrap();
        let out = tape.value(y);
        let plane = out.numel() / 2;
        for ch in out.data().chunks(plane) {
            prop_assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn stop_gradient_path_contributes_nothing(xs in prop::collection::vec(-3.0f64..3.0, 5)) {
        // f = Σ x · sg(x²): only the direct factor carries gradient.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[5], &xs).unwrap());
        let sq = tape.square(x).unwrap();
        let frozen = tape.stop_gradient(sq);
        let p = tape.mul(x, frozen).unwrap();
        let f = tape.sum(p).unwrap();
        let g = tape.backward(f).unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| v * v).collect();
        prop_assert_eq!(g.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn tape_replay_gives_identical_gradients(
        seed in any::<u64>(),
        xs in prop::collection::vec(-1.0f32..1.0, 2 * 8 * 8),
    ) {
        let model = HdaNet::<f32>::new(small_model(), seed).unwrap();
        let grads = || {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let mut buffers = model.buffers.clone();
            let x = tape.constant(Tensor::new(&[2, 1, 8, 8], xs.clone()).unwrap());
            let x = tape.upsample_nearest(x, 4).unwrap();
            let out = model.arch.forward(&mut tape, &params, &mut buffers, x, &ForwardOptions::train()).unwrap();
            let n = tape.norm_last(out.v).unwrap();
            let s = tape.sum(n).unwrap();
            let g = tape.backward(s).unwrap();
            params.iter().map(|&p| g.get(p).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn augmented_views_stay_in_range_and_bounds(img in image_strategy(16, 16), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let pair = augment::sample_domain_pair(&img, &cfg, seed);
        for (v, ts) in [(&pair.view1, &pair.transforms1), (&pair.view2, &pair.transforms2)] {
            prop_assert!(v.data.iter().all(|p| (0.0..=1.0).contains(p)));
            for t in ts {
                match *t {
                    Transform::Rotate { degrees } => prop_assert!(degrees.abs() <= 5.0),
                    Transform::Replace { fraction } => prop_assert!(fraction <= 0.05),
                    Transform::Noise { .. } => {}
                }
            }
        }
        prop_assert_eq!(augment::sample_domain_pair(&img, &cfg, seed), pair);
    }

    #[test]
    fn replacement_never_exceeds_its_fraction(img in image_strategy(16, 16), seed in any::<u64>(), frac in 0.0f64..=0.05) {
        let out = augment::random_replace(&img, frac, &mut ChaCha8Rng::seed_from_u64(seed));
        let changed = out.data.iter().zip(&img.data).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= (frac * 256.0).round() as usize);
    }

    #[test]
    fn cfar_ignores_power_of_two_scaling(img in image_strategy(16, 16), k in -6i32..=6) {
        let cfg = CfarConfig::default();
        let scale = 2f32.powi(k);
        let mut scaled = img.clone();
        for v in &mut scaled.data {
            *v *= scale;
        }
        prop_assert_eq!(cfar_mask(&img, &cfg).unwrap(), cfar_mask(&scaled, &cfg).unwrap());
    }

    #[test]
    fn pseudo_labels_are_soft_masks(mask in prop::collection::vec(any::<bool>(), 144)) {
        let m = Image::new(12, 12, mask.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let soft = make_pseudo_label(&m, &PseudoLabelConfig::default());
        prop_assert!(soft.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for (s, &b) in soft.data.iter().zip(&mask) {
            if b {
                prop_assert!(*s > 0.0);
            }
        }
    }

    #[test]
    fn chip_generation_is_a_pure_function(class in 0usize..10, az in 0.0f64..360.0, scene in 0u32..13, seed in any::<u64>()) {
        let gen = || {
            generate_chip(class, 10, az, scene, &SceneModel::catalogue(scene), 32, &PseudoLabelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        prop_assert_eq!(gen(), gen());
    }

    #[test]
    fn contrastive_loss_is_scale_invariant_and_symmetric(
        v in prop::collection::vec(-1.0f64..1.0, 4 * 6),
        scales in prop::collection::vec(0.1f64..10.0, 4),
    ) {
        let parts: Vec<Vec<f64>> = v.chunks(6).map(|c| c.to_vec()).collect();
        prop_assume!(parts.iter().all(|p| p.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let l = |p: &[Vec<f64>], s: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<_> = p
                .iter()
                .zip(s)
                .map(|(x, k)| tape.constant(Tensor::from_f64(&[1, 6], &x.iter().map(|y| y * k).collect::<Vec<_>>()).unwrap()))
                .collect();
            let out = losses::contrastive_loss(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
            tape.value(out).item()
        };
        let base = l(&parts, &[1.0; 4]);
        prop_assert!((0.0..=2.0).contains(&base));
        prop_assert!((l(&parts, &scales) - base).abs() < 1e-12);
        let swapped = [parts[2].clone(), parts[3].clone(), parts[0].clone(), parts[1].clone()];
        prop_assert!((l(&swapped, &[1.0; 4]) - base).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_is_zero_exactly_off_the_hinge(v in prop::collection::vec(-0.6f64..0.6, 3 * 4), label in 0usize..3) {
        let cfg = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3, 4], &v).unwrap());
        let vs = tape.squash(x).unwrap();
        let l = losses::margin_loss(&mut tape, vs, &[label], &cfg).unwrap();
        let loss = tape.value(l).item();
        let n = norms(tape.value(vs), 4);
        let active = n.iter().enumerate().any(|(k, &nk)| if k == label { nk < cfg.margin_pos } else { nk > cfg.margin_neg });
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss > 0.0, active);
    }

    #[test]
    fn shapley_efficiency_is_exact(s in prop::collection::vec(-5.0f64..5.0, 4)) {
        let f = CoalitionScores { none: s[0], target: s[1], clutter: s[2], both: s[3] };
        let (t, c) = eval::shapley_values(&f);
        prop_assert!((t + c - (f.both - f.none)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_ranges_hold_on_any_input(seed in any::<u64>(), xs in prop::collection::vec(0.0f64..1.0, 2 * 32 * 32)) {
        let model = HdaNet::<f64>::new(small_model(), seed).unwrap();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let mut buffers = model.buffers.clone();
        let x = tape.constant(Tensor::from_f64(&[2, 1, 32, 32], &xs).unwrap());
        let out = model.arch.forward(&mut tape, &params, &mut buffers, x, &ForwardOptions::train()).unwrap();
        prop_assert!(tape.value(out.z_m).data().iter().all(|v| (0.0..1.0).contains(v)));
        prop_assert!(norms(tape.value(out.u), 4).iter().all(|n| (0.0..1.0).contains(n)));
        prop_assert!(norms(tape.value(out.v), 4).iter().all(|n| (0.0..1.0).contains(n)));
        for c in &out.couplings {
            for row in tape.value(*c).data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_region_blocks_input_changes(seed in any::<u64>(), delta in prop::collection::vec(-0.5f64..0.5, 64 * 4)) {
        // 64×64 input, 16×16 mid map. Zeroing mid columns 0..10 covers every
        // feature that input columns 0..4 can reach through the encoder.
        let cfg = ModelConfig { image_size: 64, ..small_model() };
        let model = HdaNet::<f64>::new(cfg, seed).unwrap();
        let mut gate = vec![1.0; 16 * 16];
        for y in 0..16 {
            for x in 0..10 {
                gate[y * 16 + x] = 0.0;
            }
        }
        let gate = Tensor::from_f64(&[1, 1, 16, 16], &gate).unwrap();
        let base: Vec<f64> = (0..64 * 64).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let mut moved = base.clone();
        for y in 0..64 {
            for x in 0..4 {
                moved[y * 64 + x] = (moved[y * 64 + x] + delta[y * 4 + x]).clamp(0.0, 1.0);
            }
        }
        let run = |img: &[f64]| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let mut buffers = model.buffers.clone();
            let x = tape.constant(Tensor::from_f64(&[1, 1, 64, 64], img).unwrap());
            let opts = ForwardOptions { mask_gate: Some(gate.clone()), ..ForwardOptions::eval() };
            let out = model.arch.forward(&mut tape, &params, &mut buffers, x, &opts).unwrap();
            (tape.value(out.masked).clone(), tape.value(out.u).clone())
        };
        let (m0, u0) = run(&base);
        let (_, u1) = run(&moved);
        let c = m0.shape()[1];
        for ch in 0..c {
            for y in 0..16 {
                for x in 0..10 {
                    prop_assert_eq!(m0.data()[(ch * 16 + y) * 16 + x], 0.0);
                }
            }
        }
        prop_assert_eq!(u0.data(), u1.data());
    }
}

#[test]
fn both_views_share_the_same_parameters() {
    // In eval mode a stacked two-view batch must equal two separate passes.
    let model = HdaNet::<f64>::new(small_model(), 4).unwrap();
    let img = |k: usize| (0..32 * 32).map(|i| ((i * (31 + k)) % 97) as f64 / 96.0).collect::<Vec<_>>();
    let (a, b) = (img(0), img(1));
    let scores = |xs: &[f64], n: usize| model.class_scores(&Tensor::from_f64(&[n, 1, 32, 32], xs).unwrap()).unwrap();
    let both = scores(&[a.clone(), b.clone()].concat(), 2);
    let sep = [scores(&a, 1).data().to_vec(), scores(&b, 1).data().to_vec()].concat();
    for (x, y) in both.data().iter().zip(&sep) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_uses_running_statistics_only() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap());
    let g = tape.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
    let (mut m, mut v) = (vec![1.0], vec![4.0]);
    let y = tape
        .batch_norm(x, g, b, BatchNormMode::Eval, RunningStats { mean: &mut m, var: &mut v })
        .unwrap();
    let expect: Vec<f64> = [1.0, 3.0, 5.0, 7.0].iter().map(|x| 2.0 * (x - 1.0) / (4.0f64 + 1e-5).sqrt() + 0.5).collect();
    for (p, q) in tape.value(y).data().iter().zip(&expect) {
        assert!((p - q).abs() < 1e-9, "{p} vs {q}");
    }
    assert_eq!((m, v), (vec![1.0], vec![4.0]));
}

#[test]
fn dataset_is_a_pure_function_of_its_spec() {
    let spec = DatasetSpec {
        num_classes: 3,
        train_per_class: 3,
        test_per_class: 2,
        image_size: 32,
        seed: 17,
        ..DatasetSpec::default()
    };
    let a = hdanet::dataset::generate_dataset(&spec, 1).unwrap();
    let b = hdanet::dataset::generate_dataset(&spec, 3).unwrap();
    assert_eq!(a, b);
}
