use gliomaseg::autodiff::{NdArray, Tape};
use gliomaseg::losses::LossKind;
use gliomaseg::models::{sliding_window_predict, PatchSpec, UNet, UNetConfig, Variant};
use gliomaseg::optim::{AdamHyper, LookaheadHyper, OptimizerKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> NdArray<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

fn small(variant: Variant, depth: usize) -> UNetConfig {
    let base = match variant {
        Variant::Binary => UNetConfig::binary_toy(),
        Variant::Multiclass => UNetConfig::multiclass_toy(),
    };
    UNetConfig {
        widths: [4, 6, 8, 8][..depth].to_vec(),
        bridge: 8,
        input_dims: [1 << depth; 3],
        ..base
    }
}

fn check_outputs(cfg: &UNetConfig, probs: &NdArray<f32>, logits: &NdArray<f32>, input: &[usize]) {
    assert_eq!(&probs.shape()[..4], &input[..4]);
    assert_eq!(probs.shape()[4], cfg.classes);
    assert_eq!(logits.shape(), probs.shape());
    assert!(logits.data().iter().all(|v| v.is_finite()));
    match cfg.variant {
        Variant::Binary => assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0)),
        Variant::Multiclass => {
            for voxel in probs.data().chunks(cfg.classes) {
                assert!((voxel.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_grid_matches_input_grid(
        binary in any::<bool>(),
        depth in 1usize..4,
        mult in (1usize..3, 1usize..3, 2usize..4),
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let variant = if binary { Variant::Binary } else { Variant::Multiclass };
        let cfg = small(variant, depth);
        let d = cfg.divisor();
        let shape = [batch, mult.0 * d, mult.1 * d, mult.2 * d, 4];
        let net = UNet::new(cfg.clone(), seed).unwrap();
        let out = net.forward_array(&noise(&shape, seed)).unwrap();
        check_outputs(&cfg, &out.probs, &out.logits, &shape);
    }
}

#[test]
fn toy_and_paper_widths_preserve_the_grid() {
    for cfg in [UNetConfig::binary_toy(), UNetConfig::multiclass_toy()] {
        let shape = [
            1,
            cfg.input_dims[0],
            cfg.input_dims[1],
            cfg.input_dims[2],
            4,
        ];
        let out = UNet::new(cfg.clone(), 3)
            .unwrap()
            .forward_array(&noise(&shape, 4))
            .unwrap();
        check_outputs(&cfg, &out.probs, &out.logits, &shape);
    }
    // paper widths on the smallest grid whose bridge still has two voxels to normalize
    for cfg in [UNetConfig::binary_paper(), UNetConfig::multiclass_paper()] {
        let d = cfg.divisor();
        let shape = [1, d, d, 2 * d, 4];
        let out = UNet::new(cfg.clone(), 5)
            .unwrap()
            .forward_array(&noise(&shape, 6))
            .unwrap();
        check_outputs(&cfg, &out.probs, &out.logits, &shape);
    }
}

#[test]
#[ignore = "paper-scale grids take minutes and gigabytes on a CPU"]
fn paper_networks_on_their_nominal_grids() {
    for cfg in [UNetConfig::binary_paper(), UNetConfig::multiclass_paper()] {
        let d = cfg.input_dims;
        let shape = [1, d[0], d[1], d[2], 4];
        let out = UNet::new(cfg.clone(), 1)
            .unwrap()
            .forward_array(&noise(&shape, 2))
            .unwrap();
        check_outputs(&cfg, &out.probs, &out.logits, &shape);
    }
}

#[test]
fn batch_members_do_not_interact() {
    let cfg = small(Variant::Multiclass, 2);
    let net = UNet::new(cfg, 11).unwrap();
    let a = noise(&[1, 8, 8, 4, 4], 1);
    let b = noise(&[1, 8, 8, 4, 4], 2);
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let joint = net
        .forward_array(&NdArray::new(vec![2, 8, 8, 4, 4], both).unwrap())
        .unwrap();
    let solo: Vec<f32> = [a, b]
        .iter()
        .flat_map(|x| net.forward_array(x).unwrap().probs.into_data())
        .collect();
    for (j, s) in joint.probs.data().iter().zip(&solo) {
        assert!((j - s).abs() <= 1e-6, "{j} vs {s}");
    }
}

#[test]
fn inference_is_deterministic() {
    let cfg = small(Variant::Multiclass, 2);
    let x = noise(&[1, 8, 8, 8, 4], 9);
    let a = UNet::new(cfg.clone(), 4)
        .unwrap()
        .forward_array(&x)
        .unwrap();
    let b = UNet::new(cfg, 4).unwrap().forward_array(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sliding_window_keeps_the_volume_grid() {
    let cfg = small(Variant::Multiclass, 2);
    let net = UNet::new(cfg, 2).unwrap();
    let x = noise(&[1, 13, 9, 10, 4], 3);
    let spec = PatchSpec::half_overlap([8, 8, 8]);
    let out = sliding_window_predict(&net, &x, &spec).unwrap();
    assert_eq!(out.probs.shape(), &[1, 13, 9, 10, 4]);
    for voxel in out.probs.data().chunks(4) {
        assert!((voxel.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
    }
}

/// A single fixed batch must be memorized quickly: within 50 Adam steps the
/// loss falls well below its starting value.
fn memorize(variant: Variant, loss: LossKind) -> (f64, f64) {
    let cfg = small(variant, 2);
    let mut net = UNet::new(cfg.clone(), 21).unwrap();
    let x = noise(&[2, 8, 8, 8, 4], 22);
    let y = NdArray::from_fn(&[2, 8, 8, 8, cfg.classes], |i| {
        let voxel = i / cfg.classes;
        let (vx, vy) = (voxel % 8, (voxel / 8) % 8);
        let class = usize::from(vx >= 4) + 2 * usize::from(vy >= 4);
        let hot = if cfg.classes == 1 {
            usize::from(class > 0)
        } else {
            usize::from(i % cfg.classes == class)
        };
        hot as f32
    });
    let mut flat = net.params.flatten();
    let hyper = AdamHyper {
        lr: 1e-2,
        ..AdamHyper::default()
    };
    let mut opt = OptimizerKind::Adam
        .build(flat.len(), hyper, LookaheadHyper::default())
        .unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let tape = Tape::new();
        let bound = tape.bind(&net.params);
        let (_, probs) = cfg.forward(&bound, &tape.constant(x.clone())).unwrap();
        let l = loss.evaluate(&probs, &tape.constant(y.clone())).unwrap();
        losses.push(f64::from(l.item().unwrap()));
        let g = tape.backward(l).unwrap().flatten_like(&net.params).unwrap();
        opt.step(&mut flat, &g).unwrap();
        net.params.unflatten(&flat).unwrap();
    }
    (losses[0], *losses.last().unwrap())
}

#[test]
fn networks_memorize_a_single_batch() {
    for (variant, loss) in [
        (Variant::Binary, LossKind::DiceCe),
        (Variant::Multiclass, LossKind::DiceCe),
        (Variant::Multiclass, LossKind::LogCoshDice),
    ] {
        let (first, last) = memorize(variant, loss);
        assert!(last < 0.25 * first, "{variant:?}/{loss}: {first} -> {last}");
    }
}
