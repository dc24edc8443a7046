//! Model-level properties: float and fixed forwards against each other and
//! against hand-built oracles, plus structural checks on the op program.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use xpi_core::model::float::features;
use xpi_core::model::program::apply_permute;
use xpi_core::model::synth::{random_images, synthetic_model};
use xpi_core::model::{encode_images, fold_norm, Op, OpClass};
use xpi_core::{
    forward_plain_fixed, forward_plain_float, FixedPointConfig, ModelConfig, ModelWeights,
    NormStats, Program, RealTensor, RingTensor, TruncMode,
};

fn fp16() -> FixedPointConfig {
    FixedPointConfig::new(16, TruncMode::InsecureExact).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn image(images: &RealTensor, cfg: &ModelConfig, b: usize) -> RealTensor {
    let n = cfg.image_numel();
    let s = cfg.image_size;
    RealTensor::new(vec![3, s, s], images.data()[b * n..(b + 1) * n].to_vec()).unwrap()
}

#[test]
fn fixed_tracks_float_on_toy_inputs() {
    for cfg in [ModelConfig::toy(), ModelConfig { depth: 4, ..ModelConfig::toy() }] {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let weights = synthetic_model(&cfg, &mut rng).unwrap();
        let images = random_images(&cfg, 100, &mut rng);
        let fixed = forward_plain_fixed(&weights, &images, &fp16()).unwrap().decode();
        let k = cfg.num_classes;
        let mut worst = 0.0f64;
        let mut agree = 0;
        for b in 0..100 {
            let float = forward_plain_float(&weights, &image(&images, &cfg, b)).unwrap();
            let fx = &fixed.data()[b * k..(b + 1) * k];
            for (a, e) in fx.iter().zip(float.data()) {
                worst = worst.max((a - e).abs());
            }
            agree += usize::from(argmax(fx) == argmax(float.data()));
        }
        assert!(worst <= 1e-2, "max abs {worst}");
        assert!(agree >= 99, "argmax agreement {agree}/100");
    }
}

#[test]
fn zero_image_is_stable() {
    let cfg = ModelConfig::toy();
    let weights = synthetic_model(&cfg, &mut ChaCha20Rng::seed_from_u64(12)).unwrap();
    let zero = RealTensor::zeros(&[3, cfg.image_size, cfg.image_size]);
    let float = forward_plain_float(&weights, &zero).unwrap();
    let fixed = forward_plain_fixed(&weights, &zero, &fp16()).unwrap().decode();
    assert!(float.is_finite());
    assert!(fixed.max_abs_diff(&RealTensor::new(vec![1, 10], float.into_data()).unwrap()) <= 1e-2);
}

#[test]
fn batch_matches_single_runs() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let weights = synthetic_model(&cfg, &mut rng).unwrap();
    let images = random_images(&cfg, 2, &mut rng);
    let both = forward_plain_fixed(&weights, &images, &fp16()).unwrap();
    for b in 0..2 {
        let one = forward_plain_fixed(&weights, &image(&images, &cfg, b), &fp16()).unwrap();
        assert_eq!(one.data(), &both.data()[b * 10..(b + 1) * 10]);
    }
}

/// head(mean(patch_embed(x))) by direct loops over the image.
fn embed_pool_head(w: &ModelWeights, img: &RealTensor) -> Vec<f64> {
    let cfg = w.config;
    let (p, s, n, d) = (cfg.patch_size, cfg.image_size, cfg.grid(), cfg.embed_dim);
    let mut pooled = vec![0.0; d];
    for gi in 0..n {
        for gj in 0..n {
            for k in 0..d {
                let mut acc = w.patch_bias.data()[k];
                for c in 0..3 {
                    for a in 0..p {
                        for b in 0..p {
                            let px = img.data()[(c * s + gi * p + a) * s + gj * p + b];
                            acc += px * w.patch_weight.data()[((c * p + a) * p + b) * d + k];
                        }
                    }
                }
                pooled[k] += acc / (n * n) as f64;
            }
        }
    }
    (0..cfg.num_classes)
        .map(|j| w.head_bias.data()[j] + (0..d).map(|k| pooled[k] * w.head_weight.data()[k * cfg.num_classes + j]).sum::<f64>())
        .collect()
}

#[test]
fn zero_layers_reduce_to_embed_pool_head() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let trained = synthetic_model(&cfg, &mut rng).unwrap();
    let mut w = ModelWeights::zeros(cfg);
    w.patch_weight = trained.patch_weight.clone();
    w.patch_bias = trained.patch_bias.clone();
    w.head_weight = trained.head_weight.clone();
    w.head_bias = trained.head_bias.clone();

    let mut shallow = w.clone();
    shallow.config.depth = 0;
    shallow.layers.clear();

    let images = random_images(&cfg, 4, &mut rng);
    let deep_fx = forward_plain_fixed(&w, &images, &fp16()).unwrap();
    let shallow_fx = forward_plain_fixed(&shallow, &images, &fp16()).unwrap();
    assert_eq!(deep_fx, shallow_fx);

    for b in 0..4 {
        let img = image(&images, &cfg, b);
        let got = forward_plain_float(&w, &img).unwrap();
        let want = embed_pool_head(&w, &img);
        for (g, e) in got.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-9);
        }
    }
}

fn every_op(program: &Program) -> Vec<Op> {
    let mut ops = Vec::new();
    program.visit(|op| ops.push(op.clone()));
    ops
}

fn random_ring(rng: &mut impl Rng, shape: &[usize], f: u32) -> RingTensor {
    let n = shape.iter().product();
    RingTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen()).collect(), f).unwrap()
}

#[test]
fn square_is_the_only_nonlinearity() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    for cfg in [ModelConfig::toy(), ModelConfig::mnist(), ModelConfig::m(16), ModelConfig::t(2)] {
        let program = Program::compile(&ModelWeights::zeros(cfg), 16).unwrap();
        let ops = every_op(&program);
        let nonlinear: Vec<&Op> = ops.iter().filter(|op| !op.class().is_linear()).collect();
        assert_eq!(nonlinear.len(), cfg.depth);
        assert!(nonlinear.iter().all(|op| matches!(op, Op::Square { .. })));
        assert_eq!(program.count_class(OpClass::Square), cfg.depth);
        for op in &ops {
            assert_eq!(op.class() == OpClass::Square, matches!(op, Op::Square { .. }));
        }
    }

    // Every non-square op is additive on the ring: f(x + y) = f(x) + f(y).
    let cfg = ModelConfig { depth: 1, ..ModelConfig::toy() };
    let program = Program::compile(&synthetic_model(&cfg, &mut rng).unwrap(), 16).unwrap();
    let mut x = encode_images(&cfg, &random_images(&cfg, 1, &mut rng), 16).unwrap();
    for op in every_op(&program) {
        let out = match &op {
            Op::Residual { .. } | Op::Square { .. } => continue,
            Op::MeanPool { inv_count, .. } => {
                let y = random_ring(&mut rng, x.shape(), 16);
                let f = |t: &RingTensor| xpi_core::model::program::pool_sum(t, *inv_count, 16).unwrap();
                assert_eq!(f(&x.add(&y).unwrap()), f(&x).add(&f(&y)).unwrap());
                f(&x)
            }
            _ => {
                let y = random_ring(&mut rng, x.shape(), 16);
                let f = |t: &RingTensor| match op.public_linear() {
                    Some(l) => l.apply_plain(t).unwrap(),
                    None => apply_permute(&op, t).unwrap(),
                };
                assert_eq!(f(&x.add(&y).unwrap()), f(&x).add(&f(&y)).unwrap(), "{}", op.label());
                f(&x)
            }
        };
        x = if op.rescales() { xpi_core::ring::truncate_plain(&out, 16) } else { out };
    }
}

/// Permutes whole patches of `[3, s, s]` by `perm` over the `n x n` grid.
fn permute_patches(img: &RealTensor, cfg: &ModelConfig, perm: &[usize]) -> RealTensor {
    let (p, s, n) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let mut out = vec![0.0; img.numel()];
    for (dst, &src) in perm.iter().enumerate() {
        let (di, dj, si, sj) = (dst / n, dst % n, src / n, src % n);
        for c in 0..3 {
            for a in 0..p {
                for b in 0..p {
                    out[(c * s + di * p + a) * s + dj * p + b] = img.data()[(c * s + si * p + a) * s + sj * p + b];
                }
            }
        }
    }
    RealTensor::new(img.shape().to_vec(), out).unwrap()
}

fn permute_grid(t: &RealTensor, perm: &[usize]) -> RealTensor {
    RealTensor::new(t.shape().to_vec(), perm.iter().map(|&src| t.data()[src]).collect()).unwrap()
}

#[test]
fn pooled_logits_ignore_patch_order() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let mut w = synthetic_model(&cfg, &mut rng).unwrap();
    // Center-tap kernels keep the conv position-wise so the permutation
    // commutes with every layer.
    for layer in &mut w.layers {
        for (i, v) in layer.dconv_weight.data_mut().iter_mut().enumerate() {
            if i % 9 != 4 {
                *v = 0.0;
            }
        }
    }
    let positions = cfg.positions();
    let mut perm: Vec<usize> = (0..positions).collect();
    for i in (1..positions).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut wp = w.clone();
    for layer in &mut wp.layers {
        for stats in [&mut layer.prenorm, &mut layer.mixer_norm, &mut layer.channel_norm] {
            stats.mean = permute_grid(&stats.mean, &perm);
            stats.var = permute_grid(&stats.var, &perm);
        }
    }
    for b in 0..5 {
        let img = image(&random_images(&cfg, 1, &mut rng), &cfg, 0);
        let moved = permute_patches(&img, &cfg, &perm);
        let a = forward_plain_float(&w, &img).unwrap();
        let c = forward_plain_float(&wp, &moved).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-9, "image {b}");
        let fa = forward_plain_fixed(&w, &img, &fp16()).unwrap();
        let fc = forward_plain_fixed(&wp, &moved, &fp16()).unwrap();
        assert_eq!(fa, fc);
        // features move with the patches
        let feat_a = features(&w, &img).unwrap();
        let feat_c = features(&wp, &moved).unwrap();
        let (d, n2) = (cfg.embed_dim, positions);
        for k in 0..d {
            for (dst, &src) in perm.iter().enumerate() {
                assert!((feat_c.data()[k * n2 + dst] - feat_a.data()[k * n2 + src]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn doubling_head_doubles_logits() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let mut w = synthetic_model(&cfg, &mut rng).unwrap();
    w.head_bias = RealTensor::zeros(&[cfg.num_classes]);
    // on-grid weights so doubling commutes with encoding
    w.head_weight.data_mut().iter_mut().for_each(|v| *v = (*v * 65536.0).round() / 65536.0);
    let mut w2 = w.clone();
    w2.head_weight.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let images = random_images(&cfg, 8, &mut rng);
    let one = forward_plain_fixed(&w, &images, &fp16()).unwrap();
    let two = forward_plain_fixed(&w2, &images, &fp16()).unwrap();
    for (a, b) in one.data().iter().zip(two.data()) {
        let diff = (*b as i64).wrapping_sub((*a as i64).wrapping_mul(2));
        assert!(diff.abs() <= 1, "{diff} ulp");
    }
}

#[test]
fn fold_identity_statistics() {
    let folded = fold_norm(&NormStats::identity(4, 3, true), 3).unwrap();
    assert!(folded.scale.data().iter().all(|&s| (s - 1.0).abs() < 1e-12));
    assert!(folded.bias.data().iter().all(|&b| b == 0.0));
    assert_eq!(folded.scale.shape(), &[3, 4, 4]);
}

#[test]
fn fold_matches_direct_normalization() {
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    for trial in 0..100 {
        let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let eps = 1e-5;
        let mean = RealTensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let var = RealTensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let gamma = (trial % 2 == 0).then(|| RealTensor::new(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let stats = NormStats { mean: mean.clone(), var: var.clone(), gamma: gamma.clone(), eps };
        let folded = fold_norm(&stats, d).unwrap();
        for k in 0..d {
            let g = gamma.as_ref().map_or(1.0, |g| g.data()[k]);
            for p in 0..n * n {
                let x: f64 = rng.gen_range(-5.0..5.0);
                let direct = g * (x - mean.data()[p]) / (var.data()[p] + eps).sqrt();
                let i = k * n * n + p;
                let via = x * folded.scale.data()[i] + folded.bias.data()[i];
                assert!((direct - via).abs() < 1e-9);
                // input sitting at the mean normalizes to zero
                let at_mean = mean.data()[p] * folded.scale.data()[i] + folded.bias.data()[i];
                assert!(at_mean.abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fold_rejects_bad_statistics() {
    let mut stats = NormStats::identity(2, 2, true);
    stats.var.data_mut()[0] = -1.0;
    assert!(fold_norm(&stats, 2).is_err());
    assert!(fold_norm(&NormStats::identity(2, 3, true), 2).is_err());
}

#[test]
fn m16_has_about_two_million_parameters() {
    let count = ModelConfig::m(16).param_count() as f64;
    assert!((count - 2.2e6).abs() / 2.2e6 <= 0.05, "{count}");
}

#[test]
fn named_tensors_roundtrip() {
    let cfg = ModelConfig::toy();
    let w = synthetic_model(&cfg, &mut ChaCha20Rng::seed_from_u64(19)).unwrap();
    let back = ModelWeights::from_named(cfg, w.to_named()).unwrap();
    assert_eq!(back, w);
    let mut missing = w.to_named();
    missing.pop();
    assert!(ModelWeights::from_named(cfg, missing).is_err());
}
