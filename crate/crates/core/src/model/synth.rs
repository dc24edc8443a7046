//! Seeded synthetic weights, inputs and batch-statistics calibration, so
//! the private engine can be exercised without a trained checkpoint.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::model::config::{ModelConfig, IN_CHANNELS};
use crate::model::float::{channel_mlp, depthwise_conv, normalize, patch_embed, split_batch};
use crate::model::weights::{LayerWeights, ModelWeights, NormStats, DEFAULT_EPS};
use crate::real::RealTensor;

/// Uniform in `[-bound, bound)`, rounded to the nearest `f32` so the weights
/// survive the float32 weight file unchanged.
fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> RealTensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi) as f32 as f64).collect();
    RealTensor::new(shape.to_vec(), data).expect("sized")
}

fn sym(rng: &mut impl Rng, shape: &[usize], bound: f64) -> RealTensor {
    uniform(rng, shape, -bound, bound)
}

/// Random weights with identity normalization statistics; run
/// [`calibrate`] afterwards to give the norms realistic constants.
pub fn random_weights(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelWeights {
    let (d, c, n) = (cfg.embed_dim, cfg.channel_mix_dim, cfg.grid());
    let fan = |k: usize| libm::sqrt(3.0 / k as f64);
    let patch_weight = sym(rng, &[cfg.patch_dim(), d], fan(cfg.patch_dim()));
    let patch_bias = sym(rng, &[d], 0.1);
    let layers = (0..cfg.depth)
        .map(|_| {
            let mut mixer_norm = NormStats::identity(n, d, true);
            mixer_norm.gamma = Some(uniform(rng, &[d], 0.1, 0.3));
            let mut channel_norm = NormStats::identity(n, d, true);
            channel_norm.gamma = Some(uniform(rng, &[d], 0.1, 0.3));
            LayerWeights {
                prenorm: NormStats::identity(n, d, false),
                dconv_weight: sym(rng, &[d, 3, 3], 1.0 / 3.0),
                dconv_bias: sym(rng, &[d], 0.1),
                mixer_norm,
                w_in: sym(rng, &[d, c], fan(d)),
                b_in: sym(rng, &[c], 0.1),
                w_out: sym(rng, &[c, d], fan(c)),
                b_out: sym(rng, &[d], 0.1),
                channel_norm,
            }
        })
        .collect();
    ModelWeights {
        config: *cfg,
        patch_weight,
        patch_bias,
        layers,
        head_weight: sym(rng, &[d, cfg.num_classes], fan(d)),
        head_bias: sym(rng, &[cfg.num_classes], 0.1),
    }
}

/// `[batch, 3, H, W]` images with pixels uniform in `[-1, 1)`.
pub fn random_images(cfg: &ModelConfig, batch: usize, rng: &mut impl Rng) -> RealTensor {
    let s = cfg.image_size;
    uniform(rng, &[batch, IN_CHANNELS, s, s], -1.0, 1.0)
}

/// Per-position mean and population variance over samples and channels.
fn patch_stats(xs: &[RealTensor], eps: f64, gamma: Option<RealTensor>) -> NormStats {
    let (d, h, w) = (xs[0].shape()[0], xs[0].shape()[1], xs[0].shape()[2]);
    let positions = h * w;
    let count = (xs.len() * d) as f64;
    let mut mean = vec![0.0; positions];
    let mut sq = vec![0.0; positions];
    for x in xs {
        for (i, v) in x.data().iter().enumerate() {
            mean[i % positions] += v;
            sq[i % positions] += v * v;
        }
    }
    let mut var = vec![0.0; positions];
    for p in 0..positions {
        mean[p] /= count;
        var[p] = (sq[p] / count - mean[p] * mean[p]).max(0.0);
    }
    let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
    NormStats {
        mean: RealTensor::new(vec![h, w], round(mean)).expect("sized"),
        var: RealTensor::new(vec![h, w], round(var)).expect("sized"),
        gamma,
        eps: eps as f32 as f64,
    }
}

fn add(a: &RealTensor, b: &RealTensor) -> RealTensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    RealTensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Replaces every normalization site's running statistics with batch
/// statistics measured on `images`, site by site in forward order.
pub fn calibrate(weights: &mut ModelWeights, images: &RealTensor) -> Result<()> {
    let images = split_batch(&weights.config, images)?;
    let mut xs = images
        .iter()
        .map(|img| patch_embed(img, weights))
        .collect::<Result<Vec<_>>>()?;
    for layer in &mut weights.layers {
        layer.prenorm = patch_stats(&xs, DEFAULT_EPS, None);
        let convs = xs
            .iter()
            .map(|x| Ok(depthwise_conv(&normalize(x, &layer.prenorm)?, &layer.dconv_weight, &layer.dconv_bias)))
            .collect::<Result<Vec<_>>>()?;
        layer.mixer_norm = patch_stats(&convs, DEFAULT_EPS, layer.mixer_norm.gamma.take());
        let us = xs
            .iter()
            .zip(&convs)
            .map(|(x, conv)| Ok(add(&normalize(conv, &layer.mixer_norm)?, x)))
            .collect::<Result<Vec<_>>>()?;
        let mlps: Vec<RealTensor> = us.iter().map(|u| channel_mlp(u, layer)).collect();
        layer.channel_norm = patch_stats(&mlps, DEFAULT_EPS, layer.channel_norm.gamma.take());
        xs = us
            .iter()
            .zip(&mlps)
            .map(|(u, m)| Ok(add(&normalize(m, &layer.channel_norm)?, u)))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(())
}

/// Random weights calibrated on a seeded batch of random images.
pub fn synthetic_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelWeights> {
    let mut weights = random_weights(cfg, rng);
    let calib = random_images(cfg, 16, rng);
    calibrate(&mut weights, &calib)?;
    Ok(weights)
}
