//! Double-precision reference forward pass, one image at a time.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, IN_CHANNELS};
use crate::model::weights::{fold_norm, LayerWeights, ModelWeights, NormConstants, NormStats};
use crate::real::RealTensor;

/// `[3, H, W]` image to `[d, n, n]` embeddings.
pub fn patch_embed(image: &RealTensor, weights: &ModelWeights) -> Result<RealTensor> {
    let cfg = &weights.config;
    let (s, p, n, d) = (cfg.image_size, cfg.patch_size, cfg.grid(), cfg.embed_dim);
    if image.shape() != [IN_CHANNELS, s, s] {
        return Err(Error::shape("patch_embed", image.shape(), &[IN_CHANNELS, s, s]));
    }
    let w = weights.patch_weight.data();
    let mut out = vec![0.0; d * n * n];
    let mut patch = vec![0.0; cfg.patch_dim()];
    for pi in 0..n {
        for pj in 0..n {
            for ch in 0..IN_CHANNELS {
                for u in 0..p {
                    for v in 0..p {
                        patch[(ch * p + u) * p + v] = image.data()[(ch * s + pi * p + u) * s + pj * p + v];
                    }
                }
            }
            for k in 0..d {
                let mut acc = weights.patch_bias.data()[k];
                for (q, &x) in patch.iter().enumerate() {
                    acc += x * w[q * d + k];
                }
                out[(k * n + pi) * n + pj] = acc;
            }
        }
    }
    RealTensor::new(vec![d, n, n], out)
}

pub fn apply_norm(x: &RealTensor, norm: &NormConstants) -> RealTensor {
    let data = x
        .data()
        .iter()
        .zip(norm.scale.data().iter().zip(norm.bias.data()))
        .map(|(v, (s, b))| v * s + b)
        .collect();
    RealTensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn normalize(x: &RealTensor, stats: &NormStats) -> Result<RealTensor> {
    let d = x.shape()[0];
    Ok(apply_norm(x, &fold_norm(stats, d)?))
}

/// Depthwise 3x3 conv with zero padding on `[d, n, n]`.
pub fn depthwise_conv(x: &RealTensor, kernel: &RealTensor, bias: &RealTensor) -> RealTensor {
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; d * h * w];
    for c in 0..d {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias.data()[c];
                for u in 0..3 {
                    for v in 0..3 {
                        let (ii, jj) = (i as isize + u as isize - 1, j as isize + v as isize - 1);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        acc += kernel.data()[c * 9 + u * 3 + v] * x.data()[(c * h + ii as usize) * w + jj as usize];
                    }
                }
                out[(c * h + i) * w + j] = acc;
            }
        }
    }
    RealTensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn add(a: &RealTensor, b: &RealTensor) -> RealTensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    RealTensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Branch of the patch mixer before the residual: `PostNorm(DConv(PreNorm(X)))`.
pub fn patch_mixer_branch(x: &RealTensor, layer: &LayerWeights) -> Result<RealTensor> {
    let pre = normalize(x, &layer.prenorm)?;
    let conv = depthwise_conv(&pre, &layer.dconv_weight, &layer.dconv_bias);
    normalize(&conv, &layer.mixer_norm)
}

/// `U = PostNorm(DConv(PreNorm(X))) + X`.
pub fn patch_mixer(x: &RealTensor, layer: &LayerWeights) -> Result<RealTensor> {
    if x.shape().len() != 3 || layer.dconv_weight.shape()[0] != x.shape()[0] {
        return Err(Error::shape("patch_mixer", x.shape(), layer.dconv_weight.shape()));
    }
    Ok(add(&patch_mixer_branch(x, layer)?, x))
}

/// Token MLP before the post-norm: `W_out((W_in V) o (W_in V))`, returned
/// in `[d, n, n]` layout.
pub fn channel_mlp(u: &RealTensor, layer: &LayerWeights) -> RealTensor {
    let (d, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let c = layer.b_in.numel();
    let positions = h * w;
    let mut out = vec![0.0; d * positions];
    let mut hidden = vec![0.0; c];
    for pos in 0..positions {
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut acc = layer.b_in.data()[j];
            for k in 0..d {
                acc += u.data()[k * positions + pos] * layer.w_in.data()[k * c + j];
            }
            *hj = acc * acc;
        }
        for k in 0..d {
            let mut acc = layer.b_out.data()[k];
            for (j, hj) in hidden.iter().enumerate() {
                acc += hj * layer.w_out.data()[j * d + k];
            }
            out[k * positions + pos] = acc;
        }
    }
    RealTensor::new(u.shape().to_vec(), out).expect("same shape")
}

/// `Y = PostNorm(Reshape^-1(W_out((W_in V) o (W_in V)))) + U`.
pub fn channel_mixer(u: &RealTensor, layer: &LayerWeights) -> Result<RealTensor> {
    if u.shape().len() != 3 || layer.w_in.shape()[0] != u.shape()[0] {
        return Err(Error::shape("channel_mixer", u.shape(), layer.w_in.shape()));
    }
    let branch = normalize(&channel_mlp(u, layer), &layer.channel_norm)?;
    Ok(add(&branch, u))
}

/// Average over patch positions: `[d, n, n]` to `[d]`.
pub fn mean_pool(x: &RealTensor) -> Vec<f64> {
    let d = x.shape()[0];
    let positions = x.numel() / d;
    x.data()
        .chunks_exact(positions)
        .map(|c| c.iter().sum::<f64>() / positions as f64)
        .collect()
}

pub fn head(pooled: &[f64], weights: &ModelWeights) -> Vec<f64> {
    let classes = weights.config.num_classes;
    (0..classes)
        .map(|j| {
            pooled
                .iter()
                .enumerate()
                .fold(weights.head_bias.data()[j], |acc, (k, x)| acc + x * weights.head_weight.data()[k * classes + j])
        })
        .collect()
}

/// Embeddings after all xMLP layers, `[d, n, n]`.
pub fn features(weights: &ModelWeights, image: &RealTensor) -> Result<RealTensor> {
    let mut x = patch_embed(image, weights)?;
    for layer in &weights.layers {
        let u = patch_mixer(&x, layer)?;
        x = channel_mixer(&u, layer)?;
    }
    Ok(x)
}

/// Logits of one `[3, H, W]` image.
pub fn forward_plain_float(weights: &ModelWeights, image: &RealTensor) -> Result<RealTensor> {
    let x = features(weights, image)?;
    let logits = head(&mean_pool(&x), weights);
    RealTensor::new(vec![weights.config.num_classes], logits)
}

/// Splits a `[batch, 3, H, W]` (or single `[3, H, W]`) tensor into images.
pub fn split_batch(cfg: &ModelConfig, images: &RealTensor) -> Result<Vec<RealTensor>> {
    let s = cfg.image_size;
    let single = [IN_CHANNELS, s, s];
    match images.shape() {
        sh if sh == single => Ok(vec![images.clone()]),
        [_, rest @ ..] if rest == single => Ok(images
            .data()
            .chunks_exact(cfg.image_numel())
            .map(|c| RealTensor::new(single.to_vec(), c.to_vec()).expect("chunk"))
            .collect()),
        sh => Err(Error::shape("images", sh, &single)),
    }
}
