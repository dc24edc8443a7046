//! Quantized op program shared by the plaintext fixed-point forward pass and
//! the private evaluator.
//!
//! Tensors between ops are at scale `f`. Every multiplicative op (dense,
//! depthwise, affine, mean, square) produces scale `2f` and is followed by a
//! truncation; biases are encoded at `2f` and added before it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, IN_CHANNELS};
use crate::model::weights::{fold_norm, ModelWeights, NormStats};
use crate::real::RealTensor;
use crate::ring::{encode_fixed, encode_scalar, truncate_plain, FixedPointConfig, RingTensor};
use crate::sharing::PublicLinear;

/// Coarse classification used to check that squaring is the only
/// non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    /// Pure data movement (patch extraction, token/grid transposes).
    Permute,
    Affine,
    Conv,
    MatMul,
    Mean,
    /// Residual addition.
    Add,
    Square,
}

impl OpClass {
    pub fn is_linear(self) -> bool {
        !matches!(self, OpClass::Square)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    /// `[B, 3, H, W]` to tokens `[B * n^2, 3 p^2]`.
    Patchify { patch_size: usize, grid: usize },
    /// Tokens `[T, k]` times `weight [k, m]` plus `bias [m]` (scale `2f`).
    Dense { label: String, weight: RingTensor, bias: RingTensor },
    /// Tokens `[B * n^2, d]` to `[B, d, n, n]`.
    TokensToGrid { grid: usize },
    /// `[B, d, n, n]` to tokens `[B * n^2, d]`.
    GridToTokens { grid: usize },
    /// Depthwise 3x3 conv; `bias` is pre-broadcast to `[d, n, n]`.
    Depthwise { label: String, kernel: RingTensor, bias: RingTensor },
    /// Folded normalization, `scale` and `bias` both `[d, n, n]`.
    Affine { label: String, scale: RingTensor, bias: RingTensor },
    Square { label: String },
    /// `body(x) + x`.
    Residual { label: String, body: Vec<Op> },
    /// `[B, d, n, n]` to `[B, d]`: sum over positions times `inv_count`.
    MeanPool { label: String, inv_count: u64 },
}

impl Op {
    pub fn class(&self) -> OpClass {
        match self {
            Op::Patchify { .. } | Op::TokensToGrid { .. } | Op::GridToTokens { .. } => OpClass::Permute,
            Op::Dense { .. } => OpClass::MatMul,
            Op::Depthwise { .. } => OpClass::Conv,
            Op::Affine { .. } => OpClass::Affine,
            Op::Square { .. } => OpClass::Square,
            Op::Residual { .. } => OpClass::Add,
            Op::MeanPool { .. } => OpClass::Mean,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Op::Patchify { .. } => "patchify",
            Op::TokensToGrid { .. } => "tokens_to_grid",
            Op::GridToTokens { .. } => "grid_to_tokens",
            Op::Dense { label, .. }
            | Op::Depthwise { label, .. }
            | Op::Affine { label, .. }
            | Op::Square { label }
            | Op::Residual { label, .. }
            | Op::MeanPool { label, .. } => label,
        }
    }

    /// Whether the op's output is at scale `2f` and needs truncation.
    pub fn rescales(&self) -> bool {
        matches!(
            self,
            Op::Dense { .. } | Op::Depthwise { .. } | Op::Affine { .. } | Op::MeanPool { .. } | Op::Square { .. }
        )
    }

    /// The public multiplicative map (with bias) for linear rescaling ops.
    pub fn public_linear(&self) -> Option<PublicLinear<'_>> {
        match self {
            Op::Dense { weight, bias, .. } => Some(PublicLinear::MatMul {
                weight,
                bias: Some(bias),
            }),
            Op::Depthwise { kernel, bias, .. } => Some(PublicLinear::Depthwise {
                kernel,
                bias: Some(bias),
            }),
            Op::Affine { scale, bias, .. } => Some(PublicLinear::Affine {
                scale,
                bias: Some(bias),
            }),
            _ => None,
        }
    }
}

/// Extracts non-overlapping patches, channel-major then row-major pixels.
pub fn patchify(x: &RingTensor, patch_size: usize, grid: usize) -> Result<RingTensor> {
    let s = patch_size * grid;
    let batch = match x.shape() {
        &[b, c, h, w] if c == IN_CHANNELS && h == s && w == s => b,
        sh => return Err(Error::shape("patchify", sh, &[IN_CHANNELS, s, s])),
    };
    let p = patch_size;
    let dim = IN_CHANNELS * p * p;
    let mut out = vec![0u64; batch * grid * grid * dim];
    let src = x.data();
    for b in 0..batch {
        for pi in 0..grid {
            for pj in 0..grid {
                let row = ((b * grid + pi) * grid + pj) * dim;
                for ch in 0..IN_CHANNELS {
                    for u in 0..p {
                        for v in 0..p {
                            out[row + (ch * p + u) * p + v] =
                                src[((b * IN_CHANNELS + ch) * s + pi * p + u) * s + pj * p + v];
                        }
                    }
                }
            }
        }
    }
    RingTensor::new(vec![batch * grid * grid, dim], out, x.frac_bits())
}

pub fn tokens_to_grid(x: &RingTensor, grid: usize) -> Result<RingTensor> {
    let positions = grid * grid;
    let (tokens, d) = match x.shape() {
        &[t, d] if t % positions == 0 => (t, d),
        sh => return Err(Error::shape("tokens_to_grid", sh, &[positions])),
    };
    let batch = tokens / positions;
    let mut out = vec![0u64; x.numel()];
    for b in 0..batch {
        for pos in 0..positions {
            for k in 0..d {
                out[(b * d + k) * positions + pos] = x.data()[(b * positions + pos) * d + k];
            }
        }
    }
    RingTensor::new(vec![batch, d, grid, grid], out, x.frac_bits())
}

pub fn grid_to_tokens(x: &RingTensor, grid: usize) -> Result<RingTensor> {
    let (batch, d) = match x.shape() {
        &[b, d, h, w] if h == grid && w == grid => (b, d),
        sh => return Err(Error::shape("grid_to_tokens", sh, &[grid, grid])),
    };
    let positions = grid * grid;
    let mut out = vec![0u64; x.numel()];
    for b in 0..batch {
        for k in 0..d {
            for pos in 0..positions {
                out[(b * positions + pos) * d + k] = x.data()[(b * d + k) * positions + pos];
            }
        }
    }
    RingTensor::new(vec![batch * positions, d], out, x.frac_bits())
}

/// Sums `[B, d, n, n]` over positions into `[B, d]`, then multiplies by
/// `inv_count` (scale `f`).
pub fn pool_sum(x: &RingTensor, inv_count: u64, f: u32) -> Result<RingTensor> {
    let (batch, d) = match x.shape() {
        &[b, d, _, _] => (b, d),
        sh => return Err(Error::shape("mean_pool", sh, &[])),
    };
    let positions = x.numel() / (batch * d).max(1);
    let sums = x
        .data()
        .chunks_exact(positions.max(1))
        .map(|c| c.iter().fold(0u64, |a, e| a.wrapping_add(*e)))
        .collect();
    Ok(RingTensor::new(vec![batch, d], sums, x.frac_bits())?.scalar_mul(inv_count, f))
}

/// Applies a non-rescaling, non-residual op.
pub fn apply_permute(op: &Op, x: &RingTensor) -> Result<RingTensor> {
    match op {
        Op::Patchify { patch_size, grid } => patchify(x, *patch_size, *grid),
        Op::TokensToGrid { grid } => tokens_to_grid(x, *grid),
        Op::GridToTokens { grid } => grid_to_tokens(x, *grid),
        _ => Err(Error::InvalidModel(format!("{} is not a permutation", op.label()))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub config: ModelConfig,
    pub frac_bits: u32,
    pub ops: Vec<Op>,
}

fn quantize(t: &RealTensor, f: u32, name: &str) -> Result<RingTensor> {
    encode_fixed(t, f).map_err(|e| Error::InvalidModel(format!("{name}: {e}")))
}

/// Repeats a per-channel `[d]` vector over `n x n` positions.
fn per_channel(v: &RealTensor, grid: usize) -> RealTensor {
    let positions = grid * grid;
    let data = v
        .data()
        .iter()
        .flat_map(|&x| core::iter::repeat(x).take(positions))
        .collect();
    RealTensor::new(vec![v.numel(), grid, grid], data).expect("sized")
}

fn norm_op(label: String, stats: &NormStats, d: usize, f: u32) -> Result<Op> {
    let folded = fold_norm(stats, d)?;
    Ok(Op::Affine {
        scale: quantize(&folded.scale, f, &label)?,
        bias: quantize(&folded.bias, 2 * f, &label)?,
        label,
    })
}

impl Program {
    /// Quantizes `weights` at `frac_bits` into the xMLP op sequence.
    pub fn compile(weights: &ModelWeights, frac_bits: u32) -> Result<Self> {
        weights.validate()?;
        let cfg = weights.config;
        let f = frac_bits;
        let (d, n) = (cfg.embed_dim, cfg.grid());
        let mut ops = vec![
            Op::Patchify {
                patch_size: cfg.patch_size,
                grid: n,
            },
            Op::Dense {
                label: "patch_embed".into(),
                weight: quantize(&weights.patch_weight, f, "patch_embed.weight")?,
                bias: quantize(&weights.patch_bias, 2 * f, "patch_embed.bias")?,
            },
            Op::TokensToGrid { grid: n },
        ];
        for (i, layer) in weights.layers.iter().enumerate() {
            let p = format!("layer{i}");
            let patch_body = vec![
                norm_op(format!("{p}.prenorm"), &layer.prenorm, d, f)?,
                Op::Depthwise {
                    label: format!("{p}.dconv"),
                    kernel: quantize(&layer.dconv_weight, f, "dconv.weight")?,
                    bias: quantize(&per_channel(&layer.dconv_bias, n), 2 * f, "dconv.bias")?,
                },
                norm_op(format!("{p}.mixer_norm"), &layer.mixer_norm, d, f)?,
            ];
            let channel_body = vec![
                Op::GridToTokens { grid: n },
                Op::Dense {
                    label: format!("{p}.w_in"),
                    weight: quantize(&layer.w_in, f, "w_in.weight")?,
                    bias: quantize(&layer.b_in, 2 * f, "w_in.bias")?,
                },
                Op::Square {
                    label: format!("{p}.square"),
                },
                Op::Dense {
                    label: format!("{p}.w_out"),
                    weight: quantize(&layer.w_out, f, "w_out.weight")?,
                    bias: quantize(&layer.b_out, 2 * f, "w_out.bias")?,
                },
                Op::TokensToGrid { grid: n },
                norm_op(format!("{p}.channel_norm"), &layer.channel_norm, d, f)?,
            ];
            ops.push(Op::Residual {
                label: format!("{p}.patch_mixer"),
                body: patch_body,
            });
            ops.push(Op::Residual {
                label: format!("{p}.channel_mixer"),
                body: channel_body,
            });
        }
        let inv = encode_scalar(1.0 / cfg.positions() as f64, f)
            .ok_or_else(|| Error::InvalidModel("pooling constant out of range".into()))?;
        ops.push(Op::MeanPool {
            label: "pool".into(),
            inv_count: inv,
        });
        ops.push(Op::Dense {
            label: "head".into(),
            weight: quantize(&weights.head_weight, f, "head.weight")?,
            bias: quantize(&weights.head_bias, 2 * f, "head.bias")?,
        });
        Ok(Self {
            config: cfg,
            frac_bits: f,
            ops,
        })
    }

    /// Visits every op depth-first, residual blocks before their bodies.
    pub fn visit(&self, mut f: impl FnMut(&Op)) {
        fn walk(ops: &[Op], f: &mut impl FnMut(&Op)) {
            for op in ops {
                f(op);
                if let Op::Residual { body, .. } = op {
                    walk(body, f);
                }
            }
        }
        walk(&self.ops, &mut f);
    }

    pub fn count_class(&self, class: OpClass) -> usize {
        let mut n = 0;
        self.visit(|op| n += usize::from(op.class() == class));
        n
    }

    /// Evaluates the program on a plaintext `[B, 3, H, W]` tensor at scale
    /// `f`, truncating exactly after every rescaling op.
    pub fn eval_plain(&self, input: &RingTensor) -> Result<RingTensor> {
        if input.frac_bits() != self.frac_bits {
            return Err(Error::ScaleMismatch {
                op: "eval_plain",
                left: input.frac_bits(),
                right: self.frac_bits,
            });
        }
        self.eval_ops(&self.ops, input.clone())
    }

    fn eval_ops(&self, ops: &[Op], mut x: RingTensor) -> Result<RingTensor> {
        let f = self.frac_bits;
        for op in ops {
            x = match op {
                Op::Residual { body, .. } => self.eval_ops(body, x.clone())?.add(&x)?,
                Op::Square { .. } => truncate_plain(&x.mul(&x)?, f),
                Op::MeanPool { inv_count, .. } => truncate_plain(&pool_sum(&x, *inv_count, f)?, f),
                _ => match op.public_linear() {
                    Some(layer) => truncate_plain(&layer.eval_plain(&x)?, f),
                    None => apply_permute(op, &x)?,
                },
            };
        }
        Ok(x)
    }
}

/// Fixed-point logits `[B, classes]` for a `[B, 3, H, W]` or `[3, H, W]`
/// image tensor.
pub fn forward_plain_fixed(
    weights: &ModelWeights,
    images: &RealTensor,
    fp: &FixedPointConfig,
) -> Result<RingTensor> {
    let program = Program::compile(weights, fp.frac_bits())?;
    let input = encode_images(&weights.config, images, fp.frac_bits())?;
    program.eval_plain(&input)
}

/// Encodes images as a `[B, 3, H, W]` ring tensor.
pub fn encode_images(cfg: &ModelConfig, images: &RealTensor, f: u32) -> Result<RingTensor> {
    let s = cfg.image_size;
    let batch = match images.shape() {
        &[c, h, w] if c == IN_CHANNELS && h == s && w == s => 1,
        &[b, c, h, w] if c == IN_CHANNELS && h == s && w == s => b,
        sh => return Err(Error::shape("images", sh, &[IN_CHANNELS, s, s])),
    };
    encode_fixed(images, f)?.reshape(&[batch, IN_CHANNELS, s, s])
}
