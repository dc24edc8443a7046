//! Model parameters, normalization statistics and their folding into
//! per-position affine constants.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::real::RealTensor;

/// Running statistics of one patch-wise normalization site.
///
/// `mean` and `var` are per patch position (`[n, n]`); `gamma` is the
/// channel-wise scale (`[d]`), absent for the pre-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: RealTensor,
    pub var: RealTensor,
    pub gamma: Option<RealTensor>,
    pub eps: f64,
}

pub const DEFAULT_EPS: f64 = 1e-5;

impl NormStats {
    /// Statistics that fold to scale 1, bias 0.
    pub fn identity(grid: usize, embed_dim: usize, with_gamma: bool) -> Self {
        Self {
            mean: RealTensor::zeros(&[grid, grid]),
            var: RealTensor::filled(&[grid, grid], 1.0 - DEFAULT_EPS),
            gamma: with_gamma.then(|| RealTensor::filled(&[embed_dim], 1.0)),
            eps: DEFAULT_EPS,
        }
    }
}

/// Folded normalization: `y = x * scale + bias`, both `[d, n, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormConstants {
    pub scale: RealTensor,
    pub bias: RealTensor,
}

/// Folds running statistics into the affine map
/// `scale = gamma_k / sqrt(var_ij + eps)`, `bias = -mean_ij * scale`.
pub fn fold_norm(stats: &NormStats, embed_dim: usize) -> Result<NormConstants> {
    let grid_shape = stats.mean.shape();
    if grid_shape.len() != 2 || stats.var.shape() != grid_shape {
        return Err(Error::shape("fold_norm", stats.mean.shape(), stats.var.shape()));
    }
    if let Some(g) = &stats.gamma {
        if g.shape() != [embed_dim] {
            return Err(Error::shape("fold_norm", g.shape(), &[embed_dim]));
        }
        if !g.is_finite() {
            return Err(Error::InvalidNorm("gamma".into()));
        }
    }
    if !stats.mean.is_finite() || !stats.eps.is_finite() {
        return Err(Error::InvalidNorm("mean".into()));
    }
    let positions = stats.mean.numel();
    let mut inv_std = Vec::with_capacity(positions);
    for &v in stats.var.data() {
        let denom = v + stats.eps;
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::InvalidNorm("var + eps".into()));
        }
        inv_std.push(1.0 / libm::sqrt(denom));
    }
    let mut scale = Vec::with_capacity(embed_dim * positions);
    let mut bias = Vec::with_capacity(embed_dim * positions);
    for k in 0..embed_dim {
        let g = stats.gamma.as_ref().map_or(1.0, |g| g.data()[k]);
        for (pos, &s) in inv_std.iter().enumerate() {
            let sc = g * s;
            scale.push(sc);
            bias.push(-stats.mean.data()[pos] * sc);
        }
    }
    let shape = vec![embed_dim, grid_shape[0], grid_shape[1]];
    Ok(NormConstants {
        scale: RealTensor::new(shape.clone(), scale)?,
        bias: RealTensor::new(shape, bias)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub prenorm: NormStats,
    /// `[d, 3, 3]`
    pub dconv_weight: RealTensor,
    /// `[d]`
    pub dconv_bias: RealTensor,
    pub mixer_norm: NormStats,
    /// `[d, c]`
    pub w_in: RealTensor,
    /// `[c]`
    pub b_in: RealTensor,
    /// `[c, d]`
    pub w_out: RealTensor,
    /// `[d]`
    pub b_out: RealTensor,
    pub channel_norm: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[3 p^2, d]`, rows in channel-major then row-major pixel order.
    pub patch_weight: RealTensor,
    pub patch_bias: RealTensor,
    pub layers: Vec<LayerWeights>,
    /// `[d, classes]`
    pub head_weight: RealTensor,
    pub head_bias: RealTensor,
}

fn expect(t: &RealTensor, shape: &[usize], name: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InvalidModel(format!(
            "{name}: expected shape {shape:?}, found {:?}",
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::InvalidModel(format!("{name}: non-finite values")));
    }
    Ok(())
}

fn expect_norm(s: &NormStats, cfg: &ModelConfig, gamma: bool, name: &str) -> Result<()> {
    let n = cfg.grid();
    expect(&s.mean, &[n, n], &format!("{name}.mean"))?;
    expect(&s.var, &[n, n], &format!("{name}.var"))?;
    match (&s.gamma, gamma) {
        (Some(g), true) => expect(g, &[cfg.embed_dim], &format!("{name}.gamma"))?,
        (None, false) => {}
        _ => return Err(Error::InvalidModel(format!("{name}: unexpected gamma presence"))),
    }
    fold_norm(s, cfg.embed_dim).map(|_| ())
}

impl ModelWeights {
    /// Weights that make every xMLP branch output zero and every norm the
    /// identity.
    pub fn zeros(config: ModelConfig) -> Self {
        let (d, c, n) = (config.embed_dim, config.channel_mix_dim, config.grid());
        let layers = (0..config.depth)
            .map(|_| LayerWeights {
                prenorm: NormStats::identity(n, d, false),
                dconv_weight: RealTensor::zeros(&[d, 3, 3]),
                dconv_bias: RealTensor::zeros(&[d]),
                mixer_norm: NormStats::identity(n, d, true),
                w_in: RealTensor::zeros(&[d, c]),
                b_in: RealTensor::zeros(&[c]),
                w_out: RealTensor::zeros(&[c, d]),
                b_out: RealTensor::zeros(&[d]),
                channel_norm: NormStats::identity(n, d, true),
            })
            .collect();
        Self {
            config,
            patch_weight: RealTensor::zeros(&[config.patch_dim(), d]),
            patch_bias: RealTensor::zeros(&[d]),
            layers,
            head_weight: RealTensor::zeros(&[d, config.num_classes]),
            head_bias: RealTensor::zeros(&[config.num_classes]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (d, c) = (cfg.embed_dim, cfg.channel_mix_dim);
        expect(&self.patch_weight, &[cfg.patch_dim(), d], "patch_embed.weight")?;
        expect(&self.patch_bias, &[d], "patch_embed.bias")?;
        if self.layers.len() != cfg.depth {
            return Err(Error::InvalidModel(format!(
                "expected {} layers, found {}",
                cfg.depth,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            expect_norm(&l.prenorm, cfg, false, &format!("{p}.prenorm"))?;
            expect(&l.dconv_weight, &[d, 3, 3], &format!("{p}.dconv.weight"))?;
            expect(&l.dconv_bias, &[d], &format!("{p}.dconv.bias"))?;
            expect_norm(&l.mixer_norm, cfg, true, &format!("{p}.mixer_norm"))?;
            expect(&l.w_in, &[d, c], &format!("{p}.w_in.weight"))?;
            expect(&l.b_in, &[c], &format!("{p}.w_in.bias"))?;
            expect(&l.w_out, &[c, d], &format!("{p}.w_out.weight"))?;
            expect(&l.b_out, &[d], &format!("{p}.w_out.bias"))?;
            expect_norm(&l.channel_norm, cfg, true, &format!("{p}.channel_norm"))?;
        }
        expect(&self.head_weight, &[d, cfg.num_classes], "head.weight")?;
        expect(&self.head_bias, &[cfg.num_classes], "head.bias")?;
        Ok(())
    }

    /// Flattens into the named-tensor layout of the weight file.
    pub fn to_named(&self) -> Vec<(String, RealTensor)> {
        let mut out = vec![
            ("patch_embed.weight".into(), self.patch_weight.clone()),
            ("patch_embed.bias".into(), self.patch_bias.clone()),
        ];
        let norm = |out: &mut Vec<(String, RealTensor)>, name: String, s: &NormStats| {
            out.push((format!("{name}.mean"), s.mean.clone()));
            out.push((format!("{name}.var"), s.var.clone()));
            if let Some(g) = &s.gamma {
                out.push((format!("{name}.gamma"), g.clone()));
            }
            out.push((format!("{name}.eps"), RealTensor::filled(&[1], s.eps)));
        };
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            norm(&mut out, format!("{p}.prenorm"), &l.prenorm);
            out.push((format!("{p}.dconv.weight"), l.dconv_weight.clone()));
            out.push((format!("{p}.dconv.bias"), l.dconv_bias.clone()));
            norm(&mut out, format!("{p}.mixer_norm"), &l.mixer_norm);
            out.push((format!("{p}.w_in.weight"), l.w_in.clone()));
            out.push((format!("{p}.w_in.bias"), l.b_in.clone()));
            out.push((format!("{p}.w_out.weight"), l.w_out.clone()));
            out.push((format!("{p}.w_out.bias"), l.b_out.clone()));
            norm(&mut out, format!("{p}.channel_norm"), &l.channel_norm);
        }
        out.push(("head.weight".into(), self.head_weight.clone()));
        out.push(("head.bias".into(), self.head_bias.clone()));
        out
    }

    /// Rebuilds weights from named tensors and validates every shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, RealTensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, RealTensor> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::InvalidModel(format!("duplicate tensor {name}")));
            }
        }
        let mut get = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::InvalidModel(format!("missing tensor {name}")))
        };
        fn read_norm(
            get: &mut impl FnMut(&str) -> Result<RealTensor>,
            name: &str,
            gamma: bool,
        ) -> Result<NormStats> {
            let mean = get(&format!("{name}.mean"))?;
            let var = get(&format!("{name}.var"))?;
            let gamma = if gamma { Some(get(&format!("{name}.gamma"))?) } else { None };
            let eps = get(&format!("{name}.eps"))?;
            if eps.numel() != 1 {
                return Err(Error::InvalidModel(format!("{name}.eps must hold one value")));
            }
            Ok(NormStats {
                mean,
                var,
                gamma,
                eps: eps.data()[0],
            })
        }
        let patch_weight = get("patch_embed.weight")?;
        let patch_bias = get("patch_embed.bias")?;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                prenorm: read_norm(&mut get, &format!("{p}.prenorm"), false)?,
                dconv_weight: get(&format!("{p}.dconv.weight"))?,
                dconv_bias: get(&format!("{p}.dconv.bias"))?,
                mixer_norm: read_norm(&mut get, &format!("{p}.mixer_norm"), true)?,
                w_in: get(&format!("{p}.w_in.weight"))?,
                b_in: get(&format!("{p}.w_in.bias"))?,
                w_out: get(&format!("{p}.w_out.weight"))?,
                b_out: get(&format!("{p}.w_out.bias"))?,
                channel_norm: read_norm(&mut get, &format!("{p}.channel_norm"), true)?,
            });
        }
        let head_weight = get("head.weight")?;
        let head_bias = get("head.bias")?;
        drop(get);
        if let Some(extra) = map.keys().next() {
            return Err(Error::InvalidModel(format!("unexpected tensor {extra}")));
        }
        let weights = Self {
            config,
            patch_weight,
            patch_bias,
            layers,
            head_weight,
            head_bias,
        };
        weights.validate()?;
        Ok(weights)
    }
}
