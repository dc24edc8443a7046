use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Image channels consumed by the patch embedding.
pub const IN_CHANNELS: usize = 3;

/// Truncations per xMLP layer: pre-norm, depthwise conv, mixer post-norm,
/// `W_in`, square, `W_out`, channel post-norm.
pub const TRUNCATIONS_PER_LAYER: usize = 7;

/// xMLP topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// `d`, the embedding width.
    pub embed_dim: usize,
    /// Hidden width of the channel mixer.
    pub channel_mix_dim: usize,
    /// Number of xMLP layers, `B`.
    pub depth: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Small configuration used by tests and the CLI selftest.
    pub const fn toy() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            channel_mix_dim: 32,
            depth: 2,
            num_classes: 10,
        }
    }

    /// Shape of the MNIST-scale model the trainer exports.
    pub const fn mnist() -> Self {
        Self {
            image_size: 28,
            patch_size: 4,
            embed_dim: 64,
            channel_mix_dim: 64,
            depth: 4,
            num_classes: 10,
        }
    }

    /// Configuration M with `depth` layers, CIFAR-100 head.
    pub const fn m(depth: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 256,
            channel_mix_dim: 256,
            depth,
            num_classes: 100,
        }
    }

    pub const fn t(depth: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 384,
            channel_mix_dim: 384,
            depth,
            num_classes: 100,
        }
    }

    pub const fn s(depth: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 512,
            channel_mix_dim: 2048,
            depth,
            num_classes: 100,
        }
    }

    /// Looks up a named preset: `toy`, `mnist`, or `m16`/`t36`/`s12`-style
    /// names.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => return Some(Self::toy()),
            "mnist" => return Some(Self::mnist()),
            _ => {}
        }
        let (family, depth) = name.split_at(1.min(name.len()));
        let depth: usize = depth.parse().ok().filter(|&d| d > 0)?;
        match family {
            "m" | "M" => Some(Self::m(depth)),
            "t" | "T" => Some(Self::t(depth)),
            "s" | "S" => Some(Self::s(depth)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.channel_mix_dim,
            self.num_classes,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidModel(format!("zero dimension in {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidModel(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Patches per side, `n`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn positions(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length, `3 p^2`.
    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn image_numel(&self) -> usize {
        IN_CHANNELS * self.image_size * self.image_size
    }

    /// Learnable parameters of one xMLP layer: depthwise kernel and bias,
    /// the two channel-wise post-norm scales, and both dense layers with
    /// biases. Normalization statistics are buffers, not parameters.
    pub fn layer_param_count(&self) -> usize {
        let d = self.embed_dim;
        let c = self.channel_mix_dim;
        let dconv = d * 9 + d;
        let post_norms = 2 * d;
        let mlp = (d * c + c) + (c * d + d);
        dconv + post_norms + mlp
    }

    pub fn param_count(&self) -> usize {
        let embed = self.patch_dim() * self.embed_dim + self.embed_dim;
        let head = self.embed_dim * self.num_classes + self.num_classes;
        embed + self.depth * self.layer_param_count() + head
    }

    /// Elements squared per square layer, in consumption order.
    pub fn square_sites(&self, batch: usize) -> Vec<usize> {
        vec![batch * self.positions() * self.channel_mix_dim; self.depth]
    }

    /// Elements rescaled at each truncation, in program order.
    pub fn truncation_sites(&self, batch: usize) -> Vec<usize> {
        let grid = batch * self.embed_dim * self.positions();
        let hidden = batch * self.positions() * self.channel_mix_dim;
        let mut sites = vec![grid];
        for _ in 0..self.depth {
            sites.extend_from_slice(&[grid, grid, grid, hidden, hidden, grid, grid]);
        }
        sites.push(batch * self.embed_dim);
        sites.push(batch * self.num_classes);
        sites
    }
}
