//! `XMW1`: magic, version u16, the six `ModelConfig` fields as u32, tensor
//! count u32, a directory of `(name_len u16, name, rank u8, dims u64..,
//! dtype u8)` entries, then every tensor's float32 data in directory order.

use std::path::Path;

use sha2::{Digest, Sha256};
use xpi_core::{ModelConfig, ModelWeights, RealTensor};

use super::{put_f32s, read_file, write_file, Reader, VERSION};
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"XMW1";
const DTYPE_F32: u8 = 0;

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let c = &weights.config;
    let named = weights.to_named();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.image_size, c.patch_size, c.embed_dim, c.channel_mix_dim, c.depth, c.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
    }
    for (_, t) in &named {
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new("XMW1 weight file", bytes);
    r.magic(MAGIC)?;
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let [image_size, patch_size, embed_dim, channel_mix_dim, depth, num_classes] = fields;
    let config = ModelConfig { image_size, patch_size, embed_dim, channel_mix_dim, depth, num_classes };
    config.validate()?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| r.err("dimension overflow"))?);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(r.err(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        dir.push((name, shape));
    }
    let mut named = Vec::with_capacity(dir.len());
    for (name, shape) in dir {
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err(format!("tensor {name}: size overflow")))?;
        let data = r.f32s(numel)?;
        named.push((name, RealTensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(ModelWeights::from_named(config, named)?)
}

/// SHA-256 of the serialized weights; both parties compare it at handshake.
pub fn model_hash(weights: &ModelWeights) -> [u8; 32] {
    Sha256::digest(encode_weights(weights)).into()
}

pub fn write_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    write_file(path, &encode_weights(weights))
}

pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    decode_weights(&read_file(path)?)
}
