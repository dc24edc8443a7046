//! `XMV1`: magic, version u16, count u32, image length u32, logits length
//! u32, then per vector the image and the expected logits as float32.

use std::path::Path;

use super::{put_f32s, read_file, write_file, Reader, VERSION};
use crate::error::{Result, XpiError};

pub const MAGIC: &[u8; 4] = b"XMV1";

#[derive(Debug, Clone, PartialEq)]
pub struct TestVector {
    pub image: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn encode_vectors(vectors: &[TestVector]) -> Result<Vec<u8>> {
    let (image_len, logits_len) = vectors.first().map_or((0, 0), |v| (v.image.len(), v.logits.len()));
    if vectors.iter().any(|v| v.image.len() != image_len || v.logits.len() != logits_len) {
        return Err(XpiError::Invalid("test vectors differ in length".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [vectors.len(), image_len, logits_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in vectors {
        put_f32s(&mut out, &v.image);
        put_f32s(&mut out, &v.logits);
    }
    Ok(out)
}

pub fn decode_vectors(bytes: &[u8]) -> Result<Vec<TestVector>> {
    let mut r = Reader::new("XMV1 test-vector file", bytes);
    r.magic(MAGIC)?;
    let count = r.u32()? as usize;
    let image_len = r.u32()? as usize;
    let logits_len = r.u32()? as usize;
    let per = (image_len + logits_len) * 4;
    if per.checked_mul(count).map_or(true, |n| n != r.remaining()) {
        return Err(r.err(format!("{count} vectors of {per} bytes do not match the {} byte body", r.remaining())));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let image = r.f32s(image_len)?;
        let logits = r.f32s(logits_len)?;
        out.push(TestVector { image, logits });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_vectors(path: &Path, vectors: &[TestVector]) -> Result<()> {
    write_file(path, &encode_vectors(vectors)?)
}

pub fn read_vectors(path: &Path) -> Result<Vec<TestVector>> {
    decode_vectors(&read_file(path)?)
}
