//! `XPC1`: magic, version u16, party u8, square-layer count u32, then per
//! layer `count u64, a[count], a_sq[count]`; truncation-site count u32,
//! fractional bits u32, per site `count u64, r[count], r_trunc[count]`;
//! finally the dealer seed u64. Ring elements are u64.

use std::path::Path;

use xpi_core::{CorrelatedRandomness, PartyId, RingTensor, Share, SquarePair, TruncPair};

use super::{put_u64s, read_file, write_file, Reader, VERSION};
use crate::error::{Result, XpiError};

pub const MAGIC: &[u8; 4] = b"XPC1";

/// Serializes a fresh bundle. Fails if any correlation was already used.
pub fn encode_correlations(corr: &CorrelatedRandomness) -> Result<Vec<u8>> {
    let consumed = || XpiError::Invalid("cannot serialize a partially consumed correlation bundle".into());
    let squares: Vec<&SquarePair> = corr.square_pairs().collect::<Option<_>>().ok_or_else(consumed)?;
    let truncs: Vec<&TruncPair> = corr.trunc_pairs().collect::<Option<_>>().ok_or_else(consumed)?;
    let words: usize = squares.iter().map(|p| p.count()).chain(truncs.iter().map(|p| p.count())).sum();
    let mut out = Vec::with_capacity(64 + 16 * words);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(corr.party().index());
    out.extend_from_slice(&(squares.len() as u32).to_le_bytes());
    for p in squares {
        out.extend_from_slice(&(p.count() as u64).to_le_bytes());
        put_u64s(&mut out, p.a.tensor().data());
        put_u64s(&mut out, p.a_sq.tensor().data());
    }
    out.extend_from_slice(&(truncs.len() as u32).to_le_bytes());
    out.extend_from_slice(&corr.frac_bits().to_le_bytes());
    for p in truncs {
        out.extend_from_slice(&(p.count() as u64).to_le_bytes());
        put_u64s(&mut out, p.r.tensor().data());
        put_u64s(&mut out, p.r_trunc.tensor().data());
    }
    out.extend_from_slice(&corr.seed().to_le_bytes());
    Ok(out)
}

pub fn decode_correlations(bytes: &[u8]) -> Result<CorrelatedRandomness> {
    let mut r = Reader::new("XPC1 correlation file", bytes);
    r.magic(MAGIC)?;
    let raw_party = r.u8()?;
    let party = PartyId::from_index(raw_party).ok_or_else(|| r.err(format!("party id {raw_party}")))?;
    let flat = |party, data: Vec<u64>| -> Result<Share> {
        let n = data.len();
        Ok(Share::new(party, RingTensor::new(vec![n], data, 0)?))
    };
    let layers = r.u32()? as usize;
    let mut squares = Vec::with_capacity(layers.min(1 << 16));
    for _ in 0..layers {
        let n = r.len64()?;
        let a = flat(party, r.u64s(n)?)?;
        let a_sq = flat(party, r.u64s(n)?)?;
        squares.push(SquarePair { a, a_sq });
    }
    let sites = r.u32()? as usize;
    let frac_bits = r.u32()?;
    let mut truncs = Vec::with_capacity(sites.min(1 << 16));
    for _ in 0..sites {
        let n = r.len64()?;
        let rr = flat(party, r.u64s(n)?)?;
        let rt = flat(party, r.u64s(n)?)?;
        truncs.push(TruncPair { r: rr, r_trunc: rt });
    }
    let seed = r.u64()?;
    r.finish()?;
    Ok(CorrelatedRandomness::new(party, seed, frac_bits, squares, truncs))
}

pub fn write_correlations(path: &Path, corr: &CorrelatedRandomness) -> Result<()> {
    write_file(path, &encode_correlations(corr)?)
}

pub fn read_correlations(path: &Path) -> Result<CorrelatedRandomness> {
    decode_correlations(&read_file(path)?)
}
