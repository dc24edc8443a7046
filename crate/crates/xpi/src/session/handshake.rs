use xpi_core::{FixedPointConfig, PartyId, TruncMode};

use crate::error::{Result, XpiError};
use crate::transcript::Setup;
use crate::transport::{Endpoint, Frame, MsgType};

pub const PROTOCOL_VERSION: u16 = 1;
const HELLO_LEN: usize = 53;

/// Everything both parties must agree on before the online phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionParams {
    /// SHA-256 of the serialized weights.
    pub model_hash: [u8; 32],
    pub frac_bits: u32,
    pub trunc_mode: TruncMode,
    pub batch: usize,
    /// Dealer seed of the correlation bundle; catches mismatched bundles.
    pub corr_seed: u64,
    pub reveal_to_server: bool,
}

impl SessionParams {
    pub fn fp(&self) -> Result<FixedPointConfig> {
        Ok(FixedPointConfig::new(self.frac_bits, self.trunc_mode)?)
    }

    fn encode(&self, role: PartyId) -> Vec<u8> {
        let mut out = Vec::with_capacity(HELLO_LEN);
        out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
        out.push(role.index());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&self.frac_bits.to_le_bytes());
        out.push(self.trunc_mode.to_u8());
        out.extend_from_slice(&(self.batch as u32).to_le_bytes());
        out.extend_from_slice(&self.corr_seed.to_le_bytes());
        out.push(u8::from(self.reveal_to_server));
        out
    }
}

/// Peer's view, decoded field by field so a mismatch can name the field.
struct PeerHello {
    version: u16,
    role: u8,
    model_hash: [u8; 32],
    frac_bits: u32,
    trunc_mode: u8,
    batch: u32,
    corr_seed: u64,
    reveal: u8,
}

fn decode(p: &[u8]) -> Result<PeerHello> {
    if p.len() != HELLO_LEN {
        return Err(XpiError::Handshake(format!("hello of {} bytes, expected {HELLO_LEN}", p.len())));
    }
    let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().expect("4 bytes"));
    Ok(PeerHello {
        version: u16::from_le_bytes([p[0], p[1]]),
        role: p[2],
        model_hash: p[3..35].try_into().expect("32 bytes"),
        frac_bits: u32_at(35),
        trunc_mode: p[39],
        batch: u32_at(40),
        corr_seed: u64::from_le_bytes(p[44..52].try_into().expect("8 bytes")),
        reveal: p[52],
    })
}

/// Exchanges parameters with the peer and fails with a typed error on the
/// first disagreement. Both sides see the same pair of hellos, so both
/// abort together.
pub fn handshake(ep: &mut Endpoint, role: PartyId, params: &SessionParams) -> Result<Setup> {
    let start = std::time::Instant::now();
    let before = ep.counters();
    let reply = ep.exchange_frame(&Frame::new(MsgType::Handshake, params.encode(role)))?;
    let peer = decode(&reply.payload)?;
    let mismatch = |field: &str, ours: String, theirs: String| {
        Err(XpiError::Handshake(format!("{field}: ours {ours}, peer {theirs}")))
    };
    if peer.version != PROTOCOL_VERSION {
        return mismatch("protocol version", PROTOCOL_VERSION.to_string(), peer.version.to_string());
    }
    if peer.role != role.peer().index() {
        return mismatch("role", role.to_string(), format!("party {}", peer.role));
    }
    if peer.model_hash != params.model_hash {
        return mismatch("model hash", hex::encode(params.model_hash), hex::encode(peer.model_hash));
    }
    if peer.frac_bits != params.frac_bits {
        return mismatch("frac_bits", params.frac_bits.to_string(), peer.frac_bits.to_string());
    }
    if peer.trunc_mode != params.trunc_mode.to_u8() {
        let theirs = TruncMode::from_u8(peer.trunc_mode).map_or(format!("tag {}", peer.trunc_mode), |m| m.name().into());
        return mismatch("truncation mode", params.trunc_mode.name().into(), theirs);
    }
    if peer.batch as usize != params.batch {
        return mismatch("batch", params.batch.to_string(), peer.batch.to_string());
    }
    if peer.corr_seed != params.corr_seed {
        return mismatch("correlation seed", params.corr_seed.to_string(), peer.corr_seed.to_string());
    }
    if peer.reveal != u8::from(params.reveal_to_server) {
        return mismatch("reveal_to_server", params.reveal_to_server.to_string(), (peer.reveal != 0).to_string());
    }
    let d = ep.counters().since(&before);
    Ok(Setup {
        bytes_sent: d.bytes_sent,
        bytes_received: d.bytes_received,
        payload_sent: d.payload_sent,
        payload_received: d.payload_received,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
