//! Additive 2-of-2 secret sharing over the ring and local evaluation of
//! public linear maps on shares.

use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::ring::{depthwise_conv2d, matmul, RingTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartyId {
    /// Party 0. Holds the input, receives the logits and applies public
    /// additive constants.
    Client,
    /// Party 1.
    Server,
}

impl PartyId {
    pub fn index(self) -> u8 {
        match self {
            PartyId::Client => 0,
            PartyId::Server => 1,
        }
    }

    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            0 => Some(PartyId::Client),
            1 => Some(PartyId::Server),
            _ => None,
        }
    }

    pub fn peer(self) -> Self {
        match self {
            PartyId::Client => PartyId::Server,
            PartyId::Server => PartyId::Client,
        }
    }

    /// Whether this party applies public additive constants.
    pub fn adds_constants(self) -> bool {
        self == PartyId::Client
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Client => f.write_str("client"),
            PartyId::Server => f.write_str("server"),
        }
    }
}

/// One party's additive share of a ring tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    party: PartyId,
    tensor: RingTensor,
}

impl Share {
    pub fn new(party: PartyId, tensor: RingTensor) -> Self {
        Self { party, tensor }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn tensor(&self) -> &RingTensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> RingTensor {
        self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn frac_bits(&self) -> u32 {
        self.tensor.frac_bits()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn map(self, f: impl FnOnce(RingTensor) -> Result<RingTensor>) -> Result<Self> {
        Ok(Self {
            party: self.party,
            tensor: f(self.tensor)?,
        })
    }
}

/// Splits `x` into a uniformly random client share and the matching server
/// share.
pub fn share<R: RngCore + ?Sized>(x: &RingTensor, rng: &mut R) -> (Share, Share) {
    let mask: Vec<u64> = (0..x.numel()).map(|_| rng.next_u64()).collect();
    let rest: Vec<u64> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, r)| v.wrapping_sub(*r))
        .collect();
    let shape = x.shape().to_vec();
    let f = x.frac_bits();
    (
        Share::new(
            PartyId::Client,
            RingTensor::new(shape.clone(), mask, f).expect("same shape"),
        ),
        Share::new(
            PartyId::Server,
            RingTensor::new(shape, rest, f).expect("same shape"),
        ),
    )
}

pub fn reconstruct(s0: &Share, s1: &Share) -> Result<RingTensor> {
    if s0.party == s1.party {
        return Err(Error::PartyMismatch { op: "reconstruct" });
    }
    s0.tensor.add(&s1.tensor)
}

fn same_party(a: &Share, b: &Share, op: &'static str) -> Result<()> {
    if a.party != b.party {
        return Err(Error::PartyMismatch { op });
    }
    Ok(())
}

pub fn add_shares(a: &Share, b: &Share) -> Result<Share> {
    same_party(a, b, "add_shares")?;
    Ok(Share::new(a.party, a.tensor.add(&b.tensor)?))
}

pub fn sub_shares(a: &Share, b: &Share) -> Result<Share> {
    same_party(a, b, "sub_shares")?;
    Ok(Share::new(a.party, a.tensor.sub(&b.tensor)?))
}

/// Adds a public constant: the client adds it, the server keeps its share.
/// `c` may also be a suffix-shaped tensor broadcast over leading axes.
pub fn add_public(a: &Share, c: &RingTensor) -> Result<Share> {
    if a.tensor.frac_bits() != c.frac_bits() {
        return Err(Error::ScaleMismatch {
            op: "add_public",
            left: a.tensor.frac_bits(),
            right: c.frac_bits(),
        });
    }
    if a.party.adds_constants() {
        Ok(Share::new(a.party, a.tensor.add_broadcast(c)?))
    } else {
        // Shape is still checked so both parties fail identically.
        if c.shape().len() > a.shape().len()
            || a.shape()[a.shape().len() - c.shape().len()..] != *c.shape()
        {
            return Err(Error::shape("add_public", a.shape(), c.shape()));
        }
        Ok(a.clone())
    }
}

/// A public linear map applied to shares without communication.
#[derive(Debug, Clone, Copy)]
pub enum PublicLinear<'a> {
    /// `x [t, k] * weight [k, m] (+ bias [m])`.
    MatMul {
        weight: &'a RingTensor,
        bias: Option<&'a RingTensor>,
    },
    /// Depthwise 3x3 conv with `kernel [d, 3, 3]` (+ bias broadcast over the batch).
    Depthwise {
        kernel: &'a RingTensor,
        bias: Option<&'a RingTensor>,
    },
    /// `x * scale + bias`, `scale` and `bias` broadcast over leading axes.
    Affine {
        scale: &'a RingTensor,
        bias: Option<&'a RingTensor>,
    },
}

impl<'a> PublicLinear<'a> {
    /// Multiplicative part only; the result carries the summed scale.
    pub fn apply_plain(&self, x: &RingTensor) -> Result<RingTensor> {
        let out = match self {
            PublicLinear::MatMul { weight, .. } => matmul(x, weight)?,
            PublicLinear::Depthwise { kernel, .. } => depthwise_conv2d(x, kernel)?,
            PublicLinear::Affine { scale, .. } => x.mul_broadcast(scale)?,
        };
        Ok(out)
    }

    fn bias(&self) -> Option<&'a RingTensor> {
        match *self {
            PublicLinear::MatMul { bias, .. }
            | PublicLinear::Depthwise { bias, .. }
            | PublicLinear::Affine { bias, .. } => bias,
        }
    }

    /// Full map on a plaintext tensor.
    pub fn eval_plain(&self, x: &RingTensor) -> Result<RingTensor> {
        let out = self.apply_plain(x)?;
        match self.bias() {
            Some(b) => out.add_broadcast(b),
            None => Ok(out),
        }
    }
}

/// Applies a public linear map to a share: both parties apply the
/// multiplicative part, the client alone adds the bias. Any bias must be
/// encoded at the output scale.
pub fn linear_apply_public(a: &Share, layer: &PublicLinear<'_>) -> Result<Share> {
    let out = Share::new(a.party, layer.apply_plain(&a.tensor)?);
    match layer.bias() {
        Some(b) => add_public(&out, b),
        None => Ok(out),
    }
}
