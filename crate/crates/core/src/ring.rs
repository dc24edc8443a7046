//! Fixed-point tensors over the ring of integers modulo 2^64.
//!
//! A real `r` is stored as `round(r * 2^f) mod 2^64` with two's-complement
//! semantics for negatives. Every multiplication adds the operands' scale
//! exponents; callers bring results back to scale `f` with [`truncate_plain`]
//! (or its shared counterpart in [`crate::protocol`]).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::RealTensor;

/// Largest magnitude (as a power of two) an encoded element may reach.
const ENCODE_LIMIT_BITS: i32 = 62;

/// How shared values are rescaled after a multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TruncMode {
    /// Open, truncate in the clear, re-share. Leaks the value; test only.
    InsecureExact,
    /// Each party arithmetic-shifts its own share. No communication, ±1 ulp.
    #[default]
    LocalProbabilistic,
    /// Mask with a dealer pair `(r, r >> f)`, open, shift, unmask.
    DealerPair,
}

impl TruncMode {
    pub fn name(self) -> &'static str {
        match self {
            TruncMode::InsecureExact => "exact",
            TruncMode::LocalProbabilistic => "local",
            TruncMode::DealerPair => "pair",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "exact" | "insecure-exact" => Some(TruncMode::InsecureExact),
            "local" | "local-probabilistic" => Some(TruncMode::LocalProbabilistic),
            "pair" | "dealer-pair" => Some(TruncMode::DealerPair),
            _ => None,
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            TruncMode::InsecureExact => 0,
            TruncMode::LocalProbabilistic => 1,
            TruncMode::DealerPair => 2,
        }
    }

    pub fn from_u8(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TruncMode::InsecureExact),
            1 => Some(TruncMode::LocalProbabilistic),
            2 => Some(TruncMode::DealerPair),
            _ => None,
        }
    }

    /// Rounds of communication one shared truncation costs.
    pub fn rounds(self) -> usize {
        match self {
            TruncMode::LocalProbabilistic => 0,
            TruncMode::InsecureExact | TruncMode::DealerPair => 1,
        }
    }
}

impl fmt::Display for TruncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointConfig {
    frac_bits: u32,
    pub trunc_mode: TruncMode,
}

impl FixedPointConfig {
    pub const DEFAULT_FRAC_BITS: u32 = 16;

    pub fn new(frac_bits: u32, trunc_mode: TruncMode) -> Result<Self> {
        if !(1..=30).contains(&frac_bits) {
            return Err(Error::InvalidFracBits(frac_bits));
        }
        Ok(Self {
            frac_bits,
            trunc_mode,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            frac_bits: Self::DEFAULT_FRAC_BITS,
            trunc_mode: TruncMode::default(),
        }
    }
}

/// Signed view of a ring element.
#[inline]
pub fn to_signed(e: u64) -> i64 {
    e as i64
}

/// Floor division by `2^f` in the signed interpretation.
#[inline]
pub fn shift_signed(e: u64, f: u32) -> u64 {
    ((e as i64) >> f) as u64
}

/// Encodes one real at `frac_bits`, or `None` when it is out of range.
pub fn encode_scalar(value: f64, frac_bits: u32) -> Option<u64> {
    let scaled = value * libm::exp2(frac_bits as f64);
    if !scaled.is_finite() || libm::fabs(scaled) >= libm::exp2(ENCODE_LIMIT_BITS as f64) {
        return None;
    }
    // libm::round rounds half away from zero.
    Some(libm::round(scaled) as i64 as u64)
}

pub fn decode_scalar(e: u64, frac_bits: u32) -> f64 {
    to_signed(e) as f64 / libm::exp2(frac_bits as f64)
}

/// Row-major tensor of ring elements carrying a fixed-point scale exponent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingTensor {
    shape: Vec<usize>,
    data: Vec<u64>,
    frac_bits: u32,
}

impl RingTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u64>, frac_bits: u32) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("RingTensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            frac_bits,
        })
    }

    pub fn zeros(shape: &[usize], frac_bits: u32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0; numel],
            frac_bits,
        }
    }

    /// A tensor filled with one raw ring element.
    pub fn filled(shape: &[usize], value: u64, frac_bits: u32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            frac_bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Relabels the scale without touching the data.
    pub fn with_frac_bits(mut self, frac_bits: u32) -> Self {
        self.frac_bits = frac_bits;
        self
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(u64, u64) -> u64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        if self.frac_bits != other.frac_bits {
            return Err(Error::ScaleMismatch {
                op,
                left: self.frac_bits,
                right: other.frac_bits,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
            frac_bits: self.frac_bits,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", u64::wrapping_add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", u64::wrapping_sub)
    }

    pub fn neg(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|e| e.wrapping_neg()).collect(),
            frac_bits: self.frac_bits,
        }
    }

    /// Multiplies every element by a raw ring constant encoded at
    /// `scalar_frac_bits`.
    pub fn scalar_mul(&self, scalar: u64, scalar_frac_bits: u32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|e| e.wrapping_mul(scalar)).collect(),
            frac_bits: self.frac_bits + scalar_frac_bits,
        }
    }

    /// Elementwise product; scales add.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("mul", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.wrapping_mul(*b))
                .collect(),
            frac_bits: self.frac_bits + other.frac_bits,
        })
    }

    /// Elementwise product with `other` repeated over the leading axes of
    /// `self`; `other.shape` must be a suffix of `self.shape`.
    pub fn mul_broadcast(&self, other: &Self) -> Result<Self> {
        let block = suffix_block(&self.shape, &other.shape, "mul_broadcast")?;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(block) {
            for (e, k) in chunk.iter_mut().zip(&other.data) {
                *e = e.wrapping_mul(*k);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
            frac_bits: self.frac_bits + other.frac_bits,
        })
    }

    /// Adds `other` repeated over the leading axes of `self`.
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        let block = suffix_block(&self.shape, &other.shape, "add_broadcast")?;
        if self.frac_bits != other.frac_bits {
            return Err(Error::ScaleMismatch {
                op: "add_broadcast",
                left: self.frac_bits,
                right: other.frac_bits,
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(block) {
            for (e, k) in chunk.iter_mut().zip(&other.data) {
                *e = e.wrapping_add(*k);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
            frac_bits: self.frac_bits,
        })
    }

    pub fn decode(&self) -> RealTensor {
        decode_fixed(self)
    }
}

fn suffix_block(shape: &[usize], suffix: &[usize], op: &'static str) -> Result<usize> {
    if suffix.len() > shape.len() || shape[shape.len() - suffix.len()..] != *suffix {
        return Err(Error::shape(op, shape, suffix));
    }
    Ok(suffix.iter().product::<usize>().max(1))
}

pub fn encode_fixed(values: &RealTensor, frac_bits: u32) -> Result<RingTensor> {
    let data = values
        .data()
        .iter()
        .enumerate()
        .map(|(index, &v)| encode_scalar(v, frac_bits).ok_or(Error::EncodingOverflow { index, frac_bits }))
        .collect::<Result<Vec<_>>>()?;
    RingTensor::new(values.shape().to_vec(), data, frac_bits)
}

pub fn decode_fixed(t: &RingTensor) -> RealTensor {
    let scale = libm::exp2(t.frac_bits as f64);
    let data = t.data.iter().map(|&e| to_signed(e) as f64 / scale).collect();
    RealTensor::new(t.shape.clone(), data).expect("shape is preserved")
}

/// `[m, k] x [k, n] -> [m, n]` with exact wrapping dot products.
pub fn matmul(a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
    let (m, k) = match a.shape.as_slice() {
        &[m, k] => (m, k),
        _ => return Err(Error::shape("matmul", &a.shape, &b.shape)),
    };
    let n = match b.shape.as_slice() {
        &[kb, n] if kb == k => n,
        _ => return Err(Error::shape("matmul", &a.shape, &b.shape)),
    };
    let mut out = vec![0u64; m * n];
    for (row, out_row) in a.data.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        for (&x, b_row) in row.iter().zip(b.data.chunks_exact(n.max(1))) {
            if x == 0 {
                continue;
            }
            for (o, &w) in out_row.iter_mut().zip(b_row) {
                *o = o.wrapping_add(x.wrapping_mul(w));
            }
        }
    }
    RingTensor::new(vec![m, n], out, a.frac_bits + b.frac_bits)
}

/// Per-channel 3x3 cross-correlation, stride 1, zero padding 1.
///
/// `x` is `[d, h, w]` or `[batch, d, h, w]`; `kernel` is `[d, 3, 3]`.
pub fn depthwise_conv2d(x: &RingTensor, kernel: &RingTensor) -> Result<RingTensor> {
    let (d, h, w) = match x.shape.as_slice() {
        &[d, h, w] | &[_, d, h, w] => (d, h, w),
        _ => return Err(Error::shape("depthwise_conv2d", &x.shape, &kernel.shape)),
    };
    if kernel.shape != [d, 3, 3] {
        return Err(Error::shape("depthwise_conv2d", &x.shape, &kernel.shape));
    }
    let mut out = vec![0u64; x.data.len()];
    let plane = h * w;
    for (img_in, img_out) in x.data.chunks_exact(d * plane).zip(out.chunks_exact_mut(d * plane)) {
        for c in 0..d {
            let src = &img_in[c * plane..(c + 1) * plane];
            let dst = &mut img_out[c * plane..(c + 1) * plane];
            let k = &kernel.data[c * 9..(c + 1) * 9];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0u64;
                    for u in 0..3 {
                        let ii = i + u;
                        if ii == 0 || ii > h {
                            continue;
                        }
                        for v in 0..3 {
                            let jj = j + v;
                            if jj == 0 || jj > w {
                                continue;
                            }
                            acc = acc.wrapping_add(k[u * 3 + v].wrapping_mul(src[(ii - 1) * w + jj - 1]));
                        }
                    }
                    dst[i * w + j] = acc;
                }
            }
        }
    }
    RingTensor::new(x.shape.clone(), out, x.frac_bits + kernel.frac_bits)
}

/// Signed floor division by `2^f`; the result carries `frac_bits - f`.
pub fn truncate_plain(t: &RingTensor, f: u32) -> RingTensor {
    debug_assert!(t.frac_bits >= f, "truncating below scale zero");
    RingTensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&e| shift_signed(e, f)).collect(),
        frac_bits: t.frac_bits.saturating_sub(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn real(shape: &[usize], data: Vec<f64>) -> RealTensor {
        RealTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn encode_examples() {
        let t = encode_fixed(&real(&[3], vec![1.5, -1.5, 0.0]), 16).unwrap();
        assert_eq!(t.data(), &[98304, 18446744073709453312, 0]);
        assert_eq!(t.frac_bits(), 16);
    }

    #[test]
    fn encode_rounds_half_away_from_zero() {
        // 2^-17 is exactly half an ulp at f = 16.
        let half = libm::exp2(-17.0);
        let t = encode_fixed(&real(&[2], vec![half, -half]), 16).unwrap();
        assert_eq!(t.data(), &[1, u64::MAX]);
    }

    #[test]
    fn encode_overflow_names_index() {
        let big = libm::exp2(47.0);
        let err = encode_fixed(&real(&[3], vec![0.0, 1.0, big]), 16).unwrap_err();
        assert_eq!(err, Error::EncodingOverflow { index: 2, frac_bits: 16 });
        let err = encode_fixed(&real(&[1], vec![f64::NAN]), 16).unwrap_err();
        assert_eq!(err, Error::EncodingOverflow { index: 0, frac_bits: 16 });
    }

    #[test]
    fn decode_examples() {
        let t = RingTensor::new(vec![2], vec![98304, 0u64.wrapping_sub(98304)], 16).unwrap();
        assert_eq!(decode_fixed(&t).data(), &[1.5, -1.5]);
        let pi = encode_fixed(&real(&[1], vec![core::f64::consts::PI]), 16).unwrap();
        assert!((decode_fixed(&pi).data()[0] - core::f64::consts::PI).abs() <= libm::exp2(-17.0));
    }

    #[test]
    fn frac_bits_range() {
        assert!(FixedPointConfig::new(0, TruncMode::LocalProbabilistic).is_err());
        assert!(FixedPointConfig::new(31, TruncMode::LocalProbabilistic).is_err());
        assert_eq!(FixedPointConfig::default().frac_bits(), 16);
    }

    #[test]
    fn matmul_identity_doubles_scale() {
        let f = 16;
        let mut eye = RingTensor::zeros(&[4, 4], f);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1 << f;
        }
        let v = encode_fixed(&real(&[4, 1], vec![1.0, -2.5, 0.25, 7.0]), f).unwrap();
        let out = matmul(&eye, &v).unwrap();
        assert_eq!(out.frac_bits(), 2 * f);
        assert_eq!(truncate_plain(&out, f), v);
    }

    #[test]
    fn matmul_scalar() {
        let a = RingTensor::new(vec![1, 1], vec![3 << 16], 16).unwrap();
        let b = RingTensor::new(vec![1, 1], vec![2 << 16], 16).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6u64 << 32]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = RingTensor::zeros(&[2, 3], 8);
        let b = RingTensor::zeros(&[4, 2], 8);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let f = 8;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = RingTensor::new(vec![2, 4, 4], (0..32).map(|_| rng.gen()).collect(), f).unwrap();
        let mut k = RingTensor::zeros(&[2, 3, 3], f);
        k.data_mut()[4] = 1 << f;
        k.data_mut()[13] = 1 << f;
        let out = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(out.frac_bits(), 2 * f);
        assert_eq!(out.data(), x.scalar_mul(1 << f, 0).data());
        let zero = depthwise_conv2d(&x, &RingTensor::zeros(&[2, 3, 3], f)).unwrap();
        assert!(zero.data().iter().all(|&e| e == 0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = RingTensor::zeros(&[2, 4, 4], 8);
        let k = RingTensor::zeros(&[3, 3, 3], 8);
        assert!(depthwise_conv2d(&x, &k).is_err());
    }

    #[test]
    fn truncate_examples() {
        let t = RingTensor::new(vec![2], vec![6 << 32, 0u64.wrapping_sub(6 << 32)], 32).unwrap();
        let out = truncate_plain(&t, 16);
        assert_eq!(out.data(), &[6 << 16, 0u64.wrapping_sub(6 << 16)]);
        assert_eq!(out.frac_bits(), 16);
    }

    #[test]
    fn broadcast_requires_suffix() {
        let x = RingTensor::zeros(&[2, 3, 4], 8);
        assert!(x.mul_broadcast(&RingTensor::zeros(&[3, 4], 8)).is_ok());
        assert!(x.mul_broadcast(&RingTensor::zeros(&[2, 3], 8)).is_err());
        assert!(x.add_broadcast(&RingTensor::zeros(&[4], 4)).is_err());
    }

    fn ring_tensor(len: usize) -> impl Strategy<Value = RingTensor> {
        proptest::collection::vec(any::<u64>(), len)
            .prop_map(move |d| RingTensor::new(vec![len], d, 12).unwrap())
    }

    proptest! {
        #[test]
        fn ring_laws(a in ring_tensor(16), b in ring_tensor(16), c in ring_tensor(16)) {
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.add(&b).unwrap().add(&c).unwrap(), a.add(&b.add(&c).unwrap()).unwrap());
            prop_assert_eq!(a.sub(&b).unwrap().add(&b).unwrap(), a.clone());
            prop_assert_eq!(a.add(&a.neg()).unwrap(), RingTensor::zeros(&[16], 12));
        }

        #[test]
        fn roundtrip_within_half_ulp(v in -1.0e6f64..1.0e6, f in 1u32..=30) {
            let t = encode_fixed(&real(&[1], vec![v]), f).unwrap();
            let back = decode_fixed(&t).data()[0];
            prop_assert!((back - v).abs() <= libm::exp2(-(f as f64 + 1.0)));
        }

        #[test]
        fn multiply_scales_add(
            xs in proptest::collection::vec(-1.0f64..1.0, 12),
            ys in proptest::collection::vec(-1.0f64..1.0, 12),
            f in 8u32..=20,
        ) {
            let a = encode_fixed(&real(&[3, 4], xs.clone()), f).unwrap();
            let b = encode_fixed(&real(&[4, 3], ys.clone()), f).unwrap();
            let prod = matmul(&a, &b).unwrap();
            prop_assert_eq!(prod.frac_bits(), 2 * f);
            let got = decode_fixed(&truncate_plain(&prod, f));
            let tol = libm::exp2(-(f as f64 - 1.0)) * 4.0;
            for i in 0..3 {
                for j in 0..3 {
                    let want: f64 = (0..4).map(|k| xs[i * 4 + k] * ys[k * 3 + j]).sum();
                    prop_assert!((got.data()[i * 3 + j] - want).abs() <= tol);
                }
            }
            let e = a.mul(&a).unwrap();
            prop_assert_eq!(e.frac_bits(), 2 * f);
        }
    }
}
