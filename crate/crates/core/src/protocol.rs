//! Dealer-issued correlations and the online protocols that consume them.
//!
//! The dealer samples square pairs `(a, a^2)`, truncation pairs
//! `(r, r >> f)` and, for tests, general triples `(a, b, ab)`, and hands
//! each party its additive shares. Online, every opening is one call to
//! [`OpenChannel::exchange`]: both parties send their masked share and
//! receive the peer's in the same round.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ring::{shift_signed, RingTensor, TruncMode};
use crate::sharing::{share, PartyId, Share};

/// A bidirectional link that opens masked values in one round.
pub trait OpenChannel {
    /// Sends this party's words and returns the peer's words of the same
    /// length.
    fn exchange(&mut self, outgoing: &[u64]) -> Result<Vec<u64>>;
}

impl<C: OpenChannel + ?Sized> OpenChannel for &mut C {
    fn exchange(&mut self, outgoing: &[u64]) -> Result<Vec<u64>> {
        (**self).exchange(outgoing)
    }
}

fn open(ch: &mut impl OpenChannel, mine: &[u64]) -> Result<Vec<u64>> {
    let theirs = ch.exchange(mine)?;
    if theirs.len() != mine.len() {
        return Err(Error::Desync(alloc::format!(
            "opened {} words, peer sent {}",
            mine.len(),
            theirs.len()
        )));
    }
    Ok(mine.iter().zip(&theirs).map(|(a, b)| a.wrapping_add(*b)).collect())
}

/// Shares of `a` and `a^2` for a uniformly random flat vector `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquarePair {
    pub a: Share,
    pub a_sq: Share,
}

impl SquarePair {
    pub fn count(&self) -> usize {
        self.a.numel()
    }
}

/// Shares of random `r` and of `r` arithmetic-shifted by the truncation
/// width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncPair {
    pub r: Share,
    pub r_trunc: Share,
}

impl TruncPair {
    pub fn count(&self) -> usize {
        self.r.numel()
    }
}

/// General multiplication triple, shares of `a`, `b` and `a * b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulTriple {
    pub a: Share,
    pub b: Share,
    pub c: Share,
}

/// One party's correlated randomness for a full private forward pass.
///
/// Square pairs are consumed layer by layer in program order, truncation
/// pairs site by site; each entry can be taken exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelatedRandomness {
    party: PartyId,
    seed: u64,
    frac_bits: u32,
    square: Vec<Option<SquarePair>>,
    trunc: Vec<Option<TruncPair>>,
    next_square: usize,
    next_trunc: usize,
}

impl CorrelatedRandomness {
    pub fn new(
        party: PartyId,
        seed: u64,
        frac_bits: u32,
        square: Vec<SquarePair>,
        trunc: Vec<TruncPair>,
    ) -> Self {
        Self {
            party,
            seed,
            frac_bits,
            square: square.into_iter().map(Some).collect(),
            trunc: trunc.into_iter().map(Some).collect(),
            next_square: 0,
            next_trunc: 0,
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Element counts of the square layers, in consumption order.
    pub fn square_counts(&self) -> Vec<usize> {
        self.square
            .iter()
            .map(|p| p.as_ref().map_or(0, SquarePair::count))
            .collect()
    }

    pub fn trunc_counts(&self) -> Vec<usize> {
        self.trunc
            .iter()
            .map(|p| p.as_ref().map_or(0, TruncPair::count))
            .collect()
    }

    pub fn square_pairs(&self) -> impl Iterator<Item = Option<&SquarePair>> {
        self.square.iter().map(Option::as_ref)
    }

    pub fn trunc_pairs(&self) -> impl Iterator<Item = Option<&TruncPair>> {
        self.trunc.iter().map(Option::as_ref)
    }

    pub fn remaining_square(&self) -> usize {
        self.square.len() - self.next_square
    }

    pub fn remaining_trunc(&self) -> usize {
        self.trunc.len() - self.next_trunc
    }

    /// Takes the pair of square layer `index`.
    pub fn take_square(&mut self, index: usize) -> Result<SquarePair> {
        let available = self.square.len();
        let slot = self.square.get_mut(index).ok_or(Error::CorrelationExhausted {
            what: "square",
            available,
        })?;
        slot.take().ok_or(Error::CorrelationConsumed { what: "square", index })
    }

    pub fn take_trunc(&mut self, index: usize) -> Result<TruncPair> {
        let available = self.trunc.len();
        let slot = self.trunc.get_mut(index).ok_or(Error::CorrelationExhausted {
            what: "truncation",
            available,
        })?;
        slot.take().ok_or(Error::CorrelationConsumed {
            what: "truncation",
            index,
        })
    }

    pub fn next_square(&mut self) -> Result<SquarePair> {
        let pair = self.take_square(self.next_square)?;
        self.next_square += 1;
        Ok(pair)
    }

    pub fn next_trunc(&mut self) -> Result<TruncPair> {
        let pair = self.take_trunc(self.next_trunc)?;
        self.next_trunc += 1;
        Ok(pair)
    }
}

fn random_vec(rng: &mut impl RngCore, n: usize) -> RingTensor {
    let data = (0..n).map(|_| rng.next_u64()).collect();
    RingTensor::new(vec![n], data, 0).expect("flat")
}

/// Square pair covering `n` elements.
pub fn gen_square_pair(rng: &mut impl RngCore, n: usize) -> (SquarePair, SquarePair) {
    let a = random_vec(rng, n);
    let a_sq = a.mul(&a).expect("same shape").with_frac_bits(0);
    let (a0, a1) = share(&a, rng);
    let (q0, q1) = share(&a_sq, rng);
    (
        SquarePair { a: a0, a_sq: q0 },
        SquarePair { a: a1, a_sq: q1 },
    )
}

/// Truncation pair covering `n` elements for a shift by `frac_bits`.
pub fn gen_trunc_pair(rng: &mut impl RngCore, n: usize, frac_bits: u32) -> (TruncPair, TruncPair) {
    let r = random_vec(rng, n);
    let data = r.data().iter().map(|&e| shift_signed(e, frac_bits)).collect();
    let rt = RingTensor::new(vec![n], data, 0).expect("flat");
    let (r0, r1) = share(&r, rng);
    let (t0, t1) = share(&rt, rng);
    (
        TruncPair { r: r0, r_trunc: t0 },
        TruncPair { r: r1, r_trunc: t1 },
    )
}

pub fn gen_mul_triple(rng: &mut impl RngCore, n: usize) -> (MulTriple, MulTriple) {
    let a = random_vec(rng, n);
    let b = random_vec(rng, n);
    let c = a.mul(&b).expect("same shape").with_frac_bits(0);
    let (a0, a1) = share(&a, rng);
    let (b0, b1) = share(&b, rng);
    let (c0, c1) = share(&c, rng);
    (
        MulTriple { a: a0, b: b0, c: c0 },
        MulTriple { a: a1, b: b1, c: c1 },
    )
}

/// Trusted-dealer preprocessing for one private forward pass over `batch`
/// images. Truncation pairs are only generated when `with_trunc_pairs` is
/// set, since only the dealer-pair truncation mode consumes them.
pub fn dealer_gen(
    config: &ModelConfig,
    batch: usize,
    frac_bits: u32,
    with_trunc_pairs: bool,
    seed: u64,
) -> Result<(CorrelatedRandomness, CorrelatedRandomness)> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut sq0, mut sq1) = (Vec::new(), Vec::new());
    for n in config.square_sites(batch) {
        let (p0, p1) = gen_square_pair(&mut rng, n);
        sq0.push(p0);
        sq1.push(p1);
    }
    let (mut tr0, mut tr1) = (Vec::new(), Vec::new());
    if with_trunc_pairs {
        for n in config.truncation_sites(batch) {
            let (p0, p1) = gen_trunc_pair(&mut rng, n, frac_bits);
            tr0.push(p0);
            tr1.push(p1);
        }
    }
    Ok((
        CorrelatedRandomness::new(PartyId::Client, seed, frac_bits, sq0, tr0),
        CorrelatedRandomness::new(PartyId::Server, seed, frac_bits, sq1, tr1),
    ))
}

fn check_pair(x: &Share, pair_party: PartyId, count: usize, what: &'static str) -> Result<()> {
    if pair_party != x.party() {
        return Err(Error::PartyMismatch { op: what });
    }
    if count != x.numel() {
        return Err(Error::shape(what, x.shape(), &[count]));
    }
    Ok(())
}

/// One-round squaring with a square pair. The result carries twice the
/// input scale and still needs truncation.
///
/// With `e = x - a` opened, `x^2 = e^2 + 2 e a + a^2`; the client adds the
/// public `e^2` term.
pub fn square_online(x: &Share, pair: SquarePair, ch: &mut impl OpenChannel) -> Result<Share> {
    check_pair(x, pair.a.party(), pair.count(), "square_online")?;
    let party = x.party();
    let masked: Vec<u64> = x
        .tensor()
        .data()
        .iter()
        .zip(pair.a.tensor().data())
        .map(|(v, a)| v.wrapping_sub(*a))
        .collect();
    let e = open(ch, &masked)?;
    let client = party.adds_constants();
    let data = e
        .iter()
        .zip(pair.a.tensor().data().iter().zip(pair.a_sq.tensor().data()))
        .map(|(&e, (&a, &a_sq))| {
            let mut y = e.wrapping_mul(a).wrapping_mul(2).wrapping_add(a_sq);
            if client {
                y = y.wrapping_add(e.wrapping_mul(e));
            }
            y
        })
        .collect();
    let out = RingTensor::new(x.shape().to_vec(), data, 2 * x.frac_bits())?;
    Ok(Share::new(party, out))
}

/// One-round multiplication of two shared tensors with a general triple.
pub fn beaver_mul(x: &Share, y: &Share, triple: MulTriple, ch: &mut impl OpenChannel) -> Result<Share> {
    check_pair(x, triple.a.party(), triple.a.numel(), "beaver_mul")?;
    check_pair(y, triple.b.party(), triple.b.numel(), "beaver_mul")?;
    if x.party() != y.party() {
        return Err(Error::PartyMismatch { op: "beaver_mul" });
    }
    let n = x.numel();
    let mut masked = Vec::with_capacity(2 * n);
    masked.extend(x.tensor().data().iter().zip(triple.a.tensor().data()).map(|(v, a)| v.wrapping_sub(*a)));
    masked.extend(y.tensor().data().iter().zip(triple.b.tensor().data()).map(|(v, b)| v.wrapping_sub(*b)));
    let opened = open(ch, &masked)?;
    let (d, e) = opened.split_at(n);
    let client = x.party().adds_constants();
    let data = (0..n)
        .map(|i| {
            let a = triple.a.tensor().data()[i];
            let b = triple.b.tensor().data()[i];
            let c = triple.c.tensor().data()[i];
            let mut z = c.wrapping_add(d[i].wrapping_mul(b)).wrapping_add(e[i].wrapping_mul(a));
            if client {
                z = z.wrapping_add(d[i].wrapping_mul(e[i]));
            }
            z
        })
        .collect();
    let out = RingTensor::new(x.shape().to_vec(), data, x.frac_bits() + y.frac_bits())?;
    Ok(Share::new(x.party(), out))
}

/// Rescales a shared value by `2^-f`.
pub fn truncate_shared(
    x: &Share,
    f: u32,
    mode: TruncMode,
    pair: Option<TruncPair>,
    ch: &mut impl OpenChannel,
) -> Result<Share> {
    let party = x.party();
    let out_bits = x.frac_bits().saturating_sub(f);
    let shape = x.shape().to_vec();
    let data = match mode {
        TruncMode::LocalProbabilistic => x.tensor().data().iter().map(|&e| shift_signed(e, f)).collect(),
        TruncMode::InsecureExact => {
            let opened = open(ch, x.tensor().data())?;
            if party.adds_constants() {
                opened.into_iter().map(|e| shift_signed(e, f)).collect()
            } else {
                vec![0; x.numel()]
            }
        }
        TruncMode::DealerPair => {
            let pair = pair.ok_or(Error::MissingTruncPair("pair"))?;
            check_pair(x, pair.r.party(), pair.count(), "truncate_shared")?;
            let masked: Vec<u64> = x
                .tensor()
                .data()
                .iter()
                .zip(pair.r.tensor().data())
                .map(|(v, r)| v.wrapping_add(*r))
                .collect();
            let z = open(ch, &masked)?;
            let client = party.adds_constants();
            z.iter()
                .zip(pair.r_trunc.tensor().data())
                .map(|(&z, &rt)| {
                    let base = if client { shift_signed(z, f) } else { 0 };
                    base.wrapping_sub(rt)
                })
                .collect()
        }
    };
    Ok(Share::new(party, RingTensor::new(shape, data, out_bits)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::reconstruct;
    use crate::testing::run_pair;
    use rand::Rng;

    fn scalar(v: i64, f: u32) -> RingTensor {
        RingTensor::new(vec![1], vec![v as u64], f).unwrap()
    }

    fn pair_from(a: u64, party: PartyId, client_a: u64) -> SquarePair {
        // client holds (client_a, a^2), server holds (a - client_a, 0)
        let (sa, sq) = match party {
            PartyId::Client => (client_a, a.wrapping_mul(a)),
            PartyId::Server => (a.wrapping_sub(client_a), 0),
        };
        SquarePair {
            a: Share::new(party, RingTensor::new(vec![1], vec![sa], 0).unwrap()),
            a_sq: Share::new(party, RingTensor::new(vec![1], vec![sq], 0).unwrap()),
        }
    }

    #[test]
    fn square_hand_example() {
        // x = 3 split as (2, 1); a = 1; e = 2; y = 4 + 4 + 1.
        let (y0, y1) = run_pair(
            |ch| {
                let x = Share::new(PartyId::Client, scalar(2, 0));
                square_online(&x, pair_from(1, PartyId::Client, 1), ch).unwrap()
            },
            |ch| {
                let x = Share::new(PartyId::Server, scalar(1, 0));
                square_online(&x, pair_from(1, PartyId::Server, 1), ch).unwrap()
            },
        );
        assert_eq!(reconstruct(&y0, &y1).unwrap().data(), &[9]);
    }

    fn square_shared(x: &RingTensor, seed: u64) -> RingTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (x0, x1) = share(x, &mut rng);
        let (p0, p1) = gen_square_pair(&mut rng, x.numel());
        let (y0, y1) = run_pair(
            move |ch| square_online(&x0, p0, ch).unwrap(),
            move |ch| square_online(&x1, p1, ch).unwrap(),
        );
        assert_eq!(y0.frac_bits(), 2 * x.frac_bits());
        reconstruct(&y0, &y1).unwrap()
    }

    #[test]
    fn square_zero_is_zero() {
        for seed in 0..5 {
            let y = square_shared(&RingTensor::zeros(&[4], 8), seed);
            assert!(y.data().iter().all(|&e| e == 0));
        }
    }

    #[test]
    fn square_exhaustive_small_grid() {
        let f = 4;
        let data: Vec<u64> = (-8i64..=8).map(|v| (v << f) as u64).collect();
        let x = RingTensor::new(vec![data.len()], data.clone(), f).unwrap();
        let y = square_shared(&x, 11);
        let want: Vec<u64> = (-8i64..=8).map(|v| ((v * v) << (2 * f)) as u64).collect();
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn square_rejects_wrong_size_or_party() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (p0, _) = gen_square_pair(&mut rng, 3);
        let x = Share::new(PartyId::Client, RingTensor::zeros(&[4], 8));
        struct Never;
        impl OpenChannel for Never {
            fn exchange(&mut self, _: &[u64]) -> Result<Vec<u64>> {
                unreachable!()
            }
        }
        assert!(matches!(square_online(&x, p0.clone(), &mut Never), Err(Error::ShapeMismatch { .. })));
        let y = Share::new(PartyId::Server, RingTensor::zeros(&[3], 8));
        assert!(matches!(square_online(&y, p0, &mut Never), Err(Error::PartyMismatch { .. })));
    }

    #[test]
    fn beaver_mul_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 10_000;
        let mut xs: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        let mut ys: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        xs[0] = 3;
        ys[0] = 5;
        xs[1] = 0;
        let x = RingTensor::new(vec![n], xs.clone(), 0).unwrap();
        let y = RingTensor::new(vec![n], ys.clone(), 0).unwrap();
        let (x0, x1) = share(&x, &mut rng);
        let (y0, y1) = share(&y, &mut rng);
        let (t0, t1) = gen_mul_triple(&mut rng, n);
        let (z0, z1) = run_pair(
            move |ch| beaver_mul(&x0, &y0, t0, ch).unwrap(),
            move |ch| beaver_mul(&x1, &y1, t1, ch).unwrap(),
        );
        let z = reconstruct(&z0, &z1).unwrap();
        assert_eq!(z.data()[0], 15);
        assert_eq!(z.data()[1], 0);
        for i in 0..n {
            assert_eq!(z.data()[i], xs[i].wrapping_mul(ys[i]));
        }
    }

    fn truncate_with(mode: TruncMode, x: &RingTensor, f: u32, seed: u64) -> RingTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (x0, x1) = share(x, &mut rng);
        let (p0, p1) = gen_trunc_pair(&mut rng, x.numel(), f);
        let (y0, y1) = run_pair(
            move |ch| truncate_shared(&x0, f, mode, Some(p0), ch).unwrap(),
            move |ch| truncate_shared(&x1, f, mode, Some(p1), ch).unwrap(),
        );
        reconstruct(&y0, &y1).unwrap()
    }

    #[test]
    fn exact_truncation_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let data: Vec<u64> = (0..500).map(|_| rng.gen_range(-(1i64 << 40)..(1i64 << 40)) as u64).collect();
        let x = RingTensor::new(vec![500], data, 32).unwrap();
        let got = truncate_with(TruncMode::InsecureExact, &x, 16, 1);
        assert_eq!(got, crate::ring::truncate_plain(&x, 16));
    }

    #[test]
    fn dealer_pair_truncation_within_one_ulp() {
        let x = scalar(6i64 << 32, 32);
        for seed in 0..50 {
            let got = truncate_with(TruncMode::DealerPair, &x, 16, seed);
            let diff = (got.data()[0] as i64).wrapping_sub(6 << 16);
            assert!((-1..=1).contains(&diff), "diff {diff}");
            assert_eq!(got.frac_bits(), 16);
        }
    }

    #[test]
    fn dealer_pair_requires_pair() {
        struct Never;
        impl OpenChannel for Never {
            fn exchange(&mut self, _: &[u64]) -> Result<Vec<u64>> {
                unreachable!()
            }
        }
        let x = Share::new(PartyId::Client, scalar(1, 32));
        assert_eq!(
            truncate_shared(&x, 16, TruncMode::DealerPair, None, &mut Never),
            Err(Error::MissingTruncPair("pair"))
        );
    }

    #[test]
    fn correlation_single_use() {
        let cfg = ModelConfig::toy();
        let (mut c0, _) = dealer_gen(&cfg, 1, 16, true, 5).unwrap();
        assert!(c0.take_square(0).is_ok());
        assert_eq!(
            c0.take_square(0),
            Err(Error::CorrelationConsumed { what: "square", index: 0 })
        );
        // next_square starts at 0 and therefore hits the consumed slot.
        assert!(matches!(c0.next_square(), Err(Error::CorrelationConsumed { .. })));
        let layers = cfg.depth;
        assert!(matches!(c0.take_square(layers), Err(Error::CorrelationExhausted { .. })));
        assert!(c0.next_trunc().is_ok());
    }

    #[test]
    fn dealer_pairs_are_consistent_and_deterministic() {
        let cfg = ModelConfig::toy();
        let (c0, c1) = dealer_gen(&cfg, 2, 16, true, 77).unwrap();
        assert_eq!(c0.square_counts(), cfg.square_sites(2));
        assert_eq!(c1.trunc_counts(), cfg.truncation_sites(2));
        for (p0, p1) in c0.square_pairs().zip(c1.square_pairs()) {
            let (p0, p1) = (p0.unwrap(), p1.unwrap());
            let a = reconstruct(&p0.a, &p1.a).unwrap();
            let a_sq = reconstruct(&p0.a_sq, &p1.a_sq).unwrap();
            assert_eq!(a.mul(&a).unwrap().with_frac_bits(0), a_sq);
        }
        for (p0, p1) in c0.trunc_pairs().zip(c1.trunc_pairs()) {
            let (p0, p1) = (p0.unwrap(), p1.unwrap());
            let r = reconstruct(&p0.r, &p1.r).unwrap();
            let rt = reconstruct(&p0.r_trunc, &p1.r_trunc).unwrap();
            assert_eq!(crate::ring::truncate_plain(&r.with_frac_bits(16), 16).with_frac_bits(0), rt);
        }
        let (again, _) = dealer_gen(&cfg, 2, 16, true, 77).unwrap();
        assert_eq!(again, c0);
        let (no_trunc, _) = dealer_gen(&cfg, 2, 16, false, 77).unwrap();
        assert_eq!(no_trunc.remaining_trunc(), 0);
    }
}
