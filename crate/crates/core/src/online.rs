//! Online phase: runs a compiled [`Program`] on one party's share.
//!
//! Linear ops are local. Each square layer costs one opening; truncation
//! costs zero or one depending on [`TruncMode`]. Both parties walk the same
//! program in the same order, so correlations line up without negotiation.

use crate::error::Result;
use crate::model::program::{apply_permute, pool_sum, Op, Program};
use crate::protocol::{square_online, truncate_shared, CorrelatedRandomness, OpenChannel};
use crate::ring::{FixedPointConfig, TruncMode};
use crate::sharing::{add_shares, linear_apply_public, PublicLinear, Share};

/// What a recorded step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepKind {
    /// Input sharing or output reveal.
    Io,
    Linear,
    Square,
    Truncation,
}

/// Which side of the linear/non-linear latency split a step is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Linear,
    NonLinear,
}

/// Hook for timing and byte accounting around each step.
pub trait StepObserver {
    fn begin(&mut self, _label: &str, _kind: StepKind, _phase: Phase) {}
    fn end(&mut self) {}
}

/// Observer that records nothing.
pub struct NoopObserver;

impl StepObserver for NoopObserver {}

impl<O: StepObserver + ?Sized> StepObserver for &mut O {
    fn begin(&mut self, label: &str, kind: StepKind, phase: Phase) {
        (**self).begin(label, kind, phase)
    }
    fn end(&mut self) {
        (**self).end()
    }
}

pub struct Evaluator<'a, C, O> {
    fp: FixedPointConfig,
    corr: &'a mut CorrelatedRandomness,
    ch: &'a mut C,
    obs: &'a mut O,
}

impl<'a, C: OpenChannel, O: StepObserver> Evaluator<'a, C, O> {
    pub fn new(
        fp: FixedPointConfig,
        corr: &'a mut CorrelatedRandomness,
        ch: &'a mut C,
        obs: &'a mut O,
    ) -> Self {
        Self { fp, corr, ch, obs }
    }

    fn step<T>(
        &mut self,
        label: &str,
        kind: StepKind,
        phase: Phase,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.obs.begin(label, kind, phase);
        let out = f(self);
        self.obs.end();
        out
    }

    /// Public linear map on the share; no communication. Output at `2f`.
    pub fn private_linear(&mut self, label: &str, x: &Share, layer: &PublicLinear<'_>) -> Result<Share> {
        self.step(label, StepKind::Linear, Phase::Linear, |_| linear_apply_public(x, layer))
    }

    fn truncate_inner(&mut self, x: &Share) -> Result<Share> {
        let pair = match self.fp.trunc_mode {
            TruncMode::DealerPair => Some(self.corr.next_trunc()?),
            _ => None,
        };
        truncate_shared(x, self.fp.frac_bits(), self.fp.trunc_mode, pair, self.ch)
    }

    pub fn truncate(&mut self, label: &str, x: &Share, phase: Phase) -> Result<Share> {
        self.step(label, StepKind::Truncation, phase, |ev| ev.truncate_inner(x))
    }

    /// Square with the next dealer pair, then truncate back to scale `f`.
    pub fn private_square(&mut self, label: &str, x: &Share) -> Result<Share> {
        self.step(label, StepKind::Square, Phase::NonLinear, |ev| {
            let pair = ev.corr.next_square()?;
            let sq = square_online(x, pair, ev.ch)?;
            ev.truncate_inner(&sq)
        })
    }

    /// Runs the whole program on this party's input share.
    pub fn run(&mut self, program: &Program, input: Share) -> Result<Share> {
        self.run_ops(&program.ops, input)
    }

    fn run_ops(&mut self, ops: &[Op], mut x: Share) -> Result<Share> {
        for op in ops {
            x = match op {
                Op::Residual { label, body } => {
                    let branch = self.run_ops(body, x.clone())?;
                    self.step(label, StepKind::Linear, Phase::Linear, |_| add_shares(&branch, &x))?
                }
                Op::Square { label } => self.private_square(label, &x)?,
                Op::MeanPool { label, inv_count } => {
                    let f = self.fp.frac_bits();
                    let summed = self.step(label, StepKind::Linear, Phase::Linear, |_| {
                        x.clone().map(|t| pool_sum(&t, *inv_count, f))
                    })?;
                    self.truncate(label, &summed, Phase::Linear)?
                }
                _ => match op.public_linear() {
                    Some(layer) => {
                        let y = self.private_linear(op.label(), &x, &layer)?;
                        self.truncate(op.label(), &y, Phase::Linear)?
                    }
                    None => self.step(op.label(), StepKind::Linear, Phase::Linear, |_| {
                        x.clone().map(|t| apply_permute(op, &t))
                    })?,
                },
            };
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth::{random_images, synthetic_model};
    use crate::model::{encode_images, ModelConfig};
    use crate::protocol::dealer_gen;
    use crate::sharing::{reconstruct, share};
    use crate::testing::run_pair;
    use alloc::string::String;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[derive(Default)]
    struct Log(Vec<(String, StepKind, Phase)>);
    impl StepObserver for Log {
        fn begin(&mut self, label: &str, kind: StepKind, phase: Phase) {
            self.0.push((label.into(), kind, phase));
        }
    }

    fn run_mode(mode: TruncMode, seed: u64) -> (crate::RingTensor, crate::RingTensor, usize, usize) {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let weights = synthetic_model(&cfg, &mut rng).unwrap();
        let fp = FixedPointConfig::new(16, mode).unwrap();
        let program = Program::compile(&weights, 16).unwrap();
        let images = random_images(&cfg, 2, &mut rng);
        let input = encode_images(&cfg, &images, 16).unwrap();
        let plain = program.eval_plain(&input).unwrap();
        let (x0, x1) = share(&input, &mut rng);
        let (mut c0, mut c1) = dealer_gen(&cfg, 2, 16, mode == TruncMode::DealerPair, seed).unwrap();
        let (p0, p1) = (program.clone(), program);
        let ((y0, r0), y1) = run_pair(
            move |ch| {
                let mut log = Log::default();
                let y = Evaluator::new(fp, &mut c0, ch, &mut log).run(&p0, x0).unwrap();
                (y, ch.rounds)
            },
            move |ch| Evaluator::new(fp, &mut c1, ch, &mut NoopObserver).run(&p1, x1).unwrap(),
        );
        let logits = reconstruct(&y0, &y1).unwrap();
        let truncs = cfg.truncation_sites(2).len();
        (logits, plain, r0, truncs)
    }

    #[test]
    fn exact_mode_is_bitwise_equal() {
        let (got, want, rounds, truncs) = run_mode(TruncMode::InsecureExact, 1);
        assert_eq!(got, want);
        assert_eq!(rounds, 2 + truncs);
    }

    #[test]
    fn local_mode_is_close() {
        let (got, want, rounds, _) = run_mode(TruncMode::LocalProbabilistic, 2);
        assert_eq!(rounds, 2);
        assert!(got.decode().max_abs_diff(&want.decode()) < 5e-2);
    }

    #[test]
    fn pair_mode_is_close_and_consumes_all_pairs() {
        let (got, want, rounds, truncs) = run_mode(TruncMode::DealerPair, 3);
        assert_eq!(rounds, 2 + truncs);
        assert!(got.decode().max_abs_diff(&want.decode()) < 5e-2);
    }

    #[test]
    fn exhausted_correlations_abort() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let weights = synthetic_model(&cfg, &mut rng).unwrap();
        let program = Program::compile(&weights, 16).unwrap();
        let input = encode_images(&cfg, &random_images(&cfg, 1, &mut rng), 16).unwrap();
        let (x0, x1) = share(&input, &mut rng);
        let (mut c0, mut c1) = dealer_gen(&cfg, 1, 16, false, 4).unwrap();
        c0.next_square().unwrap();
        c1.next_square().unwrap();
        let fp = FixedPointConfig::default();
        let (p0, p1) = (program.clone(), program);
        let (r0, r1) = run_pair(
            move |ch| Evaluator::new(fp, &mut c0, ch, &mut NoopObserver).run(&p0, x0),
            move |ch| Evaluator::new(fp, &mut c1, ch, &mut NoopObserver).run(&p1, x1),
        );
        assert!(matches!(r0, Err(crate::Error::CorrelationExhausted { .. })));
        assert!(matches!(r1, Err(crate::Error::CorrelationExhausted { .. })));
    }
}
