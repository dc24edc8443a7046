//! One private inference between a client and a server: handshake, input
//! sharing, the lock-step online phase and the logit reveal.

mod client;
mod handshake;
mod reveal;
mod server;

pub use client::{client_infer, ClientOutput};
pub use handshake::{handshake, SessionParams, PROTOCOL_VERSION};
pub use server::{server_serve, ServerOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use xpi_core::online::Evaluator;
use xpi_core::{
    dealer_gen, CorrelatedRandomness, FixedPointConfig, ModelWeights, PartyId, Phase, Program, RealTensor, Share,
    StepKind, StepObserver, TruncMode,
};

use crate::error::{Result, XpiError};
use crate::format::weights::model_hash;
use crate::transcript::{Recorder, Setup, StepRecord, Totals, Transcript};
use crate::transport::{Endpoint, LinkShaping, TransportKind};

fn check_bundle(corr: &CorrelatedRandomness, role: PartyId, params: &SessionParams) -> Result<()> {
    if corr.party() != role {
        return Err(XpiError::Invalid(format!("correlation bundle belongs to the {}, not the {role}", corr.party())));
    }
    if corr.frac_bits() != params.frac_bits {
        return Err(XpiError::Invalid(format!(
            "correlation bundle was dealt for {} fractional bits, session uses {}",
            corr.frac_bits(),
            params.frac_bits
        )));
    }
    if params.trunc_mode == TruncMode::DealerPair && corr.remaining_trunc() == 0 {
        return Err(XpiError::Invalid("pair truncation needs a bundle dealt with truncation pairs".into()));
    }
    Ok(())
}

/// Replaces the generic transport error of the core evaluator with the
/// typed one recorded by the endpoint.
fn lift(ep: &mut Endpoint, e: xpi_core::Error) -> XpiError {
    match e {
        xpi_core::Error::Transport(_) => ep.take_error().unwrap_or(XpiError::Core(e)),
        other => XpiError::Core(other),
    }
}

/// Tells the peer why this side stopped unless the peer already knows.
fn abort_on_error<T>(ep: &mut Endpoint, r: Result<T>) -> Result<T> {
    if let Err(e) = &r {
        if !matches!(e, XpiError::Disconnected | XpiError::PeerAbort(_) | XpiError::Transport(_)) {
            ep.abort(&e.to_string());
        }
    }
    r
}

fn evaluate(
    ep: &mut Endpoint,
    program: &Program,
    corr: &mut CorrelatedRandomness,
    fp: FixedPointConfig,
    input: Share,
    rec: &mut Recorder,
) -> Result<Share> {
    let out = Evaluator::new(fp, corr, ep, rec).run(program, input);
    out.map_err(|e| lift(ep, e))
}

fn io_step<T>(rec: &mut Recorder, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    rec.begin(label, StepKind::Io, Phase::Linear);
    let out = f();
    rec.end();
    out
}

fn assemble(
    role: PartyId,
    ep: &Endpoint,
    params: &SessionParams,
    setup: Setup,
    records: Vec<StepRecord>,
    total_seconds: f64,
) -> Transcript {
    let c = ep.counters();
    let (sent_digest, received_digest) = ep.stats().digests();
    let mut linear_seconds = 0.0;
    let mut nonlinear_seconds = 0.0;
    for r in &records {
        match r.phase.as_str() {
            "nonlinear" => nonlinear_seconds += r.wall_time_s,
            _ => linear_seconds += r.wall_time_s,
        }
    }
    Transcript {
        party: role.to_string(),
        transport: ep.kind().name().into(),
        model_hash: hex::encode(params.model_hash),
        batch: params.batch,
        frac_bits: params.frac_bits,
        trunc_mode: params.trunc_mode.name().into(),
        setup,
        records,
        totals: Totals {
            bytes_sent: c.bytes_sent,
            bytes_received: c.bytes_received,
            payload_sent: c.payload_sent,
            payload_received: c.payload_received,
            rounds: c.rounds,
            linear_seconds,
            nonlinear_seconds,
            total_seconds,
        },
        sent_digest,
        received_digest,
    }
}

/// Knobs for an in-process client/server run.
#[derive(Debug, Clone, Copy)]
pub struct LocalOptions {
    pub fp: FixedPointConfig,
    pub transport: TransportKind,
    pub shaping: LinkShaping,
    /// Seeds the dealer and the client's input masks.
    pub seed: u64,
    pub reveal_to_server: bool,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            fp: FixedPointConfig::default(),
            transport: TransportKind::Loopback,
            shaping: LinkShaping::default(),
            seed: 0,
            reveal_to_server: false,
        }
    }
}

pub struct LocalRun {
    pub client: ClientOutput,
    pub server: ServerOutcome,
}

/// Deals correlations and runs both parties on two threads of this
/// process over the chosen transport.
pub fn run_local(weights: &ModelWeights, images: &RealTensor, opts: &LocalOptions) -> Result<LocalRun> {
    let cfg = weights.config;
    let batch = match images.shape() {
        [_, _, _] => 1,
        [b, _, _, _] => *b,
        sh => return Err(XpiError::Invalid(format!("image tensor of shape {sh:?}"))),
    };
    let f = opts.fp.frac_bits();
    let program = Program::compile(weights, f)?;
    let (mut c0, mut c1) = dealer_gen(&cfg, batch, f, opts.fp.trunc_mode == TruncMode::DealerPair, opts.seed)?;
    let params = SessionParams {
        model_hash: model_hash(weights),
        frac_bits: f,
        trunc_mode: opts.fp.trunc_mode,
        batch,
        corr_seed: opts.seed,
        reveal_to_server: opts.reveal_to_server,
    };
    let (e0, e1) = opts.transport.pair()?;
    let (mut e0, mut e1) = (e0.with_shaping(opts.shaping), e1.with_shaping(opts.shaping));
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x5EED_0F_11A5C);
    let (client, server) = std::thread::scope(|s| {
        let server = s.spawn(|| server_serve(&mut e1, &program, &mut c1, &params));
        let client = client_infer(&mut e0, &program, &mut c0, &params, images, &mut rng);
        // Unblock a server still waiting on a client that failed.
        drop(e0);
        (client, server.join().expect("server thread"))
    });
    Ok(LocalRun { client: client?, server: server? })
}
