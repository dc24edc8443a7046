//! Server side of a session. Every value handled here is a [`Share`]; the
//! plaintext logits are only formed in `reveal` and only when the session
//! was negotiated with `reveal_to_server`.

use xpi_core::model::IN_CHANNELS;
use xpi_core::{CorrelatedRandomness, PartyId, Program, RealTensor, RingTensor, Share};

use super::{abort_on_error, assemble, check_bundle, evaluate, handshake, io_step, reveal, SessionParams};
use crate::error::{Result, XpiError};
use crate::transcript::{Recorder, Transcript};
use crate::transport::Endpoint;

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub transcript: Transcript,
    /// Present only when the client agreed to reveal.
    pub revealed_logits: Option<RealTensor>,
}

pub fn server_serve(
    ep: &mut Endpoint,
    program: &Program,
    corr: &mut CorrelatedRandomness,
    params: &SessionParams,
) -> Result<ServerOutcome> {
    let r = serve(ep, program, corr, params);
    abort_on_error(ep, r)
}

fn serve(
    ep: &mut Endpoint,
    program: &Program,
    corr: &mut CorrelatedRandomness,
    params: &SessionParams,
) -> Result<ServerOutcome> {
    check_bundle(corr, PartyId::Server, params)?;
    let fp = params.fp()?;
    let setup = handshake(ep, PartyId::Server, params)?;

    let mut rec = Recorder::new(ep.stats());
    let start = rec.origin();
    let s = program.config.image_size;
    let shape = vec![params.batch, IN_CHANNELS, s, s];
    let input = io_step(&mut rec, "input", || {
        let words = ep.recv_io()?;
        if words.len() != shape.iter().product::<usize>() {
            return Err(XpiError::Invalid(format!("input share of {} elements for shape {shape:?}", words.len())));
        }
        Ok(Share::new(PartyId::Server, RingTensor::new(shape.clone(), words, params.frac_bits)?))
    })?;
    let out = evaluate(ep, program, corr, fp, input, &mut rec)?;
    let revealed_logits = io_step(&mut rec, "output", || {
        ep.send_io(out.tensor().data())?;
        match params.reveal_to_server {
            true => Ok(Some(reveal::open_for_server(&out, ep.recv_io()?)?)),
            false => Ok(None),
        }
    })?;
    let total_seconds = start.elapsed().as_secs_f64();
    let transcript = assemble(PartyId::Server, ep, params, setup, rec.into_records(), total_seconds);
    Ok(ServerOutcome { transcript, revealed_logits })
}
