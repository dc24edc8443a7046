use rand::RngCore;
use xpi_core::model::encode_images;
use xpi_core::sharing::{reconstruct, share};
use xpi_core::{CorrelatedRandomness, PartyId, Program, RealTensor, RingTensor, Share};

use super::{abort_on_error, assemble, check_bundle, evaluate, handshake, io_step, SessionParams};
use crate::error::{Result, XpiError};
use crate::transcript::{Recorder, Transcript};
use crate::transport::Endpoint;

#[derive(Debug, Clone)]
pub struct ClientOutput {
    /// Decoded logits `[batch, classes]`.
    pub logits: RealTensor,
    pub logits_fixed: RingTensor,
    pub transcript: Transcript,
}

/// Client side: shares `images`, runs the pipeline in lock-step with the
/// server and reconstructs the logits.
pub fn client_infer(
    ep: &mut Endpoint,
    program: &Program,
    corr: &mut CorrelatedRandomness,
    params: &SessionParams,
    images: &RealTensor,
    rng: &mut impl RngCore,
) -> Result<ClientOutput> {
    let r = infer(ep, program, corr, params, images, rng);
    abort_on_error(ep, r)
}

fn infer(
    ep: &mut Endpoint,
    program: &Program,
    corr: &mut CorrelatedRandomness,
    params: &SessionParams,
    images: &RealTensor,
    rng: &mut impl RngCore,
) -> Result<ClientOutput> {
    check_bundle(corr, PartyId::Client, params)?;
    let fp = params.fp()?;
    let input = encode_images(&program.config, images, params.frac_bits)?;
    if input.shape()[0] != params.batch {
        return Err(XpiError::Invalid(format!(
            "{} images for a session of batch {}",
            input.shape()[0],
            params.batch
        )));
    }
    let setup = handshake(ep, PartyId::Client, params)?;

    let mut rec = Recorder::new(ep.stats());
    let start = rec.origin();
    let mine = io_step(&mut rec, "input", || {
        let (mine, theirs) = share(&input, rng);
        ep.send_io(theirs.tensor().data())?;
        Ok(mine)
    })?;
    let out = evaluate(ep, program, corr, fp, mine, &mut rec)?;
    let logits_fixed = io_step(&mut rec, "output", || {
        let words = ep.recv_io()?;
        let peer = Share::new(PartyId::Server, RingTensor::new(out.shape().to_vec(), words, out.frac_bits())?);
        if params.reveal_to_server {
            ep.send_io(out.tensor().data())?;
        }
        Ok(reconstruct(&out, &peer)?)
    })?;
    let total_seconds = start.elapsed().as_secs_f64();
    let transcript = assemble(PartyId::Client, ep, params, setup, rec.into_records(), total_seconds);
    Ok(ClientOutput { logits: logits_fixed.decode(), logits_fixed, transcript })
}
