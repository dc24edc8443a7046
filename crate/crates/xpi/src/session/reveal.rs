//! Opt-in disclosure of the logits to the server. Only reachable when the
//! session was negotiated with `reveal_to_server`.

use xpi_core::sharing::reconstruct;
use xpi_core::{PartyId, RealTensor, RingTensor, Share};

use crate::error::Result;

pub(super) fn open_for_server(own: &Share, client_words: Vec<u64>) -> Result<RealTensor> {
    let client = Share::new(
        PartyId::Client,
        RingTensor::new(own.shape().to_vec(), client_words, own.frac_bits())?,
    );
    Ok(reconstruct(&client, own)?.decode())
}
