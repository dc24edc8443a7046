//! Two-party private inference for square-activation xMLP models: framed
//! transport, weight/vector/correlation files, client and server sessions,
//! transcripts and latency reports.

pub mod bench;
pub mod error;
pub mod format;
pub mod session;
pub mod transcript;
pub mod transport;

pub use error::{Result, XpiError};
