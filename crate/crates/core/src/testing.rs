//! Two-thread harness for running both protocol roles in unit tests.

use alloc::vec::Vec;
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};
use crate::protocol::OpenChannel;

pub struct ThreadChannel {
    tx: Sender<Vec<u64>>,
    rx: Receiver<Vec<u64>>,
    pub rounds: usize,
}

impl OpenChannel for ThreadChannel {
    fn exchange(&mut self, outgoing: &[u64]) -> Result<Vec<u64>> {
        self.rounds += 1;
        self.tx
            .send(outgoing.to_vec())
            .map_err(|_| Error::Transport("peer gone".into()))?;
        self.rx.recv().map_err(|_| Error::Transport("peer gone".into()))
    }
}

pub fn channel_pair() -> (ThreadChannel, ThreadChannel) {
    let (t0, r1) = channel();
    let (t1, r0) = channel();
    (
        ThreadChannel { tx: t0, rx: r0, rounds: 0 },
        ThreadChannel { tx: t1, rx: r1, rounds: 0 },
    )
}

/// Runs the client closure on this thread and the server closure on a
/// scoped thread.
pub fn run_pair<A, B, F, G>(client: F, server: G) -> (A, B)
where
    A: Send,
    B: Send,
    F: FnOnce(&mut ThreadChannel) -> A + Send,
    G: FnOnce(&mut ThreadChannel) -> B + Send,
{
    let (mut c0, mut c1) = channel_pair();
    std::thread::scope(|s| {
        let h = s.spawn(move || server(&mut c1));
        let a = client(&mut c0);
        (a, h.join().expect("server thread panicked"))
    })
}
