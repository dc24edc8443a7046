#![allow(dead_code)]

use std::sync::mpsc::{channel, Receiver, Sender};

use xpi_core::{Error, OpenChannel};

pub struct Pipe {
    tx: Sender<Vec<u64>>,
    rx: Receiver<Vec<u64>>,
    pub rounds: usize,
    pub words_sent: usize,
    pub opened: Vec<Vec<u64>>,
}

impl OpenChannel for Pipe {
    fn exchange(&mut self, outgoing: &[u64]) -> xpi_core::Result<Vec<u64>> {
        self.rounds += 1;
        self.words_sent += outgoing.len();
        self.tx.send(outgoing.to_vec()).map_err(|_| Error::Transport("closed".into()))?;
        let theirs = self.rx.recv().map_err(|_| Error::Transport("closed".into()))?;
        self.opened.push(outgoing.iter().zip(&theirs).map(|(a, b)| a.wrapping_add(*b)).collect());
        Ok(theirs)
    }
}

pub fn run_pair<A: Send, B: Send>(
    client: impl FnOnce(&mut Pipe) -> A + Send,
    server: impl FnOnce(&mut Pipe) -> B + Send,
) -> (A, B) {
    let (t0, r1) = channel();
    let (t1, r0) = channel();
    let mut p0 = Pipe { tx: t0, rx: r0, rounds: 0, words_sent: 0, opened: Vec::new() };
    let mut p1 = Pipe { tx: t1, rx: r1, rounds: 0, words_sent: 0, opened: Vec::new() };
    std::thread::scope(|s| {
        let h = s.spawn(move || server(&mut p1));
        let a = client(&mut p0);
        (a, h.join().unwrap())
    })
}

/// Chi-square statistic of byte values against the uniform distribution.
pub fn chi_square_bytes(bytes: impl Iterator<Item = u8>) -> f64 {
    let mut counts = [0u64; 256];
    let mut n = 0u64;
    for b in bytes {
        counts[b as usize] += 1;
        n += 1;
    }
    let expected = n as f64 / 256.0;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper 0.1% point of chi-square with 255 degrees of freedom.
pub const CHI2_255_P001: f64 = 330.52;
