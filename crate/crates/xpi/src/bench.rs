//! Square-protocol microbenchmark and the linear/non-linear latency
//! breakdown report.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use xpi_core::model::synth::random_images;
use xpi_core::protocol::{gen_square_pair, square_online};
use xpi_core::sharing::share;
use xpi_core::{FixedPointConfig, ModelWeights, Program, RingTensor};

use crate::error::{Result, XpiError};
use crate::session::{run_local, LocalOptions};
use crate::transport::{LinkShaping, TransportKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareBenchRow {
    pub n: usize,
    pub repeats: usize,
    pub mean_us_per_element: f64,
    pub stddev_us_per_element: f64,
    /// Payload bytes one party sends per squaring.
    pub bytes_per_party: u64,
    pub rounds: u64,
}

/// Times `square_online` on `n` shared elements, amortized per element.
pub fn bench_square(sizes: &[usize], repeats: usize, seed: u64, transport: TransportKind) -> Result<Vec<SquareBenchRow>> {
    if repeats == 0 {
        return Err(XpiError::Invalid("repeats must be positive".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ n as u64);
        let x = RingTensor::new(vec![n], (0..n).map(|_| rng.gen()).collect(), 16)?;
        let (x0, x1) = share(&x, &mut rng);
        let (pairs0, pairs1): (Vec<_>, Vec<_>) = (0..repeats).map(|_| gen_square_pair(&mut rng, n)).unzip();
        let (mut e0, mut e1) = transport.pair()?;
        let before = e0.counters();
        let (times, server) = std::thread::scope(|s| {
            let server = s.spawn(|| -> Result<()> {
                for p in pairs1 {
                    square_online(&x1, p, &mut e1)?;
                }
                Ok(())
            });
            let times: Result<Vec<f64>> = pairs0
                .into_iter()
                .map(|p| {
                    let t = Instant::now();
                    square_online(&x0, p, &mut e0)?;
                    Ok(t.elapsed().as_secs_f64())
                })
                .collect();
            (times, server.join().expect("bench server"))
        });
        server?;
        let times = times?;
        let d = e0.counters().since(&before);
        let per: Vec<f64> = times.iter().map(|t| t * 1e6 / n.max(1) as f64).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per.len() as f64;
        rows.push(SquareBenchRow {
            n,
            repeats,
            mean_us_per_element: mean,
            stddev_us_per_element: var.sqrt(),
            bytes_per_party: d.payload_sent / repeats as u64,
            rounds: d.rounds / repeats as u64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub transport: String,
    pub batch: usize,
    pub mode: String,
    pub linear_seconds: f64,
    pub nonlinear_seconds: f64,
    pub total_seconds: f64,
    /// Wire bytes in both directions, headers included, handshake excluded.
    pub bytes: u64,
    pub rounds: u64,
    /// Fraction of images whose private argmax equals the fixed-point
    /// plaintext argmax.
    pub argmax_agreement: f64,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub struct BreakdownOptions {
    pub model: String,
    pub fp: FixedPointConfig,
    pub transport: TransportKind,
    pub shaping: LinkShaping,
    pub seed: u64,
}

/// Private inference on seeded random images at each batch size.
pub fn breakdown(weights: &ModelWeights, batches: &[usize], opts: &BreakdownOptions) -> Result<Vec<ReportRow>> {
    let program = Program::compile(weights, opts.fp.frac_bits())?;
    let classes = weights.config.num_classes;
    let mut rows = Vec::with_capacity(batches.len());
    for &batch in batches {
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed.wrapping_add(batch as u64));
        let images = random_images(&weights.config, batch, &mut rng);
        let local = LocalOptions {
            fp: opts.fp,
            transport: opts.transport,
            shaping: opts.shaping,
            seed: opts.seed.wrapping_add(batch as u64),
            reveal_to_server: false,
        };
        let run = run_local(weights, &images, &local)?;
        let plain = program
            .eval_plain(&xpi_core::model::encode_images(&weights.config, &images, opts.fp.frac_bits())?)?
            .decode();
        let private = &run.client.logits;
        let agree = (0..batch)
            .filter(|&b| {
                let r = b * classes..(b + 1) * classes;
                argmax(&private.data()[r.clone()]) == argmax(&plain.data()[r])
            })
            .count();
        let t = &run.client.transcript;
        rows.push(ReportRow {
            model: opts.model.clone(),
            transport: opts.transport.name().into(),
            batch,
            mode: opts.fp.trunc_mode.name().into(),
            linear_seconds: t.totals.linear_seconds,
            nonlinear_seconds: t.totals.nonlinear_seconds,
            total_seconds: t.totals.total_seconds,
            bytes: t.totals.bytes_sent + t.totals.bytes_received - t.setup.bytes_sent - t.setup.bytes_received,
            rounds: t.totals.rounds,
            argmax_agreement: agree as f64 / batch.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| XpiError::Invalid(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json<T: Serialize>(rows: &[T]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| XpiError::Invalid(format!("json: {e}")))
}
