//! Per-step communication and timing records for one party's session.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xpi_core::{Phase, StepKind, StepObserver};

use crate::error::{Result, XpiError};
use crate::transport::{Counters, TransportStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub layer: String,
    /// `io`, `linear`, `square` or `truncation`.
    pub kind: String,
    /// `linear` or `nonlinear`.
    pub phase: String,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_sent: u64,
    pub payload_received: u64,
    pub rounds: u64,
    /// Offset of the step's start from the start of the online phase; the
    /// previous step's end.
    pub start_s: f64,
    pub wall_time_s: f64,
}

/// Traffic before the online phase (the handshake). Not counted in rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_sent: u64,
    pub payload_received: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_sent: u64,
    pub payload_received: u64,
    pub rounds: u64,
    pub linear_seconds: f64,
    pub nonlinear_seconds: f64,
    /// Online wall time measured around the whole pipeline, independently
    /// of the per-step records.
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub party: String,
    pub transport: String,
    pub model_hash: String,
    pub batch: usize,
    pub frac_bits: u32,
    pub trunc_mode: String,
    pub setup: Setup,
    pub records: Vec<StepRecord>,
    pub totals: Totals,
    pub sent_digest: String,
    pub received_digest: String,
}

pub fn kind_name(kind: StepKind) -> &'static str {
    match kind {
        StepKind::Io => "io",
        StepKind::Linear => "linear",
        StepKind::Square => "square",
        StepKind::Truncation => "truncation",
    }
}

pub fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Linear => "linear",
        Phase::NonLinear => "nonlinear",
    }
}

impl Transcript {
    /// Sum of the step records plus setup, for checking against totals.
    pub fn summed(&self) -> Totals {
        let mut t = Totals {
            bytes_sent: self.setup.bytes_sent,
            bytes_received: self.setup.bytes_received,
            payload_sent: self.setup.payload_sent,
            payload_received: self.setup.payload_received,
            total_seconds: self.totals.total_seconds,
            ..Totals::default()
        };
        for r in &self.records {
            t.bytes_sent += r.bytes_sent;
            t.bytes_received += r.bytes_received;
            t.payload_sent += r.payload_sent;
            t.payload_received += r.payload_received;
            t.rounds += r.rounds;
            match r.phase.as_str() {
                "nonlinear" => t.nonlinear_seconds += r.wall_time_s,
                _ => t.linear_seconds += r.wall_time_s,
            }
        }
        t
    }

    /// Copy with every wall time zeroed; equal across runs with the same
    /// seeds.
    pub fn without_timing(&self) -> Transcript {
        let mut t = self.clone();
        t.setup.wall_time_s = 0.0;
        t.totals.linear_seconds = 0.0;
        t.totals.nonlinear_seconds = 0.0;
        t.totals.total_seconds = 0.0;
        t.records.iter_mut().for_each(|r| {
            r.start_s = 0.0;
            r.wall_time_s = 0.0;
        });
        t
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| XpiError::Invalid(format!("transcript json: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| XpiError::format("transcript", e.to_string()))
    }

    /// One CSV row per step record.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| XpiError::Invalid(format!("transcript csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Step as captured during the run; converted to [`StepRecord`] after
/// the online phase so the hot path does not allocate.
struct RawStep {
    label: String,
    kind: StepKind,
    phase: Phase,
    traffic: Counters,
    start: f64,
    wall: f64,
}

/// Builds step records from evaluator callbacks and transport counters.
///
/// Timing is a lap timer: a step runs from the end of the previous step
/// (or the origin) to its own end, so the evaluator's glue between steps
/// is charged to the step that follows it and no online time goes
/// unattributed.
pub struct Recorder {
    origin: Instant,
    boundary: Instant,
    stats: Arc<TransportStats>,
    steps: Vec<RawStep>,
    open: Option<(String, StepKind, Phase, Counters, Instant)>,
}

impl Recorder {
    /// Starts the online-phase clock after allocating.
    pub fn new(stats: Arc<TransportStats>) -> Self {
        let steps = Vec::with_capacity(256);
        let origin = Instant::now();
        Self { origin, boundary: origin, stats, steps, open: None }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn into_records(self) -> Vec<StepRecord> {
        self.steps
            .into_iter()
            .enumerate()
            .map(|(index, s)| StepRecord {
                index,
                layer: s.label,
                kind: kind_name(s.kind).into(),
                phase: phase_name(s.phase).into(),
                bytes_sent: s.traffic.bytes_sent,
                bytes_received: s.traffic.bytes_received,
                payload_sent: s.traffic.payload_sent,
                payload_received: s.traffic.payload_received,
                rounds: s.traffic.rounds,
                start_s: s.start,
                wall_time_s: s.wall,
            })
            .collect()
    }
}

impl StepObserver for Recorder {
    fn begin(&mut self, label: &str, kind: StepKind, phase: Phase) {
        debug_assert!(self.open.is_none(), "steps do not nest");
        self.open = Some((label.to_owned(), kind, phase, self.stats.snapshot(), self.boundary));
    }

    fn end(&mut self) {
        let Some((label, kind, phase, before, start)) = self.open.take() else { return };
        let now = Instant::now();
        self.boundary = now;
        let wall = now.duration_since(start).as_secs_f64();
        let traffic = self.stats.snapshot().since(&before);
        let start = start.duration_since(self.origin).as_secs_f64();
        self.steps.push(RawStep { label, kind, phase, traffic, start, wall });
    }
}
