//! Length-prefixed framing over an in-process channel or TCP, with exact
//! byte and round accounting.
//!
//! Wire format: `msg_type: u32 | length: u64 | payload`, little-endian.
//! Both endpoint kinds move the same encoded bytes, so counters and
//! digests are identical across them.

use std::io::{self, Cursor, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xpi_core::OpenChannel;

use crate::error::{Result, XpiError};

pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: u64 = 1 << 30;

/// Payloads above this size are written from a helper thread during an
/// exchange so two peers writing at once cannot fill both socket buffers.
const CONCURRENT_WRITE_THRESHOLD: usize = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    Handshake = 1,
    OpenShare = 2,
    IoShare = 3,
    Control = 4,
}

impl MsgType {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(MsgType::Handshake),
            2 => Some(MsgType::OpenShare),
            3 => Some(MsgType::IoShare),
            4 => Some(MsgType::Control),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Handshake => "handshake",
            MsgType::OpenShare => "open-share",
            MsgType::IoShare => "io-share",
            MsgType::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    /// Ring elements as little-endian words.
    pub fn from_words(msg_type: MsgType, words: &[u64]) -> Self {
        let mut payload = Vec::with_capacity(words.len() * 8);
        for w in words {
            payload.extend_from_slice(&w.to_le_bytes());
        }
        Self { msg_type, payload }
    }

    pub fn to_words(&self) -> Result<Vec<u64>> {
        if self.payload.len() % 8 != 0 {
            return Err(XpiError::MalformedFrame(format!(
                "{} payload of {} bytes is not a whole number of ring elements",
                self.msg_type.name(),
                self.payload.len()
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn wire_len(&self) -> u64 {
        (HEADER_LEN + self.payload.len()) as u64
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(&(self.msg_type as u32).to_le_bytes());
        h[4..].copy_from_slice(&(self.payload.len() as u64).to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.header())?;
    w.write_all(&frame.payload)?;
    w.flush()
}

/// Reads one frame. A clean end of stream before any header byte is
/// [`XpiError::Disconnected`]; anything shorter than a full frame is
/// malformed.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(XpiError::Disconnected),
            Ok(0) => {
                return Err(XpiError::MalformedFrame(format!(
                    "truncated header: {filled} of {HEADER_LEN} bytes"
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if is_disconnect(&e) => return Err(XpiError::Disconnected),
            Err(e) => return Err(e.into()),
        }
    }
    let raw_type = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
    let len = u64::from_le_bytes(header[4..].try_into().expect("8 bytes"));
    let msg_type = MsgType::from_u32(raw_type).ok_or(XpiError::UnknownFrameType(raw_type))?;
    if len > MAX_PAYLOAD {
        return Err(XpiError::Oversize(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => XpiError::MalformedFrame(format!("truncated payload: expected {len} bytes")),
        _ => e.into(),
    })?;
    Ok(Frame { msg_type, payload })
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
    )
}

/// Point-in-time copy of an endpoint's counters. Byte counts include the
/// 12-byte header of every frame; payload counts exclude it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub payload_sent: u64,
    pub payload_received: u64,
    pub rounds: u64,
}

impl Counters {
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            payload_sent: self.payload_sent - earlier.payload_sent,
            payload_received: self.payload_received - earlier.payload_received,
            rounds: self.rounds - earlier.rounds,
        }
    }
}

/// Shared counters, readable from another thread while the endpoint is
/// in use.
#[derive(Debug, Default)]
pub struct TransportStats {
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    payload_sent: AtomicU64,
    payload_received: AtomicU64,
    rounds: AtomicU64,
    sent_digest: Mutex<Sha256>,
    received_digest: Mutex<Sha256>,
}

impl TransportStats {
    pub fn snapshot(&self) -> Counters {
        let get = |a: &AtomicU64| a.load(Ordering::SeqCst);
        Counters {
            frames_sent: get(&self.frames_sent),
            frames_received: get(&self.frames_received),
            bytes_sent: get(&self.bytes_sent),
            bytes_received: get(&self.bytes_received),
            payload_sent: get(&self.payload_sent),
            payload_received: get(&self.payload_received),
            rounds: get(&self.rounds),
        }
    }

    /// Hex SHA-256 of every byte sent and every byte received, in order.
    pub fn digests(&self) -> (String, String) {
        let fin = |m: &Mutex<Sha256>| hex::encode(m.lock().expect("digest lock").clone().finalize());
        (fin(&self.sent_digest), fin(&self.received_digest))
    }

    fn on_send(&self, frame: &Frame) {
        self.frames_sent.fetch_add(1, Ordering::SeqCst);
        self.bytes_sent.fetch_add(frame.wire_len(), Ordering::SeqCst);
        self.payload_sent.fetch_add(frame.payload.len() as u64, Ordering::SeqCst);
        let mut d = self.sent_digest.lock().expect("digest lock");
        d.update(frame.header());
        d.update(&frame.payload);
    }

    fn on_recv(&self, frame: &Frame) {
        self.frames_received.fetch_add(1, Ordering::SeqCst);
        self.bytes_received.fetch_add(frame.wire_len(), Ordering::SeqCst);
        self.payload_received.fetch_add(frame.payload.len() as u64, Ordering::SeqCst);
        let mut d = self.received_digest.lock().expect("digest lock");
        d.update(frame.header());
        d.update(&frame.payload);
    }

    fn on_round(&self) {
        self.rounds.fetch_add(1, Ordering::SeqCst);
    }
}

/// Artificial link delay: every frame is held for half the round-trip time
/// plus its serialization time at the given bandwidth.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkShaping {
    pub rtt: Duration,
    pub bandwidth_bytes_per_sec: Option<f64>,
}

impl LinkShaping {
    pub fn rtt_ms(ms: f64) -> Self {
        Self { rtt: Duration::from_secs_f64(ms / 1000.0), bandwidth_bytes_per_sec: None }
    }

    fn delay(&self, bytes: u64) -> Duration {
        let transfer = self
            .bandwidth_bytes_per_sec
            .map_or(0.0, |bw| bytes as f64 / bw);
        self.rtt / 2 + Duration::from_secs_f64(transfer)
    }
}

enum Link {
    Loopback { tx: Sender<Vec<u8>>, rx: Receiver<Vec<u8>> },
    Tcp { reader: TcpStream, writer: TcpStream },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl TransportKind {
    pub const ALL: [TransportKind; 2] = [TransportKind::Loopback, TransportKind::Tcp];

    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Loopback => "loopback",
            TransportKind::Tcp => "tcp",
        }
    }

    /// Two connected endpoints; TCP uses an ephemeral localhost port.
    pub fn pair(self) -> Result<(Endpoint, Endpoint)> {
        match self {
            TransportKind::Loopback => Ok(loopback_pair()),
            TransportKind::Tcp => tcp_pair(),
        }
    }
}

/// One party's end of a connection. Not shared between threads at once.
pub struct Endpoint {
    link: Link,
    stats: Arc<TransportStats>,
    shaping: LinkShaping,
    last_error: Option<XpiError>,
}

pub fn loopback_pair() -> (Endpoint, Endpoint) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        Endpoint::new(Link::Loopback { tx: tx_a, rx: rx_a }),
        Endpoint::new(Link::Loopback { tx: tx_b, rx: rx_b }),
    )
}

pub fn tcp_pair() -> Result<(Endpoint, Endpoint)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((Endpoint::tcp(client)?, Endpoint::tcp(server)?))
}

/// Connects to `addr`, retrying until `patience` elapses so a client can be
/// started before its server.
pub fn connect(addr: impl ToSocketAddrs + Copy, patience: Duration) -> Result<Endpoint> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Endpoint::tcp(s),
            Err(e) if start.elapsed() < patience && e.kind() == io::ErrorKind::ConnectionRefused => {
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Accepts one connection on `listener`.
pub fn accept(listener: &TcpListener) -> Result<Endpoint> {
    let (stream, peer) = listener.accept()?;
    log::info!("accepted connection from {peer}");
    Endpoint::tcp(stream)
}

impl Endpoint {
    fn new(link: Link) -> Self {
        Self { link, stats: Arc::default(), shaping: LinkShaping::default(), last_error: None }
    }

    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self::new(Link::Tcp { reader: stream, writer }))
    }

    pub fn kind(&self) -> TransportKind {
        match self.link {
            Link::Loopback { .. } => TransportKind::Loopback,
            Link::Tcp { .. } => TransportKind::Tcp,
        }
    }

    pub fn with_shaping(mut self, shaping: LinkShaping) -> Self {
        self.shaping = shaping;
        self
    }

    pub fn stats(&self) -> Arc<TransportStats> {
        Arc::clone(&self.stats)
    }

    pub fn counters(&self) -> Counters {
        self.stats.snapshot()
    }

    /// The transport error behind the most recent failed
    /// [`OpenChannel::exchange`], if any.
    pub fn take_error(&mut self) -> Option<XpiError> {
        self.last_error.take()
    }

    fn check_size(frame: &Frame) -> Result<()> {
        match frame.payload.len() as u64 {
            n if n > MAX_PAYLOAD => Err(XpiError::Oversize(n)),
            _ => Ok(()),
        }
    }

    fn shape_delay(&self, frame: &Frame) {
        if self.shaping != LinkShaping::default() {
            thread::sleep(self.shaping.delay(frame.wire_len()));
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        Self::check_size(frame)?;
        self.shape_delay(frame);
        match &mut self.link {
            Link::Loopback { tx, .. } => tx.send(frame.encode()).map_err(|_| XpiError::Disconnected)?,
            Link::Tcp { writer, .. } => write_frame(writer, frame).map_err(map_write_error)?,
        }
        self.stats.on_send(frame);
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Frame> {
        let frame = match &mut self.link {
            Link::Loopback { rx, .. } => {
                let bytes = rx.recv().map_err(|_| XpiError::Disconnected)?;
                let mut cur = Cursor::new(bytes);
                let frame = read_frame(&mut cur)?;
                if cur.position() as usize != cur.get_ref().len() {
                    return Err(XpiError::MalformedFrame("trailing bytes after frame".into()));
                }
                frame
            }
            Link::Tcp { reader, .. } => read_frame(reader)?,
        };
        self.stats.on_recv(&frame);
        Ok(frame)
    }

    /// Receives a frame of type `want`. A control frame from the peer is
    /// an abort; any other type is a protocol desync.
    pub fn recv_expect(&mut self, want: MsgType) -> Result<Frame> {
        let frame = self.recv()?;
        match frame.msg_type {
            t if t == want => Ok(frame),
            MsgType::Control => Err(XpiError::PeerAbort(String::from_utf8_lossy(&frame.payload).into_owned())),
            t => Err(XpiError::UnexpectedFrame { expected: want.name(), got: t.name() }),
        }
    }

    /// Sends `frame` and receives the peer's frame of the same type. Over
    /// TCP large payloads are written concurrently with the read.
    pub fn exchange_frame(&mut self, frame: &Frame) -> Result<Frame> {
        let want = frame.msg_type;
        let concurrent = matches!(self.link, Link::Tcp { .. }) && frame.payload.len() > CONCURRENT_WRITE_THRESHOLD;
        if !concurrent {
            self.send(frame)?;
            return self.recv_expect(want);
        }
        Self::check_size(frame)?;
        self.shape_delay(frame);
        let Link::Tcp { reader, writer } = &mut self.link else { unreachable!() };
        let (written, received) = thread::scope(|s| {
            let w = s.spawn(|| write_frame(writer, frame));
            let r = read_frame(reader);
            (w.join().expect("writer thread"), r)
        });
        written.map_err(map_write_error)?;
        self.stats.on_send(frame);
        let got = received?;
        self.stats.on_recv(&got);
        match got.msg_type {
            t if t == want => Ok(got),
            MsgType::Control => Err(XpiError::PeerAbort(String::from_utf8_lossy(&got.payload).into_owned())),
            t => Err(XpiError::UnexpectedFrame { expected: want.name(), got: t.name() }),
        }
    }

    /// One-directional I/O round: sends ring elements as an io-share frame.
    pub fn send_io(&mut self, words: &[u64]) -> Result<()> {
        self.send(&Frame::from_words(MsgType::IoShare, words))?;
        self.stats.on_round();
        Ok(())
    }

    pub fn recv_io(&mut self) -> Result<Vec<u64>> {
        let words = self.recv_expect(MsgType::IoShare)?.to_words()?;
        self.stats.on_round();
        Ok(words)
    }

    /// Best-effort notice to the peer that this side is giving up.
    pub fn abort(&mut self, reason: &str) {
        if let Err(e) = self.send(&Frame::new(MsgType::Control, reason.as_bytes().to_vec())) {
            log::debug!("could not deliver abort: {e}");
        }
    }
}

fn map_write_error(e: io::Error) -> XpiError {
    if is_disconnect(&e) {
        XpiError::Disconnected
    } else {
        e.into()
    }
}

impl OpenChannel for Endpoint {
    /// One round: an open-share frame each way.
    fn exchange(&mut self, outgoing: &[u64]) -> xpi_core::Result<Vec<u64>> {
        let result = self
            .exchange_frame(&Frame::from_words(MsgType::OpenShare, outgoing))
            .and_then(|f| f.to_words());
        match result {
            Ok(words) => {
                self.stats.on_round();
                Ok(words)
            }
            Err(e) => {
                let msg = e.to_string();
                self.last_error = Some(e);
                Err(xpi_core::Error::Transport(msg))
            }
        }
    }
}
