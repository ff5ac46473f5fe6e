//! Framed two-party channel with per-phase byte accounting.
//!
//! Frame layout on the wire: `len: u32 LE | msg_type: u8 | payload[len]`.
//! Both the in-process pipe and the TCP backend move exactly these bytes, so
//! their [`ChannelStats`] agree for the same protocol run.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::time::{Duration, Instant};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::PartyId;

pub const FRAME_HEADER_BYTES: usize = 5;

/// Largest payload accepted from the wire (1 GiB).
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    ShareBatch = 1,
    OpenBatch = 2,
    AheCiphertextBatch = 3,
    PirQuery = 4,
    PirResponse = 5,
    Control = 6,
}

impl MsgType {
    pub const ALL: [MsgType; 6] = [
        MsgType::ShareBatch,
        MsgType::OpenBatch,
        MsgType::AheCiphertextBatch,
        MsgType::PirQuery,
        MsgType::PirResponse,
        MsgType::Control,
    ];

    pub fn from_u8(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(MsgType::ShareBatch),
            2 => Ok(MsgType::OpenBatch),
            3 => Ok(MsgType::AheCiphertextBatch),
            4 => Ok(MsgType::PirQuery),
            5 => Ok(MsgType::PirResponse),
            6 => Ok(MsgType::Control),
            other => Err(Error::protocol(format!("unknown msg_type {other}"))),
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::ShareBatch => "share_batch",
            MsgType::OpenBatch => "open_batch",
            MsgType::AheCiphertextBatch => "ahe_ciphertext_batch",
            MsgType::PirQuery => "pir_query",
            MsgType::PirResponse => "pir_response",
            MsgType::Control => "control",
        }
    }
}

/// Accounting buckets. `Offline` covers correlated-randomness and key
/// distribution; the online part is split into input sharing, computation
/// and output reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Offline,
    Input,
    Compute,
    Output,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Offline, Phase::Input, Phase::Compute, Phase::Output];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Input => "input",
            Phase::Compute => "compute",
            Phase::Output => "output",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Byte and frame counters for one party's side of a channel.
///
/// `bytes_sent` includes the 5-byte frame header; `payload_sent` counts only
/// payload bytes. Counters never decrease.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    bytes_sent: [u64; 4],
    payload_sent: [u64; 4],
    frames_sent: [u64; 6],
    bytes_received: u64,
    frames_received: [u64; 6],
}

impl ChannelStats {
    pub fn bytes_sent(&self, phase: Phase) -> u64 {
        self.bytes_sent[phase.index()]
    }

    pub fn payload_sent(&self, phase: Phase) -> u64 {
        self.payload_sent[phase.index()]
    }

    pub fn frames_sent(&self, msg_type: MsgType) -> u64 {
        self.frames_sent[msg_type.index()]
    }

    pub fn frames_received(&self, msg_type: MsgType) -> u64 {
        self.frames_received[msg_type.index()]
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }

    /// Input + compute + output, header bytes included.
    pub fn online_bytes_sent(&self) -> u64 {
        self.total_bytes_sent() - self.bytes_sent(Phase::Offline)
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    /// Counter growth between `earlier` and `self`.
    pub fn since(&self, earlier: &ChannelStats) -> ChannelStats {
        fn diff<const N: usize>(a: &[u64; N], b: &[u64; N]) -> [u64; N] {
            std::array::from_fn(|i| a[i] - b[i])
        }
        ChannelStats {
            bytes_sent: diff(&self.bytes_sent, &earlier.bytes_sent),
            payload_sent: diff(&self.payload_sent, &earlier.payload_sent),
            frames_sent: diff(&self.frames_sent, &earlier.frames_sent),
            bytes_received: self.bytes_received - earlier.bytes_received,
            frames_received: diff(&self.frames_received, &earlier.frames_received),
        }
    }

    fn record_sent(&mut self, phase: Phase, msg_type: MsgType, payload_len: usize) {
        self.bytes_sent[phase.index()] += (FRAME_HEADER_BYTES + payload_len) as u64;
        self.payload_sent[phase.index()] += payload_len as u64;
        self.frames_sent[msg_type.index()] += 1;
    }

    fn record_received(&mut self, msg_type: MsgType, payload_len: usize) {
        self.bytes_received += (FRAME_HEADER_BYTES + payload_len) as u64;
        self.frames_received[msg_type.index()] += 1;
    }

    /// Flat `key = value` rendering.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for phase in Phase::ALL {
            out.push_str(&format!("bytes_sent.{} = {}\n", phase, self.bytes_sent(phase)));
            out.push_str(&format!("payload_sent.{} = {}\n", phase, self.payload_sent(phase)));
        }
        for t in MsgType::ALL {
            out.push_str(&format!("frames_sent.{} = {}\n", t.name(), self.frames_sent(t)));
        }
        out.push_str(&format!("bytes_received = {}\n", self.bytes_received));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

/// Metadata of one frame as observed by a party; payload contents omitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub direction: Direction,
    pub msg_type: MsgType,
    pub payload_len: usize,
}

/// Encodes a frame into its wire bytes.
pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD_BYTES {
        return Err(Error::usage(format!("payload of {} bytes exceeds frame limit", payload.len())));
    }
    let mut buf = Vec::with_capacity(FRAME_HEADER_BYTES + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.push(msg_type as u8);
    buf.extend_from_slice(payload);
    Ok(buf)
}

/// Reads one frame. A clean end-of-stream before the first header byte is a
/// transport error (peer closed); anything cut short afterwards is a protocol
/// error.
pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> Result<(MsgType, Vec<u8>)> {
    let mut header = [0u8; FRAME_HEADER_BYTES];
    let got = read_fully(reader, &mut header)?;
    if got == 0 {
        return Err(Error::Transport("peer closed the channel".into()));
    }
    if got < FRAME_HEADER_BYTES {
        return Err(Error::protocol(format!("truncated frame header ({got} of 5 bytes)")));
    }
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let msg_type = MsgType::from_u8(header[4])?;
    if len > MAX_PAYLOAD_BYTES {
        return Err(Error::protocol(format!("frame length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    let got = read_fully(reader, &mut payload)?;
    if got < len {
        return Err(Error::protocol(format!("truncated frame payload ({got} of {len} bytes)")));
    }
    Ok((msg_type, payload))
}

fn read_fully<R: Read + ?Sized>(reader: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Transport(e.to_string())),
        }
    }
    Ok(filled)
}

/// Writing half of an in-process pipe. Each `write` call forwards one chunk.
pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
    latency: Option<Duration>,
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer dropped the pipe"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Reading half of an in-process pipe.
pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    pending: VecDeque<u8>,
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pending.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.pending.extend(chunk),
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        for (slot, byte) in buf.iter_mut().zip(self.pending.drain(..n)) {
            *slot = byte;
        }
        Ok(n)
    }
}

/// Unidirectional in-process byte pipe.
pub fn pipe(latency: Option<Duration>) -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (PipeWriter { tx, latency }, PipeReader { rx, pending: VecDeque::new() })
}

/// One party's end of a two-party session.
pub struct PartySession {
    party: PartyId,
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    stats: ChannelStats,
    transcript: Vec<FrameRecord>,
    rng_seed: u64,
    rng: ChaCha20Rng,
    busy: Duration,
}

impl fmt::Debug for PartySession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartySession")
            .field("party", &self.party)
            .field("rng_seed", &self.rng_seed)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl PartySession {
    pub fn new(
        party: PartyId,
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        rng_seed: u64,
    ) -> Self {
        PartySession {
            party,
            reader,
            writer,
            stats: ChannelStats::default(),
            transcript: Vec::new(),
            rng_seed,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            busy: Duration::ZERO,
        }
    }

    /// Connected in-process sessions for both parties. Party `b` draws its
    /// randomness from `seed ^ b`-derived streams.
    pub fn inproc_pair(seed: u64) -> (PartySession, PartySession) {
        Self::inproc_pair_with_latency(seed, None)
    }

    pub fn inproc_pair_with_latency(
        seed: u64,
        latency: Option<Duration>,
    ) -> (PartySession, PartySession) {
        let (w01, r01) = pipe(latency);
        let (w10, r10) = pipe(latency);
        let (s0, s1) = party_seeds(seed);
        (
            PartySession::new(PartyId::P0, Box::new(r10), Box::new(w01), s0),
            PartySession::new(PartyId::P1, Box::new(r01), Box::new(w10), s1),
        )
    }

    fn from_tcp(party: PartyId, stream: TcpStream, rng_seed: u64) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::new(stream);
        Ok(PartySession::new(party, Box::new(reader), Box::new(writer), rng_seed))
    }

    /// Accepts exactly one peer on `addr`.
    pub fn tcp_listen(addr: impl ToSocketAddrs, party: PartyId, rng_seed: u64) -> Result<Self> {
        let listener =
            TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind failed: {e}")))?;
        let (stream, _) =
            listener.accept().map_err(|e| Error::Transport(format!("accept failed: {e}")))?;
        Self::from_tcp(party, stream, rng_seed)
    }

    /// Connects to a listening peer, retrying until `timeout` elapses.
    pub fn tcp_connect(
        addr: &str,
        party: PartyId,
        rng_seed: u64,
        timeout: Duration,
    ) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr) {
                Ok(stream) => return Self::from_tcp(party, stream, rng_seed),
                Err(e) if Instant::now() >= deadline => {
                    return Err(Error::Transport(format!("cannot reach peer at {addr}: {e}")))
                }
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn transcript(&self) -> &[FrameRecord] {
        &self.transcript
    }

    /// Time spent blocked inside `send`/`recv`.
    pub fn io_time(&self) -> Duration {
        self.busy
    }

    pub fn send(&mut self, phase: Phase, msg_type: MsgType, payload: &[u8]) -> Result<()> {
        let start = Instant::now();
        let frame = encode_frame(msg_type, payload)?;
        self.writer
            .write_all(&frame)
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport(format!("send failed during {phase} phase: {e}")))?;
        self.stats.record_sent(phase, msg_type, payload.len());
        self.transcript.push(FrameRecord {
            direction: Direction::Sent,
            msg_type,
            payload_len: payload.len(),
        });
        self.busy += start.elapsed();
        Ok(())
    }

    pub fn recv(&mut self) -> Result<(MsgType, Vec<u8>)> {
        let start = Instant::now();
        let (msg_type, payload) = read_frame(&mut self.reader)?;
        self.stats.record_received(msg_type, payload.len());
        self.transcript.push(FrameRecord {
            direction: Direction::Received,
            msg_type,
            payload_len: payload.len(),
        });
        self.busy += start.elapsed();
        Ok((msg_type, payload))
    }

    /// Receives one frame and checks its type.
    pub fn recv_expect(&mut self, expected: MsgType) -> Result<Vec<u8>> {
        let (msg_type, payload) = self.recv()?;
        if msg_type != expected {
            return Err(Error::protocol(format!(
                "expected {} frame, got {}",
                expected.name(),
                msg_type.name()
            )));
        }
        Ok(payload)
    }

    /// Exchanges party ids over a CONTROL frame and rejects a peer claiming
    /// the same role.
    pub fn handshake(&mut self) -> Result<()> {
        let mine = [self.party.index() as u8];
        let theirs = match self.party {
            PartyId::P0 => {
                self.send(Phase::Offline, MsgType::Control, &mine)?;
                self.recv_expect(MsgType::Control)?
            }
            PartyId::P1 => {
                let theirs = self.recv_expect(MsgType::Control)?;
                self.send(Phase::Offline, MsgType::Control, &mine)?;
                theirs
            }
        };
        if theirs.len() != 1 || theirs[0] as usize != self.party.peer().index() {
            return Err(Error::protocol(format!(
                "peer announced role {theirs:?}, expected {}",
                self.party.peer().index()
            )));
        }
        Ok(())
    }

    /// Sends `payload` then receives the peer's frame of the same type (party
    /// 0), or the reverse order (party 1). Fixed ordering keeps large
    /// simultaneous exchanges from filling both socket buffers at once.
    pub fn exchange(&mut self, phase: Phase, msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
        match self.party {
            PartyId::P0 => {
                self.send(phase, msg_type, payload)?;
                self.recv_expect(msg_type)
            }
            PartyId::P1 => {
                let theirs = self.recv_expect(msg_type)?;
                self.send(phase, msg_type, payload)?;
                Ok(theirs)
            }
        }
    }
}

/// Runs both parties over a fresh in-process pipe, `f1` on a scoped thread.
///
/// Each session is dropped as soon as its closure returns, so a party that
/// fails early unblocks its peer with a transport error instead of hanging.
pub fn run_inproc<A: Send, B: Send>(
    seed: u64,
    f0: impl FnOnce(&mut PartySession) -> A + Send,
    f1: impl FnOnce(&mut PartySession) -> B + Send,
) -> (A, B) {
    let (s0, s1) = PartySession::inproc_pair(seed);
    thread::scope(|scope| {
        let h = scope.spawn(move || {
            let mut s1 = s1;
            f1(&mut s1)
        });
        let a = {
            let mut s0 = s0;
            f0(&mut s0)
        };
        match h.join() {
            Ok(b) => (a, b),
            Err(panic) => std::panic::resume_unwind(panic),
        }
    })
}

/// Per-party RNG seeds derived from one session seed.
pub fn party_seeds(seed: u64) -> (u64, u64) {
    let mix = |x: u64| {
        // splitmix64 finalizer
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    (mix(seed.wrapping_mul(2)), mix(seed.wrapping_mul(2).wrapping_add(1)))
}
