//! Framed byte transport between ring neighbours.
//!
//! Wire layout, all integers little-endian:
//!
//! ```text
//! msg_type:u8 | collective_id:u64 | phase_step:u16 | chunk_index:u16 | dtype_code:u8 | payload_len:u64 | payload
//! ```
//!
//! A process only ever writes to its successor and reads from its predecessor,
//! so a link is split into a [`SendLink`] and a [`RecvLink`]. The send side is
//! drained by a dedicated writer thread: enqueueing a frame returns at once,
//! which lets a ring step push its outgoing chunk while the owner blocks on the
//! incoming one.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::tensor::Element;

pub const FRAME_HEADER_LEN: usize = 22;
pub const RAW_DTYPE_CODE: u8 = 0;

const IO_BUF: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Handshake = 1,
    Chunk = 2,
    Ready = 3,
    Plan = 4,
    Bye = 5,
}

impl MsgType {
    pub const ALL: [MsgType; 5] = [
        MsgType::Handshake,
        MsgType::Chunk,
        MsgType::Ready,
        MsgType::Plan,
        MsgType::Bye,
    ];

    pub fn from_u8(v: u8) -> Option<MsgType> {
        match v {
            1 => Some(MsgType::Handshake),
            2 => Some(MsgType::Chunk),
            3 => Some(MsgType::Ready),
            4 => Some(MsgType::Plan),
            5 => Some(MsgType::Bye),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        self as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: MsgType,
    pub collective_id: u64,
    pub phase_step: u16,
    pub chunk_index: u16,
    pub dtype_code: u8,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn new(msg_type: MsgType) -> Self {
        FrameHeader {
            msg_type,
            collective_id: 0,
            phase_step: 0,
            chunk_index: 0,
            dtype_code: RAW_DTYPE_CODE,
            payload_len: 0,
        }
    }

    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[0] = self.msg_type as u8;
        out[1..9].copy_from_slice(&self.collective_id.to_le_bytes());
        out[9..11].copy_from_slice(&self.phase_step.to_le_bytes());
        out[11..13].copy_from_slice(&self.chunk_index.to_le_bytes());
        out[13] = self.dtype_code;
        out[14..22].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8; FRAME_HEADER_LEN]) -> Result<Self> {
        let msg_type = MsgType::from_u8(buf[0])
            .ok_or_else(|| Error::protocol(format!("unknown msg_type {}", buf[0])))?;
        Ok(FrameHeader {
            msg_type,
            collective_id: u64::from_le_bytes(buf[1..9].try_into().unwrap()),
            phase_step: u16::from_le_bytes(buf[9..11].try_into().unwrap()),
            chunk_index: u16::from_le_bytes(buf[11..13].try_into().unwrap()),
            dtype_code: buf[13],
            payload_len: u64::from_le_bytes(buf[14..22].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<u8>,
}

impl Frame {
    /// Builds a frame; `payload_len` is derived from the payload.
    pub fn new(mut header: FrameHeader, payload: Vec<u8>) -> Self {
        header.payload_len = payload.len() as u64;
        Frame { header, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_parts(&self.header, &self.payload)
    }
}

fn encode_parts(header: &FrameHeader, payload: &[u8]) -> Vec<u8> {
    let mut h = *header;
    h.payload_len = payload.len() as u64;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&h.encode());
    out.extend_from_slice(payload);
    out
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let mut h = frame.header;
    h.payload_len = frame.payload.len() as u64;
    w.write_all(&h.encode())?;
    w.write_all(&frame.payload)
}

/// Reads one frame. A stream that ends inside a frame is a protocol error;
/// a stream that ends cleanly between frames yields `Ok(None)`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut hb = [0u8; FRAME_HEADER_LEN];
    match read_full(r, &mut hb)? {
        0 => return Ok(None),
        n if n < FRAME_HEADER_LEN => {
            return Err(Error::protocol(format!("truncated frame header ({n} bytes)")))
        }
        _ => {}
    }
    let header = FrameHeader::decode(&hb)?;
    let mut payload = vec![0u8; header.payload_len as usize];
    let got = read_full(r, &mut payload)?;
    if got < payload.len() {
        return Err(Error::protocol(format!(
            "truncated payload: {got} of {} bytes",
            payload.len()
        )));
    }
    Ok(Some(Frame { header, payload }))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
}

impl std::ops::Sub for LinkStats {
    type Output = LinkStats;
    fn sub(self, rhs: LinkStats) -> LinkStats {
        LinkStats {
            frames_sent: self.frames_sent - rhs.frames_sent,
            frames_received: self.frames_received - rhs.frames_received,
            payload_bytes_sent: self.payload_bytes_sent - rhs.payload_bytes_sent,
            payload_bytes_received: self.payload_bytes_received - rhs.payload_bytes_received,
        }
    }
}

/// Per-message-type counters for one process's pair of ring links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    per_type: [LinkStats; 5],
}

impl StatsSnapshot {
    pub fn of(&self, t: MsgType) -> LinkStats {
        self.per_type[t.slot()]
    }

    pub fn chunk(&self) -> LinkStats {
        self.of(MsgType::Chunk)
    }

    pub fn total(&self) -> LinkStats {
        self.per_type.iter().fold(LinkStats::default(), |a, s| LinkStats {
            frames_sent: a.frames_sent + s.frames_sent,
            frames_received: a.frames_received + s.frames_received,
            payload_bytes_sent: a.payload_bytes_sent + s.payload_bytes_sent,
            payload_bytes_received: a.payload_bytes_received + s.payload_bytes_received,
        })
    }
}

impl std::ops::Sub for StatsSnapshot {
    type Output = StatsSnapshot;
    fn sub(self, rhs: StatsSnapshot) -> StatsSnapshot {
        let mut out = StatsSnapshot::default();
        for i in 0..5 {
            out.per_type[i] = self.per_type[i] - rhs.per_type[i];
        }
        out
    }
}

#[derive(Debug, Default)]
struct Counter {
    frames: AtomicU64,
    bytes: AtomicU64,
}

/// Shared, monotonic link counters. Reset only through [`LinkCounters::reset`].
#[derive(Debug, Default)]
pub struct LinkCounters {
    sent: [Counter; 5],
    received: [Counter; 5],
}

impl LinkCounters {
    pub(crate) fn on_send(&self, t: MsgType, bytes: u64) {
        let c = &self.sent[t.slot()];
        c.frames.fetch_add(1, Ordering::Relaxed);
        c.bytes.fetch_add(bytes, Ordering::Relaxed);
    }

    pub(crate) fn on_recv(&self, t: MsgType, bytes: u64) {
        let c = &self.received[t.slot()];
        c.frames.fetch_add(1, Ordering::Relaxed);
        c.bytes.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let mut out = StatsSnapshot::default();
        for t in MsgType::ALL {
            let i = t.slot();
            out.per_type[i] = LinkStats {
                frames_sent: self.sent[i].frames.load(Ordering::Relaxed),
                frames_received: self.received[i].frames.load(Ordering::Relaxed),
                payload_bytes_sent: self.sent[i].bytes.load(Ordering::Relaxed),
                payload_bytes_received: self.received[i].bytes.load(Ordering::Relaxed),
            };
        }
        out
    }

    pub fn reset(&self) {
        for c in self.sent.iter().chain(self.received.iter()) {
            c.frames.store(0, Ordering::Relaxed);
            c.bytes.store(0, Ordering::Relaxed);
        }
    }
}

/// Outbound half of a ring link. Frames are queued to a writer thread and hit
/// the socket in enqueue order.
pub struct SendLink {
    peer: usize,
    stream: TcpStream,
    tx: Option<mpsc::Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    failure: Arc<Mutex<Option<io::Error>>>,
    counters: Arc<LinkCounters>,
}

impl SendLink {
    pub fn new(peer: usize, stream: TcpStream, counters: Arc<LinkCounters>) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let failure = Arc::new(Mutex::new(None));
        let sink = stream.try_clone()?;
        let slot = Arc::clone(&failure);
        let writer = std::thread::Builder::new()
            .name(format!("ringweave-send-{peer}"))
            .spawn(move || {
                if let Err(e) = writer_loop(sink, rx) {
                    *slot.lock().unwrap() = Some(e);
                }
            })?;
        Ok(SendLink {
            peer,
            stream,
            tx: Some(tx),
            writer: Some(writer),
            failure,
            counters,
        })
    }

    pub fn peer(&self) -> usize {
        self.peer
    }

    fn check_failure(&self) -> Result<()> {
        if let Some(e) = self.failure.lock().unwrap().as_ref() {
            return Err(Error::transport(
                self.peer,
                io::Error::new(e.kind(), e.to_string()),
            ));
        }
        Ok(())
    }

    fn enqueue(&self, msg_type: MsgType, bytes: Vec<u8>, payload_len: u64) -> Result<()> {
        self.check_failure()?;
        let tx = self.tx.as_ref().ok_or(Error::Closed)?;
        if tx.send(bytes).is_err() {
            self.check_failure()?;
            return Err(Error::transport(
                self.peer,
                io::Error::new(io::ErrorKind::BrokenPipe, "writer thread exited"),
            ));
        }
        self.counters.on_send(msg_type, payload_len);
        Ok(())
    }

    pub fn send_frame(&self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        self.enqueue(frame.header.msg_type, bytes, frame.payload.len() as u64)
    }

    pub fn send_parts(&self, header: FrameHeader, payload: &[u8]) -> Result<()> {
        self.enqueue(header.msg_type, encode_parts(&header, payload), payload.len() as u64)
    }

    /// Sends a typed slice as the payload, stamping the element dtype into the header.
    pub fn send_elements<T: Element>(&self, mut header: FrameHeader, elems: &[T]) -> Result<()> {
        header.dtype_code = T::DTYPE.code();
        self.send_parts(header, bytemuck::cast_slice(elems))
    }

    /// Waits for every queued frame to reach the socket, then half-closes it.
    pub fn close(&mut self) -> Result<()> {
        drop(self.tx.take());
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
        self.check_failure()?;
        let _ = self.stream.shutdown(Shutdown::Write);
        Ok(())
    }
}

impl Drop for SendLink {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
    }
}

fn writer_loop(stream: TcpStream, rx: mpsc::Receiver<Vec<u8>>) -> io::Result<()> {
    let mut out = BufWriter::with_capacity(IO_BUF, stream);
    while let Ok(first) = rx.recv() {
        out.write_all(&first)?;
        // Coalesce whatever else is already queued before paying for a flush.
        while let Ok(next) = rx.try_recv() {
            out.write_all(&next)?;
        }
        out.flush()?;
    }
    out.flush()
}

/// Inbound half of a ring link.
pub struct RecvLink {
    peer: usize,
    reader: BufReader<TcpStream>,
    counters: Arc<LinkCounters>,
}

impl RecvLink {
    pub fn new(peer: usize, stream: TcpStream, counters: Arc<LinkCounters>) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(RecvLink {
            peer,
            reader: BufReader::with_capacity(IO_BUF, stream),
            counters,
        })
    }

    pub fn peer(&self) -> usize {
        self.peer
    }

    pub fn recv_header(&mut self) -> Result<FrameHeader> {
        let mut hb = [0u8; FRAME_HEADER_LEN];
        let n = read_full(&mut self.reader, &mut hb).map_err(|e| Error::transport(self.peer, e))?;
        if n == 0 {
            return Err(Error::transport(
                self.peer,
                io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed the link"),
            ));
        }
        if n < FRAME_HEADER_LEN {
            return Err(Error::protocol(format!(
                "truncated frame header from rank {} ({n} bytes)",
                self.peer
            )));
        }
        let h = FrameHeader::decode(&hb)?;
        self.counters.on_recv(h.msg_type, h.payload_len);
        Ok(h)
    }

    /// Reads exactly `buf.len()` payload bytes.
    pub fn recv_payload_into(&mut self, buf: &mut [u8]) -> Result<()> {
        let n = read_full(&mut self.reader, buf).map_err(|e| Error::transport(self.peer, e))?;
        if n < buf.len() {
            return Err(Error::protocol(format!(
                "truncated payload from rank {}: {n} of {} bytes",
                self.peer,
                buf.len()
            )));
        }
        Ok(())
    }

    pub fn recv_frame(&mut self) -> Result<Frame> {
        let header = self.recv_header()?;
        let mut payload = vec![0u8; header.payload_len as usize];
        self.recv_payload_into(&mut payload)?;
        Ok(Frame { header, payload })
    }

    pub fn set_read_timeout(&self, t: Option<std::time::Duration>) -> io::Result<()> {
        self.reader.get_ref().set_read_timeout(t)
    }
}
