//! Process identity and ring rendezvous.
//!
//! Every rank listens on its own endpoint and dials exactly one peer, its
//! successor. The inbound connection accepted on the listener becomes the link
//! from the predecessor. Both directions open with a HANDSHAKE frame carrying
//! the sender's claimed rank, so a miswired ring fails during init rather than
//! corrupting a reduction later.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::{
    read_frame, write_frame, Frame, FrameHeader, LinkCounters, MsgType, RecvLink, SendLink,
    StatsSnapshot,
};

pub const ENV_RANK: &str = "RINGWEAVE_RANK";
pub const ENV_SIZE: &str = "RINGWEAVE_SIZE";
pub const ENV_LOCAL_RANK: &str = "RINGWEAVE_LOCAL_RANK";
pub const ENV_ADDRS: &str = "RINGWEAVE_ADDRS";
pub const ENV_TIMEOUT_SECS: &str = "RINGWEAVE_TIMEOUT_SECS";
pub const ENV_TIMELINE: &str = "RINGWEAVE_TIMELINE";
pub const ENV_FUSION_BYTES: &str = "RINGWEAVE_FUSION_BYTES";
pub const ENV_CYCLE_MS: &str = "RINGWEAVE_CYCLE_MS";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// 64 MiB.
pub const DEFAULT_FUSION_BYTES: usize = 67_108_864;
pub const DEFAULT_CYCLE: Duration = Duration::from_millis(5);

pub const PROTOCOL_VERSION: u16 = 1;

const DIAL_RETRY: Duration = Duration::from_millis(20);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub rank: usize,
    pub size: usize,
    pub local_rank: usize,
    /// Listen endpoint of every rank, indexed by rank.
    pub addrs: Vec<String>,
    pub timeout: Duration,
    pub timeline: Option<PathBuf>,
    pub fusion_bytes: usize,
    pub cycle: Duration,
}

impl Config {
    pub fn from_env() -> Result<Self> {
        let vars: HashMap<String, String> = std::env::vars()
            .filter(|(k, _)| k.starts_with("RINGWEAVE_"))
            .collect();
        Self::from_env_map(&vars)
    }

    pub fn from_env_map(env: &HashMap<String, String>) -> Result<Self> {
        fn required<'a>(env: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
            env.get(key)
                .map(|s| s.trim())
                .ok_or_else(|| Error::Config(format!("{key} is not set")))
        }
        fn number<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}={raw:?} is not a valid number")))
        }

        let rank = number(ENV_RANK, required(env, ENV_RANK)?)?;
        let size = number(ENV_SIZE, required(env, ENV_SIZE)?)?;
        let local_rank = number(ENV_LOCAL_RANK, required(env, ENV_LOCAL_RANK)?)?;
        let addrs = required(env, ENV_ADDRS)?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let timeout = match env.get(ENV_TIMEOUT_SECS) {
            Some(v) => Duration::from_secs_f64(number::<f64>(ENV_TIMEOUT_SECS, v)?),
            None => DEFAULT_TIMEOUT,
        };
        let timeline = env
            .get(ENV_TIMELINE)
            .filter(|v| !v.trim().is_empty())
            .map(PathBuf::from);
        let fusion_bytes = match env.get(ENV_FUSION_BYTES) {
            Some(v) => number(ENV_FUSION_BYTES, v)?,
            None => DEFAULT_FUSION_BYTES,
        };
        let cycle = match env.get(ENV_CYCLE_MS) {
            Some(v) => Duration::from_secs_f64(number::<f64>(ENV_CYCLE_MS, v)? / 1e3),
            None => DEFAULT_CYCLE,
        };

        let cfg = Config {
            rank,
            size,
            local_rank,
            addrs,
            timeout,
            timeline,
            fusion_bytes,
            cycle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single-process config listening on an ephemeral loopback port.
    pub fn single() -> Self {
        Config {
            rank: 0,
            size: 1,
            local_rank: 0,
            addrs: vec!["127.0.0.1:0".into()],
            timeout: DEFAULT_TIMEOUT,
            timeline: None,
            fusion_bytes: DEFAULT_FUSION_BYTES,
            cycle: DEFAULT_CYCLE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config(format!("{ENV_SIZE} must be at least 1")));
        }
        if self.size > u16::MAX as usize {
            return Err(Error::Config(format!("{ENV_SIZE}={} exceeds 65535", self.size)));
        }
        if self.rank >= self.size {
            return Err(Error::Config(format!(
                "{ENV_RANK}={} out of range for size {}",
                self.rank, self.size
            )));
        }
        if self.local_rank >= self.size {
            return Err(Error::Config(format!(
                "{ENV_LOCAL_RANK}={} out of range for size {}",
                self.local_rank, self.size
            )));
        }
        if self.addrs.len() != self.size {
            return Err(Error::Config(format!(
                "{ENV_ADDRS} lists {} endpoints for size {}",
                self.addrs.len(),
                self.size
            )));
        }
        if let Some(bad) = self.addrs.iter().find(|a| a.is_empty() || !a.contains(':')) {
            return Err(Error::Config(format!("malformed endpoint {bad:?} in {ENV_ADDRS}")));
        }
        if self.cycle.is_zero() {
            return Err(Error::Config(format!("{ENV_CYCLE_MS} must be positive")));
        }
        Ok(())
    }

    pub fn successor(&self) -> usize {
        (self.rank + 1) % self.size
    }

    pub fn predecessor(&self) -> usize {
        (self.rank + self.size - 1) % self.size
    }
}

/// A connected ring position: identity plus links to both neighbours.
pub struct RingContext {
    rank: usize,
    size: usize,
    local_rank: usize,
    addrs: Vec<String>,
    send: SendLink,
    recv: RecvLink,
    counters: Arc<LinkCounters>,
    closed: bool,
}

impl std::fmt::Debug for RingContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RingContext")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("local_rank", &self.local_rank)
            .field("closed", &self.closed)
            .finish()
    }
}

impl RingContext {
    /// Binds this rank's endpoint and connects the ring.
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let endpoint = &cfg.addrs[cfg.rank];
        let listener = TcpListener::bind(endpoint.as_str()).map_err(|e| Error::Rendezvous {
            rank: cfg.rank,
            reason: format!("cannot listen on {endpoint}: {e}"),
        })?;
        Self::init_with_listener(cfg, listener)
    }

    /// Connects the ring using an already-bound listener for this rank.
    ///
    /// `cfg.addrs[cfg.rank]` is ignored for listening; it only has to match
    /// what the predecessor dials.
    pub fn init_with_listener(cfg: &Config, listener: TcpListener) -> Result<Self> {
        cfg.validate()?;
        let deadline = Instant::now() + cfg.timeout;
        let counters = Arc::new(LinkCounters::default());
        listener.set_nonblocking(true)?;

        // A ring of one dials its own listener, whatever port it actually got.
        let own_endpoint = match cfg.size {
            1 => Some(listener.local_addr()?.to_string()),
            _ => None,
        };
        let cancel = AtomicBool::new(false);
        let (dialed, accepted) = std::thread::scope(|s| {
            let acceptor = s.spawn(|| accept_predecessor(&listener, cfg, deadline, &cancel, &counters));
            let dialed = dial_successor(cfg, own_endpoint.as_deref(), deadline, &counters);
            if dialed.is_err() {
                cancel.store(true, Ordering::Relaxed);
            }
            let accepted = acceptor.join().expect("acceptor thread panicked");
            (dialed, accepted)
        });
        let dialed = dialed?;
        let accepted = accepted?;

        let send = SendLink::new(cfg.successor(), dialed, Arc::clone(&counters))?;
        let recv = RecvLink::new(cfg.predecessor(), accepted, Arc::clone(&counters))?;
        log::debug!(
            "rank {}/{} connected: send -> {}, recv <- {}",
            cfg.rank,
            cfg.size,
            cfg.successor(),
            cfg.predecessor()
        );
        Ok(RingContext {
            rank: cfg.rank,
            size: cfg.size,
            local_rank: cfg.local_rank,
            addrs: cfg.addrs.clone(),
            send,
            recv,
            counters,
            closed: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn local_rank(&self) -> usize {
        self.local_rank
    }

    pub fn addrs(&self) -> &[String] {
        &self.addrs
    }

    pub fn successor(&self) -> usize {
        (self.rank + 1) % self.size
    }

    pub fn predecessor(&self) -> usize {
        (self.rank + self.size - 1) % self.size
    }

    pub fn snapshot_stats(&self) -> StatsSnapshot {
        self.counters.snapshot()
    }

    pub fn counters(&self) -> Arc<LinkCounters> {
        Arc::clone(&self.counters)
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub(crate) fn ensure_open(&self) -> Result<()> {
        if self.closed {
            Err(Error::Closed)
        } else {
            Ok(())
        }
    }

    pub fn send_link(&self) -> Result<&SendLink> {
        self.ensure_open()?;
        Ok(&self.send)
    }

    pub fn recv_link(&mut self) -> Result<&mut RecvLink> {
        self.ensure_open()?;
        Ok(&mut self.recv)
    }

    /// Exchanges BYE with both neighbours and closes the links. Idempotent.
    ///
    /// Every rank must call this; it blocks until the predecessor's BYE arrives.
    pub fn shutdown(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        self.send.send_parts(FrameHeader::new(MsgType::Bye), &[])?;
        loop {
            let h = self.recv.recv_header()?;
            if h.msg_type == MsgType::Bye {
                break;
            }
            let mut skip = vec![0u8; h.payload_len as usize];
            self.recv.recv_payload_into(&mut skip)?;
            log::warn!("rank {}: discarding {:?} frame during shutdown", self.rank, h.msg_type);
        }
        self.send.close()
    }

    /// Closes without the BYE exchange; peers observe a transport error.
    pub fn abort(&mut self) {
        self.closed = true;
        let _ = self.send.close();
    }
}

fn handshake_frame(cfg: &Config) -> Frame {
    let mut payload = Vec::with_capacity(10);
    payload.extend_from_slice(&(cfg.rank as u32).to_le_bytes());
    payload.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    payload.extend_from_slice(&(cfg.size as u32).to_le_bytes());
    Frame::new(FrameHeader::new(MsgType::Handshake), payload)
}

/// Reads a HANDSHAKE and checks the peer is who the ring says it should be.
fn expect_handshake(stream: &mut TcpStream, cfg: &Config, expected: usize) -> Result<()> {
    let frame = read_frame(stream)
        .map_err(|e| rendezvous(expected, format!("handshake read failed: {e}")))?
        .ok_or_else(|| rendezvous(expected, "connection closed before handshake".into()))?;
    if frame.header.msg_type != MsgType::Handshake || frame.payload.len() != 10 {
        return Err(Error::protocol(format!(
            "expected HANDSHAKE from rank {expected}, got {:?} with {} payload bytes",
            frame.header.msg_type,
            frame.payload.len()
        )));
    }
    let p = &frame.payload;
    let claimed = u32::from_le_bytes(p[0..4].try_into().unwrap()) as usize;
    let version = u16::from_le_bytes(p[4..6].try_into().unwrap());
    let size = u32::from_le_bytes(p[6..10].try_into().unwrap()) as usize;
    if version != PROTOCOL_VERSION {
        return Err(Error::protocol(format!(
            "rank {expected} speaks protocol version {version}, this build speaks {PROTOCOL_VERSION}"
        )));
    }
    if claimed != expected || size != cfg.size {
        return Err(Error::protocol(format!(
            "rank {} expected neighbour rank {expected} of {}, peer claims rank {claimed} of {size}",
            cfg.rank, cfg.size
        )));
    }
    Ok(())
}

fn rendezvous(rank: usize, reason: String) -> Error {
    Error::Rendezvous { rank, reason }
}

fn remaining(deadline: Instant) -> Option<Duration> {
    deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
}

fn resolve(endpoint: &str) -> io::Result<Vec<SocketAddr>> {
    Ok(endpoint.to_socket_addrs()?.collect())
}

fn dial_successor(
    cfg: &Config,
    endpoint_override: Option<&str>,
    deadline: Instant,
    counters: &LinkCounters,
) -> Result<TcpStream> {
    let succ = cfg.successor();
    let endpoint = endpoint_override.unwrap_or(&cfg.addrs[succ]);
    let mut last_err = String::from("timed out");
    let mut stream = loop {
        let Some(left) = remaining(deadline) else {
            return Err(rendezvous(succ, format!("could not connect to {endpoint}: {last_err}")));
        };
        let attempt = resolve(endpoint).and_then(|addrs| {
            let mut err = io::Error::new(io::ErrorKind::NotFound, "no addresses resolved");
            for a in addrs {
                match TcpStream::connect_timeout(&a, left.min(Duration::from_secs(1))) {
                    Ok(s) => return Ok(s),
                    Err(e) => err = e,
                }
            }
            Err(err)
        });
        match attempt {
            Ok(s) => break s,
            Err(e) => {
                last_err = e.to_string();
                std::thread::sleep(DIAL_RETRY);
            }
        }
    };
    let left = remaining(deadline).unwrap_or(Duration::from_millis(1));
    stream.set_read_timeout(Some(left))?;
    let hello = handshake_frame(cfg);
    write_frame(&mut stream, &hello).map_err(|e| rendezvous(succ, e.to_string()))?;
    counters.on_send(MsgType::Handshake, hello.payload.len() as u64);
    expect_handshake(&mut stream, cfg, succ)?;
    counters.on_recv(MsgType::Handshake, hello.payload.len() as u64);
    stream.set_read_timeout(None)?;
    Ok(stream)
}

fn accept_predecessor(
    listener: &TcpListener,
    cfg: &Config,
    deadline: Instant,
    cancel: &AtomicBool,
    counters: &LinkCounters,
) -> Result<TcpStream> {
    let pred = cfg.predecessor();
    loop {
        if cancel.load(Ordering::Relaxed) {
            return Err(rendezvous(pred, "cancelled".into()));
        }
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                let left = remaining(deadline).unwrap_or(Duration::from_millis(1));
                stream.set_read_timeout(Some(left))?;
                expect_handshake(&mut stream, cfg, pred)?;
                counters.on_recv(MsgType::Handshake, 10);
                let hello = handshake_frame(cfg);
                write_frame(&mut stream, &hello).map_err(|e| rendezvous(pred, e.to_string()))?;
                counters.on_send(MsgType::Handshake, hello.payload.len() as u64);
                stream.set_read_timeout(None)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if remaining(deadline).is_none() {
                    return Err(rendezvous(
                        pred,
                        format!("no connection from rank {pred} before timeout"),
                    ));
                }
                std::thread::sleep(ACCEPT_POLL);
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(rendezvous(pred, format!("accept failed: {e}"))),
        }
    }
}

/// Binds `n` loopback listeners on ephemeral ports and returns one config per
/// rank wired to them. Used for in-process rings (tests, benches).
pub fn local_ring(n: usize) -> io::Result<Vec<(Config, TcpListener)>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<io::Result<Vec<_>>>()?;
    Ok(listeners
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let cfg = Config {
                rank,
                size: n,
                local_rank: rank,
                addrs: addrs.clone(),
                ..Config::single()
            };
            (cfg, l)
        })
        .collect())
}

/// Runs `f` on `n` threads, each owning one connected rank of a loopback ring.
/// Results come back in rank order.
pub fn with_local_ring<R, F>(n: usize, f: F) -> Vec<Result<R>>
where
    R: Send,
    F: Fn(RingContext) -> Result<R> + Sync,
{
    let ring = match local_ring(n) {
        Ok(r) => r,
        Err(e) => return (0..n).map(|_| Err(Error::Io(io::Error::new(e.kind(), e.to_string())))).collect(),
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = ring
            .into_iter()
            .map(|(cfg, l)| {
                let f = &f;
                s.spawn(move || RingContext::init_with_listener(&cfg, l).and_then(f))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    })
}
