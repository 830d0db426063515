use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{decode, decode_body, encode, Message, WireError, LEN_PREFIX};

/// Environment variable consulted for the default TCP bind address.
pub const BIND_ADDR_ENV: &str = "SCOPE_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:7878";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} disconnected")]
    Disconnected(u32),
    #[error("no peer with worker id {0}")]
    UnknownPeer(u32),
    #[error("decode failure: {0}")]
    Wire(#[from] WireError),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Snapshot of the communication counters of one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub payload_bytes: u64,
    pub sync_rounds: u64,
}

impl CommStats {
    /// Payload messages crossing this endpoint in either direction.
    pub fn messages(&self) -> u64 {
        self.messages_sent + self.messages_received
    }
}

/// Monotone counters shared between an endpoint and whoever observes it.
/// Only payload messages are counted; `Hello` and `Shutdown` are not.
#[derive(Debug, Default)]
pub struct CommCounters {
    sent: AtomicU64,
    received: AtomicU64,
    bytes: AtomicU64,
    barriers: AtomicU64,
}

impl CommCounters {
    fn on_send(&self, msg: &Message, frame_len: usize) {
        if msg.is_payload() {
            self.sent.fetch_add(1, Ordering::SeqCst);
            self.bytes.fetch_add(frame_len as u64, Ordering::SeqCst);
        }
    }

    fn on_recv(&self, msg: &Message, frame_len: usize) {
        if msg.is_payload() {
            self.received.fetch_add(1, Ordering::SeqCst);
            self.bytes.fetch_add(frame_len as u64, Ordering::SeqCst);
        }
    }

    pub fn note_barrier(&self) {
        self.barriers.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> CommStats {
        CommStats {
            messages_sent: self.sent.load(Ordering::SeqCst),
            messages_received: self.received.load(Ordering::SeqCst),
            payload_bytes: self.bytes.load(Ordering::SeqCst),
            sync_rounds: self.barriers.load(Ordering::SeqCst),
        }
    }
}

/// The master's side: one session per worker, addressed by worker id
/// (`1..=p`). Messages to and from one peer are delivered in order, exactly
/// once.
pub trait MasterTransport: Send {
    fn workers(&self) -> u32;
    fn send_to(&mut self, worker_id: u32, msg: &Message) -> Result<(), TransportError>;
    /// Blocks until the next message from `worker_id` arrives.
    fn recv_from(&mut self, worker_id: u32) -> Result<Message, TransportError>;
    fn counters(&self) -> &Arc<CommCounters>;

    fn comm_stats(&self) -> CommStats {
        self.counters().snapshot()
    }

    fn broadcast(&mut self, msg: &Message) -> Result<(), TransportError> {
        for k in 1..=self.workers() {
            self.send_to(k, msg)?;
        }
        Ok(())
    }
}

/// A worker's single session with the master.
pub trait WorkerTransport: Send {
    fn worker_id(&self) -> u32;
    fn send(&mut self, msg: &Message) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Message, TransportError>;
    fn counters(&self) -> &Arc<CommCounters>;

    fn comm_stats(&self) -> CommStats {
        self.counters().snapshot()
    }
}

// In-process transport: encoded frames over channels, so both transports
// share the codec path and report identical byte counts.

struct Pipe {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

fn pipe_send(pipe: &Pipe, peer: u32, msg: &Message, counters: &CommCounters) -> Result<(), TransportError> {
    let frame = encode(msg)?;
    let len = frame.len();
    pipe.tx.send(frame).map_err(|_| TransportError::Disconnected(peer))?;
    counters.on_send(msg, len);
    Ok(())
}

fn pipe_recv(pipe: &Pipe, peer: u32, counters: &CommCounters) -> Result<Message, TransportError> {
    let frame = pipe.rx.recv().map_err(|_| TransportError::Disconnected(peer))?;
    let msg = decode(&frame)?;
    counters.on_recv(&msg, frame.len());
    Ok(msg)
}

pub struct InProcMaster {
    peers: Vec<Pipe>,
    counters: Arc<CommCounters>,
}

pub struct InProcWorker {
    worker_id: u32,
    pipe: Pipe,
    counters: Arc<CommCounters>,
}

/// A master endpoint wired to `p` worker endpoints (ids `1..=p`).
pub fn in_process(p: u32) -> (InProcMaster, Vec<InProcWorker>) {
    let mut peers = Vec::with_capacity(p as usize);
    let mut workers = Vec::with_capacity(p as usize);
    for k in 1..=p {
        let (to_worker, from_master) = channel();
        let (to_master, from_worker) = channel();
        peers.push(Pipe {
            tx: to_worker,
            rx: from_worker,
        });
        workers.push(InProcWorker {
            worker_id: k,
            pipe: Pipe {
                tx: to_master,
                rx: from_master,
            },
            counters: Arc::default(),
        });
    }
    (
        InProcMaster {
            peers,
            counters: Arc::default(),
        },
        workers,
    )
}

impl InProcMaster {
    fn peer(&self, worker_id: u32) -> Result<&Pipe, TransportError> {
        worker_id
            .checked_sub(1)
            .and_then(|i| self.peers.get(i as usize))
            .ok_or(TransportError::UnknownPeer(worker_id))
    }
}

impl MasterTransport for InProcMaster {
    fn workers(&self) -> u32 {
        self.peers.len() as u32
    }

    fn send_to(&mut self, worker_id: u32, msg: &Message) -> Result<(), TransportError> {
        pipe_send(self.peer(worker_id)?, worker_id, msg, &self.counters)
    }

    fn recv_from(&mut self, worker_id: u32) -> Result<Message, TransportError> {
        pipe_recv(self.peer(worker_id)?, worker_id, &self.counters)
    }

    fn counters(&self) -> &Arc<CommCounters> {
        &self.counters
    }
}

impl WorkerTransport for InProcWorker {
    fn worker_id(&self) -> u32 {
        self.worker_id
    }

    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        pipe_send(&self.pipe, 0, msg, &self.counters)
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        pipe_recv(&self.pipe, 0, &self.counters)
    }

    fn counters(&self) -> &Arc<CommCounters> {
        &self.counters
    }
}

// TCP transport.

fn write_frame(stream: &mut TcpStream, msg: &Message) -> Result<usize, TransportError> {
    let frame = encode(msg)?;
    stream.write_all(&frame)?;
    Ok(frame.len())
}

fn read_frame(stream: &mut TcpStream, peer: u32) -> Result<(Message, usize), TransportError> {
    let mut prefix = [0u8; LEN_PREFIX];
    stream.read_exact(&mut prefix).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset => {
            TransportError::Disconnected(peer)
        }
        _ => TransportError::Io(e),
    })?;
    let len = u32::from_le_bytes(prefix) as usize;
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::Wire(WireError::Truncated {
            needed: len,
            available: 0,
        }),
        _ => TransportError::Io(e),
    })?;
    Ok((decode_body(&body)?, LEN_PREFIX + len))
}

pub struct TcpMaster {
    streams: Vec<TcpStream>,
    counters: Arc<CommCounters>,
}

/// Bound listener waiting for its workers. Split from [`TcpMaster`] so the
/// caller can learn the actual port before workers connect.
pub struct TcpMasterListener {
    listener: TcpListener,
    p: u32,
}

impl TcpMasterListener {
    pub fn bind<A: ToSocketAddrs>(addr: A, p: u32) -> Result<Self, TransportError> {
        Ok(TcpMasterListener {
            listener: TcpListener::bind(addr)?,
            p,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts exactly `p` workers; each must open with a `Hello` carrying a
    /// distinct id in `1..=p`.
    pub fn accept(self) -> Result<TcpMaster, TransportError> {
        let p = self.p as usize;
        let mut slots: Vec<Option<TcpStream>> = (0..p).map(|_| None).collect();
        for _ in 0..p {
            let (mut stream, from) = self.listener.accept()?;
            stream.set_nodelay(true)?;
            let (hello, _) = read_frame(&mut stream, 0)?;
            let Message::Hello { worker_id } = hello else {
                return Err(TransportError::Handshake(format!(
                    "{from} opened with {} instead of Hello",
                    hello.kind_name()
                )));
            };
            let slot = worker_id
                .checked_sub(1)
                .and_then(|i| slots.get_mut(i as usize))
                .ok_or_else(|| TransportError::Handshake(format!("worker id {worker_id} out of range 1..={p}")))?;
            if slot.is_some() {
                return Err(TransportError::Handshake(format!("duplicate worker id {worker_id}")));
            }
            log::debug!("worker {worker_id} connected from {from}");
            *slot = Some(stream);
        }
        Ok(TcpMaster {
            streams: slots.into_iter().map(|s| s.expect("all slots filled")).collect(),
            counters: Arc::default(),
        })
    }
}

impl TcpMaster {
    fn stream(&mut self, worker_id: u32) -> Result<&mut TcpStream, TransportError> {
        worker_id
            .checked_sub(1)
            .and_then(|i| self.streams.get_mut(i as usize))
            .ok_or(TransportError::UnknownPeer(worker_id))
    }
}

impl MasterTransport for TcpMaster {
    fn workers(&self) -> u32 {
        self.streams.len() as u32
    }

    fn send_to(&mut self, worker_id: u32, msg: &Message) -> Result<(), TransportError> {
        let len = write_frame(self.stream(worker_id)?, msg)
            .map_err(|e| disconnected_on_io(e, worker_id))?;
        self.counters.on_send(msg, len);
        Ok(())
    }

    fn recv_from(&mut self, worker_id: u32) -> Result<Message, TransportError> {
        let (msg, len) = read_frame(self.stream(worker_id)?, worker_id)?;
        self.counters.on_recv(&msg, len);
        Ok(msg)
    }

    fn counters(&self) -> &Arc<CommCounters> {
        &self.counters
    }
}

fn disconnected_on_io(e: TransportError, peer: u32) -> TransportError {
    match e {
        TransportError::Io(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset
            ) =>
        {
            TransportError::Disconnected(peer)
        }
        other => other,
    }
}

pub struct TcpWorker {
    worker_id: u32,
    stream: TcpStream,
    counters: Arc<CommCounters>,
}

impl TcpWorker {
    /// Connects to the master, retrying until `timeout` elapses, and sends
    /// the `Hello` handshake.
    pub fn connect<A: ToSocketAddrs>(addr: A, worker_id: u32, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        let mut stream = loop {
            match TcpStream::connect(&addrs[..]) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::trace!("worker {worker_id}: connect failed ({e}), retrying");
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nodelay(true)?;
        write_frame(&mut stream, &Message::Hello { worker_id })?;
        Ok(TcpWorker {
            worker_id,
            stream,
            counters: Arc::default(),
        })
    }
}

impl WorkerTransport for TcpWorker {
    fn worker_id(&self) -> u32 {
        self.worker_id
    }

    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let len = write_frame(&mut self.stream, msg).map_err(|e| disconnected_on_io(e, 0))?;
        self.counters.on_send(msg, len);
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        let (msg, len) = read_frame(&mut self.stream, 0)?;
        self.counters.on_recv(&msg, len);
        Ok(msg)
    }

    fn counters(&self) -> &Arc<CommCounters> {
        &self.counters
    }
}

/// Bind address from `SCOPE_BIND_ADDR`, falling back to the default.
pub fn default_bind_addr() -> String {
    std::env::var(BIND_ADDR_ENV).unwrap_or_else(|_| DEFAULT_BIND_ADDR.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVector;
    use crate::protocol::wire::encoded_len;
    use std::thread;

    fn sample(k: u32) -> Message {
        Message::LocalGradSum {
            round: 7,
            worker_id: k,
            z_k: ModelVector(vec![f64::MIN_POSITIVE / 3.0, -1e308, k as f64]),
        }
    }

    #[test]
    fn in_process_send_recv() {
        let (mut master, mut workers) = in_process(2);
        let msg = Message::Params {
            round: 0,
            w: ModelVector(vec![1.0, -2.0]),
        };
        master.send_to(2, &msg).unwrap();
        assert_eq!(workers[1].recv().unwrap(), msg);
        workers[0].send(&sample(1)).unwrap();
        assert_eq!(master.recv_from(1).unwrap(), sample(1));
        let stats = master.comm_stats();
        assert_eq!(stats.messages_sent, 1);
        assert_eq!(stats.messages_received, 1);
        assert_eq!(
            stats.payload_bytes,
            (encoded_len(&msg) + encoded_len(&sample(1))) as u64
        );
        assert!(matches!(master.send_to(3, &msg), Err(TransportError::UnknownPeer(3))));
        master.send_to(1, &Message::Shutdown).unwrap();
        assert_eq!(master.comm_stats().messages_sent, 1);
    }

    #[test]
    fn in_process_disconnect_is_reported() {
        let (mut master, workers) = in_process(1);
        drop(workers);
        assert!(matches!(master.recv_from(1), Err(TransportError::Disconnected(1))));
    }

    #[test]
    fn tcp_loopback_round_trip() {
        let listener = TcpMasterListener::bind("127.0.0.1:0", 3).unwrap();
        let addr = listener.local_addr().unwrap();
        let handles: Vec<_> = (1..=3)
            .map(|k| {
                thread::spawn(move || {
                    let mut w = TcpWorker::connect(addr, k, Duration::from_secs(5)).unwrap();
                    for _ in 0..5 {
                        w.send(&sample(k)).unwrap();
                    }
                    let got = w.recv().unwrap();
                    assert_eq!(got, Message::Shutdown);
                    w.comm_stats()
                })
            })
            .collect();
        let mut master = listener.accept().unwrap();
        for _ in 0..5 {
            for k in (1..=3).rev() {
                let msg = master.recv_from(k).unwrap();
                let Message::LocalGradSum { worker_id, z_k, .. } = &msg else {
                    panic!("unexpected {msg:?}");
                };
                assert_eq!(*worker_id, k);
                let expected = sample(k);
                let Message::LocalGradSum { z_k: want, .. } = &expected else { unreachable!() };
                let bits: Vec<u64> = z_k.0.iter().map(|x| x.to_bits()).collect();
                let want_bits: Vec<u64> = want.0.iter().map(|x| x.to_bits()).collect();
                assert_eq!(bits, want_bits);
            }
        }
        master.broadcast(&Message::Shutdown).unwrap();
        for h in handles {
            let s = h.join().unwrap();
            assert_eq!(s.messages_sent, 5);
        }
        assert_eq!(master.comm_stats().messages_received, 15);
    }

    #[test]
    fn tcp_rejects_bad_handshake() {
        let listener = TcpMasterListener::bind("127.0.0.1:0", 1).unwrap();
        let addr = listener.local_addr().unwrap();
        let h = thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            write_frame(&mut s, &Message::Shutdown).unwrap();
            let mut buf = [0u8; 1];
            let _ = s.read(&mut buf);
        });
        assert!(matches!(listener.accept(), Err(TransportError::Handshake(_))));
        h.join().unwrap();
    }
}
