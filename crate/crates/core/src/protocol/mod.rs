//! Master/worker messages, their wire encoding, and the two transports
//! (in-process channels and TCP) that carry them.

pub mod transport;
pub mod wire;

pub use transport::{
    default_bind_addr, in_process, CommCounters, CommStats, InProcMaster, InProcWorker, MasterTransport,
    TcpMaster, TcpMasterListener, TcpWorker, TransportError, WorkerTransport, BIND_ADDR_ENV,
};
pub use wire::{decode, encode, encoded_len, Message, WireError};
