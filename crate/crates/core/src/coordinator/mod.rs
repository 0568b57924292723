//! Barrier-synchronized state exchange.
//!
//! Workers register, publish one [`SnapshotEntry`](crate::swarm::SnapshotEntry)
//! per epoch, and block until the epoch's snapshot is complete. The
//! coordinator stores and forwards state; it never runs a dynamic.

pub mod rendezvous;
pub mod runlog;
pub mod server;
pub mod wire;

pub use rendezvous::{Outcome, Rendezvous, RendezvousConfig, DEFAULT_TIMEOUT};
pub use runlog::{replay, LogEvent, Replay, RunLog, RunLogRecord};
pub use server::CoordinatorServer;
pub use wire::{MessageKind, WireMessage};
