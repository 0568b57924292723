//! TCP front end: one thread per worker connection, all sharing a [`Rendezvous`].

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::value::RawValue;

use super::rendezvous::{Outcome, Rendezvous, RendezvousConfig};
use super::runlog::RunLog;
use super::wire::{read_frame, write_frame, ErrorPayload, MessageKind, RegisterAckPayload, WireMessage};
use crate::error::{Error, Result};
use crate::swarm::{ParticleId, SnapshotEntry};

const ACCEPT_POLL: Duration = Duration::from_millis(10);

pub struct CoordinatorServer {
    listener: TcpListener,
    rendezvous: Arc<Rendezvous>,
}

impl CoordinatorServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, cfg: RendezvousConfig, log: RunLog) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(CoordinatorServer { listener, rendezvous: Arc::new(Rendezvous::new(cfg, log)?) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn rendezvous(&self) -> Arc<Rendezvous> {
        self.rendezvous.clone()
    }

    /// Serves until every particle completes or the run fails, then joins all
    /// connection threads.
    pub fn serve(self) -> Result<Outcome> {
        self.listener.set_nonblocking(true)?;
        let mut handlers: Vec<JoinHandle<()>> = Vec::new();
        let outcome = loop {
            if let Some(outcome) = self.rendezvous.outcome() {
                break outcome;
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let rdv = self.rendezvous.clone();
                    handlers.push(thread::spawn(move || {
                        // A broken connection only affects its own worker; the barrier timeout covers the rest.
                        let _ = handle_connection(stream, &rdv);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    self.rendezvous.fail(format!("accept failed: {e}"));
                    return Err(e.into());
                }
            }
        };
        for h in handlers {
            let _ = h.join();
        }
        Ok(outcome)
    }
}

fn handle_connection(stream: TcpStream, rdv: &Rendezvous) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    // Idle workers are given the barrier timeout plus slack before the thread gives up.
    stream.set_read_timeout(Some(rdv.config().timeout + Duration::from_secs(5)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut assigned: Option<ParticleId> = None;
    while let Some(msg) = read_frame(&mut reader)? {
        let done = msg.kind == MessageKind::RunComplete;
        let reply = match respond(rdv, &msg, &mut assigned) {
            Ok(reply) => reply,
            Err(e) => WireMessage::error(&msg.run_id, msg.particle_id, msg.epoch, &ErrorPayload::from_error(&e)),
        };
        write_frame(&mut writer, &reply)?;
        if done {
            break;
        }
    }
    Ok(())
}

fn respond(rdv: &Rendezvous, msg: &WireMessage, assigned: &mut Option<ParticleId>) -> Result<WireMessage> {
    let run_id = msg.run_id.as_str();
    if msg.kind == MessageKind::Register {
        if assigned.is_some() {
            return Err(Error::protocol("connection already registered"));
        }
        let pid = rdv.register(run_id)?;
        *assigned = Some(pid);
        let payload = RegisterAckPayload { expected_particles: rdv.config().expected_particles };
        return WireMessage::new(MessageKind::RegisterAck, run_id, pid, 0, &payload);
    }
    let pid = assigned.ok_or_else(|| Error::protocol("register before sending state"))?;
    if msg.particle_id != pid {
        return Err(Error::protocol(format!("connection is particle {pid}, message claims {}", msg.particle_id)));
    }
    match msg.kind {
        MessageKind::PublishState => {
            let entry: SnapshotEntry = msg.payload()?;
            rdv.publish(run_id, pid, msg.epoch, entry)?;
            Ok(WireMessage::empty(MessageKind::Heartbeat, run_id, pid, msg.epoch))
        }
        MessageKind::SnapshotReady => {
            let bytes = rdv.await_snapshot(run_id, pid, msg.epoch)?;
            let raw = RawValue::from_string(bytes.to_string())?;
            Ok(WireMessage::with_raw(MessageKind::SnapshotReply, run_id, pid, msg.epoch, raw))
        }
        MessageKind::RunComplete => {
            rdv.complete(run_id, pid)?;
            Ok(WireMessage::empty(MessageKind::RunComplete, run_id, pid, msg.epoch))
        }
        other => Err(Error::protocol(format!("unexpected {other:?} from a worker"))),
    }
}
