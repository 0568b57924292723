//! The barrier shared by the TCP server and the in-process swarm.
//!
//! A snapshot for epoch `t` is serialized exactly once, after all `N`
//! publishes for `t` are stored and the log is flushed; every waiter receives
//! the same bytes.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::runlog::{LogEvent, RunLog, RunLogRecord};
use crate::error::{Error, Result};
use crate::swarm::{NeighborSnapshot, ParticleId, SnapshotEntry};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone)]
pub struct RendezvousConfig {
    pub run_id: String,
    pub expected_particles: usize,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    Failed(String),
}

#[derive(Debug, Clone)]
struct Failure {
    message: String,
    timed_out: bool,
}

struct Released {
    bytes: Arc<str>,
    fetched: usize,
}

struct State {
    registered: usize,
    next_epoch: Vec<u64>,
    pending: BTreeMap<u64, Vec<SnapshotEntry>>,
    released: BTreeMap<u64, Released>,
    /// Highest epoch whose snapshot was ever released.
    last_released: Option<u64>,
    completed: Vec<bool>,
    failure: Option<Failure>,
    finished: bool,
    log: RunLog,
}

pub struct Rendezvous {
    cfg: RendezvousConfig,
    state: Mutex<State>,
    cv: Condvar,
}

impl Rendezvous {
    pub fn new(cfg: RendezvousConfig, mut log: RunLog) -> Result<Self> {
        if cfg.expected_particles == 0 {
            return Err(Error::invalid("a run needs at least one particle"));
        }
        log.append(&RunLogRecord::header(&cfg.run_id, cfg.expected_particles))?;
        log.flush()?;
        let n = cfg.expected_particles;
        Ok(Rendezvous {
            cfg,
            state: Mutex::new(State {
                registered: 0,
                next_epoch: vec![0; n],
                pending: BTreeMap::new(),
                released: BTreeMap::new(),
                last_released: None,
                completed: vec![false; n],
                failure: None,
                finished: false,
                log,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn config(&self) -> &RendezvousConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check_run(&self, run_id: &str) -> Result<()> {
        if run_id != self.cfg.run_id {
            return Err(Error::protocol(format!("unknown run `{run_id}`, serving `{}`", self.cfg.run_id)));
        }
        Ok(())
    }

    fn check_particle(&self, st: &State, pid: ParticleId) -> Result<()> {
        if pid >= st.registered {
            return Err(Error::protocol(format!("particle {pid} is not registered")));
        }
        Ok(())
    }

    fn failed_error(f: &Failure, epoch: u64) -> Error {
        if f.timed_out {
            Error::Timeout { epoch }
        } else {
            Error::RunFailed(f.message.clone())
        }
    }

    /// Marks the run failed and wakes every waiter. Later calls keep the first reason.
    pub fn fail(&self, message: impl Into<String>) {
        let mut st = self.lock();
        Self::fail_locked(&mut st, &self.cfg.run_id, message.into(), false);
        self.cv.notify_all();
    }

    fn fail_locked(st: &mut State, run_id: &str, message: String, timed_out: bool) {
        if st.failure.is_some() || st.finished {
            return;
        }
        let rec = RunLogRecord { message: Some(message.clone()), ..RunLogRecord::new(run_id, LogEvent::RunFailed) };
        // The run is already failing; a log error cannot change the outcome.
        let _ = st.log.append(&rec).and_then(|_| st.log.flush());
        st.failure = Some(Failure { message, timed_out });
        st.finished = true;
    }

    /// Ids are handed out `0..N` in arrival order.
    pub fn register(&self, run_id: &str) -> Result<ParticleId> {
        self.check_run(run_id)?;
        let mut st = self.lock();
        if let Some(f) = &st.failure {
            return Err(Error::RunFailed(f.message.clone()));
        }
        if st.registered == self.cfg.expected_particles {
            return Err(Error::protocol(format!("run `{run_id}` already has {} particles", st.registered)));
        }
        let pid = st.registered;
        st.registered += 1;
        let rec = RunLogRecord { particle_id: Some(pid), ..RunLogRecord::new(run_id, LogEvent::Register) };
        if let Err(e) = st.log.append(&rec) {
            Self::fail_locked(&mut st, &self.cfg.run_id, format!("run log write failed: {e}"), false);
            self.cv.notify_all();
            return Err(e);
        }
        self.cv.notify_all();
        Ok(pid)
    }

    pub fn publish(&self, run_id: &str, pid: ParticleId, epoch: u64, entry: SnapshotEntry) -> Result<()> {
        self.check_run(run_id)?;
        let mut st = self.lock();
        if let Some(f) = &st.failure {
            return Err(Self::failed_error(f, epoch));
        }
        self.check_particle(&st, pid)?;
        if entry.particle_id != pid {
            return Err(Error::protocol(format!("particle {pid} published an entry for particle {}", entry.particle_id)));
        }
        let expected = st.next_epoch[pid];
        if epoch != expected {
            return Err(if epoch < expected {
                Error::protocol(format!("duplicate publish of epoch {epoch} by particle {pid}"))
            } else {
                Error::EpochMismatch { particle_id: pid, expected, got: epoch }
            });
        }
        if let Err(e) = st.log.append(&RunLogRecord::publish(run_id, epoch, &entry)) {
            Self::fail_locked(&mut st, &self.cfg.run_id, format!("run log write failed: {e}"), false);
            self.cv.notify_all();
            return Err(e);
        }
        st.next_epoch[pid] += 1;
        let arrived = {
            let pending = st.pending.entry(epoch).or_default();
            pending.push(entry);
            pending.len()
        };
        if arrived == self.cfg.expected_particles {
            let entries = st.pending.remove(&epoch).expect("just inserted");
            if let Err(e) = self.release(&mut st, epoch, entries) {
                Self::fail_locked(&mut st, &self.cfg.run_id, e.to_string(), false);
                self.cv.notify_all();
                return Err(e);
            }
            self.cv.notify_all();
        }
        Ok(())
    }

    fn release(&self, st: &mut State, epoch: u64, entries: Vec<SnapshotEntry>) -> Result<()> {
        let snapshot = NeighborSnapshot::new(epoch, entries)?;
        let bytes: Arc<str> = serde_json::to_string(&snapshot)?.into();
        st.log.append(&RunLogRecord { epoch: Some(epoch), ..RunLogRecord::new(&self.cfg.run_id, LogEvent::SnapshotReleased) })?;
        st.log.flush()?;
        st.released.insert(epoch, Released { bytes, fetched: 0 });
        st.last_released = Some(epoch);
        Ok(())
    }

    /// Blocks until every particle has published `epoch`; returns the snapshot JSON.
    pub fn await_snapshot(&self, run_id: &str, pid: ParticleId, epoch: u64) -> Result<Arc<str>> {
        self.check_run(run_id)?;
        let deadline = Instant::now() + self.cfg.timeout;
        let mut st = self.lock();
        self.check_particle(&st, pid)?;
        if st.next_epoch[pid] <= epoch {
            return Err(Error::protocol(format!("particle {pid} awaits epoch {epoch} before publishing it")));
        }
        loop {
            if let Some(rel) = st.released.get_mut(&epoch) {
                let bytes = rel.bytes.clone();
                rel.fetched += 1;
                if rel.fetched == self.cfg.expected_particles {
                    st.released.remove(&epoch);
                }
                return Ok(bytes);
            }
            if let Some(f) = &st.failure {
                return Err(Self::failed_error(f, epoch));
            }
            let now = Instant::now();
            if now >= deadline {
                let msg = format!("timed out after {:?} waiting for the epoch {epoch} snapshot", self.cfg.timeout);
                Self::fail_locked(&mut st, &self.cfg.run_id, msg, true);
                self.cv.notify_all();
                return Err(Error::Timeout { epoch });
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    pub fn complete(&self, run_id: &str, pid: ParticleId) -> Result<()> {
        self.check_run(run_id)?;
        let mut st = self.lock();
        self.check_particle(&st, pid)?;
        if let Some(f) = &st.failure {
            return Err(Error::RunFailed(f.message.clone()));
        }
        st.completed[pid] = true;
        if st.completed.iter().all(|&c| c) {
            let rec = RunLogRecord::new(run_id, LogEvent::RunComplete);
            let logged = st.log.append(&rec).and_then(|_| st.log.flush());
            if let Err(e) = logged {
                Self::fail_locked(&mut st, &self.cfg.run_id, format!("run log write failed: {e}"), false);
                self.cv.notify_all();
                return Err(e);
            }
            st.finished = true;
            self.cv.notify_all();
        }
        Ok(())
    }

    pub fn outcome(&self) -> Option<Outcome> {
        let st = self.lock();
        match (&st.failure, st.finished) {
            (Some(f), _) => Some(Outcome::Failed(f.message.clone())),
            (None, true) => Some(Outcome::Completed),
            _ => None,
        }
    }

    /// Waits for completion or failure, up to `limit`.
    pub fn wait_finished(&self, limit: Duration) -> Option<Outcome> {
        let deadline = Instant::now() + limit;
        let mut st = self.lock();
        while !st.finished {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
        drop(st);
        self.outcome()
    }

    pub fn last_released_epoch(&self) -> Option<u64> {
        self.lock().last_released
    }

    pub fn registered(&self) -> usize {
        self.lock().registered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::runlog::replay;
    use std::io::Write;
    use std::thread;

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    fn entry(pid: ParticleId, epoch: u64) -> SnapshotEntry {
        let x = pid as f64 + epoch as f64 / 10.0;
        SnapshotEntry { particle_id: pid, position: vec![x, -x], psi: vec![0.1, 0.2], loss: x, personal_best: vec![x, -x], personal_best_loss: x }
    }

    fn rdv(n: usize, timeout: Duration) -> (Arc<Rendezvous>, Shared) {
        let buf = Shared::default();
        let cfg = RendezvousConfig { run_id: "r".into(), expected_particles: n, timeout };
        (Arc::new(Rendezvous::new(cfg, RunLog::new(Box::new(buf.clone()))).unwrap()), buf)
    }

    #[test]
    fn registration_assigns_ids_in_order_and_rejects_extras() {
        let (r, _) = rdv(2, DEFAULT_TIMEOUT);
        assert_eq!(r.register("r").unwrap(), 0);
        assert_eq!(r.register("r").unwrap(), 1);
        assert!(r.register("r").is_err());
        assert!(r.register("other").is_err());
    }

    #[test]
    fn single_particle_snapshot_is_immediate() {
        let (r, _) = rdv(1, Duration::from_millis(50));
        let pid = r.register("r").unwrap();
        r.publish("r", pid, 0, entry(pid, 0)).unwrap();
        let snap: NeighborSnapshot = serde_json::from_str(&r.await_snapshot("r", pid, 0).unwrap()).unwrap();
        assert_eq!(snap.entries, vec![entry(0, 0)]);
    }

    #[test]
    fn publish_order_errors() {
        let (r, _) = rdv(2, DEFAULT_TIMEOUT);
        let a = r.register("r").unwrap();
        assert!(r.publish("r", 1, 0, entry(1, 0)).is_err());
        r.publish("r", a, 0, entry(a, 0)).unwrap();
        assert!(matches!(r.publish("r", a, 0, entry(a, 0)), Err(Error::Protocol(_))));
        assert!(matches!(r.publish("r", a, 2, entry(a, 2)), Err(Error::EpochMismatch { expected: 1, got: 2, .. })));
        assert!(r.publish("r", a, 1, entry(1, 1)).is_err());
        assert!(r.await_snapshot("r", a, 1).is_err());
    }

    #[test]
    fn barrier_releases_identical_complete_snapshots() {
        let n = 4;
        let epochs = 6;
        let (r, buf) = rdv(n, Duration::from_secs(30));
        let handles: Vec<_> = (0..n)
            .map(|_| {
                let r = r.clone();
                thread::spawn(move || {
                    let pid = r.register("r").unwrap();
                    let mut got = Vec::new();
                    for epoch in 0..epochs {
                        thread::sleep(Duration::from_micros(((pid * 7 + epoch as usize * 13) % 5) as u64 * 300));
                        r.publish("r", pid, epoch, entry(pid, epoch)).unwrap();
                        let bytes = r.await_snapshot("r", pid, epoch).unwrap();
                        let snap: NeighborSnapshot = serde_json::from_str(&bytes).unwrap();
                        assert_eq!(snap.entries.len(), n);
                        got.push(bytes.to_string());
                    }
                    r.complete("r", pid).unwrap();
                    got
                })
            })
            .collect();
        let results: Vec<Vec<String>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        for w in results.windows(2) {
            assert_eq!(w[0], w[1]);
        }
        assert_eq!(r.outcome(), Some(Outcome::Completed));
        let replayed = replay(buf.0.lock().unwrap().as_slice()).unwrap();
        assert_eq!(replayed.publish_count(), n * epochs as usize);
        assert_eq!(replayed.released, (0..epochs).collect::<Vec<_>>());
        assert!(replayed.completed);

        // Every publish for an epoch is logged before its release record.
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let records: Vec<RunLogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        for epoch in 0..epochs {
            let release = records.iter().position(|r| r.event == LogEvent::SnapshotReleased && r.epoch == Some(epoch)).unwrap();
            let publishes = records[..release].iter().filter(|r| r.event == LogEvent::PublishState && r.epoch == Some(epoch)).count();
            assert_eq!(publishes, n);
        }
    }

    #[test]
    fn missing_worker_times_out_every_waiter() {
        let n = 3;
        let (r, buf) = rdv(n, Duration::from_millis(300));
        let ids: Vec<_> = (0..n).map(|_| r.register("r").unwrap()).collect();
        for &pid in &ids {
            r.publish("r", pid, 0, entry(pid, 0)).unwrap();
        }
        for &pid in &ids {
            r.await_snapshot("r", pid, 0).unwrap();
        }
        let waiters: Vec<_> = ids[..2]
            .iter()
            .map(|&pid| {
                let r = r.clone();
                thread::spawn(move || {
                    r.publish("r", pid, 1, entry(pid, 1)).unwrap();
                    r.await_snapshot("r", pid, 1)
                })
            })
            .collect();
        for w in waiters {
            assert!(matches!(w.join().unwrap(), Err(Error::Timeout { epoch: 1 })));
        }
        assert!(matches!(r.outcome(), Some(Outcome::Failed(_))));
        assert_eq!(r.last_released_epoch(), Some(0));
        assert!(r.publish("r", 2, 1, entry(2, 1)).is_err());
        let replayed = replay(buf.0.lock().unwrap().as_slice()).unwrap();
        assert!(replayed.failure.is_some());
        assert_eq!(replayed.released, vec![0]);
    }
}
