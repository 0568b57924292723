//! The per-particle training loop.
//!
//! Each epoch a particle trains locally, publishes its state, waits for the
//! epoch snapshot, and moves by the configured dynamic:
//!
//! 1. `train_epoch` from `x(t)` gives the published position `x`.
//! 2. `psi = -eta grad L(x)` and `L(x)` are published with the personal best.
//! 3. The snapshot resolves the `k` nearest neighbors and the neighborhood best.
//! 4. The dynamic produces `x(t+1)`; warmup epochs use plain gradient descent.
//!
//! The same loop runs against an in-process [`Rendezvous`] or a remote
//! coordinator through the [`Exchange`] trait.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordinator::rendezvous::{Rendezvous, RendezvousConfig};
use crate::coordinator::runlog::RunLog;
use crate::coordinator::wire::{read_frame, write_frame, MessageKind, RegisterAckPayload, WireMessage};
use crate::data::shuffled_batches;
use crate::dynamics::{self, gradient_step, StepInput};
use crate::error::{Error, Result};
use crate::models::LossModel;
use crate::swarm::{
    nearest_neighbors, update_neighborhood_best, update_personal_best, DynamicKind, DynamicsConfig, NeighborSnapshot,
    ParticleId, ParticleState, SnapshotEntry,
};

/// Salt separating the learning-rate draw from every other seeded stream.
const LR_SEED_SALT: u64 = 0x6c72_5f64_7261_7700;
/// ChaCha stream used for the dynamics' random coefficients.
const DYNAMICS_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Full-batch gradient at the post-epoch position.
    #[default]
    FullBatch,
    /// Gradient of the last minibatch, evaluated at the post-epoch position.
    LastMinibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRegime {
    /// `1e-2, 1e-3, 1e-4`, then log-uniform in `[1e-5, 1e-1]` for every further particle.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRates {
    Fixed(f64),
    PerParticle(Vec<f64>),
    Regime(LrRegime),
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates::Regime(LrRegime::Paper)
    }
}

impl LearningRates {
    pub fn for_particle(&self, pid: ParticleId, base_seed: u64) -> Result<f64> {
        let lr = match self {
            LearningRates::Fixed(v) => *v,
            LearningRates::PerParticle(v) => {
                *v.get(pid).ok_or_else(|| Error::invalid(format!("no learning rate listed for particle {pid}")))?
            }
            LearningRates::Regime(LrRegime::Paper) => match pid {
                0 => 1e-2,
                1 => 1e-3,
                2 => 1e-4,
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(LR_SEED_SALT).wrapping_add(pid as u64));
                    10f64.powf(rng.gen_range(-5.0..=-1.0))
                }
            },
        };
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} for particle {pid} must be finite and non-negative")));
        }
        Ok(lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_seed: u64,
    pub learning_rates: LearningRates,
    pub dynamics: DynamicsConfig,
    pub gradient_source: GradientSource,
    /// Fault injection: stop without publishing this epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fail_before_epoch: Option<u64>,
}

impl Default for WorkerSettings {
    fn default() -> Self {
        WorkerSettings {
            epochs: 20,
            batch_size: 8,
            base_seed: 0,
            learning_rates: LearningRates::default(),
            dynamics: DynamicsConfig::default(),
            gradient_source: GradientSource::FullBatch,
            fail_before_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub params: Vec<f64>,
    /// Mean training-path loss over the epoch's minibatches.
    pub epoch_loss: f64,
    /// Deterministic full-batch loss at `params`.
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// One epoch of minibatch SGD in a seeded shuffle order.
///
/// Models without data (benchmark objectives) take no steps; their loss and
/// gradient are evaluated at the input.
pub fn train_epoch<M: LossModel + ?Sized>(
    model: &M,
    params: &[f64],
    data: &[M::Sample],
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    source: GradientSource,
) -> Result<EpochResult>
where
    M::Sample: Clone,
{
    crate::error::check_dim(model.dimension(), params.len())?;
    if data.is_empty() {
        let (loss, gradient) = model.loss_and_gradient(params, data);
        return Ok(EpochResult { params: params.to_vec(), epoch_loss: loss, loss, gradient });
    }
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={}", data.len())));
    }
    let mut x = params.to_vec();
    let mut total = 0.0;
    let mut last: Vec<M::Sample> = Vec::new();
    let batches = shuffled_batches(data.len(), batch_size, rng);
    for idx in &batches {
        let batch: Vec<M::Sample> = idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, g) = model.training_loss_and_gradient(&x, &batch, rng);
        total += loss;
        x.iter_mut().zip(&g).for_each(|(p, gi)| *p -= lr * gi);
        last = batch;
    }
    let (loss, gradient) = match source {
        GradientSource::FullBatch => model.loss_and_gradient(&x, data),
        GradientSource::LastMinibatch => (model.evaluate(&x, data), model.gradient(&x, &last)),
    };
    Ok(EpochResult { params: x, epoch_loss: total / batches.len() as f64, loss, gradient })
}

/// The exchange a particle talks to: local rendezvous or remote coordinator.
pub trait Exchange {
    fn particle_id(&self) -> ParticleId;
    fn swarm_size(&self) -> usize;
    fn publish(&mut self, epoch: u64, entry: SnapshotEntry) -> Result<()>;
    fn await_snapshot(&mut self, epoch: u64) -> Result<NeighborSnapshot>;
    fn complete(&mut self) -> Result<()>;
}

pub struct LocalExchange {
    rendezvous: Arc<Rendezvous>,
    run_id: String,
    pid: ParticleId,
}

impl LocalExchange {
    pub fn register(rendezvous: Arc<Rendezvous>) -> Result<Self> {
        let run_id = rendezvous.config().run_id.clone();
        let pid = rendezvous.register(&run_id)?;
        Ok(LocalExchange { rendezvous, run_id, pid })
    }
}

impl Exchange for LocalExchange {
    fn particle_id(&self) -> ParticleId {
        self.pid
    }

    fn swarm_size(&self) -> usize {
        self.rendezvous.config().expected_particles
    }

    fn publish(&mut self, epoch: u64, entry: SnapshotEntry) -> Result<()> {
        self.rendezvous.publish(&self.run_id, self.pid, epoch, entry)
    }

    fn await_snapshot(&mut self, epoch: u64) -> Result<NeighborSnapshot> {
        let bytes = self.rendezvous.await_snapshot(&self.run_id, self.pid, epoch)?;
        Ok(serde_json::from_str(&bytes)?)
    }

    fn complete(&mut self) -> Result<()> {
        self.rendezvous.complete(&self.run_id, self.pid)
    }
}

/// One persistent TCP connection to a coordinator.
pub struct RemoteExchange {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    run_id: String,
    pid: ParticleId,
    swarm_size: usize,
}

impl RemoteExchange {
    /// Connects (retrying until `connect_timeout`) and registers.
    pub fn connect<A: ToSocketAddrs + Clone>(addr: A, run_id: &str, connect_timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + connect_timeout;
        let stream = loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    let _ = e;
                    thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        write_frame(&mut writer, &WireMessage::empty(MessageKind::Register, run_id, 0, 0))?;
        let ack = Self::recv(&mut reader)?.expect_kind(MessageKind::RegisterAck)?;
        let payload: RegisterAckPayload = ack.payload()?;
        Ok(RemoteExchange { reader, writer, run_id: run_id.to_string(), pid: ack.particle_id, swarm_size: payload.expected_particles })
    }

    fn recv(reader: &mut BufReader<TcpStream>) -> Result<WireMessage> {
        read_frame(reader)?.ok_or_else(|| Error::protocol("coordinator closed the connection"))
    }

    fn call(&mut self, msg: WireMessage, reply: MessageKind) -> Result<WireMessage> {
        write_frame(&mut self.writer, &msg)?;
        let got = Self::recv(&mut self.reader)?.expect_kind(reply)?;
        if got.epoch != msg.epoch {
            return Err(Error::protocol(format!("reply for epoch {} to a request for epoch {}", got.epoch, msg.epoch)));
        }
        Ok(got)
    }
}

impl Exchange for RemoteExchange {
    fn particle_id(&self) -> ParticleId {
        self.pid
    }

    fn swarm_size(&self) -> usize {
        self.swarm_size
    }

    fn publish(&mut self, epoch: u64, entry: SnapshotEntry) -> Result<()> {
        let msg = WireMessage::new(MessageKind::PublishState, &self.run_id, self.pid, epoch, &entry)?;
        self.call(msg, MessageKind::Heartbeat).map(|_| ())
    }

    fn await_snapshot(&mut self, epoch: u64) -> Result<NeighborSnapshot> {
        let msg = WireMessage::empty(MessageKind::SnapshotReady, &self.run_id, self.pid, epoch);
        self.call(msg, MessageKind::SnapshotReply)?.payload()
    }

    fn complete(&mut self) -> Result<()> {
        let msg = WireMessage::empty(MessageKind::RunComplete, &self.run_id, self.pid, 0);
        self.call(msg, MessageKind::RunComplete).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryEvent {
    Init,
    Epoch,
}

/// One line of a particle's trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub particle_id: ParticleId,
    pub event: TrajectoryEvent,
    pub epoch: u64,
    pub learning_rate: f64,
    /// Loss at the published position (at the initial position for `init`).
    #[serde(with = "crate::swarm::nonfinite")]
    pub loss: f64,
    #[serde(with = "crate::swarm::nonfinite")]
    pub best_loss: f64,
    #[serde(with = "crate::swarm::nonfinite")]
    pub nbhd_best_loss: f64,
    #[serde(with = "crate::swarm::nonfinite")]
    pub position_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::swarm::opt_nonfinite")]
    pub test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    /// Seconds since the particle started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct ParticleResult {
    pub state: ParticleState,
    pub trajectory: Vec<TrajectoryRecord>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs one particle for `settings.epochs` epochs against `exchange`.
pub fn run_particle<M, E>(model: &M, train: &[M::Sample], test: &[M::Sample], settings: &WorkerSettings, exchange: &mut E) -> Result<ParticleResult>
where
    M: LossModel + ?Sized,
    M::Sample: Clone,
    E: Exchange + ?Sized,
{
    let started = Instant::now();
    let pid = exchange.particle_id();
    let n = exchange.swarm_size();
    settings.dynamics.validate(n)?;
    let weights = settings.dynamics.weight_matrix(n);
    let seed = settings.base_seed.wrapping_add(pid as u64);
    let lr = settings.learning_rates.for_particle(pid, settings.base_seed)?;
    let mut state = ParticleState::new(pid, model.init_params(seed), lr, seed);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dyn_rng = ChaCha8Rng::seed_from_u64(seed);
    dyn_rng.set_stream(DYNAMICS_STREAM);

    let evaluate_test = |x: &[f64]| -> (Option<f64>, Option<f64>) {
        if test.is_empty() {
            (None, None)
        } else {
            (Some(model.evaluate(x, test)), model.accuracy(x, test))
        }
    };
    let record = |state: &ParticleState, event, epoch, loss, x: &[f64], started: Instant| {
        let (test_loss, test_accuracy) = evaluate_test(x);
        TrajectoryRecord {
            particle_id: pid,
            event,
            epoch,
            learning_rate: lr,
            loss,
            best_loss: state.personal_best_loss,
            nbhd_best_loss: state.nbhd_best_loss,
            position_norm: norm(x),
            test_loss,
            test_accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        }
    };

    let init_loss = model.evaluate(&state.position, train);
    let mut trajectory = vec![record(&state, TrajectoryEvent::Init, 0, init_loss, &state.position, started)];

    for epoch in 0..settings.epochs {
        if settings.fail_before_epoch == Some(epoch) {
            return Err(Error::RunFailed(format!("particle {pid} stopped before epoch {epoch} by fault injection")));
        }
        state.epoch = epoch;
        let trained = train_epoch(model, &state.position, train, settings.batch_size, lr, &mut train_rng, settings.gradient_source)?;
        state.position = trained.params;
        let psi = gradient_step(lr, &trained.gradient);
        (state.personal_best, state.personal_best_loss) =
            update_personal_best(&state.personal_best, state.personal_best_loss, &state.position, trained.loss);

        exchange.publish(
            epoch,
            SnapshotEntry {
                particle_id: pid,
                position: state.position.clone(),
                psi,
                loss: trained.loss,
                personal_best: state.personal_best.clone(),
                personal_best_loss: state.personal_best_loss,
            },
        )?;
        let snapshot = exchange.await_snapshot(epoch)?;

        let k = settings.dynamics.k;
        let neighborhood = nearest_neighbors(&snapshot.positions(), pid, k)?;
        (state.nbhd_best, state.nbhd_best_loss) =
            update_neighborhood_best(&state.nbhd_best, state.nbhd_best_loss, &snapshot, &neighborhood)?;

        let published = state.position.clone();
        let kind = if epoch < settings.dynamics.warmup_epochs { DynamicKind::IndividualGd } else { settings.dynamics.dynamic };
        let input = StepInput {
            state: &state,
            snapshot: &snapshot,
            neighborhood: &neighborhood,
            config: &settings.dynamics,
            weights: &weights,
            gradient: &trained.gradient,
        };
        let out = dynamics::apply(kind, &input, &mut dyn_rng)?;
        state.position = out.new_position;
        state.velocity = out.new_velocity;
        trajectory.push(record(&state, TrajectoryEvent::Epoch, epoch, trained.loss, &published, started));
    }
    state.epoch = settings.epochs;
    exchange.complete()?;
    Ok(ParticleResult { state, trajectory })
}

#[derive(Debug, Clone)]
pub struct SwarmRun {
    /// Indexed by particle id.
    pub particles: Vec<ParticleResult>,
}

impl SwarmRun {
    /// `losses[epoch][pid]` for every completed epoch.
    pub fn epoch_losses(&self) -> Vec<Vec<f64>> {
        let epochs = self.particles.first().map(|p| p.trajectory.len() - 1).unwrap_or(0);
        (0..epochs).map(|e| self.particles.iter().map(|p| p.trajectory[e + 1].loss).collect()).collect()
    }
}

/// Runs `n` particles on threads sharing one rendezvous.
pub fn run_inprocess<M>(
    model: &M,
    train: &[M::Sample],
    test: &[M::Sample],
    settings: &WorkerSettings,
    n: usize,
    rendezvous: RendezvousConfig,
    log: RunLog,
) -> Result<SwarmRun>
where
    M: LossModel,
    M::Sample: Clone,
{
    crate::error::check_dim(n, rendezvous.expected_particles)?;
    settings.dynamics.validate(n)?;
    let rdv = Arc::new(Rendezvous::new(rendezvous, log)?);
    let results: Vec<Result<ParticleResult>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|_| {
                let rdv = rdv.clone();
                scope.spawn(move || {
                    let mut ex = LocalExchange::register(rdv.clone())?;
                    let result = run_particle(model, train, test, settings, &mut ex);
                    if let Err(e) = &result {
                        if !matches!(e, Error::Timeout { .. } | Error::RunFailed(_)) {
                            rdv.fail(e.to_string());
                        }
                    }
                    result
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::RunFailed("particle thread panicked".into())))).collect()
    });
    let mut particles = Vec::with_capacity(n);
    for r in results {
        particles.push(r?);
    }
    particles.sort_by_key(|p| p.state.id);
    Ok(SwarmRun { particles })
}

/// Writes one JSON object per line.
pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
