//! Self-check suites behind `colearn verify`.
//!
//! Each check yields one [`CheckResult`]; failures are report content, never
//! errors. The report prints as JSON lines followed by a totals line.

use std::io::Write;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::coordinator::{replay, CoordinatorServer, Rendezvous, RendezvousConfig, RunLog};
use crate::dynamics::gradient_step;
use crate::error::{Error, Result};
use crate::models::conv::{ImageSample, PoolKind, Tensor3};
use crate::models::layers::Activation;
use crate::models::{
    build_sequence_classifier, finite_diff_gradient, max_relative_error, Arch, ClassifierDims, ConvNetClassifier, LossModel,
    Matrix, ModelRng, Rastrigin, Rosenbrock, SequenceSample, Sphere,
};
use crate::swarm::{DynamicKind, DynamicsConfig, WeightMatrix};
use crate::worker::{run_inprocess, run_particle, Exchange, LearningRates, LocalExchange, RemoteExchange, SwarmRun, WorkerSettings};

/// Tolerance for analytic against central-difference gradients.
pub const GRADIENT_TOL: f64 = 1e-4;
/// Random (params, batch) draws per model.
pub const GRADIENT_DRAWS: u64 = 10;
const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradients,
    Dynamics,
    Protocol,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: &'static str, check: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        CheckResult { suite, check: check.into(), pass, detail: detail.into() }
    }

    fn from_result(suite: &'static str, check: impl Into<String>, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Self::new(suite, check, true, detail),
            Err(e) => Self::new(suite, check, false, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// JSON lines, then `{"summary": ...}` with the totals.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&serde_json::to_string(c).expect("check serializes"));
            out.push('\n');
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        let totals = serde_json::json!({"summary": {"pass": failed == 0, "passed": self.checks.len() - failed, "failed": failed}});
        out.push_str(&totals.to_string());
        out.push('\n');
        out
    }
}

pub fn run(suite: Suite) -> Report {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradients());
    }
    if matches!(suite, Suite::Dynamics | Suite::All) {
        checks.extend(dynamics());
    }
    if matches!(suite, Suite::Protocol | Suite::All) {
        checks.extend(protocol());
    }
    Report { checks }
}

/// Worst relative error over [`GRADIENT_DRAWS`] draws of jittered params and a fresh batch.
pub fn worst_gradient_error<M: LossModel>(model: &M, mut batch: impl FnMut(&mut ModelRng) -> Vec<M::Sample>) -> f64 {
    (0..GRADIENT_DRAWS)
        .map(|draw| {
            let mut rng = ModelRng::seed_from_u64(0x6772_6164 + draw);
            let params: Vec<f64> = model.init_params(draw).iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect();
            let b = batch(&mut rng);
            max_relative_error(&model.gradient(&params, &b), &finite_diff_gradient(model, &params, &b, FD_EPS))
        })
        .fold(0.0, f64::max)
}

fn sequence_batch(dims: &ClassifierDims, rng: &mut ModelRng) -> Vec<SequenceSample> {
    (0..3)
        .map(|i| SequenceSample {
            frames: Matrix::from_fn(dims.frames, dims.features, |_, _| rng.gen_range(-1.0..1.0)),
            label: i % dims.num_classes,
        })
        .collect()
}

fn gradients() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let check = |name: &str, err: f64| CheckResult::new("gradients", name, err < GRADIENT_TOL, format!("max_rel_err={err:.3e}"));
    let push = |out: &mut Vec<CheckResult>, name: &str, err: f64| out.push(check(name, err));
    push(&mut out, "sphere", worst_gradient_error(&Sphere { dim: 6 }, |_| Vec::new()));
    push(&mut out, "rosenbrock", worst_gradient_error(&Rosenbrock { dim: 6 }, |_| Vec::new()));
    push(&mut out, "rastrigin", worst_gradient_error(&Rastrigin { dim: 6 }, |_| Vec::new()));

    let small = ClassifierDims { frames: 5, features: 4, num_classes: 3, d_model: 16, heads: 2, blocks: 2, ffn_dim: 8, units: 4, head_dim: 6, ..Default::default() };
    for arch in [Arch::Mlp, Arch::TransformerEncoder, Arch::Rnn, Arch::Lstm, Arch::Gru, Arch::BiLstm] {
        match build_sequence_classifier(arch, small.clone()) {
            Ok(m) => push(&mut out, arch.label(), worst_gradient_error(&m, |rng| sequence_batch(&small, rng))),
            Err(e) => out.push(CheckResult::new("gradients", arch.label(), false, e.to_string())),
        }
    }
    for (act, pool) in [(Activation::Relu, PoolKind::Max), (Activation::Tanh, PoolKind::Average)] {
        let name = format!("convnet_{act:?}_{pool:?}").to_lowercase();
        match ConvNetClassifier::new((5, 5, 2), (2, 2), 3, act, (2, 2), pool, 3) {
            Ok(net) => {
                let err = worst_gradient_error(&net, |rng| {
                    (0..3).map(|i| ImageSample { image: Tensor3::from_fn(5, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0)), label: i % 3 }).collect()
                });
                out.push(check(&name, err));
            }
            Err(e) => out.push(CheckResult::new("gradients", name, false, e.to_string())),
        }
    }
    out
}

fn quick_rendezvous(run_id: &str, n: usize, timeout: Duration) -> RendezvousConfig {
    RendezvousConfig { run_id: run_id.into(), expected_particles: n, timeout }
}

/// Dynamic 1 with no attraction and a self-only neighborhood against plain GD, bitwise.
pub fn degeneracy_check(dim: usize, epochs: u64, particles: usize) -> Result<String> {
    let model = Sphere { dim };
    let settings = WorkerSettings {
        epochs,
        base_seed: 11,
        learning_rates: LearningRates::Fixed(0.05),
        dynamics: DynamicsConfig { dynamic: DynamicKind::Dynamic1, c1: 0.0, c2: 0.0, k: 0, warmup_epochs: 0, ..Default::default() },
        ..Default::default()
    };
    let run = run_inprocess(&model, &[], &[], &settings, particles, quick_rendezvous("degeneracy", particles, Duration::from_secs(30)), RunLog::discard())?;
    for p in &run.particles {
        let mut x = model.init_params(settings.base_seed + p.state.id as u64);
        for _ in 0..epochs {
            let g = model.gradient(&x, &[]);
            x = x.iter().zip(gradient_step(0.05, &g)).map(|(a, b)| a + b).collect();
        }
        if p.state.position.iter().zip(&x).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::invalid(format!("particle {} drifted from gradient descent", p.state.id)));
        }
    }
    Ok(format!("{particles} particles, D={dim}, {epochs} epochs bitwise equal"))
}

/// Checks that both bests never increase and `L(P_g) <= L(P)` on every record.
pub fn best_monotonicity(run: &SwarmRun) -> Result<()> {
    for p in &run.particles {
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for r in &p.trajectory {
            if r.best_loss > prev.0 || r.nbhd_best_loss > prev.1 {
                return Err(Error::invalid(format!("particle {} best loss increased at epoch {}", p.state.id, r.epoch)));
            }
            if r.nbhd_best_loss > r.best_loss {
                return Err(Error::invalid(format!("particle {} has L(P_g) > L(P) at epoch {}", p.state.id, r.epoch)));
            }
            prev = (r.best_loss, r.nbhd_best_loss);
        }
    }
    Ok(())
}

fn monotonicity_check(runs: u64) -> Result<String> {
    let kinds = [DynamicKind::Dynamic1, DynamicKind::Dynamic2, DynamicKind::IndividualGd];
    for i in 0..runs {
        let mut rng = ModelRng::seed_from_u64(i);
        let n = rng.gen_range(2..=5);
        let settings = WorkerSettings {
            epochs: 15,
            base_seed: i * 97,
            dynamics: DynamicsConfig { dynamic: kinds[i as usize % 3], k: rng.gen_range(0..n), ..Default::default() },
            ..Default::default()
        };
        let rdv = quick_rendezvous("monotone", n, Duration::from_secs(30));
        let dim = rng.gen_range(2..8);
        let run = if i % 2 == 0 {
            run_inprocess(&Rastrigin { dim }, &[], &[], &settings, n, rdv, RunLog::discard())?
        } else {
            run_inprocess(&Rosenbrock { dim }, &[], &[], &settings, n, rdv, RunLog::discard())?
        };
        best_monotonicity(&run)?;
    }
    Ok(format!("{runs} runs"))
}

fn table_weights_check() -> Result<String> {
    let m = WeightMatrix::default_for(4);
    for i in 0..4 {
        for j in 0..4 {
            let expected = if j == 3 && i != 3 { 10.0 } else { 0.2 };
            if i != j && m.get(i, j) != expected {
                return Err(Error::invalid(format!("M[{i}][{j}] = {}", m.get(i, j))));
            }
        }
    }
    Ok("default coupling matrix".into())
}

fn dynamics() -> Vec<CheckResult> {
    vec![
        CheckResult::from_result("dynamics", "degeneracy_single", degeneracy_check(10, 5, 1)),
        CheckResult::from_result("dynamics", "degeneracy_sphere_d100", degeneracy_check(100, 50, 4)),
        CheckResult::from_result("dynamics", "best_monotonicity", monotonicity_check(20)),
        CheckResult::from_result("dynamics", "default_weights", table_weights_check()),
    ]
}

/// In-memory run log sink that can be read back.
#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().expect("buffer lock").extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn protocol_settings() -> WorkerSettings {
    WorkerSettings { epochs: 6, base_seed: 5, dynamics: DynamicsConfig { k: 2, ..Default::default() }, ..Default::default() }
}

fn replay_check() -> Result<String> {
    let buf = SharedBuf::default();
    let settings = protocol_settings();
    let run = run_inprocess(&Rastrigin { dim: 4 }, &[], &[], &settings, 3, quick_rendezvous("replay", 3, Duration::from_secs(30)), RunLog::new(Box::new(buf.clone())))?;
    let bytes = buf.0.lock().expect("buffer lock").clone();
    let r = replay(bytes.as_slice())?;
    if r.publish_count() != 3 * settings.epochs as usize || !r.completed {
        return Err(Error::invalid(format!("replay saw {} publishes, completed={}", r.publish_count(), r.completed)));
    }
    for (epoch, losses) in run.epoch_losses().iter().enumerate() {
        let logged = &r.losses[&(epoch as u64)];
        if losses.iter().enumerate().any(|(pid, l)| logged[&pid].to_bits() != l.to_bits()) {
            return Err(Error::invalid(format!("replayed losses differ at epoch {epoch}")));
        }
    }
    Ok(format!("{} records replayed exactly", r.publish_count()))
}

fn loopback_check() -> Result<String> {
    let n = 3;
    let settings = protocol_settings();
    let model = Rastrigin { dim: 4 };
    let local = run_inprocess(&model, &[], &[], &settings, n, quick_rendezvous("loopback", n, Duration::from_secs(30)), RunLog::discard())?;

    let server = CoordinatorServer::bind("127.0.0.1:0", quick_rendezvous("loopback", n, Duration::from_secs(30)), RunLog::discard())?;
    let addr = server.local_addr()?;
    let serving = thread::spawn(move || server.serve());
    let workers: Vec<_> = (0..n)
        .map(|_| {
            let settings = settings.clone();
            thread::spawn(move || {
                let mut ex = RemoteExchange::connect(addr, "loopback", Duration::from_secs(10))?;
                run_particle(&model, &[], &[], &settings, &mut ex)
            })
        })
        .collect();
    let mut remote = Vec::new();
    for w in workers {
        remote.push(w.join().map_err(|_| Error::RunFailed("worker thread panicked".into()))??);
    }
    serving.join().map_err(|_| Error::RunFailed("server thread panicked".into()))??;
    remote.sort_by_key(|p| p.state.id);
    let remote = SwarmRun { particles: remote };
    let worst = local
        .epoch_losses()
        .iter()
        .zip(remote.epoch_losses())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    if worst > 1e-9 {
        return Err(Error::invalid(format!("networked losses differ by {worst:e}")));
    }
    Ok(format!("max |delta loss| = {worst:e}"))
}

/// One particle stops before `fail_epoch`; the others must time out and no
/// snapshot for that epoch may be released.
pub fn fault_injection_check(n: usize, fail_epoch: u64, timeout: Duration) -> Result<String> {
    let buf = SharedBuf::default();
    let rdv = Arc::new(Rendezvous::new(quick_rendezvous("fault", n, timeout), RunLog::new(Box::new(buf.clone())))?);
    let model = Sphere { dim: 3 };
    let results: Vec<Result<_>> = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|_| {
                let rdv = rdv.clone();
                let model = &model;
                s.spawn(move || {
                    let mut ex = LocalExchange::register(rdv)?;
                    let mut settings = WorkerSettings { epochs: fail_epoch + 3, dynamics: DynamicsConfig { k: 1, ..Default::default() }, ..Default::default() };
                    if ex.particle_id() == 0 {
                        settings.fail_before_epoch = Some(fail_epoch);
                    }
                    run_particle(model, &[], &[], &settings, &mut ex)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::RunFailed("panicked".into())))).collect()
    });
    let timeouts = results.iter().filter(|r| matches!(r, Err(Error::Timeout { .. }))).count();
    if timeouts != n - 1 {
        return Err(Error::invalid(format!("{timeouts} of {} surviving particles timed out", n - 1)));
    }
    let bytes = buf.0.lock().expect("buffer lock").clone();
    let r = replay(bytes.as_slice())?;
    if r.failure.is_none() {
        return Err(Error::invalid("run log does not mark the run failed"));
    }
    if r.released.iter().any(|&e| e >= fail_epoch) {
        return Err(Error::invalid(format!("a snapshot at or after epoch {fail_epoch} was released")));
    }
    Ok(format!("{timeouts} waiters timed out; last release {:?}", r.released.last()))
}

fn protocol() -> Vec<CheckResult> {
    vec![
        CheckResult::from_result("protocol", "log_replay", replay_check()),
        CheckResult::from_result("protocol", "loopback_equivalence", loopback_check()),
        CheckResult::from_result("protocol", "fault_injection_timeout", fault_injection_check(3, 2, Duration::from_millis(300))),
    ]
}
