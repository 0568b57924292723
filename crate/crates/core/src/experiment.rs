//! Experiment configuration, the dynamic × model × seed grid, and result tables.
//!
//! A config is one JSON document with the sections `swarm`, `dynamics`,
//! `model`, `data`, `coordinator` and `seeds`; every field has a default, so
//! `{}` is a valid config. Unknown keys are rejected with their JSON path.
//!
//! ```
//! use colearn::experiment::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::from_json(r#"{"swarm": {"particles": 4}, "seeds": [0, 1]}"#).unwrap();
//! assert_eq!(cfg.swarm.epochs, 20);
//! assert_eq!(cfg.dynamics.params.c1, 0.5);
//!
//! let err = ExperimentConfig::from_json(r#"{"swarm": {"particle": 4}}"#).unwrap_err();
//! assert!(err.to_string().contains("swarm"));
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coordinator::{CoordinatorServer, Outcome, RendezvousConfig, RunLog};
use crate::data::{generate_dataset, to_samples, DatasetSpec, FrameSelection};
use crate::error::{Error, Result};
use crate::models::{build_sequence_classifier, Arch, ClassifierDims, LossModel, Rastrigin, Rosenbrock, SequenceSample, Sphere};
use crate::swarm::{DynamicKind, DynamicsConfig};
use crate::worker::{
    run_inprocess, run_particle, write_trajectory, GradientSource, LearningRates, ParticleResult, RemoteExchange, SwarmRun,
    TrajectoryEvent, TrajectoryRecord, WorkerSettings,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmSection {
    pub particles: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    pub gradient_source: GradientSource,
}

impl Default for SwarmSection {
    fn default() -> Self {
        SwarmSection { particles: 4, epochs: 20, batch_size: 8, learning_rates: LearningRates::default(), gradient_source: GradientSource::FullBatch }
    }
}

/// Dynamic parameters plus the list of dynamics the grid sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSection {
    #[serde(flatten)]
    pub params: DynamicsConfig,
    pub grid: Vec<DynamicKind>,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            params: DynamicsConfig::default(),
            grid: vec![DynamicKind::IndividualGd, DynamicKind::Dynamic1, DynamicKind::Dynamic2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Sphere { dim: usize },
    Rosenbrock { dim: usize },
    Rastrigin { dim: usize },
    /// `frames`, `features` and `num_classes` always follow the data section.
    Sequence {
        arch: Arch,
        #[serde(default)]
        dims: ClassifierDims,
    },
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Sphere { dim } => format!("sphere_d{dim}"),
            ModelSpec::Rosenbrock { dim } => format!("rosenbrock_d{dim}"),
            ModelSpec::Rastrigin { dim } => format!("rastrigin_d{dim}"),
            ModelSpec::Sequence { arch, .. } => format!("sequence_{}", arch.label()),
        }
    }

    fn uses_data(&self) -> bool {
        matches!(self, ModelSpec::Sequence { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelList {
    One(ModelSpec),
    Many(Vec<ModelSpec>),
}

impl ModelList {
    pub fn as_slice(&self) -> &[ModelSpec] {
        match self {
            ModelList::One(m) => std::slice::from_ref(m),
            ModelList::Many(v) => v,
        }
    }
}

impl Default for ModelList {
    fn default() -> Self {
        ModelList::One(ModelSpec::Sequence { arch: Arch::TransformerEncoder, dims: ClassifierDims::default() })
    }
}

/// Synthetic dataset settings. Run seed `s` generates the training set from
/// `seed + 2 s` and the test set from `seed + 2 s + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub features: usize,
    pub noise_sigma: f64,
    pub frames: usize,
    pub selection: FrameSelection,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            min_len: 16,
            max_len: 24,
            features: 8,
            noise_sigma: 0.3,
            frames: 16,
            selection: FrameSelection::Shadow,
            seed: 1000,
        }
    }
}

impl DataSection {
    fn spec(&self, per_class: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            samples_per_class: per_class,
            min_len: self.min_len,
            max_len: self.max_len,
            feature_dim: self.features,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }

    /// Train and test samples for run seed `seed`.
    pub fn samples(&self, seed: u64) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
        let base = self.seed.wrapping_add(seed.wrapping_mul(2));
        let train = generate_dataset(&self.spec(self.train_per_class, base))?;
        let test = generate_dataset(&self.spec(self.test_per_class, base.wrapping_add(1)))?;
        Ok((to_samples(&train, self.frames, self.selection)?, to_samples(&test, self.frames, self.selection)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorSection {
    pub listen: String,
    pub timeout_secs: f64,
    /// How long a worker keeps retrying its first connection.
    pub connect_timeout_secs: f64,
}

impl Default for CoordinatorSection {
    fn default() -> Self {
        CoordinatorSection { listen: "127.0.0.1:7878".into(), timeout_secs: 300.0, connect_timeout_secs: 30.0 }
    }
}

impl CoordinatorSection {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub swarm: SwarmSection,
    pub dynamics: DynamicsSection,
    pub model: ModelList,
    pub data: DataSection,
    pub coordinator: CoordinatorSection,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "colearn".into(),
            swarm: SwarmSection::default(),
            dynamics: DynamicsSection::default(),
            model: ModelList::default(),
            data: DataSection::default(),
            coordinator: CoordinatorSection::default(),
            seeds: vec![0],
        }
    }
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.swarm.particles;
        if n == 0 {
            return Err(config_error("swarm.particles", "must be at least 1"));
        }
        if self.swarm.batch_size == 0 {
            return Err(config_error("swarm.batch_size", "must be at least 1"));
        }
        if let LearningRates::PerParticle(v) = &self.swarm.learning_rates {
            if v.len() < n {
                return Err(config_error("swarm.learning_rates", format!("lists {} rates for {n} particles", v.len())));
            }
        }
        for pid in 0..n {
            self.swarm.learning_rates.for_particle(pid, 0).map_err(|e| config_error("swarm.learning_rates", e.to_string()))?;
        }
        self.dynamics.params.validate(n).map_err(|e| config_error("dynamics", e.to_string()))?;
        if self.dynamics.grid.is_empty() {
            return Err(config_error("dynamics.grid", "must list at least one dynamic"));
        }
        let models = self.model.as_slice();
        if models.is_empty() {
            return Err(config_error("model", "must list at least one model"));
        }
        for (i, m) in models.iter().enumerate() {
            let key = |field: &str| format!("model[{i}].{field}");
            match m {
                ModelSpec::Sphere { dim } | ModelSpec::Rosenbrock { dim } | ModelSpec::Rastrigin { dim } if *dim == 0 => {
                    return Err(config_error(key("dim"), "must be at least 1"));
                }
                ModelSpec::Sequence { arch, dims } => {
                    self.sequence_dims(dims).validate(*arch).map_err(|e| config_error(key("dims"), e.to_string()))?;
                }
                _ => {}
            }
        }
        if models.iter().any(ModelSpec::uses_data) {
            let d = &self.data;
            if d.min_len == 0 || d.max_len < d.min_len {
                return Err(config_error("data.max_len", "need 1 <= min_len <= max_len"));
            }
            if d.frames == 0 || d.features == 0 || d.num_classes == 0 {
                return Err(config_error("data", "frames, features and num_classes must be positive"));
            }
            if d.train_per_class == 0 {
                return Err(config_error("data.train_per_class", "must be at least 1"));
            }
            if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
                return Err(config_error("data.noise_sigma", "must be finite and non-negative"));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "must list at least one seed"));
        }
        let t = self.coordinator.timeout_secs;
        if !(t > 0.0 && t.is_finite()) {
            return Err(config_error("coordinator.timeout_secs", "must be positive"));
        }
        let t = self.coordinator.connect_timeout_secs;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(config_error("coordinator.connect_timeout_secs", "must be finite and non-negative"));
        }
        Ok(())
    }

    fn sequence_dims(&self, dims: &ClassifierDims) -> ClassifierDims {
        ClassifierDims { frames: self.data.frames, features: self.data.features, num_classes: self.data.num_classes, ..dims.clone() }
    }

    /// Worker settings for one cell of the grid.
    pub fn settings(&self, dynamic: DynamicKind, seed: u64) -> WorkerSettings {
        WorkerSettings {
            epochs: self.swarm.epochs,
            batch_size: self.swarm.batch_size,
            base_seed: seed,
            learning_rates: self.swarm.learning_rates.clone(),
            dynamics: DynamicsConfig { dynamic, ..self.dynamics.params.clone() },
            gradient_source: self.swarm.gradient_source,
            fail_before_epoch: None,
        }
    }

    pub fn rendezvous(&self, run_id: String) -> RendezvousConfig {
        RendezvousConfig { run_id, expected_particles: self.swarm.particles, timeout: self.coordinator.timeout() }
    }

    /// Run id of one grid cell and seed.
    pub fn cell_run_id(&self, model: &ModelSpec, dynamic: DynamicKind, seed: u64) -> String {
        format!("{}-{}-{}-s{seed}", self.run_id, model.label(), dynamic.label())
    }
}

/// Work that needs a concrete model type.
pub trait ModelTask {
    type Output;
    fn run<M>(self, model: &M, train: &[M::Sample], test: &[M::Sample]) -> Result<Self::Output>
    where
        M: LossModel,
        M::Sample: Clone;
}

/// Builds `spec` (and its data, for `seed`) and hands it to `task`.
pub fn with_model<T: ModelTask>(cfg: &ExperimentConfig, spec: &ModelSpec, seed: u64, task: T) -> Result<T::Output> {
    match spec {
        ModelSpec::Sphere { dim } => task.run(&Sphere { dim: *dim }, &[], &[]),
        ModelSpec::Rosenbrock { dim } => task.run(&Rosenbrock { dim: *dim }, &[], &[]),
        ModelSpec::Rastrigin { dim } => task.run(&Rastrigin { dim: *dim }, &[], &[]),
        ModelSpec::Sequence { arch, dims } => {
            let model = build_sequence_classifier(*arch, cfg.sequence_dims(dims))?;
            let (train, test) = cfg.data.samples(seed)?;
            task.run(&model, &train, &test)
        }
    }
}

struct InProcess<'a> {
    settings: WorkerSettings,
    n: usize,
    rendezvous: RendezvousConfig,
    log: Option<&'a Path>,
}

impl ModelTask for InProcess<'_> {
    type Output = SwarmRun;
    fn run<M>(self, model: &M, train: &[M::Sample], test: &[M::Sample]) -> Result<SwarmRun>
    where
        M: LossModel,
        M::Sample: Clone,
    {
        let log = match self.log {
            Some(p) => RunLog::create(p)?,
            None => RunLog::discard(),
        };
        run_inprocess(model, train, test, &self.settings, self.n, self.rendezvous, log)
    }
}

/// One swarm run in this process. `log` receives the coordinator run log.
pub fn run_cell(cfg: &ExperimentConfig, model: &ModelSpec, dynamic: DynamicKind, seed: u64, log: Option<&Path>) -> Result<SwarmRun> {
    let task = InProcess {
        settings: cfg.settings(dynamic, seed),
        n: cfg.swarm.particles,
        rendezvous: cfg.rendezvous(cfg.cell_run_id(model, dynamic, seed)),
        log,
    };
    with_model(cfg, model, seed, task)
}

struct Remote<'a> {
    settings: WorkerSettings,
    addr: &'a str,
    run_id: String,
    connect_timeout: Duration,
}

impl ModelTask for Remote<'_> {
    type Output = ParticleResult;
    fn run<M>(self, model: &M, train: &[M::Sample], test: &[M::Sample]) -> Result<ParticleResult>
    where
        M: LossModel,
        M::Sample: Clone,
    {
        let mut exchange = RemoteExchange::connect(self.addr, &self.run_id, self.connect_timeout)?;
        run_particle(model, train, test, &self.settings, &mut exchange)
    }
}

/// Worker role: first model and `dynamics.dynamic` of `cfg`, one particle.
pub fn run_worker(cfg: &ExperimentConfig, seed: u64, connect: &str, fail_before_epoch: Option<u64>, out: &Path) -> Result<ParticleResult> {
    let model = &cfg.model.as_slice()[0];
    let dynamic = cfg.dynamics.params.dynamic;
    let mut settings = cfg.settings(dynamic, seed);
    settings.fail_before_epoch = fail_before_epoch;
    let task = Remote {
        settings,
        addr: connect,
        run_id: cfg.cell_run_id(model, dynamic, seed),
        connect_timeout: Duration::from_secs_f64(cfg.coordinator.connect_timeout_secs),
    };
    let result = with_model(cfg, model, seed, task)?;
    std::fs::create_dir_all(out)?;
    write_trajectory(&out.join(format!("particle_{}.jsonl", result.state.id)), &result.trajectory)?;
    Ok(result)
}

/// Coordinator role. `on_bound` sees the bound address before serving starts.
pub fn run_coordinator(cfg: &ExperimentConfig, seed: u64, listen: &str, out: &Path, on_bound: impl FnOnce(SocketAddr)) -> Result<Outcome> {
    let model = &cfg.model.as_slice()[0];
    std::fs::create_dir_all(out)?;
    let log = RunLog::create(&out.join("run_log.jsonl"))?;
    let rendezvous = cfg.rendezvous(cfg.cell_run_id(model, cfg.dynamics.params.dynamic, seed));
    let server = CoordinatorServer::bind(listen, rendezvous, log)?;
    on_bound(server.local_addr()?);
    server.serve()
}

/// Final numbers of one particle in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFinal {
    pub particle_id: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub best_loss: f64,
    pub accuracy: Option<f64>,
}

pub fn particle_finals(run: &SwarmRun) -> Vec<ParticleFinal> {
    run.particles
        .iter()
        .map(|p| {
            let last = p.trajectory.last().expect("trajectory holds the init record");
            ParticleFinal {
                particle_id: p.state.id,
                learning_rate: p.state.learning_rate,
                loss: last.loss,
                best_loss: p.state.personal_best_loss,
                accuracy: last.test_accuracy,
            }
        })
        .collect()
}

/// The particle a swarm reports: lowest final personal-best loss, lowest id on ties.
pub fn selected_particle(finals: &[ParticleFinal]) -> &ParticleFinal {
    finals.iter().fold(&finals[0], |best, f| if f.best_loss < best.best_loss { f } else { best })
}

/// Mean, population standard deviation and maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub stdev: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stats { mean, stdev: var.sqrt(), max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max) })
    }
}

/// Per-seed finals of every cell, keyed by `(model, dynamic)` in grid order.
#[derive(Debug, Clone, Default)]
pub struct GridResults {
    pub cells: Vec<(String, DynamicKind, Vec<(u64, Vec<ParticleFinal>)>)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn stats_cols(values: &[f64]) -> String {
    match Stats::of(values) {
        Some(s) => format!("{},{},{}", s.mean, s.stdev, s.max),
        None => ",,".into(),
    }
}

fn accuracies<'a>(it: impl Iterator<Item = &'a ParticleFinal>) -> Vec<f64> {
    it.filter_map(|f| f.accuracy).collect()
}

impl GridResults {
    pub const SUMMARY_HEADER: &'static str = "model,dynamic,seeds,loss_mean,loss_stdev,loss_max,acc_mean,acc_stdev,acc_max";

    /// One row per cell; each seed contributes its selected particle.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{}\n", Self::SUMMARY_HEADER);
        for (model, dynamic, runs) in &self.cells {
            let picked: Vec<&ParticleFinal> = runs.iter().map(|(_, f)| selected_particle(f)).collect();
            let losses: Vec<f64> = picked.iter().map(|f| f.best_loss).collect();
            let accs = accuracies(picked.iter().copied());
            let _ = writeln!(out, "{model},{},{},{},{}", dynamic.label(), runs.len(), stats_cols(&losses), stats_cols(&accs));
        }
        out
    }

    /// One row per cell and particle slot.
    pub fn particle_summary_csv(&self) -> String {
        let mut out = String::from("model,dynamic,particle,seeds,loss_mean,loss_stdev,loss_max,acc_mean,acc_stdev,acc_max\n");
        for (model, dynamic, runs) in &self.cells {
            let mut slots: BTreeMap<usize, Vec<&ParticleFinal>> = BTreeMap::new();
            for (_, finals) in runs {
                for f in finals {
                    slots.entry(f.particle_id).or_default().push(f);
                }
            }
            for (pid, fs) in slots {
                let losses: Vec<f64> = fs.iter().map(|f| f.best_loss).collect();
                let accs = accuracies(fs.iter().copied());
                let _ = writeln!(out, "{model},{},{pid},{},{},{}", dynamic.label(), fs.len(), stats_cols(&losses), stats_cols(&accs));
            }
        }
        out
    }

    /// Every particle's finals, one row per (cell, seed, particle).
    pub fn finals_csv(&self) -> String {
        let mut out = String::from("model,dynamic,seed,particle,learning_rate,final_loss,final_best_loss,final_accuracy\n");
        for (model, dynamic, runs) in &self.cells {
            for (seed, finals) in runs {
                for f in finals {
                    let _ = writeln!(
                        out,
                        "{model},{},{seed},{},{},{},{},{}",
                        dynamic.label(),
                        f.particle_id,
                        f.learning_rate,
                        f.loss,
                        f.best_loss,
                        fmt_opt(f.accuracy)
                    );
                }
            }
        }
        out
    }

    /// Human-readable table in the `mean ± stdev (max)` form.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        for (model, dynamic, runs) in &self.cells {
            let picked: Vec<&ParticleFinal> = runs.iter().map(|(_, f)| selected_particle(f)).collect();
            let losses: Vec<f64> = picked.iter().map(|f| f.best_loss).collect();
            let _ = write!(out, "{model:<24} {:<11}", dynamic.label());
            if let Some(s) = Stats::of(&losses) {
                let _ = write!(out, " best loss {:.4e} ± {:.2e}", s.mean, s.stdev);
            }
            if let Some(s) = Stats::of(&accuracies(picked.iter().copied())) {
                let _ = write!(out, "  acc {:.4} ± {:.4} (max {:.4})", s.mean, s.stdev, s.max);
            }
            out.push('\n');
        }
        out
    }
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: GridResults,
    pub summary: PathBuf,
    pub run_dirs: Vec<PathBuf>,
}

/// Runs the full grid in this process and writes trajectories and tables under `out`.
///
/// Layout: `runs/<model>/<dynamic>/seed<s>/{particle_<id>.jsonl, run_log.jsonl}`,
/// plus `summary.csv`, `summary_particles.csv` and `finals.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput> {
    let mut results = GridResults::default();
    let mut run_dirs = Vec::new();
    for model in cfg.model.as_slice() {
        for &dynamic in &cfg.dynamics.grid {
            let mut runs = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let dir = out.join("runs").join(model.label()).join(dynamic.label()).join(format!("seed{seed}"));
                std::fs::create_dir_all(&dir)?;
                let run = run_cell(cfg, model, dynamic, seed, Some(&dir.join("run_log.jsonl")))?;
                for p in &run.particles {
                    write_trajectory(&dir.join(format!("particle_{}.jsonl", p.state.id)), &p.trajectory)?;
                }
                runs.push((seed, particle_finals(&run)));
                run_dirs.push(dir);
            }
            results.cells.push((model.label(), dynamic, runs));
        }
    }
    let summary = out.join("summary.csv");
    std::fs::write(&summary, results.summary_csv())?;
    std::fs::write(out.join("summary_particles.csv"), results.particle_summary_csv())?;
    std::fs::write(out.join("finals.csv"), results.finals_csv())?;
    Ok(ExperimentOutput { results, summary, run_dirs })
}

/// Which per-epoch quantity a plot series carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMetric {
    Loss,
    BestLoss,
    TestAccuracy,
}

impl PlotMetric {
    fn pick(self, r: &TrajectoryRecord) -> Option<f64> {
        match self {
            PlotMetric::Loss => Some(r.loss),
            PlotMetric::BestLoss => Some(r.best_loss),
            PlotMetric::TestAccuracy => r.test_accuracy,
        }
    }
}

/// Reads a trajectory file; blank lines are skipped.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// CSV with an `epoch` column and one column per named series. Only epoch
/// records are plotted; missing values are left empty.
pub fn plot_emit(series: &[(String, Vec<TrajectoryRecord>)], metric: PlotMetric) -> String {
    let mut out = String::from("epoch");
    for (name, _) in series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let columns: Vec<BTreeMap<u64, f64>> = series
        .iter()
        .map(|(_, recs)| {
            recs.iter()
                .filter(|r| r.event == TrajectoryEvent::Epoch)
                .filter_map(|r| metric.pick(r).map(|v| (r.epoch, v)))
                .collect()
        })
        .collect();
    let epochs: std::collections::BTreeSet<u64> = columns.iter().flat_map(|c| c.keys().copied()).collect();
    for e in epochs {
        let _ = write!(out, "{e}");
        for c in &columns {
            out.push(',');
            out.push_str(&fmt_opt(c.get(&e).copied()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"swarm": {"particles": 2, "epochs": 3}, "dynamics": {"k": 1, "grid": ["dynamic1"]},
                "model": {"kind": "sphere", "dim": 5}, "seeds": [7]}"#,
        )
        .unwrap()
    }

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.swarm.particles, 4);
        assert_eq!(cfg.swarm.batch_size, 8);
        assert_eq!(cfg.dynamics.params.k, 3);
        assert_eq!(cfg.dynamics.grid.len(), 3);
        assert_eq!(cfg.seeds, vec![0]);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            (r#"{"swarm": {"epochs": "many"}}"#, "swarm.epochs"),
            (r#"{"swarm": {"particles": 0}}"#, "swarm.particles"),
            (r#"{"dynamics": {"k": 9}}"#, "dynamics"),
            (r#"{"model": {"kind": "sphere", "dim": 0}}"#, "model[0].dim"),
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"data": {"frame": 3}}"#, "data.frame"),
            (r#"{"seeds": []}"#, "seeds"),
        ] {
            match ExperimentConfig::from_json(text) {
                Err(Error::Config { key: k, message }) => assert_eq!(k, key, "{text}: {message}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn one_seed_one_cell_gives_one_row_with_zero_stdev() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(&out.summary).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 2);
        let cols: Vec<&str> = rows[1].split(',').collect();
        assert_eq!(&cols[..3], ["sphere_d5", "dynamic1", "1"]);
        assert_eq!(cols[4], "0");
        assert!(dir.path().join("runs/sphere_d5/dynamic1/seed7/particle_1.jsonl").exists());
    }

    #[test]
    fn two_seeds_report_half_range() {
        let mut cfg = tiny();
        cfg.seeds = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path()).unwrap();
        let (_, _, runs) = &out.results.cells[0];
        let a = selected_particle(&runs[0].1).best_loss;
        let b = selected_particle(&runs[1].1).best_loss;
        let s = Stats::of(&[a, b]).unwrap();
        assert!((s.stdev - (a - b).abs() / 2.0).abs() < 1e-15);
        assert_eq!(s.max, a.max(b));
    }

    #[test]
    fn summary_is_byte_identical_across_runs() {
        let cfg = tiny();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = std::fs::read(run_experiment(&cfg, d1.path()).unwrap().summary).unwrap();
        let b = std::fs::read(run_experiment(&cfg, d2.path()).unwrap().summary).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plot_shapes() {
        assert_eq!(plot_emit(&[], PlotMetric::Loss), "epoch\n");
        let empty = vec![("a".to_string(), Vec::new())];
        assert_eq!(plot_emit(&empty, PlotMetric::Loss), "epoch,a\n");

        let cfg = tiny();
        let run = run_cell(&cfg, &cfg.model.as_slice()[0], DynamicKind::Dynamic1, 7, None).unwrap();
        let series: Vec<(String, Vec<TrajectoryRecord>)> =
            run.particles.iter().map(|p| (format!("p{}", p.state.id), p.trajectory.clone())).collect();
        let csv = plot_emit(&series, PlotMetric::Loss);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,p0,p1");
        assert_eq!(lines.len() as u64, 1 + cfg.swarm.epochs);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    }
}
