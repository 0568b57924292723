//! Position-update rules applied after each local training epoch.
//!
//! * [`dynamic1_step`]: gradient steps of the particle and its neighbors,
//!   mixed by distance-decaying weights, plus attraction toward the personal
//!   and neighborhood bests.
//! * [`dynamic2_step`]: a pull toward the gradient-corrected positions of the
//!   neighbors plus attraction toward the neighborhood best.
//! * [`individual_gd_step`]: one plain gradient step, no exchange.
//!
//! All three are pure functions of a [`StepInput`] and an RNG. Neighbor sums
//! run in ascending particle id order so results are bitwise reproducible.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::swarm::{
    euclidean_distance, pair_weight, squared_distance, DynamicKind, Dynamic2Mode, DynamicsConfig,
    NeighborSnapshot, ParticleId, ParticleState, RMode, WeightMatrix,
};

pub struct StepInput<'a> {
    pub state: &'a ParticleState,
    pub snapshot: &'a NeighborSnapshot,
    /// Resolved neighborhood, including the particle itself.
    pub neighborhood: &'a [ParticleId],
    pub config: &'a DynamicsConfig,
    pub weights: &'a WeightMatrix,
    /// `grad L` at `state.position`.
    pub gradient: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub new_position: Vec<f64>,
    pub new_velocity: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

/// `-eta * g`, the intermediate velocity every rule starts from.
pub fn gradient_step(learning_rate: f64, gradient: &[f64]) -> Vec<f64> {
    gradient.iter().map(|g| -(learning_rate * g)).collect()
}

enum Draw {
    Scalar(f64),
    PerDimension(Vec<f64>),
}

impl Draw {
    fn sample<R: Rng + ?Sized>(rng: &mut R, mode: RMode, dim: usize) -> Draw {
        match mode {
            RMode::Scalar => Draw::Scalar(rng.gen::<f64>()),
            RMode::PerDimension => Draw::PerDimension((0..dim).map(|_| rng.gen::<f64>()).collect()),
        }
    }

    fn at(&self, i: usize) -> f64 {
        match self {
            Draw::Scalar(r) => *r,
            Draw::PerDimension(v) => v[i],
        }
    }
}

impl StepInput<'_> {
    fn check(&self) -> Result<usize> {
        let dim = self.state.dimension();
        check_dim(dim, self.gradient.len())?;
        check_dim(dim, self.state.personal_best.len())?;
        check_dim(dim, self.state.nbhd_best.len())?;
        if self.snapshot.epoch != self.state.epoch {
            return Err(Error::protocol(format!(
                "snapshot epoch {} does not match particle epoch {}",
                self.snapshot.epoch, self.state.epoch
            )));
        }
        if !self.neighborhood.contains(&self.state.id) {
            return Err(Error::invalid("neighborhood must contain the particle itself"));
        }
        for &id in self.neighborhood {
            let e = self.snapshot.entry(id)?;
            check_dim(dim, e.position.len())?;
            check_dim(dim, e.psi.len())?;
        }
        Ok(dim)
    }

    fn sorted_neighborhood(&self) -> Vec<ParticleId> {
        let mut ids = self.neighborhood.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn coupling(&self, other: ParticleId, z: f64) -> Result<f64> {
        let m = self.weights.get(self.state.id, other);
        if m == 0.0 {
            return Ok(0.0);
        }
        pair_weight(z, m, self.config.beta)
    }
}

fn add_scaled(acc: &mut Option<Vec<f64>>, w: f64, v: &[f64]) {
    match acc {
        None => *acc = Some(v.iter().map(|x| w * x).collect()),
        Some(a) => a.iter_mut().zip(v).for_each(|(a, x)| *a += w * x),
    }
}

fn add_attraction(v: &mut [f64], coeff: f64, r: &Draw, target: &[f64], from: &[f64]) {
    if coeff == 0.0 {
        return;
    }
    for (i, vi) in v.iter_mut().enumerate() {
        *vi += coeff * r.at(i) * (target[i] - from[i]);
    }
}

pub fn dynamic1_step<R: Rng + ?Sized>(input: &StepInput<'_>, rng: &mut R) -> Result<StepOutput> {
    let dim = input.check()?;
    let state = input.state;
    let cfg = input.config;
    let r1 = Draw::sample(rng, cfg.r_mode, dim);
    let r2 = Draw::sample(rng, cfg.r_mode, dim);

    let psi = gradient_step(state.learning_rate, input.gradient);
    let phi: Vec<f64> = state.position.iter().zip(&psi).map(|(x, p)| x + p).collect();

    let mut acc = None;
    for id in input.sorted_neighborhood() {
        if id == state.id {
            add_scaled(&mut acc, 1.0, &psi);
        } else {
            let e = input.snapshot.entry(id)?;
            let w = input.coupling(id, euclidean_distance(&state.position, &e.position))?;
            add_scaled(&mut acc, w, &e.psi);
        }
    }
    let mut velocity = acc.unwrap_or_else(|| vec![0.0; dim]);
    add_attraction(&mut velocity, cfg.c1, &r1, &state.personal_best, &phi);
    add_attraction(&mut velocity, cfg.c2, &r2, &state.nbhd_best, &phi);

    let new_position = state.position.iter().zip(&velocity).map(|(x, v)| x + v).collect();
    Ok(StepOutput { new_position, new_velocity: velocity, psi, phi })
}

pub fn dynamic2_step<R: Rng + ?Sized>(input: &StepInput<'_>, rng: &mut R) -> Result<StepOutput> {
    let dim = input.check()?;
    let state = input.state;
    let cfg = input.config;
    let r = Draw::sample(rng, cfg.r_mode, dim);
    let x = &state.position;

    let psi = gradient_step(state.learning_rate, input.gradient);
    let phi: Vec<f64> = x.iter().zip(&psi).map(|(x, p)| x + p).collect();

    let mut neighbors = Vec::new();
    for id in input.sorted_neighborhood() {
        if id == state.id {
            continue;
        }
        let e = input.snapshot.entry(id)?;
        let w = input.coupling(id, squared_distance(x, &e.position))?;
        neighbors.push((w, e));
    }

    let mut velocity = vec![0.0; dim];
    match cfg.dynamic2_mode {
        Dynamic2Mode::Literal => {
            for (w, e) in &neighbors {
                for i in 0..dim {
                    velocity[i] += w * (e.position[i] + e.psi[i]);
                }
            }
        }
        Dynamic2Mode::Normalized => {
            let total: f64 = neighbors.iter().map(|(w, _)| w).sum();
            for (w, e) in &neighbors {
                let w = w / (1.0 + total);
                for i in 0..dim {
                    velocity[i] += w * ((e.position[i] + e.psi[i]) - x[i]);
                }
            }
        }
    }
    add_attraction(&mut velocity, cfg.c, &r, &state.nbhd_best, x);

    let new_position = x.iter().zip(&velocity).map(|(x, v)| x + v).collect();
    Ok(StepOutput { new_position, new_velocity: velocity, psi, phi })
}

pub fn individual_gd_step(input: &StepInput<'_>) -> Result<StepOutput> {
    let state = input.state;
    check_dim(state.dimension(), input.gradient.len())?;
    let psi = gradient_step(state.learning_rate, input.gradient);
    let phi: Vec<f64> = state.position.iter().zip(&psi).map(|(x, p)| x + p).collect();
    Ok(StepOutput { new_position: phi.clone(), new_velocity: psi.clone(), psi, phi })
}

/// Dispatches on `kind`; callers handle warmup by passing `IndividualGd`.
pub fn apply<R: Rng + ?Sized>(kind: DynamicKind, input: &StepInput<'_>, rng: &mut R) -> Result<StepOutput> {
    match kind {
        DynamicKind::Dynamic1 => dynamic1_step(input, rng),
        DynamicKind::Dynamic2 => dynamic2_step(input, rng),
        DynamicKind::IndividualGd => individual_gd_step(input),
    }
}
