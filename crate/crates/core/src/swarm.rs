//! Particle and swarm domain types.
//!
//! A particle's position is the flattened weight vector of the model it
//! trains. This module holds the per-particle state, the per-epoch snapshot
//! that particles exchange, and the pure bookkeeping used by every dynamic:
//! the pairwise weight function, nearest-neighbor resolution and the
//! personal / neighborhood best updates.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Identifier of a particle within a run. Assigned `0..N` at registration.
pub type ParticleId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub id: ParticleId,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub personal_best: Vec<f64>,
    #[serde(with = "nonfinite")]
    pub personal_best_loss: f64,
    pub nbhd_best: Vec<f64>,
    #[serde(with = "nonfinite")]
    pub nbhd_best_loss: f64,
    pub learning_rate: f64,
    pub epoch: u64,
    pub rng_seed: u64,
}

impl ParticleState {
    /// Fresh state at `position` with zero velocity. Both bests start at the
    /// initial position with infinite loss so the first evaluation replaces them.
    pub fn new(id: ParticleId, position: Vec<f64>, learning_rate: f64, rng_seed: u64) -> Self {
        let dim = position.len();
        ParticleState {
            id,
            personal_best: position.clone(),
            nbhd_best: position.clone(),
            position,
            velocity: vec![0.0; dim],
            personal_best_loss: f64::INFINITY,
            nbhd_best_loss: f64::INFINITY,
            learning_rate,
            epoch: 0,
            rng_seed,
        }
    }

    pub fn dimension(&self) -> usize {
        self.position.len()
    }
}

/// Which position-update rule a particle applies after its local epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicKind {
    Dynamic1,
    Dynamic2,
    #[serde(alias = "individual")]
    IndividualGd,
}

impl DynamicKind {
    pub fn label(self) -> &'static str {
        match self {
            DynamicKind::Dynamic1 => "dynamic1",
            DynamicKind::Dynamic2 => "dynamic2",
            DynamicKind::IndividualGd => "individual",
        }
    }
}

/// How the uniform coefficients `r` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// One scalar per attraction term per step.
    #[default]
    Scalar,
    /// One independent draw per coordinate.
    PerDimension,
}

/// Form of the consensus sum in Dynamic 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dynamic2Mode {
    /// Neighbor terms act as displacements toward a weighted consensus point.
    #[default]
    Normalized,
    /// Absolute neighbor positions are added as written; diverges for nonzero weights.
    Literal,
}

/// Square matrix of pairwise coupling constants `M`. The diagonal is never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightMatrix(Vec<Vec<f64>>);

impl WeightMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            check_dim(n, row.len())?;
            for (j, &m) in row.iter().enumerate() {
                if i != j && !(m >= 0.0 && m.is_finite()) {
                    return Err(Error::invalid(format!("M[{i}][{j}] = {m} must be finite and >= 0")));
                }
            }
        }
        Ok(WeightMatrix(rows))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        WeightMatrix(vec![vec![value; n]; n])
    }

    /// 0.2 between every pair, except 10 for the pull toward the fourth
    /// particle (the one with the wide learning-rate range).
    pub fn default_for(n: usize) -> Self {
        let mut m = Self::uniform(n, 0.2);
        if n > 3 {
            for (i, row) in m.0.iter_mut().enumerate() {
                if i != 3 {
                    row[3] = 10.0;
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, from: ParticleId, to: ParticleId) -> f64 {
        self.0[from][to]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub dynamic: DynamicKind,
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
    pub beta: f64,
    /// `None` means [`WeightMatrix::default_for`] the swarm size.
    pub weights: Option<WeightMatrix>,
    pub k: usize,
    pub warmup_epochs: u64,
    pub r_mode: RMode,
    pub dynamic2_mode: Dynamic2Mode,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            dynamic: DynamicKind::Dynamic1,
            c1: 0.5,
            c2: 0.5,
            c: 0.5,
            beta: 1.0,
            weights: None,
            k: 3,
            warmup_epochs: 1,
            r_mode: RMode::Scalar,
            dynamic2_mode: Dynamic2Mode::Normalized,
        }
    }
}

impl DynamicsConfig {
    /// Checks the config against a swarm of `n` particles.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("swarm must contain at least one particle"));
        }
        if self.k > n - 1 {
            return Err(Error::invalid(format!("k = {} exceeds N - 1 = {}", self.k, n - 1)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta = {} must be positive", self.beta)));
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c", self.c)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} must be finite")));
            }
        }
        if let Some(m) = &self.weights {
            check_dim(n, m.size())?;
            WeightMatrix::new(m.0.clone())?;
        }
        Ok(())
    }

    pub fn weight_matrix(&self, n: usize) -> WeightMatrix {
        self.weights.clone().unwrap_or_else(|| WeightMatrix::default_for(n))
    }
}

/// One particle's published state for an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub particle_id: ParticleId,
    #[serde(with = "nonfinite_vec")]
    pub position: Vec<f64>,
    /// Intermediate velocity `-eta * grad L(x)` at the published position.
    #[serde(with = "nonfinite_vec")]
    pub psi: Vec<f64>,
    #[serde(with = "nonfinite")]
    pub loss: f64,
    #[serde(with = "nonfinite_vec")]
    pub personal_best: Vec<f64>,
    #[serde(with = "nonfinite")]
    pub personal_best_loss: f64,
}

/// Every particle's published state for one epoch, ordered by particle id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSnapshot {
    pub epoch: u64,
    pub entries: Vec<SnapshotEntry>,
}

impl NeighborSnapshot {
    /// Builds a snapshot, sorting entries by id and rejecting gaps or duplicates.
    pub fn new(epoch: u64, mut entries: Vec<SnapshotEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.particle_id);
        for (i, e) in entries.iter().enumerate() {
            if e.particle_id != i {
                return Err(Error::protocol(format!(
                    "snapshot for epoch {epoch} has no entry for particle {i}"
                )));
            }
        }
        if let Some(first) = entries.first() {
            let dim = first.position.len();
            for e in &entries {
                check_dim(dim, e.position.len())?;
                check_dim(dim, e.psi.len())?;
            }
        }
        Ok(NeighborSnapshot { epoch, entries })
    }

    pub fn entry(&self, id: ParticleId) -> Result<&SnapshotEntry> {
        self.entries
            .get(id)
            .filter(|e| e.particle_id == id)
            .ok_or_else(|| Error::protocol(format!("particle {id} missing from epoch {} snapshot", self.epoch)))
    }

    pub fn positions(&self) -> Vec<(ParticleId, &[f64])> {
        self.entries.iter().map(|e| (e.particle_id, e.position.as_slice())).collect()
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise coupling `M / (1 + z)^beta`; decreasing in `z` and at most `M`.
pub fn pair_weight(z: f64, m: f64, beta: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::invalid(format!("distance z = {z} must be >= 0")));
    }
    if !(m > 0.0) || !(beta > 0.0) {
        return Err(Error::invalid(format!("M = {m} and beta = {beta} must be positive")));
    }
    Ok(m / (1.0 + z).powf(beta))
}

/// The particle `n` itself plus its `k` closest particles by Euclidean
/// distance, returned in ascending id order. Equal distances prefer the
/// lower id.
pub fn nearest_neighbors(states: &[(ParticleId, &[f64])], n: ParticleId, k: usize) -> Result<Vec<ParticleId>> {
    let (_, origin) = states
        .iter()
        .find(|(id, _)| *id == n)
        .ok_or_else(|| Error::invalid(format!("unknown particle id {n}")))?;
    if k + 1 > states.len() {
        return Err(Error::invalid(format!("k = {k} needs at least {} particles, have {}", k + 1, states.len())));
    }
    let mut others = Vec::with_capacity(states.len() - 1);
    for (id, pos) in states {
        check_dim(origin.len(), pos.len())?;
        if *id != n {
            others.push((squared_distance(origin, pos), *id));
        }
    }
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<ParticleId> = std::iter::once(n).chain(others.into_iter().take(k).map(|(_, id)| id)).collect();
    out.sort_unstable();
    Ok(out)
}

/// Keeps the earlier best unless `loss` is strictly lower.
pub fn update_personal_best(best: &[f64], best_loss: f64, x: &[f64], loss: f64) -> (Vec<f64>, f64) {
    if loss < best_loss {
        (x.to_vec(), loss)
    } else {
        (best.to_vec(), best_loss)
    }
}

/// Argmin over the incumbent neighborhood best and the published positions of
/// `nbhd`. Ties keep the incumbent, then the lowest id.
pub fn update_neighborhood_best(
    best: &[f64],
    best_loss: f64,
    snapshot: &NeighborSnapshot,
    nbhd: &[ParticleId],
) -> Result<(Vec<f64>, f64)> {
    if nbhd.is_empty() {
        return Err(Error::invalid("neighborhood is empty"));
    }
    let mut ids = nbhd.to_vec();
    ids.sort_unstable();
    let mut winner: Option<&SnapshotEntry> = None;
    let mut winner_loss = best_loss;
    for id in ids {
        let entry = snapshot.entry(id)?;
        check_dim(best.len(), entry.position.len())?;
        if entry.loss < winner_loss {
            winner = Some(entry);
            winner_loss = entry.loss;
        }
    }
    Ok(match winner {
        Some(e) => (e.position.clone(), e.loss),
        None => (best.to_vec(), best_loss),
    })
}

/// Serializes non-finite floats as strings so diverged losses survive JSON.
pub(crate) mod nonfinite {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("not a float: {other}"))),
            },
        }
    }
}

/// [`nonfinite`] for every element of a vector.
pub(crate) mod nonfinite_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::nonfinite")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| Wrap(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

/// [`nonfinite`] inside an `Option`.
pub(crate) mod opt_nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::nonfinite")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_some(&Wrap(*x)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: usize, pos: Vec<f64>, loss: f64) -> SnapshotEntry {
        SnapshotEntry {
            particle_id: id,
            psi: vec![0.0; pos.len()],
            personal_best: pos.clone(),
            position: pos,
            loss,
            personal_best_loss: loss,
        }
    }

    #[test]
    fn pair_weight_examples() {
        assert_eq!(pair_weight(0.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(pair_weight(1.0, 1.0, 1.0).unwrap(), 0.5);
        assert!((pair_weight(3.0, 0.2, 1.0).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn pair_weight_rejects_bad_arguments() {
        assert!(pair_weight(-1.0, 1.0, 1.0).is_err());
        assert!(pair_weight(1.0, 0.0, 1.0).is_err());
        assert!(pair_weight(1.0, 1.0, 0.0).is_err());
        assert!(pair_weight(f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn nearest_neighbor_examples() {
        let (a, b, c) = ([0.0], [1.0], [5.0]);
        let states: Vec<(usize, &[f64])> = vec![(0, &a), (1, &b), (2, &c)];
        assert_eq!(nearest_neighbors(&states, 0, 1).unwrap(), vec![0, 1]);
        assert_eq!(nearest_neighbors(&states, 2, 2).unwrap(), vec![0, 1, 2]);
        assert!(nearest_neighbors(&states, 0, 3).is_err());
        assert!(nearest_neighbors(&states, 7, 1).is_err());
    }

    #[test]
    fn nearest_neighbor_ties_prefer_lower_id() {
        let (o, l, r) = ([0.0], [-1.0], [1.0]);
        let states: Vec<(usize, &[f64])> = vec![(2, &r), (0, &o), (1, &l)];
        assert_eq!(nearest_neighbors(&states, 0, 1).unwrap(), vec![0, 1]);
    }

    // Brute-force oracle: all pairwise distances, full sort, no partial selection.
    fn knn_oracle(points: &[Vec<f64>], n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.len())
            .filter(|&j| j != n)
            .map(|j| {
                let d: f64 = points[n].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (d, j)
            })
            .collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut out = vec![n];
        out.extend(all.iter().take(k).map(|p| p.1));
        out.sort();
        out
    }

    #[test]
    fn nearest_neighbors_five_random_in_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let states: Vec<(usize, &[f64])> = pts.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
        for n in 0..5 {
            assert_eq!(nearest_neighbors(&states, n, 2).unwrap(), knn_oracle(&pts, n, 2));
        }
    }

    #[test]
    fn personal_best_examples() {
        let p = vec![1.0, 1.0];
        let x = vec![2.0, 2.0];
        assert_eq!(update_personal_best(&p, 2.0, &x, 1.0), (x.clone(), 1.0));
        assert_eq!(update_personal_best(&p, 1.0, &x, 1.0), (p.clone(), 1.0));

        let mut best = (vec![0.0], f64::INFINITY);
        let mut seen = Vec::new();
        for (step, loss) in [3.0, 5.0, 2.0, 4.0].into_iter().enumerate() {
            best = update_personal_best(&best.0, best.1, &[step as f64], loss);
            seen.push(loss);
            let oracle = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(best.1, oracle);
        }
        assert_eq!(best, (vec![2.0], 2.0));
    }

    #[test]
    fn neighborhood_best_examples() {
        let snap = NeighborSnapshot::new(0, vec![entry(0, vec![0.0], 0.7), entry(1, vec![1.0], 0.5)]).unwrap();
        let (p, l) = update_neighborhood_best(&[9.0], 0.5, &snap, &[0, 1]).unwrap();
        assert_eq!((p, l), (vec![9.0], 0.5));

        let snap = NeighborSnapshot::new(0, vec![entry(0, vec![0.0], 0.7), entry(1, vec![1.0], 0.1)]).unwrap();
        let (p, l) = update_neighborhood_best(&[9.0], 0.5, &snap, &[0, 1]).unwrap();
        assert_eq!((p, l), (vec![1.0], 0.1));

        assert!(update_neighborhood_best(&[9.0], 0.5, &snap, &[]).is_err());
    }

    #[test]
    fn neighborhood_best_equals_min_over_visited_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let mut bests: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; 2], f64::INFINITY); n];
        let mut history: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); n];
        for epoch in 0..5 {
            let entries: Vec<SnapshotEntry> = (0..n)
                .map(|id| entry(id, vec![rng.gen(), rng.gen()], rng.gen_range(0.0..10.0)))
                .collect();
            let snap = NeighborSnapshot::new(epoch, entries).unwrap();
            for id in 0..n {
                let nbhd = nearest_neighbors(&snap.positions(), id, 2).unwrap();
                for &j in &nbhd {
                    let e = snap.entry(j).unwrap();
                    history[id].push((e.position.clone(), e.loss));
                }
                bests[id] = update_neighborhood_best(&bests[id].0, bests[id].1, &snap, &nbhd).unwrap();
                let oracle = history[id].iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
                assert_eq!(bests[id].1, oracle);
                assert!(history[id].iter().any(|h| h.0 == bests[id].0 && h.1 == oracle));
            }
        }
    }

    #[test]
    fn snapshot_rejects_missing_particle() {
        assert!(NeighborSnapshot::new(0, vec![entry(0, vec![0.0], 1.0), entry(2, vec![0.0], 1.0)]).is_err());
    }

    #[test]
    fn default_weights_follow_gradient_weight_table() {
        let m = WeightMatrix::default_for(4);
        for i in 0..3 {
            assert_eq!(m.get(i, 3), 10.0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(m.get(i, j), 0.2);
                }
            }
        }
        assert_eq!(m.get(3, 0), 0.2);
    }

    #[test]
    fn config_validation() {
        let cfg = DynamicsConfig::default();
        assert!(cfg.validate(4).is_ok());
        assert!(cfg.validate(3).is_err());
        let cfg = DynamicsConfig { beta: 0.0, ..DynamicsConfig::default() };
        assert!(cfg.validate(4).is_err());
    }

    #[test]
    fn nonfinite_losses_roundtrip_through_json() {
        let mut e = entry(0, vec![1.0, f64::INFINITY], f64::INFINITY);
        e.psi = vec![f64::NEG_INFINITY, 0.5];
        let back: SnapshotEntry = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    proptest! {
        #[test]
        fn pair_weight_is_decreasing_and_bounded(z in 0.0f64..1e3, dz in 1e-6f64..1e3, m in 1e-3f64..100.0, beta in 0.05f64..5.0) {
            let w0 = pair_weight(z, m, beta).unwrap();
            let w1 = pair_weight(z + dz, m, beta).unwrap();
            prop_assert!(w1 < w0);
            prop_assert!(w0 <= m && w0 > 0.0);
        }

        #[test]
        fn nearest_neighbors_matches_full_sort(n_pts in 2usize..=32, dim in 1usize..=64, seed: u64, k_frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n_pts).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let states: Vec<(usize, &[f64])> = pts.iter().enumerate().map(|(i, p)| (i, p.as_slice())).collect();
            let k = ((n_pts - 1) as f64 * k_frac) as usize;
            let who = rng.gen_range(0..n_pts);
            let got = nearest_neighbors(&states, who, k).unwrap();
            prop_assert_eq!(got.len(), k + 1);
            prop_assert!(got.contains(&who));
            prop_assert_eq!(got, knn_oracle(&pts, who, k));
        }
    }
}
