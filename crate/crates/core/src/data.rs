//! Synthetic frequency-coded sequences, frame selection, batching and the
//! accuracy metric.
//!
//! Class `c` is a sinusoid of angular frequency `2 pi (c + 1) / min_len`
//! across frames; feature `j` is the same wave shifted by `j pi / 4`. Over
//! `min_len` frames every class completes whole periods, so per-frame value
//! statistics match across classes and only the temporal pattern separates
//! them.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::conv::Tensor3;
use crate::models::{Matrix, SequenceSample};

/// A variable-length sequence of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub frames: Vec<Vec<f64>>,
    pub label: usize,
}

impl SyntheticVideo {
    pub fn new(frames: Vec<Vec<f64>>, label: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::invalid("a video needs at least one frame"));
        };
        let dim = first.len();
        if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Ok(SyntheticVideo { frames, label })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { num_classes: 4, samples_per_class: 50, min_len: 16, max_len: 24, feature_dim: 8, noise_sigma: 0.3, seed: 0 }
    }
}

/// Noise-free value of feature `j` at frame `t` for class `c`.
pub fn class_signal(c: usize, t: usize, j: usize, min_len: usize) -> f64 {
    let omega = 2.0 * PI * (c + 1) as f64 / min_len as f64;
    (omega * t as f64 + j as f64 * PI / 4.0).sin()
}

/// Samples are ordered class by class; lengths are uniform in `[min_len, max_len]`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticVideo>> {
    if spec.min_len < 1 || spec.max_len < spec.min_len {
        return Err(Error::invalid(format!("need 1 <= min_len <= max_len, got {}..={}", spec.min_len, spec.max_len)));
    }
    if spec.feature_dim == 0 || spec.num_classes == 0 {
        return Err(Error::invalid("feature_dim and num_classes must be positive"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise_sigma = {} must be finite and non-negative", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for c in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let frames = (0..len)
                .map(|t| {
                    (0..spec.feature_dim)
                        .map(|j| {
                            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            class_signal(c, t, j, spec.min_len) + eps
                        })
                        .collect()
                })
                .collect();
            out.push(SyntheticVideo { frames, label: c });
        }
    }
    Ok(out)
}

fn pad_to(mut frames: Vec<Vec<f64>>, count: usize) -> Vec<Vec<f64>> {
    let last = frames.last().cloned().expect("non-empty selection");
    frames.resize(count, last);
    frames
}

/// First `max_seq_len` frames; shorter inputs are padded by repeating the last frame.
pub fn select_frames_shadow(frames: &[Vec<f64>], max_seq_len: usize) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() || max_seq_len == 0 {
        return Err(Error::invalid("frame selection needs frames and a positive target"));
    }
    Ok(pad_to(frames.iter().take(max_seq_len).cloned().collect(), max_seq_len))
}

/// Indices `0, s, 2s, ...` with `s = max(1, floor(len / target))`, padded like [`select_frames_shadow`].
pub fn select_frames_stride(frames: &[Vec<f64>], target_count: usize) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() || target_count == 0 {
        return Err(Error::invalid("frame selection needs frames and a positive target"));
    }
    let step = (frames.len() / target_count).max(1);
    let picked = frames.iter().step_by(step).take(target_count).cloned().collect();
    Ok(pad_to(picked, target_count))
}

/// Square `side x side` center crop of a `[H, W, C]` frame.
pub fn center_crop(frame: &Tensor3, side: usize) -> Result<Tensor3> {
    frame.center_crop(side, side)
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set is undefined"));
    }
    crate::error::check_dim(labels.len(), predictions.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSelection {
    Shadow,
    Stride,
}

/// Fixed-length model inputs from variable-length videos.
pub fn to_samples(videos: &[SyntheticVideo], frames: usize, method: FrameSelection) -> Result<Vec<SequenceSample>> {
    videos
        .iter()
        .map(|v| {
            let picked = match method {
                FrameSelection::Shadow => select_frames_shadow(&v.frames, frames)?,
                FrameSelection::Stride => select_frames_stride(&v.frames, frames)?,
            };
            Ok(SequenceSample { frames: Matrix::from_rows(&picked), label: v.label })
        })
        .collect()
}

/// Sample indices split into minibatches after a seeded shuffle.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One line per video: `label length dim v_0 v_1 ...`, frames row by row.
pub fn write_dataset<W: Write>(videos: &[SyntheticVideo], mut out: W) -> Result<()> {
    for v in videos {
        let mut line = format!("{} {} {}", v.label, v.len(), v.feature_dim());
        for x in v.frames.iter().flatten() {
            write!(line, " {x:?}").expect("writing to a String");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<SyntheticVideo>> {
    let mut videos = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::invalid(format!("dataset line {}: {m}", n + 1));
        let mut fields = line.split_ascii_whitespace();
        let mut header = || -> Result<usize> {
            fields.next().ok_or_else(|| bad("truncated header"))?.parse().map_err(|_| bad("bad header field"))
        };
        let (label, len, dim) = (header()?, header()?, header()?);
        let values: Vec<f64> = fields.map(|f| f.parse::<f64>().map_err(|_| bad("bad value"))).collect::<Result<_>>()?;
        if len == 0 || dim == 0 || values.len() != len * dim {
            return Err(bad(&format!("expected {len} x {dim} values, got {}", values.len())));
        }
        videos.push(SyntheticVideo::new(values.chunks(dim).map(|c| c.to_vec()).collect(), label)?);
    }
    Ok(videos)
}

/// Order-invariant summary of a sequence: per-feature means and all pairwise
/// second moments, averaged over frames.
pub fn bag_of_features(frames: &Matrix) -> Vec<f64> {
    let (l, g) = frames.shape();
    let mut out = vec![0.0; g + g * (g + 1) / 2];
    for r in 0..l {
        let row = frames.row(r);
        let mut k = g;
        for i in 0..g {
            out[i] += row[i];
            for j in i..g {
                out[k] += row[i] * row[j];
                k += 1;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= l as f64);
    out
}

/// Nearest-class-centroid classifier over [`bag_of_features`]; returns test accuracy.
pub fn bag_of_features_accuracy(train: &[SequenceSample], test: &[SequenceSample], num_classes: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("control classifier needs train and test samples"));
    }
    let width = bag_of_features(&train[0].frames).len();
    let mut centroids = vec![vec![0.0; width]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in train {
        let f = bag_of_features(&s.frames);
        centroids[s.label].iter_mut().zip(&f).for_each(|(c, v)| *c += v);
        counts[s.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let predictions: Vec<usize> = test
        .iter()
        .map(|s| {
            let f = bag_of_features(&s.frames);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..num_classes)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("at least one populated class")
        })
        .collect();
    accuracy(&predictions, &test.iter().map(|s| s.label).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numbered(len: usize) -> Vec<Vec<f64>> {
        (0..len).map(|i| vec![i as f64]).collect()
    }

    fn ids(frames: &[Vec<f64>]) -> Vec<usize> {
        frames.iter().map(|f| f[0] as usize).collect()
    }

    #[test]
    fn dataset_size_and_reproducibility() {
        let spec = DatasetSpec { num_classes: 3, samples_per_class: 7, seed: 42, ..Default::default() };
        let a = generate_dataset(&spec).unwrap();
        assert_eq!(a.len(), 21);
        assert_eq!(a, generate_dataset(&spec).unwrap());
        assert_ne!(a, generate_dataset(&DatasetSpec { seed: 43, ..spec.clone() }).unwrap());
        assert!(a.iter().all(|v| (16..=24).contains(&v.len()) && v.feature_dim() == 8));
        assert!(generate_dataset(&DatasetSpec { min_len: 0, ..spec }).is_err());
    }

    #[test]
    fn noiseless_samples_of_equal_length_are_identical() {
        let spec = DatasetSpec { samples_per_class: 20, noise_sigma: 0.0, ..Default::default() };
        let data = generate_dataset(&spec).unwrap();
        for a in &data {
            for b in data.iter().filter(|b| b.label == a.label && b.len() == a.len()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn shadow_selection_examples() {
        assert_eq!(ids(&select_frames_shadow(&numbered(10), 4).unwrap()), vec![0, 1, 2, 3]);
        assert_eq!(ids(&select_frames_shadow(&numbered(2), 4).unwrap()), vec![0, 1, 1, 1]);
        assert_eq!(select_frames_shadow(&numbered(100), 100).unwrap(), numbered(100));
        assert!(select_frames_shadow(&[], 3).is_err());
    }

    #[test]
    fn stride_selection_examples() {
        assert_eq!(ids(&select_frames_stride(&numbered(8), 4).unwrap()), vec![0, 2, 4, 6]);
        assert_eq!(ids(&select_frames_stride(&numbered(4), 4).unwrap()), vec![0, 1, 2, 3]);
        assert_eq!(ids(&select_frames_stride(&numbered(10), 4).unwrap()), vec![0, 2, 4, 6]);
        assert_eq!(ids(&select_frames_stride(&numbered(3), 5).unwrap()), vec![0, 1, 2, 2, 2]);
    }

    #[test]
    fn crop_examples() {
        let t = Tensor3::from_fn(4, 4, 2, |y, x, c| (100 * c + 10 * y + x) as f64);
        let c = center_crop(&t, 2).unwrap();
        assert_eq!(c, Tensor3::from_fn(2, 2, 2, |y, x, ch| t.get(y + 1, x + 1, ch)));
        assert_eq!(center_crop(&t, 4).unwrap(), t);
        let tall = Tensor3::from_fn(5, 3, 1, |y, x, _| (10 * y + x) as f64);
        assert_eq!(center_crop(&tall, 3).unwrap(), Tensor3::from_fn(3, 3, 1, |y, x, _| tall.get(y + 1, x, 0)));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn export_import_round_trips() {
        let data = generate_dataset(&DatasetSpec { samples_per_class: 3, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
        assert!(read_dataset("1 2 2 0.5 0.5 0.5".as_bytes()).is_err());
    }

    #[test]
    fn bag_of_features_control_is_near_chance() {
        let train = generate_dataset(&DatasetSpec { samples_per_class: 50, seed: 1, ..Default::default() }).unwrap();
        let test = generate_dataset(&DatasetSpec { samples_per_class: 20, seed: 2, ..Default::default() }).unwrap();
        let train = to_samples(&train, 16, FrameSelection::Shadow).unwrap();
        let test = to_samples(&test, 16, FrameSelection::Shadow).unwrap();
        let acc = bag_of_features_accuracy(&train, &test, 4).unwrap();
        assert!(acc < 0.25 + 0.15, "order-free control scored {acc}");
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = shuffled_batches(23, 5, &mut rng);
        assert_eq!(batches.len(), 5);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn selectors_return_requested_count(len in 1usize..60, target in 1usize..40) {
            let frames = numbered(len);
            for picked in [select_frames_shadow(&frames, target).unwrap(), select_frames_stride(&frames, target).unwrap()] {
                prop_assert_eq!(picked.len(), target);
                let idx = ids(&picked);
                let distinct = len.min(target);
                prop_assert!(idx[..distinct].windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < len));
            }
        }

        #[test]
        fn accuracy_of_self_is_one(p in proptest::collection::vec(0usize..10, 1..50)) {
            prop_assert_eq!(accuracy(&p, &p).unwrap(), 1.0);
        }
    }
}
