//! Sequence classifiers over `[frames, features]` inputs.
//!
//! Pipeline: `tanh(X W_p + b_p)` projector, then the architecture body
//! (encoder blocks over the position-encoded projection, or a recurrent
//! unroll), max over time, Gaussian noise, `relu` dense head, dropout,
//! dense output, softmax and cross-entropy. Noise and dropout run only on the
//! training path.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{EncoderBlock, EncoderCache};
use super::layers::{
    activation, activation_backward, argmax, cross_entropy, max_over_time, max_over_time_backward, position_encoding_matrix,
    softmax, Activation, Dense,
};
use super::linalg::{Matrix, ParamLayout};
use super::recurrent::{CellKind, Recurrent, RecurrentCache};
use super::{LossModel, ModelRng};
use crate::error::{Error, Result};

const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Projector only, pooled over time.
    Mlp,
    #[serde(alias = "transformer")]
    TransformerEncoder,
    Rnn,
    Lstm,
    Gru,
    #[serde(alias = "bi_lstm")]
    BiLstm,
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::TransformerEncoder => "transformer_encoder",
            Arch::Rnn => "rnn",
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
            Arch::BiLstm => "bilstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierDims {
    /// Frames per sequence.
    pub frames: usize,
    /// Features per frame.
    pub features: usize,
    pub num_classes: usize,
    /// Projector width; also the encoder width.
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of each encoder feed-forward layer.
    pub ffn_dim: usize,
    /// Recurrent units per direction.
    pub units: usize,
    /// Width of the dense layer in the classification head.
    pub head_dim: usize,
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for ClassifierDims {
    fn default() -> Self {
        ClassifierDims {
            frames: 16,
            features: 8,
            num_classes: 4,
            d_model: 16,
            heads: 2,
            blocks: 2,
            ffn_dim: 32,
            units: 16,
            head_dim: 64,
            noise_std: 0.1,
            dropout: 0.4,
        }
    }
}

impl ClassifierDims {
    pub fn validate(&self, arch: Arch) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.frames == 0 || self.features == 0 || self.d_model == 0 || self.head_dim == 0 {
            return bad("frames, features, d_model and head_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} must be at least 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.noise_std >= 0.0) {
            return bad(format!("dropout {} must be in [0, 1) and noise_std {} non-negative", self.dropout, self.noise_std));
        }
        match arch {
            Arch::TransformerEncoder => {
                if self.d_model % 2 != 0 {
                    return bad(format!("d_model = {} must be even for position encoding", self.d_model));
                }
                if self.heads == 0 || self.d_model % self.heads != 0 {
                    return bad(format!("d_model = {} not divisible by heads = {}", self.d_model, self.heads));
                }
                if self.blocks == 0 || self.ffn_dim == 0 {
                    return bad("transformer needs at least one block and a positive ffn_dim".into());
                }
            }
            Arch::Rnn | Arch::Lstm | Arch::Gru | Arch::BiLstm if self.units == 0 => {
                return bad("recurrent architectures need units > 0".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// One labelled `[frames, features]` sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub frames: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
enum Body {
    Identity,
    Encoder(Vec<EncoderBlock>),
    Recurrent(Recurrent),
    Bidirectional(Recurrent, Recurrent),
}

enum BodyCache {
    Identity,
    Encoder(Vec<EncoderCache>),
    Recurrent(RecurrentCache),
    Bidirectional(RecurrentCache, RecurrentCache),
}

#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    pub arch: Arch,
    pub dims: ClassifierDims,
    projector: Dense,
    body: Body,
    head: Dense,
    output: Dense,
    position: Option<Matrix>,
    len: usize,
}

/// Stochastic layer draws for one sample.
struct Perturbation {
    noise: Vec<f64>,
    /// Scaled keep mask (`0` or `1 / (1 - p)`).
    mask: Vec<f64>,
}

pub fn build_sequence_classifier(arch: Arch, dims: ClassifierDims) -> Result<SequenceClassifier> {
    SequenceClassifier::new(arch, dims)
}

impl SequenceClassifier {
    pub fn new(arch: Arch, dims: ClassifierDims) -> Result<Self> {
        dims.validate(arch)?;
        let mut layout = ParamLayout::new();
        let projector = Dense::new(&mut layout, dims.features, dims.d_model);
        let (body, width) = match arch {
            Arch::Mlp => (Body::Identity, dims.d_model),
            Arch::TransformerEncoder => {
                let blocks = (0..dims.blocks).map(|_| EncoderBlock::new(&mut layout, dims.d_model, dims.heads, dims.ffn_dim)).collect();
                (Body::Encoder(blocks), dims.d_model)
            }
            Arch::Rnn | Arch::Lstm | Arch::Gru => {
                let kind = match arch {
                    Arch::Rnn => CellKind::Rnn,
                    Arch::Lstm => CellKind::Lstm,
                    _ => CellKind::Gru,
                };
                (Body::Recurrent(Recurrent::new(&mut layout, kind, dims.d_model, dims.units, false)), dims.units)
            }
            Arch::BiLstm => {
                let f = Recurrent::new(&mut layout, CellKind::Lstm, dims.d_model, dims.units, false);
                let b = Recurrent::new(&mut layout, CellKind::Lstm, dims.d_model, dims.units, true);
                (Body::Bidirectional(f, b), 2 * dims.units)
            }
        };
        let head = Dense::new(&mut layout, width, dims.head_dim);
        let output = Dense::new(&mut layout, dims.head_dim, dims.num_classes);
        let position = match arch {
            Arch::TransformerEncoder => Some(position_encoding_matrix(dims.frames, dims.d_model)?),
            _ => None,
        };
        Ok(SequenceClassifier { arch, dims, projector, body, head, output, position, len: layout.len() })
    }

    /// Width of the pooled representation fed to the head.
    pub fn pooled_width(&self) -> usize {
        self.head.input_dim()
    }

    fn check_sample(&self, s: &SequenceSample) {
        assert_eq!(s.frames.shape(), (self.dims.frames, self.dims.features), "sequence shape");
        assert!(s.label < self.dims.num_classes, "label {} out of range", s.label);
    }

    /// Class probabilities with stochastic layers off.
    pub fn predict(&self, params: &[f64], frames: &Matrix) -> Vec<f64> {
        let sample = SequenceSample { frames: frames.clone(), label: 0 };
        self.sample_pass(params, &sample, None, None).1
    }

    fn perturbation(&self, rng: &mut ModelRng) -> Perturbation {
        let width = self.pooled_width();
        let noise = if self.dims.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.dims.noise_std).expect("validated std");
            (0..width).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; width]
        };
        let keep = 1.0 - self.dims.dropout;
        let mask = (0..self.dims.head_dim).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        Perturbation { noise, mask }
    }

    /// Returns `(loss, probabilities)`; accumulates into `grad` when given.
    fn sample_pass(
        &self,
        params: &[f64],
        sample: &SequenceSample,
        perturb: Option<&Perturbation>,
        grad: Option<&mut [f64]>,
    ) -> (f64, Vec<f64>) {
        let x = &sample.frames;
        let proj_pre = self.projector.forward(params, x);
        let proj = activation(&proj_pre, Activation::Tanh);

        let (h, body_cache) = match &self.body {
            Body::Identity => (proj.clone(), BodyCache::Identity),
            Body::Encoder(blocks) => {
                let mut h = proj.add(self.position.as_ref().expect("encoder has position table"));
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (out, c) = b.forward(params, &h);
                    h = out;
                    caches.push(c);
                }
                (h, BodyCache::Encoder(caches))
            }
            Body::Recurrent(r) => {
                let (h, c) = r.forward(params, &proj);
                (h, BodyCache::Recurrent(c))
            }
            Body::Bidirectional(f, b) => {
                let (hf, cf) = f.forward(params, &proj);
                let (hb, cb) = b.forward(params, &proj);
                (Matrix::hcat(&[hf, hb]), BodyCache::Bidirectional(cf, cb))
            }
        };

        let (mut pooled, arg) = max_over_time(&h);
        if let Some(p) = perturb {
            pooled.iter_mut().zip(&p.noise).for_each(|(v, n)| *v += n);
        }
        let pooled = Matrix::from_vec(1, pooled.len(), pooled);
        let hidden_pre = self.head.forward(params, &pooled);
        let hidden_act = activation(&hidden_pre, Activation::Relu);
        let hidden = match perturb {
            Some(p) => Matrix::from_fn(1, hidden_act.cols(), |_, c| hidden_act.get(0, c) * p.mask[c]),
            None => hidden_act.clone(),
        };
        let logits = self.output.forward(params, &hidden);
        let probs = softmax(logits.row(0));
        let loss = cross_entropy(&Matrix::from_vec(1, probs.len(), probs.clone()), &[sample.label]).expect("valid softmax");

        let Some(grad) = grad else {
            return (loss, probs);
        };
        let mut d_logits = probs.clone();
        d_logits[sample.label] -= 1.0;
        let d_logits = Matrix::from_vec(1, d_logits.len(), d_logits);
        let mut d_hidden = self.output.backward(params, &hidden, &d_logits, grad);
        if let Some(p) = perturb {
            d_hidden = Matrix::from_fn(1, d_hidden.cols(), |_, c| d_hidden.get(0, c) * p.mask[c]);
        }
        let d_hidden_pre = activation_backward(&hidden_pre, &hidden_act, &d_hidden, Activation::Relu);
        let d_pooled = self.head.backward(params, &pooled, &d_hidden_pre, grad);
        let d_h = max_over_time_backward(h.rows(), &arg, d_pooled.row(0));

        let d_proj = match (&self.body, &body_cache) {
            (Body::Identity, BodyCache::Identity) => d_h,
            (Body::Encoder(blocks), BodyCache::Encoder(caches)) => {
                let mut d = d_h;
                for (b, c) in blocks.iter().zip(caches).rev() {
                    d = b.backward(params, c, &d, grad);
                }
                d
            }
            (Body::Recurrent(r), BodyCache::Recurrent(c)) => r.backward(params, c, &d_h, grad),
            (Body::Bidirectional(f, b), BodyCache::Bidirectional(cf, cb)) => {
                let u = f.units();
                let mut d = f.backward(params, cf, &d_h.columns(0, u), grad);
                d.add_assign(&b.backward(params, cb, &d_h.columns(u, u), grad));
                d
            }
            _ => unreachable!("cache built from the same body"),
        };
        let d_proj_pre = activation_backward(&proj_pre, &proj, &d_proj, Activation::Tanh);
        self.projector.backward(params, x, &d_proj_pre, grad);
        (loss, probs)
    }

    fn batch_pass(&self, params: &[f64], batch: &[SequenceSample], mut rng: Option<&mut ModelRng>) -> (f64, Vec<f64>) {
        assert_eq!(params.len(), self.len, "parameter vector length");
        let mut grad = vec![0.0; self.len];
        if batch.is_empty() {
            return (0.0, grad);
        }
        let mut loss = 0.0;
        for s in batch {
            self.check_sample(s);
            let perturb = rng.as_deref_mut().map(|r| self.perturbation(r));
            loss += self.sample_pass(params, s, perturb.as_ref(), Some(&mut grad)).0;
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl LossModel for SequenceClassifier {
    type Sample = SequenceSample;

    fn dimension(&self) -> usize {
        self.len
    }

    fn loss_and_gradient(&self, params: &[f64], batch: &[SequenceSample]) -> (f64, Vec<f64>) {
        self.batch_pass(params, batch, None)
    }

    fn evaluate(&self, params: &[f64], batch: &[SequenceSample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let total: f64 = batch
            .iter()
            .map(|s| {
                self.check_sample(s);
                self.sample_pass(params, s, None, None).0
            })
            .sum();
        total / batch.len() as f64
    }

    fn training_loss_and_gradient(&self, params: &[f64], batch: &[SequenceSample], rng: &mut ModelRng) -> (f64, Vec<f64>) {
        self.batch_pass(params, batch, Some(rng))
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut p = vec![0.0; self.len];
        self.projector.init(&mut p, &mut rng);
        match &self.body {
            Body::Identity => {}
            Body::Encoder(blocks) => blocks.iter().for_each(|b| b.init(&mut p, &mut rng)),
            Body::Recurrent(r) => r.init(&mut p, &mut rng),
            Body::Bidirectional(f, b) => {
                f.init(&mut p, &mut rng);
                b.init(&mut p, &mut rng);
            }
        }
        self.head.init(&mut p, &mut rng);
        self.output.init(&mut p, &mut rng);
        // Small output weights keep the initial prediction close to uniform.
        p[self.output.w.offset..self.output.w.offset + self.output.w.len()].iter_mut().for_each(|w| *w *= OUTPUT_INIT_SCALE);
        p
    }

    fn accuracy(&self, params: &[f64], batch: &[SequenceSample]) -> Option<f64> {
        if batch.is_empty() {
            return None;
        }
        let hits = batch.iter().filter(|s| argmax(&self.predict(params, &s.frames)) == s.label).count();
        Some(hits as f64 / batch.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gradcheck::{finite_diff_gradient, max_relative_error, DEFAULT_EPS};

    const ALL: [Arch; 6] = [Arch::Mlp, Arch::TransformerEncoder, Arch::Rnn, Arch::Lstm, Arch::Gru, Arch::BiLstm];

    fn small_dims() -> ClassifierDims {
        ClassifierDims { frames: 5, features: 3, num_classes: 3, d_model: 4, heads: 2, blocks: 2, ffn_dim: 6, units: 3, head_dim: 5, ..Default::default() }
    }

    fn random_batch(dims: &ClassifierDims, n: usize, rng: &mut ModelRng) -> Vec<SequenceSample> {
        (0..n)
            .map(|i| SequenceSample {
                frames: Matrix::from_fn(dims.frames, dims.features, |_, _| rng.gen_range(-1.0..1.0)),
                label: i % dims.num_classes,
            })
            .collect()
    }

    #[test]
    fn parameter_count_is_sum_of_components() {
        let d = small_dims();
        let (g, m, c, f, u, hd) = (d.features, d.d_model, d.num_classes, d.ffn_dim, d.units, d.head_dim);
        let projector = g * m + m;
        let head = |w: usize| w * hd + hd + hd * c + c;
        let mha = 3 * m * m + m * m;
        let block = mha + 2 * m + (m * f + f) + (f * m + m) + 2 * m;
        let cell = |blocks: usize| blocks * (m * u + u * u + u);
        let expected = [
            (Arch::Mlp, projector + head(m)),
            (Arch::TransformerEncoder, projector + 2 * block + head(m)),
            (Arch::Rnn, projector + cell(1) + head(u)),
            (Arch::Lstm, projector + cell(4) + head(u)),
            (Arch::Gru, projector + cell(3) + head(u)),
            (Arch::BiLstm, projector + 2 * cell(4) + head(2 * u)),
        ];
        for (arch, n) in expected {
            assert_eq!(build_sequence_classifier(arch, d.clone()).unwrap().dimension(), n, "{arch:?}");
        }
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let odd = ClassifierDims { d_model: 5, ..small_dims() };
        assert!(build_sequence_classifier(Arch::TransformerEncoder, odd.clone()).is_err());
        assert!(build_sequence_classifier(Arch::Lstm, odd).is_ok());
        let heads = ClassifierDims { d_model: 6, heads: 4, ..small_dims() };
        assert!(build_sequence_classifier(Arch::TransformerEncoder, heads).is_err());
        assert!(build_sequence_classifier(Arch::Mlp, ClassifierDims { num_classes: 1, ..small_dims() }).is_err());
        assert!(build_sequence_classifier(Arch::Gru, ClassifierDims { units: 0, ..small_dims() }).is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_training_path_is_seeded() {
        let d = small_dims();
        let mut rng = ModelRng::seed_from_u64(9);
        let batch = random_batch(&d, 4, &mut rng);
        for arch in ALL {
            let m = build_sequence_classifier(arch, d.clone()).unwrap();
            let p = m.init_params(3);
            assert_eq!(p, m.init_params(3));
            assert_eq!(m.loss_and_gradient(&p, &batch), m.loss_and_gradient(&p, &batch));
            let a = m.training_loss_and_gradient(&p, &batch, &mut ModelRng::seed_from_u64(1));
            let b = m.training_loss_and_gradient(&p, &batch, &mut ModelRng::seed_from_u64(1));
            assert_eq!(a, b);
            let c = m.training_loss_and_gradient(&p, &batch, &mut ModelRng::seed_from_u64(2));
            assert_ne!(a.0, c.0);
        }
    }

    #[test]
    fn initial_loss_is_near_log_classes() {
        let d = ClassifierDims { num_classes: 4, frames: 8, features: 4, d_model: 8, units: 8, head_dim: 16, ..small_dims() };
        let mut rng = ModelRng::seed_from_u64(11);
        let batch = random_batch(&d, 64, &mut rng);
        for arch in ALL {
            let m = build_sequence_classifier(arch, d.clone()).unwrap();
            let mean: f64 = (0..5).map(|s| m.evaluate(&m.init_params(s), &batch)).sum::<f64>() / 5.0;
            assert!((mean - 4f64.ln()).abs() < 0.1, "{arch:?}: {mean}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = small_dims();
        for arch in ALL {
            let m = build_sequence_classifier(arch, d.clone()).unwrap();
            for draw in 0..10u64 {
                let mut rng = ModelRng::seed_from_u64(1000 + draw);
                let params: Vec<f64> = m.init_params(draw).iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect();
                let batch = random_batch(&d, 3, &mut rng);
                let err = max_relative_error(&m.gradient(&params, &batch), &finite_diff_gradient(&m, &params, &batch, DEFAULT_EPS));
                assert!(err < 1e-4, "{arch:?} draw {draw}: {err}");
            }
        }
    }

    #[test]
    fn probabilities_are_distributions() {
        let d = small_dims();
        let mut rng = ModelRng::seed_from_u64(5);
        let batch = random_batch(&d, 3, &mut rng);
        for arch in ALL {
            let m = build_sequence_classifier(arch, d.clone()).unwrap();
            let p = m.init_params(0);
            for s in &batch {
                let probs = m.predict(&p, &s.frames);
                assert!(probs.iter().all(|v| *v >= 0.0));
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
