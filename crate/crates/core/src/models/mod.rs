//! Differentiable loss providers.
//!
//! Every model exposes its loss and an analytic gradient over a flat
//! parameter vector. Neural models are written layer by layer with
//! hand-derived backward passes; [`gradcheck`] holds the finite-difference
//! oracle they are verified against.

use rand_chacha::ChaCha8Rng;

pub mod attention;
pub mod benchmarks;
pub mod classifier;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod recurrent;

pub use benchmarks::{Rastrigin, Rosenbrock, Sphere};
pub use classifier::{build_sequence_classifier, Arch, ClassifierDims, SequenceClassifier, SequenceSample};
pub use conv::ConvNetClassifier;
pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use linalg::Matrix;

/// RNG type threaded through stochastic layers and initializers.
pub type ModelRng = ChaCha8Rng;

pub trait LossModel: Send + Sync {
    /// One training example. Objective-only models use `()` and ignore batches.
    type Sample: Send + Sync;

    fn dimension(&self) -> usize;

    /// Deterministic loss and gradient, stochastic layers disabled.
    fn loss_and_gradient(&self, params: &[f64], batch: &[Self::Sample]) -> (f64, Vec<f64>);

    fn evaluate(&self, params: &[f64], batch: &[Self::Sample]) -> f64 {
        self.loss_and_gradient(params, batch).0
    }

    fn gradient(&self, params: &[f64], batch: &[Self::Sample]) -> Vec<f64> {
        self.loss_and_gradient(params, batch).1
    }

    /// Loss and gradient with noise/dropout active, driven by `rng`.
    fn training_loss_and_gradient(&self, params: &[f64], batch: &[Self::Sample], rng: &mut ModelRng) -> (f64, Vec<f64>) {
        let _ = rng;
        self.loss_and_gradient(params, batch)
    }

    fn init_params(&self, seed: u64) -> Vec<f64>;

    /// Classification accuracy when the model is a classifier.
    fn accuracy(&self, params: &[f64], batch: &[Self::Sample]) -> Option<f64> {
        let _ = (params, batch);
        None
    }
}
