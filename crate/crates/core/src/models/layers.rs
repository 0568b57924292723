//! Building blocks shared by the neural models: activations, dense and
//! layer-norm layers, softmax / cross-entropy, position encoding and
//! pooling over time. Each differentiable layer has a `forward` and a
//! `backward` that accumulates parameter gradients into a flat buffer and
//! returns the gradient with respect to its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{Matrix, ParamLayout, Slot};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

pub fn activation(x: &Matrix, act: Activation) -> Matrix {
    x.map(|v| act.apply(v))
}

pub fn activation_backward(pre: &Matrix, post: &Matrix, dy: &Matrix, act: Activation) -> Matrix {
    Matrix::from_fn(pre.rows(), pre.cols(), |r, c| dy.get(r, c) * act.derivative(pre.get(r, c), post.get(r, c)))
}

/// Affine map `x W + b` on a single vector.
pub fn fc_forward(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.rows() || b.len() != w.cols() {
        return Err(Error::invalid(format!(
            "fc shapes: input {}, weights {}x{}, bias {}",
            x.len(),
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let row = Matrix::from_vec(1, x.len(), x.to_vec());
    let mut out = row.matmul(w);
    out.add_row(b);
    Ok(out.into_vec())
}

/// Row-wise affine layer `Y = X W + b`, `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: Slot,
    pub b: Slot,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, input: usize, output: usize) -> Self {
        Dense { w: layout.slot(input, output), b: layout.slot(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.w.glorot(params, self.w.rows, self.w.cols, rng);
        self.b.fill(params, 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w.read(params));
        y.add_row(self.b.slice(params));
        y
    }

    pub fn backward(&self, params: &[f64], x: &Matrix, dy: &Matrix, grad: &mut [f64]) -> Matrix {
        self.w.accumulate(grad, &x.t_matmul(dy));
        self.b.accumulate_row(grad, &dy.column_sums());
        dy.matmul_t(&self.w.read(params))
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Zero-mean, unit-variance rows (population variance).
pub fn normalize_rows(x: &Matrix) -> LayerNormCache {
    let d = x.cols() as f64;
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    LayerNormCache { normalized, inv_std }
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, dim: usize) -> Self {
        LayerNorm { gamma: layout.slot(1, dim), beta: layout.slot(1, dim) }
    }

    pub fn init(&self, params: &mut [f64]) {
        self.gamma.fill(params, 1.0);
        self.beta.fill(params, 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> (Matrix, LayerNormCache) {
        let cache = normalize_rows(x);
        let gamma = self.gamma.slice(params);
        let beta = self.beta.slice(params);
        let y = Matrix::from_fn(x.rows(), x.cols(), |r, c| gamma[c] * cache.normalized.get(r, c) + beta[c]);
        (y, cache)
    }

    pub fn backward(&self, params: &[f64], cache: &LayerNormCache, dy: &Matrix, grad: &mut [f64]) -> Matrix {
        let gamma = self.gamma.slice(params);
        let xhat = &cache.normalized;
        self.gamma.accumulate_row(grad, &dy.hadamard(xhat).column_sums());
        self.beta.accumulate_row(grad, &dy.column_sums());
        let d = dy.cols() as f64;
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let dxhat: Vec<f64> = dy.row(r).iter().zip(gamma).map(|(g, s)| g * s).collect();
            let sum: f64 = dxhat.iter().sum();
            let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
            let inv = cache.inv_std[r];
            for c in 0..dy.cols() {
                dx.set(r, c, inv / d * (d * dxhat[c] - sum - xhat.get(r, c) * dot));
            }
        }
        dx
    }
}

/// Numerically stable softmax (max subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&softmax(m.row(r)));
    }
    out
}

/// Backward of a row-wise softmax `p` given `dp`.
pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let inner: f64 = p.row(r).iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
        for c in 0..p.cols() {
            ds.set(r, c, p.get(r, c) * (dp.get(r, c) - inner));
        }
    }
    ds
}

/// Mean over rows of `-ln p[label]`, probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || probs.rows() == 0 {
        return Err(Error::invalid(format!("{} probability rows for {} labels", probs.rows(), labels.len())));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        if label >= row.len() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid(format!("row {r} is not a probability distribution (sum {sum})")));
        }
        total -= row[label].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Sinusoidal encoding: `sin(pos / 10000^(2i/d))` at even slots, `cos` at odd.
pub fn position_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 2 != 0 {
        return Err(Error::invalid(format!("d_model = {d_model} must be even")));
    }
    let mut pe = Vec::with_capacity(d_model);
    for i in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        pe.push(angle.sin());
        pe.push(angle.cos());
    }
    Ok(pe)
}

pub fn position_encoding_matrix(len: usize, d_model: usize) -> Result<Matrix> {
    let rows = (0..len).map(|p| position_encoding(p, d_model)).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows))
}

/// Max over rows for each column; ties resolve to the earliest row.
pub fn max_over_time(x: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let mut values = x.row(0).to_vec();
    let mut arg = vec![0; x.cols()];
    for r in 1..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > values[c] {
                values[c] = v;
                arg[c] = r;
            }
        }
    }
    (values, arg)
}

pub fn max_over_time_backward(rows: usize, arg: &[usize], dy: &[f64]) -> Matrix {
    let mut dx = Matrix::zeros(rows, arg.len());
    for (c, (&r, &g)) in arg.iter().zip(dy).enumerate() {
        dx.set(r, c, g);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_encoding_examples() {
        let pe = position_encoding(0, 6).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = position_encoding(1, 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((pe[0] - 0.84147).abs() < 1e-5 && (pe[1] - 0.54030).abs() < 1e-5);
        assert!((pe[2] - 0.0099998).abs() < 1e-7 && (pe[3] - 0.99995).abs() < 1e-5);
        assert!(position_encoding(3, 5).is_err());
    }

    #[test]
    fn position_encoding_bounded_and_distinct() {
        let sample: Vec<usize> = (0..10_000).step_by(37).collect();
        let encs: Vec<Vec<f64>> = sample.iter().map(|&p| position_encoding(p, 8).unwrap()).collect();
        for e in &encs {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..encs.len() {
            for j in i + 1..encs.len() {
                assert_ne!(encs[i], encs[j]);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::from_rows(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let onehot = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(cross_entropy(&onehot, &[1]).unwrap(), 0.0);
        let p = Matrix::from_rows(&[vec![0.7, 0.3]]);
        assert!((cross_entropy(&p, &[0]).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);
        // Wrong label on a one-hot row hits the clamp.
        assert!((cross_entropy(&onehot, &[0]).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(cross_entropy(&Matrix::from_rows(&[vec![0.5, 0.6]]), &[0]).is_err());
        assert!(cross_entropy(&p, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::from_fn(5, 7, |_, _| rng.gen_range(-50.0..50.0));
        let p = softmax_rows(&m);
        for r in 0..5 {
            assert!(p.row(r).iter().all(|v| *v >= 0.0));
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_fn(6, 16, |_, _| rng.gen_range(-3.0..5.0));
        let c = normalize_rows(&x);
        for r in 0..6 {
            let row = c.normalized.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::LeakyRelu.apply(-2.0), -0.02);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn fc_forward_shapes() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(fc_forward(&[1.0, 0.0, -1.0], &w, &[0.5, 0.5]).unwrap(), vec![-3.5, -3.5]);
        assert!(fc_forward(&[1.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn max_over_time_routes_gradient_to_argmax() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![3.0, 0.0]]);
        let (v, arg) = max_over_time(&x);
        assert_eq!((v, arg.clone()), (vec![3.0, 5.0], vec![1, 0]));
        let dx = max_over_time_backward(3, &arg, &[1.0, 2.0]);
        assert_eq!(dx, Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0], vec![0.0, 0.0]]));
    }
}
