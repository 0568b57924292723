//! Scaled dot-product attention, multi-head attention and the encoder block
//! (post-norm residual sublayers: attention, then a two-layer feed-forward).

use rand::Rng;

use super::layers::{activation, activation_backward, softmax_rows, softmax_rows_backward, Activation, Dense, LayerNorm, LayerNormCache};
use super::linalg::{Matrix, ParamLayout, Slot};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
}

/// `softmax(Q K^T / sqrt(d_k)) V`, row-wise softmax.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    attention_forward(q, k, v).map(|(out, _)| out)
}

pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, AttentionCache)> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows() {
        return Err(Error::invalid(format!(
            "attention shapes: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let probs = softmax_rows(&q.matmul_t(k).scale(scale));
    let out = probs.matmul(v);
    Ok((out, AttentionCache { q: q.clone(), k: k.clone(), v: v.clone(), probs }))
}

/// Gradients `(dQ, dK, dV)` given the output gradient.
pub fn attention_backward(cache: &AttentionCache, d_out: &Matrix) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let dv = cache.probs.t_matmul(d_out);
    let dp = d_out.matmul_t(&cache.v);
    let ds = softmax_rows_backward(&cache.probs, &dp).scale(scale);
    let dq = ds.matmul(&cache.k);
    let dk = ds.t_matmul(&cache.q);
    (dq, dk, dv)
}

/// Explicit weights for [`multi_head_attention`].
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `(heads * d_v) x d_model`
    pub w_o: Matrix,
}

/// `Concat(head_1, ..., head_h) W_O` with `head_i = Attention(X W_Q^i, X W_K^i, X W_V^i)`.
pub fn multi_head_attention(x: &Matrix, weights: &HeadWeights) -> Result<Matrix> {
    let h = weights.w_q.len();
    if weights.w_k.len() != h || weights.w_v.len() != h || h == 0 {
        return Err(Error::invalid("every head needs W_Q, W_K and W_V"));
    }
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        for w in [&weights.w_q[i], &weights.w_k[i], &weights.w_v[i]] {
            if w.rows() != x.cols() {
                return Err(Error::invalid(format!("head {i} projection has {} rows, input has {} columns", w.rows(), x.cols())));
            }
        }
        heads.push(scaled_dot_attention(&x.matmul(&weights.w_q[i]), &x.matmul(&weights.w_k[i]), &x.matmul(&weights.w_v[i]))?);
    }
    let concat = Matrix::hcat(&heads);
    if concat.cols() != weights.w_o.rows() {
        return Err(Error::invalid(format!("W_O expects {} inputs, heads give {}", weights.w_o.rows(), concat.cols())));
    }
    Ok(concat.matmul(&weights.w_o))
}

/// Multi-head self-attention over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Vec<Slot>,
    pub w_k: Vec<Slot>,
    pub w_v: Vec<Slot>,
    pub w_o: Slot,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    x: Matrix,
    heads: Vec<AttentionCache>,
    concat: Matrix,
}

impl MultiHeadAttention {
    pub fn new(layout: &mut ParamLayout, d_model: usize, heads: usize, d_k: usize, d_v: usize) -> Self {
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for _ in 0..heads {
            w_q.push(layout.slot(d_model, d_k));
            w_k.push(layout.slot(d_model, d_k));
            w_v.push(layout.slot(d_model, d_v));
        }
        let w_o = layout.slot(heads * d_v, d_model);
        MultiHeadAttention { w_q, w_k, w_v, w_o, d_model, d_k, d_v }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for i in 0..self.heads() {
            self.w_q[i].glorot(params, self.d_model, self.d_k, rng);
            self.w_k[i].glorot(params, self.d_model, self.d_k, rng);
            self.w_v[i].glorot(params, self.d_model, self.d_v, rng);
        }
        self.w_o.glorot(params, self.heads() * self.d_v, self.d_model, rng);
    }

    pub fn weights(&self, params: &[f64]) -> HeadWeights {
        HeadWeights {
            w_q: self.w_q.iter().map(|s| s.read(params)).collect(),
            w_k: self.w_k.iter().map(|s| s.read(params)).collect(),
            w_v: self.w_v.iter().map(|s| s.read(params)).collect(),
            w_o: self.w_o.read(params),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> (Matrix, MhaCache) {
        let w = self.weights(params);
        let mut outs = Vec::with_capacity(self.heads());
        let mut heads = Vec::with_capacity(self.heads());
        for i in 0..self.heads() {
            let (out, cache) = attention_forward(&x.matmul(&w.w_q[i]), &x.matmul(&w.w_k[i]), &x.matmul(&w.w_v[i]))
                .expect("shapes fixed at construction");
            outs.push(out);
            heads.push(cache);
        }
        let concat = Matrix::hcat(&outs);
        let y = concat.matmul(&w.w_o);
        (y, MhaCache { x: x.clone(), heads, concat })
    }

    pub fn backward(&self, params: &[f64], cache: &MhaCache, dy: &Matrix, grad: &mut [f64]) -> Matrix {
        let w = self.weights(params);
        self.w_o.accumulate(grad, &cache.concat.t_matmul(dy));
        let d_concat = dy.matmul_t(&w.w_o);
        let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
        for i in 0..self.heads() {
            let d_head = d_concat.columns(i * self.d_v, self.d_v);
            let (dq, dk, dv) = attention_backward(&cache.heads[i], &d_head);
            self.w_q[i].accumulate(grad, &cache.x.t_matmul(&dq));
            self.w_k[i].accumulate(grad, &cache.x.t_matmul(&dk));
            self.w_v[i].accumulate(grad, &cache.x.t_matmul(&dv));
            dx.add_assign(&dq.matmul_t(&w.w_q[i]));
            dx.add_assign(&dk.matmul_t(&w.w_k[i]));
            dx.add_assign(&dv.matmul_t(&w.w_v[i]));
        }
        dx
    }
}

/// `Y = LN(X + MHA(X))`, `Z = LN(Y + FFN(Y))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub norm2: LayerNorm,
    pub ffn_activation: Activation,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    attention: MhaCache,
    norm1: LayerNormCache,
    y: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    norm2: LayerNormCache,
}

impl EncoderBlock {
    pub fn new(layout: &mut ParamLayout, d_model: usize, heads: usize, dense_dim: usize) -> Self {
        let d_head = (d_model / heads).max(1);
        EncoderBlock {
            attention: MultiHeadAttention::new(layout, d_model, heads, d_head, d_head),
            norm1: LayerNorm::new(layout, d_model),
            ffn_in: Dense::new(layout, d_model, dense_dim),
            ffn_out: Dense::new(layout, dense_dim, d_model),
            norm2: LayerNorm::new(layout, d_model),
            ffn_activation: Activation::Relu,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.attention.init(params, rng);
        self.norm1.init(params);
        self.ffn_in.init(params, rng);
        self.ffn_out.init(params, rng);
        self.norm2.init(params);
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> (Matrix, EncoderCache) {
        let (a, attention) = self.attention.forward(params, x);
        let (y, norm1) = self.norm1.forward(params, &x.add(&a));
        let hidden_pre = self.ffn_in.forward(params, &y);
        let hidden = activation(&hidden_pre, self.ffn_activation);
        let f = self.ffn_out.forward(params, &hidden);
        let (z, norm2) = self.norm2.forward(params, &y.add(&f));
        (z, EncoderCache { attention, norm1, y, hidden_pre, hidden, norm2 })
    }

    pub fn backward(&self, params: &[f64], cache: &EncoderCache, dz: &Matrix, grad: &mut [f64]) -> Matrix {
        let dr2 = self.norm2.backward(params, &cache.norm2, dz, grad);
        let dh = self.ffn_out.backward(params, &cache.hidden, &dr2, grad);
        let dh_pre = activation_backward(&cache.hidden_pre, &cache.hidden, &dh, self.ffn_activation);
        let mut dy = self.ffn_in.backward(params, &cache.y, &dh_pre, grad);
        dy.add_assign(&dr2);
        let dr1 = self.norm1.backward(params, &cache.norm1, &dy, grad);
        let mut dx = self.attention.backward(params, &cache.attention, &dr1, grad);
        dx.add_assign(&dr1);
        dx
    }
}

/// Applies one encoder block to `x` with weights taken from `params`.
pub fn transformer_encoder_block(block: &EncoderBlock, params: &[f64], x: &Matrix) -> Result<Matrix> {
    if x.cols() != block.attention.d_model {
        return Err(Error::invalid(format!("block expects width {}, got {}", block.attention.d_model, x.cols())));
    }
    Ok(block.forward(params, x).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::layers::{normalize_rows, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    // Element-by-element recomputation with explicit loops.
    fn attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let n = q.rows();
        let dk = q.cols() as f64;
        let mut out = Matrix::zeros(n, v.cols());
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / dk.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..v.cols() {
                out.set(i, c, (0..n).map(|j| e[j] / z * v.get(j, c)).sum());
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value() {
        let q = Matrix::from_rows(&[vec![0.3, -2.0]]);
        let k = Matrix::from_rows(&[vec![1.0, 4.0]]);
        let v = Matrix::from_rows(&[vec![7.0, -1.0, 2.0]]);
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let k = Matrix::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4]]);
        let v = Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, -1.0]]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-15 && (out.get(r, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn random_attention_matches_oracle_and_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (q, k, v) = (random(3, 2, &mut rng), random(3, 2, &mut rng), random(3, 2, &mut rng));
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            let oracle = attention_oracle(&q, &k, &v);
            for (a, b) in out.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for c in 0..2 {
                let col: Vec<f64> = (0..3).map(|r| v.get(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for r in 0..3 {
                    assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
                }
            }
        }
        assert!(scaled_dot_attention(&random(3, 2, &mut rng), &random(3, 3, &mut rng), &random(3, 2, &mut rng)).is_err());
    }

    #[test]
    fn identity_projections_reduce_to_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(4, 3, &mut rng);
        let id = Matrix::identity(3);
        let w = HeadWeights { w_q: vec![id.clone()], w_k: vec![id.clone()], w_v: vec![id.clone()], w_o: id };
        assert_eq!(multi_head_attention(&x, &w).unwrap(), scaled_dot_attention(&x, &x, &x).unwrap());
    }

    #[test]
    fn zero_value_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(4, 4, &mut rng);
        let w = HeadWeights {
            w_q: vec![random(4, 2, &mut rng), random(4, 2, &mut rng)],
            w_k: vec![random(4, 2, &mut rng), random(4, 2, &mut rng)],
            w_v: vec![Matrix::zeros(4, 2), Matrix::zeros(4, 2)],
            w_o: random(4, 4, &mut rng),
        };
        assert!(multi_head_attention(&x, &w).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_heads_match_concat_then_project_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(3, 4, &mut rng);
        let w = HeadWeights {
            w_q: vec![random(4, 2, &mut rng), random(4, 2, &mut rng)],
            w_k: vec![random(4, 2, &mut rng), random(4, 2, &mut rng)],
            w_v: vec![random(4, 3, &mut rng), random(4, 3, &mut rng)],
            w_o: random(6, 4, &mut rng),
        };
        let got = multi_head_attention(&x, &w).unwrap();
        // Independent path: per-token loops for projections, explicit softmax, manual concat.
        let proj = |m: &Matrix| Matrix::from_fn(3, m.cols(), |r, c| (0..4).map(|i| x.get(r, i) * m.get(i, c)).sum());
        let mut concat = vec![vec![0.0; 6]; 3];
        for h in 0..2 {
            let (q, k, v) = (proj(&w.w_q[h]), proj(&w.w_k[h]), proj(&w.w_v[h]));
            for i in 0..3 {
                let s: Vec<f64> = (0..3).map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) / 2f64.sqrt()).collect();
                let p = softmax(&s);
                for c in 0..3 {
                    concat[i][h * 3 + c] = (0..3).map(|j| p[j] * v.get(j, c)).sum();
                }
            }
        }
        for i in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..6).map(|j| concat[i][j] * w.w_o.get(j, c)).sum();
                assert!((got.get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sublayers_leave_double_normalization() {
        let mut layout = ParamLayout::new();
        let block = EncoderBlock::new(&mut layout, 8, 2, 16);
        let mut params = vec![0.0; layout.len()];
        block.norm1.init(&mut params);
        block.norm2.init(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(5, 8, &mut rng);
        let z = transformer_encoder_block(&block, &params, &x).unwrap();
        let expected = normalize_rows(&normalize_rows(&x).normalized).normalized;
        for (a, b) in z.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(transformer_encoder_block(&block, &params, &random(5, 4, &mut rng)).is_err());
    }
}
