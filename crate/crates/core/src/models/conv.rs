//! Convolution, pooling and a toy ConvNet classifier.
//!
//! Feature maps are `[height, width, channels]`, row-major with channels
//! innermost. Convolution is valid cross-correlation with stride 1; pooling
//! uses non-overlapping windows that must tile the input exactly.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy, softmax, Activation};
use super::linalg::{Matrix, ParamLayout, Slot};
use super::{LossModel, ModelRng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor3 { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(height * width * channels, data.len())?;
        Ok(Tensor3 { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    t.set(y, x, c, f(y, x, c));
                }
            }
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    fn add(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] += v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Central `height x width` window; odd margins drop the extra row/column at the end.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Tensor3> {
        if height > self.height || width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width} larger than input {}x{}",
                self.height, self.width
            )));
        }
        let (top, left) = ((self.height - height) / 2, (self.width - width) / 2);
        Ok(Tensor3::from_fn(height, width, self.channels, |y, x, c| self.get(top + y, left + x, c)))
    }
}

/// `[kh, kw, in, out]` kernel and per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel {
    pub fn new(height: usize, width: usize, in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(height * width * in_channels * out_channels, weights.len())?;
        crate::error::check_dim(out_channels, bias.len())?;
        Ok(Kernel { height, width, in_channels, out_channels, weights, bias })
    }

    fn idx(&self, dy: usize, dx: usize, ci: usize, co: usize) -> usize {
        ((dy * self.width + dx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn get(&self, dy: usize, dx: usize, ci: usize, co: usize) -> f64 {
        self.weights[self.idx(dy, dx, ci, co)]
    }
}

/// `out[y][x][o] = b[o] + sum_{dy,dx,i} in[y+dy][x+dx][i] K[dy][dx][i][o]`
pub fn conv2d_forward(input: &Tensor3, kernel: &Kernel) -> Result<Tensor3> {
    let (h, w, c) = input.shape();
    if c != kernel.in_channels {
        return Err(Error::DimensionMismatch { expected: kernel.in_channels, got: c });
    }
    if kernel.height == 0 || kernel.width == 0 || kernel.height > h || kernel.width > w {
        return Err(Error::invalid(format!("kernel {}x{} does not fit input {h}x{w}", kernel.height, kernel.width)));
    }
    let (oh, ow) = (h - kernel.height + 1, w - kernel.width + 1);
    let mut out = Tensor3::zeros(oh, ow, kernel.out_channels);
    for y in 0..oh {
        for x in 0..ow {
            for o in 0..kernel.out_channels {
                let mut acc = kernel.bias[o];
                for dy in 0..kernel.height {
                    for dx in 0..kernel.width {
                        for i in 0..c {
                            acc += input.get(y + dy, x + dx, i) * kernel.get(dy, dx, i, o);
                        }
                    }
                }
                out.set(y, x, o, acc);
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_kernel_weights, d_bias)`.
pub fn conv2d_backward(input: &Tensor3, kernel: &Kernel, d_out: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (h, w, c) = input.shape();
    let (oh, ow, _) = d_out.shape();
    let mut d_in = Tensor3::zeros(h, w, c);
    let mut d_k = vec![0.0; kernel.weights.len()];
    let mut d_b = vec![0.0; kernel.out_channels];
    for y in 0..oh {
        for x in 0..ow {
            for o in 0..kernel.out_channels {
                let g = d_out.get(y, x, o);
                if g == 0.0 {
                    continue;
                }
                d_b[o] += g;
                for dy in 0..kernel.height {
                    for dx in 0..kernel.width {
                        for i in 0..c {
                            d_k[kernel.idx(dy, dx, i, o)] += g * input.get(y + dy, x + dx, i);
                            d_in.add(y + dy, x + dx, i, g * kernel.get(dy, dx, i, o));
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k, d_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Average,
}

/// Non-overlapping `wh x ww` pooling per channel.
pub fn pool2d_forward(input: &Tensor3, wh: usize, ww: usize, kind: PoolKind) -> Result<Tensor3> {
    let (h, w, c) = input.shape();
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::invalid(format!("pool window {wh}x{ww} does not tile {h}x{w}")));
    }
    let mut out = Tensor3::zeros(h / wh, w / ww, c);
    for y in 0..h / wh {
        for x in 0..w / ww {
            for ch in 0..c {
                let cells = (0..wh).flat_map(|dy| (0..ww).map(move |dx| (dy, dx)));
                let v = match kind {
                    PoolKind::Max => {
                        cells.map(|(dy, dx)| input.get(y * wh + dy, x * ww + dx, ch)).fold(f64::NEG_INFINITY, f64::max)
                    }
                    PoolKind::Average => {
                        cells.map(|(dy, dx)| input.get(y * wh + dy, x * ww + dx, ch)).sum::<f64>() / (wh * ww) as f64
                    }
                };
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

/// Max pooling routes the gradient to the first maximal cell of each window.
pub fn pool2d_backward(input: &Tensor3, wh: usize, ww: usize, kind: PoolKind, d_out: &Tensor3) -> Tensor3 {
    let (h, w, c) = input.shape();
    let mut d_in = Tensor3::zeros(h, w, c);
    for y in 0..h / wh {
        for x in 0..w / ww {
            for ch in 0..c {
                let g = d_out.get(y, x, ch);
                match kind {
                    PoolKind::Max => {
                        let mut best = (0, 0);
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let v = input.get(y * wh + dy, x * ww + dx, ch);
                                if v > best_v {
                                    best_v = v;
                                    best = (dy, dx);
                                }
                            }
                        }
                        d_in.add(y * wh + best.0, x * ww + best.1, ch, g);
                    }
                    PoolKind::Average => {
                        let share = g / (wh * ww) as f64;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                d_in.add(y * wh + dy, x * ww + dx, ch, share);
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Per-channel mean over all spatial positions.
pub fn global_average_pool(features: &Tensor3) -> Vec<f64> {
    let (h, w, c) = features.shape();
    let mut out = vec![0.0; c];
    for cell in features.data.chunks(c.max(1)) {
        out.iter_mut().zip(cell).for_each(|(o, v)| *o += v);
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn global_average_pool_backward(shape: (usize, usize, usize), d_out: &[f64]) -> Tensor3 {
    let (h, w, c) = shape;
    let n = (h * w) as f64;
    Tensor3::from_fn(h, w, c, |_, _, ch| d_out[ch] / n)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Tensor3,
    pub label: usize,
}

/// conv -> activation -> pool -> global average pool -> dense -> softmax.
#[derive(Debug, Clone)]
pub struct ConvNetClassifier {
    pub input: (usize, usize, usize),
    pub kernel: (usize, usize),
    pub filters: usize,
    pub activation: Activation,
    pub pool: (usize, usize),
    pub pool_kind: PoolKind,
    pub num_classes: usize,
    conv_w: Slot,
    conv_b: Slot,
    fc_w: Slot,
    fc_b: Slot,
    len: usize,
}

impl ConvNetClassifier {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input: (usize, usize, usize),
        kernel: (usize, usize),
        filters: usize,
        activation: Activation,
        pool: (usize, usize),
        pool_kind: PoolKind,
        num_classes: usize,
    ) -> Result<Self> {
        let (h, w, c) = input;
        if kernel.0 == 0 || kernel.1 == 0 || kernel.0 > h || kernel.1 > w {
            return Err(Error::invalid("kernel does not fit input"));
        }
        let (oh, ow) = (h - kernel.0 + 1, w - kernel.1 + 1);
        if pool.0 == 0 || pool.1 == 0 || oh % pool.0 != 0 || ow % pool.1 != 0 {
            return Err(Error::invalid(format!("pool window {:?} does not tile conv output {oh}x{ow}", pool)));
        }
        if filters == 0 || num_classes < 2 {
            return Err(Error::invalid("need at least one filter and two classes"));
        }
        let mut layout = ParamLayout::new();
        let conv_w = layout.slot(kernel.0 * kernel.1 * c, filters);
        let conv_b = layout.slot(1, filters);
        let fc_w = layout.slot(filters, num_classes);
        let fc_b = layout.slot(1, num_classes);
        Ok(ConvNetClassifier {
            input,
            kernel,
            filters,
            activation,
            pool,
            pool_kind,
            num_classes,
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            len: layout.len(),
        })
    }

    fn conv_kernel(&self, params: &[f64]) -> Kernel {
        Kernel {
            height: self.kernel.0,
            width: self.kernel.1,
            in_channels: self.input.2,
            out_channels: self.filters,
            weights: self.conv_w.slice(params).to_vec(),
            bias: self.conv_b.slice(params).to_vec(),
        }
    }

    fn sample_loss_grad(&self, params: &[f64], sample: &ImageSample, grad: Option<&mut [f64]>) -> (f64, Vec<f64>) {
        let kernel = self.conv_kernel(params);
        let pre = conv2d_forward(&sample.image, &kernel).expect("input shape checked");
        let act = pre.map(|v| self.activation.apply(v));
        let pooled = pool2d_forward(&act, self.pool.0, self.pool.1, self.pool_kind).expect("pool shape checked");
        let feat = global_average_pool(&pooled);
        let fc_w = self.fc_w.read(params);
        let fc_b = self.fc_b.slice(params);
        let logits: Vec<f64> =
            (0..self.num_classes).map(|j| fc_b[j] + feat.iter().enumerate().map(|(k, f)| f * fc_w.get(k, j)).sum::<f64>()).collect();
        let probs = softmax(&logits);
        let loss = cross_entropy(&Matrix::from_vec(1, self.num_classes, probs.clone()), &[sample.label]).expect("valid softmax");

        if let Some(grad) = grad {
            let mut d_logits = probs.clone();
            d_logits[sample.label] -= 1.0;
            let d_feat: Vec<f64> = (0..self.filters).map(|k| (0..self.num_classes).map(|j| d_logits[j] * fc_w.get(k, j)).sum()).collect();
            let d_fc_w = Matrix::from_fn(self.filters, self.num_classes, |k, j| feat[k] * d_logits[j]);
            self.fc_w.accumulate(grad, &d_fc_w);
            self.fc_b.accumulate_row(grad, &d_logits);
            let d_pooled = global_average_pool_backward(pooled.shape(), &d_feat);
            let d_act = pool2d_backward(&act, self.pool.0, self.pool.1, self.pool_kind, &d_pooled);
            let d_pre = Tensor3 {
                data: d_act.data.iter().zip(&pre.data).zip(&act.data).map(|((g, x), y)| g * self.activation.derivative(*x, *y)).collect(),
                ..d_act
            };
            let (_, d_k, d_b) = conv2d_backward(&sample.image, &kernel, &d_pre);
            self.conv_w.accumulate_row(grad, &d_k);
            self.conv_b.accumulate_row(grad, &d_b);
        }
        (loss, probs)
    }

    pub fn predict(&self, params: &[f64], image: &Tensor3) -> Vec<f64> {
        self.sample_loss_grad(params, &ImageSample { image: image.clone(), label: 0 }, None).1
    }
}

impl LossModel for ConvNetClassifier {
    type Sample = ImageSample;

    fn dimension(&self) -> usize {
        self.len
    }

    fn loss_and_gradient(&self, params: &[f64], batch: &[ImageSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.len];
        if batch.is_empty() {
            return (0.0, grad);
        }
        let mut loss = 0.0;
        for s in batch {
            loss += self.sample_loss_grad(params, s, Some(&mut grad)).0;
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut p = vec![0.0; self.len];
        let fan_in = self.kernel.0 * self.kernel.1 * self.input.2;
        self.conv_w.glorot(&mut p, fan_in, self.filters, &mut rng);
        self.fc_w.glorot(&mut p, self.filters, self.num_classes, &mut rng);
        p
    }

    fn accuracy(&self, params: &[f64], batch: &[ImageSample]) -> Option<f64> {
        if batch.is_empty() {
            return None;
        }
        let hits = batch.iter().filter(|s| super::layers::argmax(&self.predict(params, &s.image)) == s.label).count();
        Some(hits as f64 / batch.len() as f64)
    }
}
