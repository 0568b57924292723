//! Recurrent cells (plain sigmoid RNN, LSTM, GRU) and a sequence layer that
//! unrolls any of them, forward or reversed, with backpropagation through time.
//!
//! Vectors are rows: a cell computes `x W_x + h W_h + b`. Gate blocks are laid
//! out side by side in the columns of `W_x`, `W_h` and `b`:
//!
//! | cell | blocks            |
//! |------|-------------------|
//! | RNN  | `h`               |
//! | LSTM | `f, i, c', o`     |
//! | GRU  | `r, z, h'`        |
//!
//! For the GRU the `h'` block of `W_h` multiplies `r * h_prev`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, softmax};
use super::linalg::{Matrix, ParamLayout, Slot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub fn blocks(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentWeights {
    /// `input x blocks*units`
    pub w_x: Matrix,
    /// `units x blocks*units`
    pub w_h: Matrix,
    pub b: Vec<f64>,
}

impl RecurrentWeights {
    pub fn zeros(kind: CellKind, input: usize, units: usize) -> Self {
        let width = kind.blocks() * units;
        RecurrentWeights { w_x: Matrix::zeros(input, width), w_h: Matrix::zeros(units, width), b: vec![0.0; width] }
    }

    pub fn units(&self) -> usize {
        self.w_h.rows()
    }

    fn check(&self, kind: CellKind, h: &[f64], x: &[f64]) -> Result<()> {
        let u = self.units();
        let width = kind.blocks() * u;
        if self.w_h.cols() != width || self.w_x.cols() != width || self.b.len() != width {
            return Err(Error::invalid(format!("{kind:?} weights must have {width} columns")));
        }
        if h.len() != u || x.len() != self.w_x.rows() {
            return Err(Error::invalid(format!(
                "state {} / input {} do not match weights {}x{}",
                h.len(),
                x.len(),
                u,
                self.w_x.rows()
            )));
        }
        Ok(())
    }
}

/// `v W[:, start..start+width]`
fn row_times(v: &[f64], w: &Matrix, start: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (k, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &w.row(k)[start..start + width];
        out.iter_mut().zip(row).for_each(|(o, b)| *o += a * b);
    }
    out
}

fn preactivation(w: &RecurrentWeights, h: &[f64], x: &[f64], start: usize, width: usize) -> Vec<f64> {
    let xs = row_times(x, &w.w_x, start, width);
    let hs = row_times(h, &w.w_h, start, width);
    (0..width).map(|j| xs[j] + hs[j] + w.b[start + j]).collect()
}

#[derive(Debug, Clone)]
struct LstmStep {
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

fn lstm_step(w: &RecurrentWeights, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> LstmStep {
    let u = w.units();
    let a = preactivation(w, h_prev, x, 0, 4 * u);
    let f: Vec<f64> = a[..u].iter().map(|&v| sigmoid(v)).collect();
    let i: Vec<f64> = a[u..2 * u].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = a[2 * u..3 * u].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = a[3 * u..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<f64> = (0..u).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let h: Vec<f64> = (0..u).map(|j| o[j] * c[j].tanh()).collect();
    LstmStep { f, i, g, o, c, h }
}

#[derive(Debug, Clone)]
struct GruStep {
    r: Vec<f64>,
    z: Vec<f64>,
    candidate: Vec<f64>,
    h: Vec<f64>,
}

fn gru_step(w: &RecurrentWeights, h_prev: &[f64], x: &[f64]) -> GruStep {
    let u = w.units();
    let a = preactivation(w, h_prev, x, 0, 2 * u);
    let r: Vec<f64> = a[..u].iter().map(|&v| sigmoid(v)).collect();
    let z: Vec<f64> = a[u..].iter().map(|&v| sigmoid(v)).collect();
    let gated: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let xs = row_times(x, &w.w_x, 2 * u, u);
    let hs = row_times(&gated, &w.w_h, 2 * u, u);
    let candidate: Vec<f64> = (0..u).map(|j| (xs[j] + hs[j] + w.b[2 * u + j]).tanh()).collect();
    let h = (0..u).map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * candidate[j]).collect();
    GruStep { r, z, candidate, h }
}

/// `h_t = sigmoid(h_{t-1} W_h + x_t W_x + b)`
pub fn rnn_cell(h_prev: &[f64], x: &[f64], w: &RecurrentWeights) -> Result<Vec<f64>> {
    w.check(CellKind::Rnn, h_prev, x)?;
    Ok(preactivation(w, h_prev, x, 0, w.units()).into_iter().map(sigmoid).collect())
}

/// Returns `(h_t, c_t)`.
pub fn lstm_cell(h_prev: &[f64], c_prev: &[f64], x: &[f64], w: &RecurrentWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    w.check(CellKind::Lstm, h_prev, x)?;
    if c_prev.len() != h_prev.len() {
        return Err(Error::invalid("cell state and hidden state widths differ"));
    }
    let s = lstm_step(w, h_prev, c_prev, x);
    Ok((s.h, s.c))
}

pub fn gru_cell(h_prev: &[f64], x: &[f64], w: &RecurrentWeights) -> Result<Vec<f64>> {
    w.check(CellKind::Gru, h_prev, x)?;
    Ok(gru_step(w, h_prev, x).h)
}

/// Class distribution `softmax(h W_yh + z W_yz + b_y)` from forward state `h`
/// and backward state `z`.
pub fn bidirectional_combine(h: &[f64], z: &[f64], w_yh: &Matrix, w_yz: &Matrix, b_y: &[f64]) -> Result<Vec<f64>> {
    if h.len() != w_yh.rows() || z.len() != w_yz.rows() || w_yh.cols() != w_yz.cols() || b_y.len() != w_yh.cols() {
        return Err(Error::invalid("bidirectional head shapes do not agree"));
    }
    let a = row_times(h, w_yh, 0, w_yh.cols());
    let b = row_times(z, w_yz, 0, w_yz.cols());
    let logits: Vec<f64> = (0..b_y.len()).map(|j| a[j] + b[j] + b_y[j]).collect();
    Ok(softmax(&logits))
}

/// A cell unrolled over a `[time, input]` sequence, emitting `[time, units]`.
#[derive(Debug, Clone, Copy)]
pub struct Recurrent {
    pub kind: CellKind,
    pub w_x: Slot,
    pub w_h: Slot,
    pub b: Slot,
    /// Process the sequence last-to-first; outputs stay aligned with inputs.
    pub reverse: bool,
}

#[derive(Debug, Clone)]
enum StepCache {
    Rnn { h: Vec<f64> },
    Lstm(LstmStep),
    Gru(GruStep),
}

#[derive(Debug, Clone)]
pub struct RecurrentCache {
    /// Inputs in processing order.
    inputs: Vec<Vec<f64>>,
    steps: Vec<StepCache>,
}

impl Recurrent {
    pub fn new(layout: &mut ParamLayout, kind: CellKind, input: usize, units: usize, reverse: bool) -> Self {
        let width = kind.blocks() * units;
        Recurrent { kind, w_x: layout.slot(input, width), w_h: layout.slot(units, width), b: layout.slot(1, width), reverse }
    }

    pub fn units(&self) -> usize {
        self.w_h.rows
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let u = self.units();
        self.w_x.glorot(params, self.w_x.rows, u, rng);
        self.w_h.glorot(params, u, u, rng);
        self.b.fill(params, 0.0);
        if self.kind == CellKind::Lstm {
            // Forget-gate bias of one.
            params[self.b.offset..self.b.offset + u].iter_mut().for_each(|p| *p = 1.0);
        }
    }

    pub fn weights(&self, params: &[f64]) -> RecurrentWeights {
        RecurrentWeights { w_x: self.w_x.read(params), w_h: self.w_h.read(params), b: self.b.slice(params).to_vec() }
    }

    fn order(&self, len: usize) -> Vec<usize> {
        if self.reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        }
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> (Matrix, RecurrentCache) {
        let w = self.weights(params);
        let u = self.units();
        let mut h = vec![0.0; u];
        let mut c = vec![0.0; u];
        let mut out = Matrix::zeros(x.rows(), u);
        let mut cache = RecurrentCache { inputs: Vec::with_capacity(x.rows()), steps: Vec::with_capacity(x.rows()) };
        for t in self.order(x.rows()) {
            let xt = x.row(t);
            let step = match self.kind {
                CellKind::Rnn => {
                    let hn: Vec<f64> = preactivation(&w, &h, xt, 0, u).into_iter().map(sigmoid).collect();
                    StepCache::Rnn { h: hn }
                }
                CellKind::Lstm => {
                    let s = lstm_step(&w, &h, &c, xt);
                    c = s.c.clone();
                    StepCache::Lstm(s)
                }
                CellKind::Gru => StepCache::Gru(gru_step(&w, &h, xt)),
            };
            h = match &step {
                StepCache::Rnn { h } => h.clone(),
                StepCache::Lstm(s) => s.h.clone(),
                StepCache::Gru(s) => s.h.clone(),
            };
            out.row_mut(t).copy_from_slice(&h);
            cache.inputs.push(xt.to_vec());
            cache.steps.push(step);
        }
        (out, cache)
    }

    pub fn backward(&self, params: &[f64], cache: &RecurrentCache, dh_seq: &Matrix, grad: &mut [f64]) -> Matrix {
        let w = self.weights(params);
        let u = self.units();
        let width = self.kind.blocks() * u;
        let n = cache.steps.len();
        let order = self.order(n);
        let mut dw_x = Matrix::zeros(w.w_x.rows(), width);
        let mut dw_h = Matrix::zeros(u, width);
        let mut db = vec![0.0; width];
        let mut dx = Matrix::zeros(n, w.w_x.rows());
        let mut dh_next = vec![0.0; u];
        let mut dc_next = vec![0.0; u];
        let zeros = vec![0.0; u];

        for s in (0..n).rev() {
            let t = order[s];
            let h_prev: &[f64] = if s == 0 { &zeros } else { step_h(&cache.steps[s - 1]) };
            let dh: Vec<f64> = (0..u).map(|j| dh_seq.get(t, j) + dh_next[j]).collect();
            let xt = &cache.inputs[s];
            // Gradient w.r.t. the gate preactivations, plus the extra h_prev term for GRU.
            let mut da = vec![0.0; width];
            let mut dh_prev = vec![0.0; u];
            match &cache.steps[s] {
                StepCache::Rnn { h } => {
                    for j in 0..u {
                        da[j] = dh[j] * h[j] * (1.0 - h[j]);
                    }
                }
                StepCache::Lstm(st) => {
                    let c_prev: &[f64] = if s == 0 {
                        &zeros
                    } else {
                        match &cache.steps[s - 1] {
                            StepCache::Lstm(p) => &p.c,
                            _ => unreachable!(),
                        }
                    };
                    for j in 0..u {
                        let tc = st.c[j].tanh();
                        let d_o = dh[j] * tc;
                        let dc = dc_next[j] + dh[j] * st.o[j] * (1.0 - tc * tc);
                        da[j] = dc * c_prev[j] * st.f[j] * (1.0 - st.f[j]);
                        da[u + j] = dc * st.g[j] * st.i[j] * (1.0 - st.i[j]);
                        da[2 * u + j] = dc * st.i[j] * (1.0 - st.g[j] * st.g[j]);
                        da[3 * u + j] = d_o * st.o[j] * (1.0 - st.o[j]);
                        dc_next[j] = dc * st.f[j];
                    }
                }
                StepCache::Gru(st) => {
                    for j in 0..u {
                        let dz = dh[j] * (st.candidate[j] - h_prev[j]);
                        da[u + j] = dz * st.z[j] * (1.0 - st.z[j]);
                        da[2 * u + j] = dh[j] * st.z[j] * (1.0 - st.candidate[j] * st.candidate[j]);
                        dh_prev[j] = dh[j] * (1.0 - st.z[j]);
                    }
                    // Candidate path through r * h_prev.
                    let d_gated: Vec<f64> = (0..u)
                        .map(|k| (0..u).map(|j| da[2 * u + j] * w.w_h.get(k, 2 * u + j)).sum())
                        .collect();
                    for k in 0..u {
                        let gated = st.r[k] * h_prev[k];
                        for j in 0..u {
                            dw_h.set(k, 2 * u + j, dw_h.get(k, 2 * u + j) + gated * da[2 * u + j]);
                        }
                        dh_prev[k] += d_gated[k] * st.r[k];
                        da[k] = d_gated[k] * h_prev[k] * st.r[k] * (1.0 - st.r[k]);
                    }
                }
            }

            // Columns of W_h driven directly by h_prev (all but the GRU candidate block).
            let direct = if self.kind == CellKind::Gru { 2 * u } else { width };
            for (k, &xv) in xt.iter().enumerate() {
                for j in 0..width {
                    dw_x.set(k, j, dw_x.get(k, j) + xv * da[j]);
                }
            }
            for (k, &hv) in h_prev.iter().enumerate() {
                for j in 0..direct {
                    dw_h.set(k, j, dw_h.get(k, j) + hv * da[j]);
                }
            }
            db.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            for k in 0..w.w_x.rows() {
                dx.set(t, k, (0..width).map(|j| da[j] * w.w_x.get(k, j)).sum());
            }
            for (k, dhp) in dh_prev.iter_mut().enumerate() {
                *dhp += (0..direct).map(|j| da[j] * w.w_h.get(k, j)).sum::<f64>();
            }
            dh_next = dh_prev;
        }
        self.w_x.accumulate(grad, &dw_x);
        self.w_h.accumulate(grad, &dw_h);
        self.b.accumulate_row(grad, &db);
        dx
    }
}

fn step_h(s: &StepCache) -> &[f64] {
    match s {
        StepCache::Rnn { h } => h,
        StepCache::Lstm(st) => &st.h,
        StepCache::Gru(st) => &st.h,
    }
}
