//! The few-shot head: an MLP with at most one ReLU hidden layer, trained
//! full-batch with Adam on frozen features.
//!
//! The objective is mean softmax cross-entropy over the support rows plus
//! `lambda * (|W1|_F^2 + |W2|_F^2)`. Biases are not penalized. All math is
//! `f64`; weights are Glorot-uniform from the config seed, biases start at 0.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("non-finite input at position {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {ways} classes")]
    LabelOutOfRange { label: usize, ways: usize },
    #[error("class {0} has no support rows")]
    DegenerateInput(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("adam step index must start at 1")]
    InvalidStep,
    #[error("head file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Zero drops the hidden layer.
    pub hidden_size: usize,
    pub l2_lambda: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, hidden_size: usize, learning_rate: f64, l2_lambda: f64) -> Self {
        Self {
            learning_rate,
            epochs,
            hidden_size,
            l2_lambda,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(ClassifierError::InvalidConfig("l2_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Head weights. `w1`/`b1` are absent when the hidden layer is dropped, in
/// which case `w2` maps inputs straight to logits. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub w1: Option<Array2<f64>>,
    pub b1: Option<Array1<f64>>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadModel {
    pub fn zeros(input_dim: usize, hidden_size: usize, ways: usize) -> Self {
        if hidden_size == 0 {
            Self {
                w1: None,
                b1: None,
                w2: Array2::zeros((ways, input_dim)),
                b2: Array1::zeros(ways),
            }
        } else {
            Self {
                w1: Some(Array2::zeros((hidden_size, input_dim))),
                b1: Some(Array1::zeros(hidden_size)),
                w2: Array2::zeros((ways, hidden_size)),
                b2: Array1::zeros(ways),
            }
        }
    }

    /// Glorot-uniform weights (W1 first, then W2, row-major), zero biases.
    pub fn glorot(input_dim: usize, hidden_size: usize, ways: usize, seed: u64) -> Self {
        let mut model = Self::zeros(input_dim, hidden_size, ways);
        let mut rng = SplitMix64::new(seed);
        let mut fill = |w: &mut Array2<f64>| {
            let (fan_out, fan_in) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| (2.0 * rng.next_f64() - 1.0) * limit);
        };
        if let Some(w1) = model.w1.as_mut() {
            fill(w1);
        }
        fill(&mut model.w2);
        model
    }

    pub fn input_dim(&self) -> usize {
        self.w1.as_ref().unwrap_or(&self.w2).ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.as_ref().map_or(0, |w| w.nrows())
    }

    pub fn ways(&self) -> usize {
        self.w2.nrows()
    }

    pub fn has_hidden_layer(&self) -> bool {
        self.w1.is_some()
    }

    /// `|W1|_F^2 + |W2|_F^2`.
    pub fn weight_sq_norm(&self) -> f64 {
        let w1 = self.w1.as_ref().map_or(0.0, |w| w.iter().map(|v| v * v).sum());
        w1 + self.w2.iter().map(|v| v * v).sum::<f64>()
    }

    /// Parameter tensors as flat slices, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w1), Some(b1)) = (&self.w1, &self.b1) {
            out.push(w1.as_slice().expect("standard layout"));
            out.push(b1.as_slice().expect("standard layout"));
        }
        out.push(self.w2.as_slice().expect("standard layout"));
        out.push(self.b2.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w1), Some(b1)) = (&mut self.w1, &mut self.b1) {
            out.push(w1.as_slice_mut().expect("standard layout"));
            out.push(b1.as_slice_mut().expect("standard layout"));
        }
        out.push(self.w2.as_slice_mut().expect("standard layout"));
        out.push(self.b2.as_slice_mut().expect("standard layout"));
        out
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.w1.as_ref().map(|w| w.dim()) == other.w1.as_ref().map(|w| w.dim())
            && self.w2.dim() == other.w2.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Pre-softmax outputs for each row of `x`.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "input has {} columns, head expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.forward(x).logits)
    }

    fn forward(&self, x: ArrayView2<f64>) -> Forward {
        match (&self.w1, &self.b1) {
            (Some(w1), Some(b1)) => {
                let pre = standard(x.dot(&w1.t()) + b1);
                let hidden = pre.mapv(|v| v.max(0.0));
                let logits = standard(hidden.dot(&self.w2.t()) + &self.b2);
                Forward {
                    pre: Some(pre),
                    hidden: Some(hidden),
                    logits,
                }
            }
            _ => Forward {
                pre: None,
                hidden: None,
                logits: standard(x.dot(&self.w2.t()) + &self.b2),
            },
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `"FSHM" | version u32 | input_dim u32 | hidden u32 | ways u32 |`
    /// `W1 | b1 | W2 | b2` as f64 LE, row-major; W1/b1 omitted when hidden = 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        for d in [self.input_dim(), self.hidden_size(), self.ways()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| ClassifierError::Format(m);
        if bytes.len() < 20 || &bytes[..4] != HEAD_MAGIC {
            return Err(fmt("bad magic or short header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != HEAD_VERSION {
            return Err(fmt(format!("unsupported version {}", word(4))));
        }
        let (input_dim, hidden, ways) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let mut model = Self::zeros(input_dim, hidden, ways);
        let count: usize = model.tensors().iter().map(|t| t.len()).sum();
        let payload = &bytes[20..];
        if payload.len() != count * 8 {
            return Err(fmt(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                count * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(model)
    }
}

const HEAD_MAGIC: &[u8; 4] = b"FSHM";
const HEAD_VERSION: u32 = 1;

struct Forward {
    pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
    logits: Array2<f64>,
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFiniteInput(i));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    logits
}

fn check_batch(model: &HeadModel, x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.ncols() != model.input_dim() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "input has {} columns, head expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(ClassifierError::ShapeMismatch("empty batch".into()));
    }
    let ways = model.ways();
    if let Some(&label) = labels.iter().find(|&&l| l >= ways) {
        return Err(ClassifierError::LabelOutOfRange { label, ways });
    }
    Ok(())
}

// `dot` may hand back column-major results; everything else here walks rows.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Regularized loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(
    model: &HeadModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    l2_lambda: f64,
) -> Result<(f64, HeadModel)> {
    check_batch(model, x, labels)?;
    let rows = x.nrows() as f64;
    let fwd = model.forward(x);

    // dL/dlogits = (softmax - onehot) / rows
    let mut delta = fwd.logits;
    let mut ce = 0.0;
    for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
        let r = row.as_slice_mut().expect("contiguous row");
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        ce += log_sum - r[label];
        for v in r.iter_mut() {
            *v = (*v - log_sum).exp() / rows;
        }
        r[label] -= 1.0 / rows;
    }
    let loss = ce / rows + l2_lambda * model.weight_sq_norm();

    let db2 = delta.sum_axis(Axis(0));
    let grads = match (&model.w1, fwd.hidden, fwd.pre) {
        (Some(w1), Some(hidden), Some(pre)) => {
            let dw2 = standard(delta.t().dot(&hidden) + &(2.0 * l2_lambda * &model.w2));
            let mut dpre = delta.dot(&model.w2);
            Zip::from(&mut dpre).and(&pre).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            let db1 = dpre.sum_axis(Axis(0));
            let dw1 = standard(dpre.t().dot(&x) + &(2.0 * l2_lambda * w1));
            HeadModel {
                w1: Some(dw1),
                b1: Some(db1),
                w2: dw2,
                b2: db2,
            }
        }
        _ => HeadModel {
            w1: None,
            b1: None,
            w2: standard(delta.t().dot(&x) + &(2.0 * l2_lambda * &model.w2)),
            b2: db2,
        },
    };
    Ok((loss, grads))
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &HeadModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    model: &mut HeadModel,
    state: &mut AdamState,
    grads: &HeadModel,
    config: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(ClassifierError::InvalidStep);
    }
    if !model.same_shape(grads) || state.first.len() != grads.tensors().len() {
        return Err(ClassifierError::ShapeMismatch("gradient shapes differ from model".into()));
    }
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    for (((param, grad), m), v) in model
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Objective value at the start of each epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

pub fn train_head(
    x: ArrayView2<f64>,
    labels: &[usize],
    ways: usize,
    config: &TrainConfig,
) -> Result<(HeadModel, TrainTrace)> {
    config.validate()?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFiniteInput(i));
    }
    let mut model = HeadModel::glorot(x.ncols(), config.hidden_size, ways, config.seed);
    check_batch(&model, x, labels)?;
    let mut present = vec![false; ways];
    for &l in labels {
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(ClassifierError::DegenerateInput(missing));
    }
    let mut state = AdamState::new(&model);
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(config.epochs),
    };
    for epoch in 1..=config.epochs {
        let (loss, grads) = loss_and_grad(&model, x, labels, config.l2_lambda)?;
        trace.losses.push(loss);
        adam_step(&mut model, &mut state, &grads, config, epoch as u64)?;
    }
    Ok((model, trace))
}

pub fn predict_proba(model: &HeadModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(model.logits(x)?))
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &HeadModel, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let probs = predict_proba(model, x)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous row")))
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}
