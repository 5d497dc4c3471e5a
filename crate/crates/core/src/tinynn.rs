//! A small fully-connected network with hand-written backpropagation.
//!
//! Layers are affine maps `x W + b` with ReLU between them and no activation
//! after the last one. Parameters live in a [`ParamStore`] laid out as
//! `l0.weight [d0, d1]`, `l0.bias [d1]`, `l1.weight [d1, d2]`, ... so the
//! store can be smoothed, diffed and snapshotted like any other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{InitRule, ParamStore, UnitSpec, UnitKind};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics if rows have differing lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// `x [B, k] * w [k, n] + bias [n]`, `w` and `bias` given as flat row-major
/// slices.
fn affine(x: &Matrix, w: &[f64], bias: &[f64], n: usize) -> Matrix {
    let k = x.cols;
    let mut out = Matrix::zeros(x.rows, n);
    for r in 0..x.rows {
        let xr = x.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(bias);
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * n..(i + 1) * n];
            for (oj, &wij) in o.iter_mut().zip(wrow) {
                *oj += xi * wij;
            }
        }
        debug_assert_eq!(xr.len(), k);
    }
    out
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Multi-layer perceptron over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: ParamStore,
    layer_dims: Vec<usize>,
}

/// Values saved by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Matrix>,
}

impl MlpModel {
    /// Weights uniform on `±1/sqrt(d_in)`, biases zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Construction(format!(
                "an MLP needs at least 2 layer dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Construction(format!(
                "layer dims must be positive, got {layer_dims:?}"
            )));
        }
        let specs = Self::unit_specs(layer_dims);
        let params = ParamStore::new(&specs, InitRule::FanIn, seed)?;
        Ok(Self {
            params,
            layer_dims: layer_dims.to_vec(),
        })
    }

    /// Model with the given parameters; the store must match `layer_dims`.
    pub fn from_params(layer_dims: &[usize], params: ParamStore) -> Result<Self> {
        let expected = ParamStore::new(&Self::unit_specs(layer_dims), InitRule::Zeros, 0)?;
        expected.check_congruent(&params)?;
        Ok(Self {
            params,
            layer_dims: layer_dims.to_vec(),
        })
    }

    fn unit_specs(layer_dims: &[usize]) -> Vec<UnitSpec> {
        layer_dims
            .windows(2)
            .enumerate()
            .flat_map(|(k, d)| {
                [
                    UnitSpec::new(format!("l{k}.weight"), &[d[0], d[1]], UnitKind::Weight),
                    UnitSpec::new(format!("l{k}.bias"), &[d[1]], UnitKind::Bias),
                ]
            })
            .collect()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    fn weight(&self, layer: usize) -> &[f64] {
        &self.params.units()[2 * layer].data
    }

    fn bias(&self, layer: usize) -> &[f64] {
        &self.params.units()[2 * layer + 1].data
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but model expects {}",
                inputs.cols,
                self.input_dim()
            )));
        }
        let layers = self.num_layers();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(layers),
            hidden_pre: Vec::with_capacity(layers - 1),
        };
        let mut x = inputs.clone();
        for k in 0..layers {
            let z = affine(&x, self.weight(k), self.bias(k), self.layer_dims[k + 1]);
            cache.inputs.push(x);
            if k + 1 == layers {
                return Ok((z, cache));
            }
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            cache.hidden_pre.push(z);
            x = a;
        }
        unreachable!("loop returns on the last layer")
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the outputs).
    /// Returns parameter gradients and the gradient w.r.t. the inputs.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<(ParamStore, Matrix)> {
        let layers = self.num_layers();
        let batch = cache.inputs[0].rows;
        if d_out.rows != batch || d_out.cols != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, expected {batch}x{}",
                d_out.rows,
                d_out.cols,
                self.output_dim()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut delta = d_out.clone();
        for k in (0..layers).rev() {
            let x = &cache.inputs[k];
            let (d_in, d_o) = (self.layer_dims[k], self.layer_dims[k + 1]);
            {
                let units = grads.units_mut();
                let (w_part, b_part) = units.split_at_mut(2 * k + 1);
                let gw = &mut w_part[2 * k].data;
                let gb = &mut b_part[0].data;
                for r in 0..batch {
                    let xr = x.row(r);
                    let dr = delta.row(r);
                    for (gbj, &dj) in gb.iter_mut().zip(dr) {
                        *gbj += dj;
                    }
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let g_row = &mut gw[i * d_o..(i + 1) * d_o];
                        for (g, &dj) in g_row.iter_mut().zip(dr) {
                            *g += xi * dj;
                        }
                    }
                }
            }
            // delta_prev = delta W^T
            let w = self.weight(k);
            let mut prev = Matrix::zeros(batch, d_in);
            for r in 0..batch {
                let dr = delta.row(r);
                let pr = prev.row_mut(r);
                for (i, p) in pr.iter_mut().enumerate() {
                    let w_row = &w[i * d_o..(i + 1) * d_o];
                    *p = w_row.iter().zip(dr).map(|(a, b)| a * b).sum();
                }
            }
            if k > 0 {
                let pre = &cache.hidden_pre[k - 1];
                for (p, &z) in prev.data.iter_mut().zip(&pre.data) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }
}

/// Inputs with optional class labels and per-sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn unlabeled(inputs: Matrix) -> Self {
        Self {
            inputs,
            labels: None,
            weights: None,
        }
    }

    pub fn labeled(inputs: Matrix, labels: Vec<usize>) -> Self {
        Self {
            inputs,
            labels: Some(labels),
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    NormalizedMse,
}

/// Loss plus what it is measured against.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Against `batch.labels`.
    CrossEntropy,
    /// Against target vectors, one row per sample.
    NormalizedMse(&'a Matrix),
}

impl Loss<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            Loss::CrossEntropy => LossKind::CrossEntropy,
            Loss::NormalizedMse(_) => LossKind::NormalizedMse,
        }
    }
}

fn sample_weights(weights: Option<&[f64]>, batch: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; batch]),
        Some(w) if w.len() == batch => Ok(w.to_vec()),
        Some(w) => Err(Error::Shape(format!(
            "{} sample weights for a batch of {batch}",
            w.len()
        ))),
    }
}

/// Weighted cross-entropy summed over samples and divided by the batch size.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    let batch = logits.rows;
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            logits.cols
        )));
    }
    let w = sample_weights(weights, batch)?;
    let probs = softmax(logits);
    let mut grad = Matrix::zeros(batch, logits.cols);
    let mut loss = 0.0;
    let scale = 1.0 / batch.max(1) as f64;
    for r in 0..batch {
        if w[r] == 0.0 {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += w[r] * (lse - row[labels[r]]);
        let g = grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            let target = if j == labels[r] { 1.0 } else { 0.0 };
            *gj = w[r] * scale * (probs.get(r, j) - target);
        }
    }
    Ok((loss * scale, grad))
}

const NORM_EPS: f64 = 1e-12;

/// Squared distance between the L2-normalized rows of `pred` and `target`,
/// weighted, summed and divided by the batch size. Rows where either vector
/// has norm below 1e-12 contribute nothing.
pub fn normalized_mse(
    pred: &Matrix,
    target: &Matrix,
    weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    let batch = pred.rows;
    let w = sample_weights(weights, batch)?;
    let scale = 1.0 / batch.max(1) as f64;
    let mut grad = Matrix::zeros(batch, pred.cols);
    let mut loss = 0.0;
    for (r, &wr) in w.iter().enumerate() {
        let p = pred.row(r);
        let z = target.row(r);
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wr == 0.0 || np < NORM_EPS || nz < NORM_EPS {
            continue;
        }
        let diff: Vec<f64> = p.iter().zip(z).map(|(a, b)| a / np - b / nz).collect();
        loss += wr * diff.iter().map(|d| d * d).sum::<f64>();
        // d/dp ||p/|p| - zh||^2 = (2/|p|) (I - ph ph^T) diff
        let proj: f64 = p.iter().zip(&diff).map(|(a, d)| a / np * d).sum();
        let g = grad.row_mut(r);
        for ((gj, &pj), &dj) in g.iter_mut().zip(p).zip(&diff) {
            *gj = w[r] * scale * 2.0 / np * (dj - pj / np * proj);
        }
    }
    Ok((loss * scale, grad))
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_grad(model: &MlpModel, batch: &Batch, loss: Loss<'_>) -> Result<(f64, ParamStore)> {
    let (out, cache) = model.forward(&batch.inputs)?;
    let (value, d_out) = match loss {
        Loss::CrossEntropy => {
            let labels = batch
                .labels
                .as_deref()
                .ok_or_else(|| Error::Shape("cross-entropy needs labels".into()))?;
            cross_entropy(&out, labels, batch.weights.as_deref())?
        }
        Loss::NormalizedMse(target) => normalized_mse(&out, target, batch.weights.as_deref())?,
    };
    let (grads, _) = model.backward(&cache, &d_out)?;
    Ok((value, grads))
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: ParamStore,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(params: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v`.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, opt: &mut OptState) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&opt.velocity)?;
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((p, g), v) in params
        .units_mut()
        .iter_mut()
        .zip(grads.units())
        .zip(opt.velocity.units_mut())
    {
        for ((theta, &grad), vel) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vel = mu * *vel + grad + wd * *theta;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// Linear warmup from `warmup_factor * base_lr` to `base_lr` over
/// `warmup_steps`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(
    base_lr: f64,
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    warmup_factor: f64,
) -> Result<f64> {
    if !(base_lr.is_finite() && base_lr >= 0.0) {
        return Err(Error::config("base_lr", format!("{base_lr} is not a valid rate")));
    }
    if !(0.0..=1.0).contains(&warmup_factor) {
        return Err(Error::config("warmup_factor", format!("{warmup_factor} is outside [0, 1]")));
    }
    if warmup_steps >= total_steps {
        return Err(Error::config(
            "warmup_steps",
            format!("{warmup_steps} warmup steps do not fit in {total_steps} total steps"),
        ));
    }
    if step > total_steps {
        return Err(Error::config("step", format!("{step} exceeds {total_steps} total steps")));
    }
    if step < warmup_steps {
        let frac = step as f64 / warmup_steps as f64;
        return Ok(base_lr * (warmup_factor + (1.0 - warmup_factor) * frac));
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
