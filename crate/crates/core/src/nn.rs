//! Dense feed-forward classifier with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the final layer is softmax, and the loss is mean
//! categorical cross-entropy. Weights are stored row-major as
//! `outputs x inputs`. All arithmetic is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer sizes of the activity classifier: 32 features, two hidden layers, 5 classes.
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [32, 64, 32, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.outputs, self.inputs)
    }
}

/// Model weights: the global `W_g` held by the server or a client's local `W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    /// Index of the round that produced these weights (0 = initial).
    pub version: u32,
}

impl ModelParams {
    /// Builds a model and checks every structural invariant.
    pub fn new(layers: Vec<Dense>, version: u32) -> Result<Self> {
        let model = Self { layers, version };
        model.validate()?;
        Ok(model)
    }

    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self {
            layers: layer_pairs(dims)
                .map(|(i, o, act)| Dense::glorot(i, o, act, rng))
                .collect(),
            version: 0,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: layer_pairs(dims)
                .map(|(i, o, act)| Dense::zeros(i, o, act))
                .collect(),
            version: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("model has no layers"));
        }
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::shape(format!("layer {k} has a zero dimension")));
            }
            if layer.weights.len() != layer.inputs * layer.outputs {
                return Err(Error::shape(format!(
                    "layer {k}: {} weights for a {}x{} matrix",
                    layer.weights.len(),
                    layer.outputs,
                    layer.inputs
                )));
            }
            if layer.bias.len() != layer.outputs {
                return Err(Error::shape(format!(
                    "layer {k}: bias length {} != {}",
                    layer.bias.len(),
                    layer.outputs
                )));
            }
            let expected = if k == last {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            if layer.activation != expected {
                return Err(Error::shape(format!(
                    "layer {k} must use {expected:?}, found {:?}",
                    layer.activation
                )));
            }
            if k > 0 && self.layers[k - 1].outputs != layer.inputs {
                return Err(Error::shape(format!(
                    "layer {} outputs {} but layer {k} expects {}",
                    k - 1,
                    self.layers[k - 1].outputs,
                    layer.inputs
                )));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("layer {k} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `(outputs, inputs)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Dense::shape).collect()
    }

    /// Adds `delta` elementwise. Zero entries leave the weight bit-identical.
    pub fn apply_delta(&self, delta: &ParamDelta) -> Result<ModelParams> {
        check_tensor_shapes(self, &delta.layers)?;
        let mut out = self.clone();
        for (layer, d) in out.layers.iter_mut().zip(&delta.layers) {
            add_nonzero(&mut layer.weights, &d.weights, 1.0);
            add_nonzero(&mut layer.bias, &d.bias, 1.0);
        }
        Ok(out)
    }

    /// `self - initial`, tagged with `round`.
    pub fn delta_from(&self, initial: &ModelParams, round: u32) -> Result<ParamDelta> {
        if self.shapes() != initial.shapes() {
            return Err(Error::shape("cannot diff models of different shapes"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&initial.layers)
            .map(|(a, b)| LayerTensors {
                weights: a.weights.iter().zip(&b.weights).map(|(x, y)| x - y).collect(),
                bias: a.bias.iter().zip(&b.bias).map(|(x, y)| x - y).collect(),
            })
            .collect();
        Ok(ParamDelta { round, layers })
    }

    /// Rounds every weight to the nearest `f32`, the precision used on the wire.
    pub fn quantized(&self) -> ModelParams {
        let mut out = self.clone();
        for layer in &mut out.layers {
            quantize(&mut layer.weights);
            quantize(&mut layer.bias);
        }
        out
    }
}

fn layer_pairs(dims: &[usize]) -> impl Iterator<Item = (usize, usize, Activation)> + '_ {
    let last = dims.len().saturating_sub(2);
    dims.windows(2).enumerate().map(move |(k, w)| {
        let act = if k == last {
            Activation::Softmax
        } else {
            Activation::Relu
        };
        (w[0], w[1], act)
    })
}

fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn add_nonzero(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        if *s != 0.0 {
            *d += scale * s;
        }
    }
}

/// Weight and bias arrays of one layer, shaped like a [`Dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerTensors {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

fn check_tensor_shapes(params: &ModelParams, layers: &[LayerTensors]) -> Result<()> {
    if params.layers.len() != layers.len() {
        return Err(Error::shape(format!(
            "{} tensor layers for a {}-layer model",
            layers.len(),
            params.layers.len()
        )));
    }
    for (k, (p, t)) in params.layers.iter().zip(layers).enumerate() {
        if p.weights.len() != t.weights.len() || p.bias.len() != t.bias.len() {
            return Err(Error::shape(format!("layer {k} tensor shape mismatch")));
        }
    }
    Ok(())
}

/// Gradient of the loss, shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerTensors>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params.layers.iter().map(LayerTensors::zeros_like).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for layer in &mut self.layers {
            layer.values_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Squared L2 norm over the layers where `include` is true.
    pub fn norm_sq_masked(&self, include: impl Fn(usize) -> bool) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .filter(|(k, _)| include(*k))
            .flat_map(|(_, l)| l.values())
            .map(|v| v * v)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq_masked(|_| true).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.values_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += factor * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(LayerTensors::values).all(|v| v.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All values concatenated layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }
}

/// A parameter change `ΔW`, shaped like the model it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub round: u32,
    pub layers: Vec<LayerTensors>,
}

impl ParamDelta {
    pub fn zeros_like(params: &ModelParams, round: u32) -> Self {
        Self {
            round,
            layers: params.layers.iter().map(LayerTensors::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(LayerTensors::values).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flat_map(LayerTensors::values).all(|v| *v == 0.0)
    }

    /// `(outputs, inputs)` per layer, derived from bias length.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| {
                let out = l.bias.len();
                (out, if out == 0 { 0 } else { l.weights.len() / out })
            })
            .collect()
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        check_tensor_shapes(params, &self.layers).is_ok()
    }

    pub fn quantized(&self) -> ParamDelta {
        let mut out = self.clone();
        for layer in &mut out.layers {
            quantize(&mut layer.weights);
            quantize(&mut layer.bias);
        }
        out
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix {
                rows: 0,
                cols: dim,
                data: Vec::new(),
            },
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Copies the given rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabeledBatch {
            features: Matrix {
                rows: indices.len(),
                cols: self.dim(),
                data,
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.dim());
        self.features.data.extend_from_slice(row);
        self.features.rows += 1;
        self.labels.push(label);
    }

    /// Checks label range and feature width against a model.
    pub fn check_for(&self, params: &ModelParams) -> Result<()> {
        if self.dim() != params.input_dim() {
            return Err(Error::shape(format!(
                "feature dimension {} != model input {}",
                self.dim(),
                params.input_dim()
            )));
        }
        let classes = params.num_classes();
        if let Some(bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(format!("label {bad} out of range 0..{classes}")));
        }
        Ok(())
    }
}

/// Reusable activation buffers for one example.
pub(crate) struct Scratch {
    /// Post-activation output of every layer.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(params: &ModelParams) -> Self {
        Self {
            acts: params.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            deltas: params.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            logits: vec![0.0; params.num_classes()],
        }
    }

    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Cross-entropy of the last forward pass against `label`.
    pub(crate) fn cross_entropy(&self, log_z: f64, label: usize) -> f64 {
        log_z - self.logits[label]
    }
}

/// Forward pass for one example. Returns the log-partition of the final logits.
pub(crate) fn forward_example(params: &ModelParams, x: &[f64], scratch: &mut Scratch) -> f64 {
    let mut log_z = 0.0;
    for (k, layer) in params.layers.iter().enumerate() {
        let (before, rest) = scratch.acts.split_at_mut(k);
        let input: &[f64] = if k == 0 { x } else { &before[k - 1] };
        let out = &mut rest[0];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            let mut z = layer.bias[o];
            for (w, a) in row.iter().zip(input) {
                z += w * a;
            }
            *slot = z;
        }
        match layer.activation {
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => {
                scratch.logits.copy_from_slice(out);
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in out.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                out.iter_mut().for_each(|v| *v /= sum);
                log_z = max + sum.ln();
            }
        }
    }
    log_z
}

/// Cross-entropy loss of one example plus accumulation of `scale * grad`
/// into `grad`. Layers below `first_trainable` receive no gradient and are
/// not back-propagated through.
pub(crate) fn backward_example(
    params: &ModelParams,
    x: &[f64],
    label: usize,
    scratch: &mut Scratch,
    grad: &mut Gradients,
    scale: f64,
    first_trainable: usize,
) -> f64 {
    let log_z = forward_example(params, x, scratch);
    let last = params.layers.len() - 1;
    let loss = scratch.cross_entropy(log_z, label);
    let probs = &scratch.acts[last];

    scratch.deltas[last].copy_from_slice(probs);
    scratch.deltas[last][label] -= 1.0;

    for k in (first_trainable..=last).rev() {
        let layer = &params.layers[k];
        let (lower, upper) = scratch.deltas.split_at_mut(k);
        let delta = &upper[0];
        let input: &[f64] = if k == 0 { x } else { &scratch.acts[k - 1] };
        let g = &mut grad.layers[k];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let sd = scale * d;
            g.bias[o] += sd;
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (gw, a) in row.iter_mut().zip(input) {
                *gw += sd * a;
            }
        }
        if k > first_trainable {
            let prev = &mut lower[k - 1];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU derivative, using the stored post-activation output.
            for (p, a) in prev.iter_mut().zip(&scratch.acts[k - 1]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
    loss
}

/// Class probabilities for every row of `features`.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    if features.cols != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} features, model expects {}",
            features.cols,
            params.input_dim()
        )));
    }
    let classes = params.num_classes();
    let mut scratch = Scratch::new(params);
    let mut data = Vec::with_capacity(features.rows * classes);
    for i in 0..features.rows {
        forward_example(params, features.row(i), &mut scratch);
        data.extend_from_slice(scratch.output());
    }
    Matrix::new(features.rows, classes, data)
}

/// Mean categorical cross-entropy over the batch and its gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &LabeledBatch) -> Result<(f64, Gradients)> {
    batch.check_for(params)?;
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let mut grad = Gradients::zeros_like(params);
    let loss = accumulate_batch(params, batch, None, &mut grad, 0)?;
    Ok((loss, grad))
}

/// Mean loss over `indices` (or the whole batch), accumulating the mean gradient
/// into `grad`.
pub(crate) fn accumulate_batch(
    params: &ModelParams,
    data: &LabeledBatch,
    indices: Option<&[usize]>,
    grad: &mut Gradients,
    first_trainable: usize,
) -> Result<f64> {
    let n = indices.map_or(data.len(), <[usize]>::len);
    let scale = 1.0 / n as f64;
    let mut scratch = Scratch::new(params);
    let mut total = 0.0;
    let mut run = |i: usize| {
        total += backward_example(
            params,
            data.row(i),
            data.labels[i],
            &mut scratch,
            grad,
            scale,
            first_trainable,
        );
    };
    match indices {
        Some(idx) => idx.iter().copied().for_each(&mut run),
        None => (0..n).for_each(&mut run),
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// `w <- w - lr * g` on every layer whose `freeze_mask` entry is false.
pub fn sgd_step(
    params: &ModelParams,
    grad: &Gradients,
    learning_rate: f64,
    freeze_mask: &[bool],
) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, learning_rate, freeze_mask)?;
    Ok(out)
}

pub(crate) fn sgd_step_in_place(
    params: &mut ModelParams,
    grad: &Gradients,
    learning_rate: f64,
    freeze_mask: &[bool],
) -> Result<()> {
    check_tensor_shapes(params, &grad.layers)?;
    if freeze_mask.len() != params.layers.len() {
        return Err(Error::shape(format!(
            "freeze mask has {} entries for {} layers",
            freeze_mask.len(),
            params.layers.len()
        )));
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    for ((layer, g), frozen) in params.layers.iter_mut().zip(&grad.layers).zip(freeze_mask) {
        if *frozen {
            continue;
        }
        add_nonzero(&mut layer.weights, &g.weights, -learning_rate);
        add_nonzero(&mut layer.bias, &g.bias, -learning_rate);
    }
    Ok(())
}

/// Index of the lowest unfrozen layer, or the layer count if all are frozen.
pub(crate) fn first_trainable(freeze_mask: &[bool]) -> usize {
    freeze_mask
        .iter()
        .position(|f| !f)
        .unwrap_or(freeze_mask.len())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(params: &ModelParams, data: &LabeledBatch) -> Result<f64> {
    data.check_for(params)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut scratch = Scratch::new(params);
    let correct = (0..data.len())
        .filter(|&i| {
            forward_example(params, data.row(i), &mut scratch);
            argmax(scratch.output()) == data.labels[i]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(params: &ModelParams, data: &LabeledBatch) -> Result<f64> {
    data.check_for(params)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut scratch = Scratch::new(params);
    let total: f64 = (0..data.len())
        .map(|i| {
            let log_z = forward_example(params, data.row(i), &mut scratch);
            scratch.cross_entropy(log_z, data.labels[i])
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
