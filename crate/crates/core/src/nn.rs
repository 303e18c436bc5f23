//! Dense ReLU classifier with exact backpropagation.
//!
//! The network is a chain of affine layers: every layer except the last is
//! followed by a ReLU, and the last one produces logits. Loss is mean
//! softmax cross-entropy. All math is `f64`.
//!
//! # Checkpoint layout
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "PDGCLMLP"
//! version    u32      1
//! n_dims     u32
//! dims       n_dims x u32
//! per layer k = 0..n_dims-1:
//!     weights  dims[k+1] x dims[k] f64, row-major
//!     biases   dims[k+1] f64
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"PDGCLMLP";
const MODEL_VERSION: u32 = 1;

/// The architecture used for rotated MNIST: two hidden layers of 100 ReLUs.
pub const MNIST_DIMS: [usize; 4] = [784, 100, 100, 10];

/// One affine map `x -> W x + b`, with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl DenseLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((fan_out, fan_in)),
            biases: Array1::zeros(fan_out),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn param(&self, i: usize) -> f64 {
        let nw = self.weights.len();
        if i < nw {
            let cols = self.weights.ncols();
            self.weights[[i / cols, i % cols]]
        } else {
            self.biases[i - nw]
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            let cols = self.weights.ncols();
            &mut self.weights[[i / cols, i % cols]]
        } else {
            &mut self.biases[i - nw]
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

/// Parameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Architecture(format!(
            "need at least 2 layer sizes, got {}",
            dims.len()
        )));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Architecture(format!("layer size {pos} is zero")));
    }
    Ok(())
}

impl MlpModel {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        Ok(MlpModel {
            layer_dims: dims.to_vec(),
            layers,
        })
    }

    /// He-uniform initialization: weights ~ U(-b, b) with b = sqrt(6 / fan_in),
    /// biases zero. Draws weights layer by layer in row-major order.
    pub fn he_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        for layer in &mut model.layers {
            let bound = (6.0 / layer.weights.ncols() as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Architecture("no layers".into()))?;
        let mut dims = vec![first.weights.ncols()];
        for (k, layer) in layers.iter().enumerate() {
            let fan_in = *dims.last().unwrap();
            if layer.weights.ncols() != fan_in {
                return Err(Error::Dimension {
                    layer: k,
                    expected: fan_in,
                    got: layer.weights.ncols(),
                });
            }
            if layer.biases.len() != layer.weights.nrows() {
                return Err(Error::Dimension {
                    layer: k,
                    expected: layer.weights.nrows(),
                    got: layer.biases.len(),
                });
            }
            if !layer.is_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
            dims.push(layer.weights.nrows());
        }
        check_dims(&dims)?;
        Ok(MlpModel {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Total parameter count. Flat index order is layer by layer, weights
    /// row-major then biases — the same order as the checkpoint layout.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn param(&self, index: usize) -> f64 {
        let (k, i) = locate(&self.layers, index);
        self.layers[k].param(i)
    }

    /// Overwrite one parameter. Used by finite-difference checks.
    pub fn set_param(&mut self, index: usize, value: f64) {
        let (k, i) = locate(&self.layers, index);
        *self.layers[k].param_mut(i) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.layer_dims.len() as u32).to_le_bytes())?;
        for &d in &self.layer_dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.biases.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "model magic")?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Checkpoint("bad model magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model version {version}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        if n > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::zeros(&dims)?;
        for layer in &mut model.layers {
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *v = read_f64(&mut r)?;
            }
        }
        if !model.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(model)
    }
}

fn locate(layers: &[DenseLayer], mut index: usize) -> (usize, usize) {
    for (k, layer) in layers.iter().enumerate() {
        let n = layer.param_count();
        if index < n {
            return (k, index);
        }
        index -= n;
    }
    panic!("parameter index out of range");
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("reading {what}: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "f64")?;
    Ok(f64::from_le_bytes(b))
}

/// ∂loss/∂θ, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layer_dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn get(&self, index: usize) -> f64 {
        let (k, i) = locate(&self.layers, index);
        self.layers[k].param(i)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.biases.scaled_add(scale, &b.biases);
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                a.weights
                    .iter()
                    .zip(b.weights.iter())
                    .chain(a.biases.iter().zip(b.biases.iter()))
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }

    fn check_congruent(&self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::LengthMismatch {
                what: "gradient layers",
                left: self.layers.len(),
                right: other.layers.len(),
            });
        }
        for (k, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weights.dim() != b.weights.dim() || a.biases.len() != b.biases.len() {
                return Err(Error::Dimension {
                    layer: k,
                    expected: a.param_count(),
                    got: b.param_count(),
                });
            }
        }
        Ok(())
    }
}

/// Cached per-layer values from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_dims: Vec<usize>,
    inputs: Array2<f64>,
    /// `pre_activations[k]` is `W_k a_{k-1} + b_k`.
    pre_activations: Vec<Array2<f64>>,
    /// `activations[k]` is the ReLU of `pre_activations[k]` for hidden
    /// layers; the last entry is the logits (no activation).
    activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.activations.last().unwrap().view()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn layer_count(&self) -> usize {
        self.pre_activations.len()
    }
}

pub fn forward(model: &MlpModel, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    if inputs.ncols() != model.input_dim() {
        return Err(Error::Dimension {
            layer: 0,
            expected: model.input_dim(),
            got: inputs.ncols(),
        });
    }
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("inputs"));
    }
    let last = model.layers.len() - 1;
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        let prev = if k == 0 {
            inputs
        } else {
            activations[k - 1].view()
        };
        let mut z = prev.dot(&layer.weights.t());
        z += &layer.biases;
        let a = if k == last {
            z.clone()
        } else {
            z.mapv(|v| v.max(0.0))
        };
        pre_activations.push(z);
        activations.push(a);
    }
    let trace = ForwardTrace {
        layer_dims: model.layer_dims.clone(),
        inputs: inputs.to_owned(),
        pre_activations,
        activations,
    };
    if !trace.logits().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(trace)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != rows {
        return Err(Error::LengthMismatch {
            what: "labels vs batch",
            left: labels.len(),
            right: rows,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Max-shifted softmax of each row.
fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut probs = logits.to_owned();
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    probs
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.nrows(), logits.ncols())?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_trace(model: &MlpModel, trace: &ForwardTrace) -> Result<()> {
    if trace.layer_dims != model.layer_dims {
        return Err(Error::TraceMismatch(format!(
            "trace dims {:?} vs model dims {:?}",
            trace.layer_dims, model.layer_dims
        )));
    }
    Ok(())
}

/// Accumulate `scale * ∇ mean_CE` for one traced batch into `grads`.
fn accumulate_backward(
    model: &MlpModel,
    trace: &ForwardTrace,
    labels: &[usize],
    scale: f64,
    grads: &mut Gradients,
) -> Result<()> {
    check_trace(model, trace)?;
    let n = trace.batch_size();
    check_labels(labels, n, model.num_classes())?;

    let mut delta = softmax_rows(trace.logits());
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    delta *= scale / n as f64;

    for k in (0..model.layers.len()).rev() {
        let prev = if k == 0 {
            trace.inputs.view()
        } else {
            trace.activations[k - 1].view()
        };
        let g = &mut grads.layers[k];
        g.weights += &delta.t().dot(&prev);
        g.biases += &delta.sum_axis(Axis(0));
        if k > 0 {
            let mut next = delta.dot(&model.layers[k].weights);
            Zip::from(&mut next)
                .and(&trace.pre_activations[k - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = next;
        }
    }
    Ok(())
}

/// Exact gradient of [`cross_entropy`] on the traced batch.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(model);
    accumulate_backward(model, trace, labels, 1.0, &mut grads)?;
    Ok(grads)
}

/// Gradient of `Σ_i weights[i] * CE(batch_i)`.
pub fn backward_weighted_sum(
    model: &MlpModel,
    parts: &[(&ForwardTrace, &[usize])],
    weights: &[f64],
) -> Result<Gradients> {
    if parts.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "weighted backward parts vs weights",
            left: parts.len(),
            right: weights.len(),
        });
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFinite("loss weights"));
    }
    let mut grads = Gradients::zeros_like(model);
    for (&(trace, labels), &w) in parts.iter().zip(weights) {
        accumulate_backward(model, trace, labels, w, &mut grads)?;
    }
    Ok(grads)
}

/// Plain SGD: `p <- p - lr * g` for every parameter. The model is left
/// untouched when an error is returned.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::LearningRate(lr));
    }
    Gradients::zeros_like(model).check_congruent(grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in model.layers.iter_mut().zip(&grads.layers) {
        p.weights.scaled_add(-lr, &g.weights);
        p.biases.scaled_add(-lr, &g.biases);
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters after SGD step"));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Number of samples whose argmax logit equals the label.
pub fn correct_count(model: &MlpModel, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<usize> {
    check_labels(labels, inputs.nrows(), model.num_classes())?;
    let trace = forward(model, inputs)?;
    Ok(trace
        .logits()
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count())
}

pub fn accuracy(model: &MlpModel, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let correct = correct_count(model, inputs, labels)?;
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_inputs(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0))
    }

    /// Straight scalar-loop evaluation of the network.
    fn scalar_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let last = model.layers().len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in model.layers().iter().enumerate() {
            let (rows, cols) = layer.weights.dim();
            let mut out = vec![0.0; rows];
            for i in 0..rows {
                let mut acc = layer.biases[i];
                for j in 0..cols {
                    acc += layer.weights[[i, j]] * h[j];
                }
                out[i] = if k == last { acc } else { acc.max(0.0) };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = MlpModel::zeros(&[5, 4, 3]).unwrap();
        let x = random_inputs(&mut rng(1), 6, 5);
        let trace = forward(&model, x.view()).unwrap();
        assert!(trace.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let layer = DenseLayer {
            weights: Array2::eye(4),
            biases: Array1::zeros(4),
        };
        let model = MlpModel::from_layers(vec![layer]).unwrap();
        let x = array![[0.5, -1.0, 2.0, 3.25]];
        let trace = forward(&model, x.view()).unwrap();
        assert_eq!(trace.logits(), x.view());
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut r = rng(7);
        let model = MlpModel::he_uniform(&[4, 2, 3], &mut r).unwrap();
        let x = random_inputs(&mut r, 3, 4);
        let trace = forward(&model, x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let expect = scalar_forward(&model, row.as_slice().unwrap());
            for (c, e) in expect.iter().enumerate() {
                assert!((trace.logits()[[i, c]] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = MlpModel::zeros(&[4, 3]).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        match forward(&model, x.view()) {
            Err(Error::Dimension { layer: 0, expected: 4, got: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_cost_ln_ten() {
        let logits = Array2::<f64>::from_elem((3, 10), 0.7);
        let loss = cross_entropy(logits.view(), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let mut logits = Array2::<f64>::zeros((1, 10));
        logits[[0, 0]] = 1000.0;
        let loss = cross_entropy(logits.view(), &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0 && loss < 1e-300);
        logits[[0, 0]] = -1e4;
        let loss = cross_entropy(logits.view(), &[0]).unwrap();
        assert!((loss - (1e4 + 9f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut r = rng(11);
        let logits = Array2::from_shape_fn((16, 10), |_| r.random_range(-8.0..8.0));
        let labels: Vec<usize> = (0..16).map(|_| r.random_range(0..10)).collect();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..10).map(|c| logits[[i, c]]).collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            total += -(row[y] - m - s.ln());
        }
        let expect = total / 16.0;
        let got = cross_entropy(logits.view(), &labels).unwrap();
        assert!(((got - expect) / expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Array2::<f64>::zeros((0, 10));
        assert!(matches!(cross_entropy(logits.view(), &[]), Err(Error::EmptyBatch)));
        let logits = Array2::<f64>::zeros((1, 10));
        assert!(matches!(
            cross_entropy(logits.view(), &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn zero_inputs_kill_first_layer_weight_gradient() {
        let mut r = rng(3);
        let model = MlpModel::he_uniform(&[6, 5, 4], &mut r).unwrap();
        let x = Array2::<f64>::zeros((4, 6));
        let trace = forward(&model, x.view()).unwrap();
        let g = backward(&model, &trace, &[0, 1, 2, 3]).unwrap();
        assert!(g.layers()[0].weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut r = rng(5);
        let model = MlpModel::he_uniform(&[6, 8, 3], &mut r).unwrap();
        let x = random_inputs(&mut r, 5, 6);
        let labels = vec![0, 1, 2, 1, 0];
        let g1 = backward(&model, &forward(&model, x.view()).unwrap(), &labels).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let g2 = backward(&model, &forward(&model, x2.view()).unwrap(), &labels2).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let mut r = rng(5);
        let a = MlpModel::he_uniform(&[6, 8, 3], &mut r).unwrap();
        let b = MlpModel::he_uniform(&[6, 4, 3], &mut r).unwrap();
        let x = random_inputs(&mut r, 2, 6);
        let trace = forward(&a, x.view()).unwrap();
        assert!(matches!(backward(&b, &trace, &[0, 1]), Err(Error::TraceMismatch(_))));
    }

    #[test]
    fn weighted_sum_singleton_and_halves() {
        let mut r = rng(9);
        let model = MlpModel::he_uniform(&[5, 7, 4], &mut r).unwrap();
        let x = random_inputs(&mut r, 6, 5);
        let labels = vec![0, 1, 2, 3, 0, 1];
        let trace = forward(&model, x.view()).unwrap();
        let g = backward(&model, &trace, &labels).unwrap();
        let one = backward_weighted_sum(&model, &[(&trace, &labels)], &[1.0]).unwrap();
        assert_eq!(g, one);
        let halves = backward_weighted_sum(
            &model,
            &[(&trace, &labels), (&trace, &labels)],
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(g, halves);
    }

    #[test]
    fn weighted_sum_is_linear() {
        let mut r = rng(10);
        let model = MlpModel::he_uniform(&[5, 7, 4], &mut r).unwrap();
        let x1 = random_inputs(&mut r, 6, 5);
        let x2 = random_inputs(&mut r, 3, 5);
        let (l1, l2) = (vec![0, 1, 2, 3, 0, 1], vec![3, 3, 2]);
        let t1 = forward(&model, x1.view()).unwrap();
        let t2 = forward(&model, x2.view()).unwrap();
        let mut expect = backward(&model, &t1, &l1).unwrap();
        let g2 = backward(&model, &t2, &l2).unwrap();
        let g1 = expect.clone();
        expect.add_scaled(1.0, &g1).unwrap();
        expect.add_scaled(-1.0, &g2).unwrap();
        let got =
            backward_weighted_sum(&model, &[(&t1, &l1), (&t2, &l2)], &[2.0, -1.0]).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
        assert!(matches!(
            backward_weighted_sum(&model, &[(&t1, &l1)], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let layer = DenseLayer {
            weights: array![[1.0]],
            biases: array![0.0],
        };
        let mut model = MlpModel::from_layers(vec![layer]).unwrap();
        let mut g = Gradients::zeros_like(&model);
        g.layers[0].weights[[0, 0]] = 2.0;
        sgd_step(&mut model, &g, 0.1).unwrap();
        assert!((model.param(0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_bitwise_noop() {
        let mut r = rng(4);
        let mut model = MlpModel::he_uniform(&[5, 3, 2], &mut r).unwrap();
        let before = model.clone();
        let x = random_inputs(&mut r, 4, 5);
        let g = backward(&model, &forward(&model, x.view()).unwrap(), &[0, 1, 0, 1]).unwrap();
        sgd_step(&mut model, &g, 0.0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn two_steps_equal_one_double_step() {
        let mut r = rng(4);
        let model = MlpModel::he_uniform(&[5, 3, 2], &mut r).unwrap();
        let x = random_inputs(&mut r, 4, 5);
        let g = backward(&model, &forward(&model, x.view()).unwrap(), &[0, 1, 0, 1]).unwrap();
        let mut twice = model.clone();
        sgd_step(&mut twice, &g, 0.05).unwrap();
        sgd_step(&mut twice, &g, 0.05).unwrap();
        let mut once = model;
        sgd_step(&mut once, &g, 0.1).unwrap();
        for i in 0..once.param_count() {
            assert!((once.param(i) - twice.param(i)).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut model = MlpModel::zeros(&[2, 2]).unwrap();
        let mut g = Gradients::zeros_like(&model);
        g.layers[0].biases[1] = f64::NAN;
        let before = model.clone();
        assert!(matches!(sgd_step(&mut model, &g, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(model, before);
        let zero = Gradients::zeros_like(&model);
        assert!(matches!(
            sgd_step(&mut model, &zero, -1.0),
            Err(Error::LearningRate(_))
        ));
    }

    #[test]
    fn accuracy_tie_breaks_to_class_zero() {
        let model = MlpModel::zeros(&[3, 10]).unwrap();
        let x = Array2::<f64>::ones((5, 3));
        let acc = accuracy(&model, x.view(), &[0, 0, 3, 7, 9]).unwrap();
        assert!((acc - 0.4).abs() < 1e-15);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(accuracy(&model, empty.view(), &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn accuracy_perfect_when_bias_favors_label() {
        let mut model = MlpModel::zeros(&[3, 10]).unwrap();
        model.set_param(30 + 6, 5.0);
        let x = Array2::<f64>::ones((4, 3));
        assert_eq!(accuracy(&model, x.view(), &[6, 6, 6, 6]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_scalar_oracle() {
        let mut r = rng(21);
        let model = MlpModel::he_uniform(&[6, 5, 10], &mut r).unwrap();
        let x = random_inputs(&mut r, 40, 6);
        let labels: Vec<usize> = (0..40).map(|_| r.random_range(0..10)).collect();
        let mut correct = 0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let logits = scalar_forward(&model, row.as_slice().unwrap());
            let mut best = 0;
            for c in 1..logits.len() {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
        let got = accuracy(&model, x.view(), &labels).unwrap();
        assert_eq!(got, correct as f64 / 40.0);
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let mut r = rng(2);
        let model = MlpModel::he_uniform(&[7, 5, 3], &mut r).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MODEL_MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 3 * 4 + (7 * 5 + 5 + 5 * 3 + 3) * 8);
        let back = MlpModel::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        bytes[0] = b'X';
        assert!(MlpModel::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn he_uniform_respects_bound_and_is_deterministic() {
        let a = MlpModel::he_uniform(&MNIST_DIMS, &mut rng(99)).unwrap();
        let b = MlpModel::he_uniform(&MNIST_DIMS, &mut rng(99)).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 784.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(a.layers()[2].biases.iter().all(|&b| b == 0.0));
    }
}
