//! Feed-forward ReLU network with softmax cross-entropy.
//!
//! Parameters are stored as clipping groups: for layer `l` the weight
//! matrix is group `2l` (shape `[in, out]`) and the bias is group `2l + 1`
//! (shape `[out]`). Gradients, velocities and clipping bounds all use the
//! same group indexing.
//!
//! Per-example gradients come from a [`BackpropTrace`], which keeps the
//! per-example layer inputs and output deltas. A weight gradient for one
//! example is the outer product `a_i ⊗ δ_i`, so its norm is
//! `‖a_i‖·‖δ_i‖` and any per-example weighted sum is a single
//! `Aᵀ diag(s) Δ` product; materializing [`PerExampleGrads`] is only needed
//! when the individual tensors themselves are wanted.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DpwError, Result};
use crate::par;
use crate::rng;
use crate::tensor::{l2_norm, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dim, hidden widths..., class count.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_widths,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(DpwError::InvalidSpec(
                "need at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(DpwError::InvalidSpec("layer widths must be positive".into()));
        }
        if self.classes() < 2 {
            return Err(DpwError::InvalidSpec("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn group_count(&self) -> usize {
        2 * self.layer_count()
    }
}

/// An ordered list of tensors, one per clipping group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    groups: Vec<Tensor>,
}

/// Momentum accumulator; same layout as the parameters.
pub type Velocity = ParamSet;

impl ParamSet {
    pub fn new(groups: Vec<Tensor>) -> Self {
        Self { groups }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            groups: other
                .groups
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &Tensor {
        &self.groups[g]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut Tensor {
        &mut self.groups[g]
    }

    pub fn groups(&self) -> &[Tensor] {
        &self.groups
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.groups.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// ℓ2 norm over all groups concatenated.
    pub fn norm(&self) -> f64 {
        self.groups
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(DpwError::ShapeMismatch {
                expected: self.groups.iter().map(Tensor::len).collect(),
                actual: other.groups.iter().map(Tensor::len).collect(),
            })
        }
    }

    /// `self += a * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, a: f64) {
        for (x, y) in self.groups.iter_mut().zip(&other.groups) {
            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                *p += a * q;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for t in &mut self.groups {
            t.data_mut().iter_mut().for_each(|x| *x *= a);
        }
    }

    /// Concatenation of all groups in group order.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    widths: Vec<usize>,
    params: ParamSet,
}

impl ModelParams {
    /// Wraps an explicit parameter set; shapes are checked against `widths`.
    pub fn from_parts(widths: Vec<usize>, params: ParamSet) -> Result<Self> {
        let expected = group_shapes(&widths);
        let actual: Vec<Vec<usize>> = params.groups.iter().map(|t| t.shape().to_vec()).collect();
        if expected != actual {
            return Err(DpwError::ShapeMismatch {
                expected: expected.concat(),
                actual: actual.concat(),
            });
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn group_count(&self) -> usize {
        self.params.num_groups()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        self.params.group(2 * layer)
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        self.params.group(2 * layer + 1)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn zero_velocity(&self) -> Velocity {
        ParamSet::zeros_like(&self.params)
    }
}

fn group_shapes(widths: &[usize]) -> Vec<Vec<usize>> {
    widths
        .windows(2)
        .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
        .collect()
}

/// Uniform `U(-1/√fan_in, 1/√fan_in)` weights and zero biases.
pub fn init_params(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::TAG_INIT);
    let mut groups = Vec::with_capacity(spec.group_count());
    for w in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        groups.push(Tensor::from_parts_unchecked(vec![fan_in, fan_out], data));
        groups.push(Tensor::zeros(vec![fan_out]));
    }
    ModelParams::from_parts(spec.layer_widths.clone(), ParamSet::new(groups))
}

fn check_inputs(params: &ModelParams, inputs: &Tensor) -> Result<usize> {
    let shape = inputs.shape();
    if shape.len() != 2 || shape[1] != params.input_dim() {
        return Err(DpwError::ShapeMismatch {
            expected: vec![shape.first().copied().unwrap_or(0), params.input_dim()],
            actual: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

fn check_labels(params: &ModelParams, batch: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(DpwError::ShapeMismatch {
            expected: vec![batch],
            actual: vec![labels.len()],
        });
    }
    let classes = params.classes();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(DpwError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `out[i] = act(in[i] · W + b)` for every row.
fn affine_rows(input: &[f64], rows: usize, weight: &Tensor, bias: &Tensor, relu: bool) -> Vec<f64> {
    let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let mut out = vec![0.0; rows * fan_out];
    par::for_each_row_mut(&mut out, fan_out, |i, row| {
        row.copy_from_slice(bias.data());
        let a = &input[i * fan_in..(i + 1) * fan_in];
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let wr = &w[j * fan_out..(j + 1) * fan_out];
            for (o, &wk) in row.iter_mut().zip(wr) {
                *o += aj * wk;
            }
        }
        if relu {
            row.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    });
    out
}

/// Layer inputs for every layer plus the final logits.
fn forward_all(params: &ModelParams, inputs: &Tensor, rows: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let layers = params.layer_count();
    let mut acts = Vec::with_capacity(layers);
    let mut current = inputs.data().to_vec();
    for l in 0..layers {
        let next = affine_rows(&current, rows, params.weight(l), params.bias(l), l + 1 < layers);
        acts.push(current);
        current = next;
    }
    (acts, current)
}

/// Logits `[batch, classes]`. Pure; never mutates `params`.
pub fn forward(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let rows = check_inputs(params, inputs)?;
    let (_, logits) = forward_all(params, inputs, rows);
    Ok(Tensor::from_parts_unchecked(vec![rows, params.classes()], logits))
}

/// Softmax cross-entropy of one logit row; writes `softmax - onehot` into `delta`.
fn softmax_xent(logits: &[f64], label: usize, delta: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &z) in delta.iter_mut().zip(logits) {
        *d = (z - max).exp();
        sum += *d;
    }
    delta.iter_mut().for_each(|d| *d /= sum);
    delta[label] -= 1.0;
    sum.ln() + max - logits[label]
}

/// Everything needed to form per-example gradients for one batch.
#[derive(Debug, Clone)]
pub struct BackpropTrace {
    batch: usize,
    widths: Vec<usize>,
    /// Input to layer `l` for each example, `[batch, widths[l]]`.
    layer_inputs: Vec<Vec<f64>>,
    /// d loss_i / d pre-activation of layer `l`, `[batch, widths[l + 1]]`.
    deltas: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

pub fn backprop(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<BackpropTrace> {
    let rows = check_inputs(params, inputs)?;
    check_labels(params, rows, labels)?;
    let layers = params.layer_count();
    let (layer_inputs, logits) = forward_all(params, inputs, rows);

    let classes = params.classes();
    let mut top = vec![0.0; rows * classes];
    let losses = {
        let mut losses = vec![0.0; rows];
        // losses are cheap; compute sequentially alongside deltas
        for (i, (d, z)) in top
            .chunks_mut(classes)
            .zip(logits.chunks(classes))
            .enumerate()
        {
            losses[i] = softmax_xent(z, labels[i], d);
        }
        losses
    };

    let mut deltas = vec![Vec::new(); layers];
    deltas[layers - 1] = top;
    for l in (1..layers).rev() {
        let w = params.weight(l);
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let upper = &deltas[l];
        let act = &layer_inputs[l];
        let mut lower = vec![0.0; rows * fan_in];
        par::for_each_row_mut(&mut lower, fan_in, |i, row| {
            let d = &upper[i * fan_out..(i + 1) * fan_out];
            let a = &act[i * fan_in..(i + 1) * fan_in];
            for (j, out) in row.iter_mut().enumerate() {
                if a[j] > 0.0 {
                    let wr = &w.data()[j * fan_out..(j + 1) * fan_out];
                    *out = wr.iter().zip(d).map(|(x, y)| x * y).sum();
                }
            }
        });
        deltas[l - 1] = lower;
    }

    Ok(BackpropTrace {
        batch: rows,
        widths: params.widths().to_vec(),
        layer_inputs,
        deltas,
        losses,
    })
}

impl BackpropTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn group_count(&self) -> usize {
        2 * (self.widths.len() - 1)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn mean_loss(&self) -> f64 {
        if self.batch == 0 {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.batch as f64
    }

    fn input_row(&self, layer: usize, i: usize) -> &[f64] {
        let w = self.widths[layer];
        &self.layer_inputs[layer][i * w..(i + 1) * w]
    }

    fn delta_row(&self, layer: usize, i: usize) -> &[f64] {
        let w = self.widths[layer + 1];
        &self.deltas[layer][i * w..(i + 1) * w]
    }

    /// Per-example gradient norms, indexed `[example][group]`.
    pub fn group_norms(&self) -> Vec<Vec<f64>> {
        let layers = self.widths.len() - 1;
        (0..self.batch)
            .map(|i| {
                let mut norms = Vec::with_capacity(2 * layers);
                for l in 0..layers {
                    let dn = l2_norm(self.delta_row(l, i));
                    norms.push(l2_norm(self.input_row(l, i)) * dn);
                    norms.push(dn);
                }
                norms
            })
            .collect()
    }

    /// `Σ_i scales[i][g] · g_i^g` for every group `g`.
    pub fn weighted_group_sums(&self, scales: &[Vec<f64>]) -> ParamSet {
        let layers = self.widths.len() - 1;
        let mut groups = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let (gw, gb) = (2 * l, 2 * l + 1);
            let mut weight = vec![0.0; fan_in * fan_out];
            par::for_each_row_mut(&mut weight, fan_out, |j, row| {
                for (i, s) in scales.iter().enumerate().take(self.batch) {
                    let c = s[gw] * self.input_row(l, i)[j];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, &d) in row.iter_mut().zip(self.delta_row(l, i)) {
                        *o += c * d;
                    }
                }
            });
            let mut bias = vec![0.0; fan_out];
            for (i, s) in scales.iter().enumerate().take(self.batch) {
                for (o, &d) in bias.iter_mut().zip(self.delta_row(l, i)) {
                    *o += s[gb] * d;
                }
            }
            groups.push(Tensor::from_parts_unchecked(vec![fan_in, fan_out], weight));
            groups.push(Tensor::from_parts_unchecked(vec![fan_out], bias));
        }
        ParamSet::new(groups)
    }

    /// Gradient of the mean loss over the batch.
    pub fn mean_grad(&self) -> ParamSet {
        let s = if self.batch == 0 { 0.0 } else { 1.0 / self.batch as f64 };
        let scales = vec![vec![s; self.group_count()]; self.batch];
        self.weighted_group_sums(&scales)
    }

    /// Materializes every example's gradient.
    pub fn per_example_grads(&self) -> PerExampleGrads {
        let layers = self.widths.len() - 1;
        let mut shapes = Vec::with_capacity(2 * layers);
        let mut data = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut weight = vec![0.0; self.batch * fan_in * fan_out];
            par::for_each_row_mut(&mut weight, fan_in * fan_out, |i, g| {
                let d = self.delta_row(l, i);
                for (row, &a) in g.chunks_mut(fan_out).zip(self.input_row(l, i)) {
                    for (o, &dk) in row.iter_mut().zip(d) {
                        *o = a * dk;
                    }
                }
            });
            let bias = self.deltas[l].clone();
            shapes.push(vec![fan_in, fan_out]);
            shapes.push(vec![fan_out]);
            data.push(weight);
            data.push(bias);
        }
        PerExampleGrads {
            batch: self.batch,
            shapes,
            data,
        }
    }
}

/// Per-example, per-group gradients `g^l(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    batch: usize,
    shapes: Vec<Vec<usize>>,
    /// One `[batch, group_len]` buffer per group.
    data: Vec<Vec<f64>>,
}

impl PerExampleGrads {
    /// `data[g]` holds `batch` consecutive gradients of shape `shapes[g]`.
    pub fn from_groups(batch: usize, shapes: Vec<Vec<usize>>, data: Vec<Vec<f64>>) -> Result<Self> {
        if shapes.len() != data.len() {
            return Err(DpwError::ShapeMismatch {
                expected: vec![shapes.len()],
                actual: vec![data.len()],
            });
        }
        for (shape, buf) in shapes.iter().zip(&data) {
            let want = batch * shape.iter().product::<usize>();
            if buf.len() != want {
                return Err(DpwError::ShapeMismatch {
                    expected: vec![want],
                    actual: vec![buf.len()],
                });
            }
        }
        Ok(Self { batch, shapes, data })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn num_groups(&self) -> usize {
        self.shapes.len()
    }

    pub fn group_shape(&self, g: usize) -> &[usize] {
        &self.shapes[g]
    }

    fn group_len(&self, g: usize) -> usize {
        self.shapes[g].iter().product()
    }

    pub fn example(&self, i: usize, g: usize) -> &[f64] {
        let n = self.group_len(g);
        &self.data[g][i * n..(i + 1) * n]
    }

    pub fn example_mut(&mut self, i: usize, g: usize) -> &mut [f64] {
        let n = self.group_len(g);
        &mut self.data[g][i * n..(i + 1) * n]
    }

    pub fn norm(&self, i: usize, g: usize) -> f64 {
        l2_norm(self.example(i, g))
    }

    /// `[example][group]` norms.
    pub fn norms(&self) -> Vec<Vec<f64>> {
        (0..self.batch)
            .map(|i| (0..self.num_groups()).map(|g| self.norm(i, g)).collect())
            .collect()
    }

    /// Sum over examples, accumulated in example order.
    pub fn sum(&self) -> ParamSet {
        let groups = (0..self.num_groups())
            .map(|g| {
                let mut acc = vec![0.0; self.group_len(g)];
                for i in 0..self.batch {
                    for (a, x) in acc.iter_mut().zip(self.example(i, g)) {
                        *a += x;
                    }
                }
                Tensor::from_parts_unchecked(self.shapes[g].clone(), acc)
            })
            .collect();
        ParamSet::new(groups)
    }

    pub fn mean(&self) -> ParamSet {
        let mut s = self.sum();
        if self.batch > 0 {
            s.scale(1.0 / self.batch as f64);
        }
        s
    }
}

/// Mean softmax cross-entropy and one gradient per example per group.
pub fn loss_and_per_example_grads(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, PerExampleGrads)> {
    let trace = backprop(params, inputs, labels)?;
    Ok((trace.mean_loss(), trace.per_example_grads()))
}

/// Mean loss and its gradient.
pub fn loss_and_grad(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<(f64, ParamSet)> {
    let trace = backprop(params, inputs, labels)?;
    Ok((trace.mean_loss(), trace.mean_grad()))
}

/// Per-example losses, without any gradient work.
pub fn losses(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let rows = check_inputs(params, inputs)?;
    check_labels(params, rows, labels)?;
    let logits = forward(params, inputs)?;
    let mut scratch = vec![0.0; params.classes()];
    Ok((0..rows)
        .map(|i| softmax_xent(logits.row(i), labels[i], &mut scratch))
        .collect())
}

/// `v' = momentum·v + grad`, `params' = params − lr·v'`.
pub fn apply_update(
    params: &ModelParams,
    grad: &ParamSet,
    lr: f64,
    momentum: f64,
    velocity: &Velocity,
) -> Result<(ModelParams, Velocity)> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DpwError::param(format!("learning rate must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(DpwError::param(format!("momentum must be in [0, 1), got {momentum}")));
    }
    params.params.check_layout(grad)?;
    params.params.check_layout(velocity)?;

    let mut v = velocity.clone();
    v.scale(momentum);
    v.add_scaled(grad, 1.0);
    let mut next = params.clone();
    next.params.add_scaled(&v, -lr);
    Ok((next, v))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(params: &ModelParams, inputs: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(params, inputs)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn evaluate(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if inputs.rows() == 0 || labels.is_empty() {
        return Err(DpwError::EmptyDataset);
    }
    let rows = check_inputs(params, inputs)?;
    check_labels(params, rows, labels)?;
    let pred = predict(params, inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / rows as f64)
}
