//! Flat-parameter MLP substrate.
//!
//! A model is a [`ModelArch`] plus a [`ParamVector`] holding every weight and
//! bias in one contiguous buffer. Layer `l` occupies a `(out, in)` row-major
//! weight block followed by its `out` biases. Hidden layers apply the arch's
//! activation; the last layer feeds a softmax.
//!
//! Gradients are computed by hand-written backprop through the softmax
//! output, so every loss used by the protocol (cross-entropy, KL to a frozen
//! reference, L1, squared L2) has an analytic gradient with respect to the
//! flat buffer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths of a fully connected classifier, input first, classes last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    layer_dims: Vec<usize>,
    activation: Activation,
}

/// Location of one dense layer inside the flat parameter buffer.
#[derive(Clone, Copy, Debug)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ModelArch {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(invalid("an architecture needs at least an input and an output layer"));
        }
        if layer_dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(invalid("the output layer needs at least two classes"));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{} ({:?})", dims.join("-"), self.activation)
    }
}

/// Every weight of one model in a single flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    arch: Arc<ModelArch>,
}

impl ParamVector {
    pub fn new(arch: Arc<ModelArch>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(invalid(format!(
                "arch {} expects {} parameters, got {}",
                arch,
                arch.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameter values must be finite"));
        }
        Ok(Self { values, arch })
    }

    pub fn zeros(arch: Arc<ModelArch>) -> Self {
        let n = arch.param_count();
        Self {
            values: vec![0.0; n],
            arch,
        }
    }

    /// Variance-scaling init: weights ~ N(0, gain / fan_in), zero biases.
    /// Gain is 2 for ReLU and 1 for tanh.
    pub fn variance_scaling<R: Rng + ?Sized>(arch: Arc<ModelArch>, rng: &mut R) -> Self {
        let gain = match arch.activation() {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let mut values = vec![0.0; arch.param_count()];
        for slot in arch.slots() {
            let std = (gain / slot.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            for v in &mut values[slot.weight_offset..slot.bias_offset] {
                *v = normal.sample(rng);
            }
        }
        Self { values, arch }
    }

    /// Same arch, new values. Lengths must agree.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), values)
    }

    pub(crate) fn from_raw(arch: Arc<ModelArch>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), arch.param_count());
        Self { values, arch }
    }

    pub fn arch(&self) -> &Arc<ModelArch> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.values.len() != other.values.len() || *self.arch != *other.arch {
            return Err(invalid(format!(
                "parameter vectors disagree: {} ({}) vs {} ({})",
                self.arch,
                self.len(),
                other.arch,
                other.len()
            )));
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_raw(self.arch.clone(), values))
    }

    /// Fraction of entries that are not exactly zero.
    pub fn nnz_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|v| **v != 0.0).count() as f64 / self.values.len() as f64
    }

    fn weight_view(&self, slot: &LayerSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (slot.fan_out, slot.fan_in),
            &self.values[slot.weight_offset..slot.bias_offset],
        )
        .expect("slot shape matches arch")
    }

    fn bias_view(&self, slot: &LayerSlot) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.values[slot.bias_offset..slot.bias_offset + slot.fan_out])
    }
}

/// Row-stochastic matrix of class probabilities, one row per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist {
    rows: Array2<f64>,
}

impl ProbDist {
    /// Validates that every row is a probability simplex point.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.ncols() < 2 {
            return Err(invalid("a distribution needs at least two classes"));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(invalid("ragged distribution rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), ncols), flat)
            .map_err(|e| invalid(e.to_string()))?;
        Self::new(arr)
    }

    pub(crate) fn from_softmax(rows: Array2<f64>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.rows.ncols()
    }

    /// Argmax of row `i`, lowest index on ties.
    pub fn argmax(&self, i: usize) -> usize {
        argmax_lowest(self.rows.row(i).iter().copied())
    }

    pub fn max_prob(&self, i: usize) -> f64 {
        self.rows.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_same_shape(&self, other: &ProbDist) -> Result<()> {
        if self.rows.dim() != other.rows.dim() {
            return Err(invalid(format!(
                "distribution shapes differ: {:?} vs {:?}",
                self.rows.dim(),
                other.rows.dim()
            )));
        }
        Ok(())
    }
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Learning rate plus plateau bookkeeping for the adaptive decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub patience_counter: usize,
    pub best_val_loss: Option<f64>,
}

impl OptimState {
    /// Non-improving validation checks tolerated before a decay.
    pub const PATIENCE: usize = 5;
    pub const DECAY_FACTOR: f64 = 3.0;

    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self {
            lr,
            patience_counter: 0,
            best_val_loss: None,
        }
    }
}

/// Divide the rate by 3 once validation loss has failed to improve five
/// consecutive times.
pub fn lr_step(state: &OptimState, val_loss: f64) -> OptimState {
    let mut next = state.clone();
    let improved = match state.best_val_loss {
        None => true,
        Some(best) => val_loss < best,
    };
    if improved {
        next.best_val_loss = Some(val_loss);
        next.patience_counter = 0;
    } else {
        next.patience_counter += 1;
        if next.patience_counter >= OptimState::PATIENCE {
            next.lr /= OptimState::DECAY_FACTOR;
            next.patience_counter = 0;
        }
    }
    next
}

/// Intermediate values kept for backprop.
struct Trace {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activation
    /// feeding layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations, one per hidden layer.
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

fn check_batch(params: &ParamVector, batch: &ArrayView2<'_, f64>) -> Result<()> {
    if batch.ncols() != params.arch.input_dim() {
        return Err(invalid(format!(
            "batch has {} features but the model expects {}",
            batch.ncols(),
            params.arch.input_dim()
        )));
    }
    Ok(())
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| (e / sum).max(f64::MIN_POSITIVE));
    }
    logits
}

fn forward_trace(params: &ParamVector, batch: ArrayView2<'_, f64>) -> Trace {
    let slots = params.arch.slots();
    let act = params.arch.activation();
    let mut inputs = vec![batch.to_owned()];
    let mut pre = Vec::with_capacity(slots.len() - 1);
    let last = slots.len() - 1;
    let mut probs = Array2::zeros((0, 0));
    for (l, slot) in slots.iter().enumerate() {
        let w = params.weight_view(slot);
        let b = params.bias_view(slot);
        let z = inputs[l].dot(&w.t()) + &b;
        if l == last {
            probs = softmax_rows(z);
        } else {
            inputs.push(z.mapv(|v| act.apply(v)));
            pre.push(z);
        }
    }
    Trace { inputs, pre, probs }
}

/// Softmax outputs of the model on every row of `batch`.
pub fn forward(params: &ParamVector, batch: ArrayView2<'_, f64>) -> Result<ProbDist> {
    check_batch(params, &batch)?;
    Ok(ProbDist::from_softmax(forward_trace(params, batch).probs))
}

fn backward(params: &ParamVector, trace: &Trace, dlogits: Array2<f64>) -> Vec<f64> {
    let slots = params.arch.slots();
    let act = params.arch.activation();
    let mut grad = vec![0.0; params.len()];
    let mut delta = dlogits;
    for l in (0..slots.len()).rev() {
        let slot = &slots[l];
        let input = &trace.inputs[l];
        let dw = delta.t().dot(input);
        let db = delta.sum_axis(Axis(0));
        grad[slot.weight_offset..slot.bias_offset]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, d)| *g = *d);
        grad[slot.bias_offset..slot.bias_offset + slot.fan_out]
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, d)| *g = *d);
        if l > 0 {
            let w = params.weight_view(slot);
            let mut upstream = delta.dot(&w);
            let z = &trace.pre[l - 1];
            let a = &trace.inputs[l];
            ndarray::Zip::from(&mut upstream)
                .and(z)
                .and(a)
                .for_each(|u, &zv, &av| *u *= act.derivative(zv, av));
            delta = upstream;
        }
    }
    grad
}

/// Runs a forward pass, lets `dlogits` derive the loss gradient with respect
/// to the output logits from the softmax probabilities, then backpropagates
/// it to the flat parameter buffer.
pub fn backprop<F>(
    params: &ParamVector,
    batch: ArrayView2<'_, f64>,
    dlogits: F,
) -> Result<(ProbDist, Vec<f64>)>
where
    F: FnOnce(&Array2<f64>) -> Array2<f64>,
{
    check_batch(params, &batch)?;
    let trace = forward_trace(params, batch);
    let d = dlogits(&trace.probs);
    debug_assert_eq!(d.dim(), trace.probs.dim());
    let grad = backward(params, &trace, d);
    Ok((ProbDist::from_softmax(trace.probs), grad))
}

fn check_one_hot(targets: &ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in targets.outer_iter().enumerate() {
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(invalid(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean over rows of `-sum_c t_c ln p_c`, probabilities floored at 1e-12.
pub fn cross_entropy(targets: ArrayView2<'_, f64>, preds: &ProbDist) -> Result<f64> {
    if targets.dim() != preds.rows.dim() {
        return Err(invalid(format!(
            "targets {:?} and predictions {:?} differ in shape",
            targets.dim(),
            preds.rows.dim()
        )));
    }
    check_one_hot(&targets)?;
    Ok(cross_entropy_unchecked(targets, &preds.rows))
}

pub(crate) fn cross_entropy_unchecked(targets: ArrayView2<'_, f64>, probs: &Array2<f64>) -> f64 {
    let n = targets.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = targets
        .iter()
        .zip(probs.iter())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| -t * p.max(PROB_FLOOR).ln())
        .sum();
    total / n as f64
}

/// Mean over rows of `sum_c p_c ln(p_c / q_c)`; `q` floored at 1e-12.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_shape(q)?;
    Ok(kl_unchecked(&p.rows, &q.rows))
}

pub(crate) fn kl_unchecked(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let n = p.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .zip(q.iter())
        .filter(|(pc, _)| **pc > 0.0)
        .map(|(pc, qc)| pc * (pc / qc.max(PROB_FLOOR)).ln())
        .sum();
    (total / n as f64).max(0.0)
}

/// Rows with a single 1 at the argmax, lowest column on ties.
pub fn one_hot(dist: &ProbDist) -> Array2<f64> {
    let mut out = Array2::zeros(dist.rows.dim());
    for i in 0..dist.n_rows() {
        out[[i, dist.argmax(i)]] = 1.0;
    }
    out
}

/// One-hot matrix from class indices.
pub fn one_hot_labels(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        out[[i, c]] = 1.0;
    }
    out
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(preds: &ProbDist, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| preds.argmax(*i) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// The losses with an analytic gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    KlToReference,
    L1,
    SquaredL2,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "kl" | "kl_to_reference" => Ok(LossKind::KlToReference),
            "l1" => Ok(LossKind::L1),
            "squared_l2" | "l2" => Ok(LossKind::SquaredL2),
            other => Err(invalid(format!("unknown loss `{other}`"))),
        }
    }
}

/// A loss together with the data it is evaluated on.
#[derive(Clone, Debug)]
pub enum LossSpec<'a> {
    /// Mean cross-entropy of the model's predictions on `batch` against
    /// `targets`.
    CrossEntropy {
        batch: ArrayView2<'a, f64>,
        targets: ArrayView2<'a, f64>,
    },
    /// `KL(reference || model)` averaged over rows; the reference is frozen.
    KlToReference {
        batch: ArrayView2<'a, f64>,
        reference: &'a ProbDist,
    },
    /// `||params||_1`.
    L1,
    /// `||anchor - params||^2`, differentiated with respect to `params`.
    SquaredL2 { anchor: &'a [f64] },
}

impl LossSpec<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::CrossEntropy { .. } => LossKind::CrossEntropy,
            LossSpec::KlToReference { .. } => LossKind::KlToReference,
            LossSpec::L1 => LossKind::L1,
            LossSpec::SquaredL2 { .. } => LossKind::SquaredL2,
        }
    }
}

/// Loss value and its gradient with respect to every entry of `params`.
pub fn loss_and_gradient(spec: &LossSpec<'_>, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
    match spec {
        LossSpec::CrossEntropy { batch, targets } => {
            if targets.nrows() != batch.nrows() || targets.ncols() != params.arch.num_classes() {
                return Err(invalid("targets do not match batch rows and class count"));
            }
            let n = batch.nrows().max(1) as f64;
            let (probs, grad) = backprop(params, batch.view(), |p| (p - targets) / n)?;
            Ok((cross_entropy_unchecked(targets.view(), &probs.rows), grad))
        }
        LossSpec::KlToReference { batch, reference } => {
            if reference.rows.nrows() != batch.nrows()
                || reference.n_classes() != params.arch.num_classes()
            {
                return Err(invalid("reference does not match batch rows and class count"));
            }
            let n = batch.nrows().max(1) as f64;
            let (probs, grad) = backprop(params, batch.view(), |p| (p - &reference.rows) / n)?;
            Ok((kl_unchecked(&reference.rows, &probs.rows), grad))
        }
        LossSpec::L1 => {
            let value = params.values.iter().map(|v| v.abs()).sum();
            let grad = params.values.iter().map(|v| sign(*v)).collect();
            Ok((value, grad))
        }
        LossSpec::SquaredL2 { anchor } => {
            if anchor.len() != params.len() {
                return Err(invalid("anchor length differs from params"));
            }
            let value = anchor
                .iter()
                .zip(&params.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let grad = anchor
                .iter()
                .zip(&params.values)
                .map(|(a, b)| 2.0 * (b - a))
                .collect();
            Ok((value, grad))
        }
    }
}

pub fn gradient(spec: &LossSpec<'_>, params: &ParamVector) -> Result<Vec<f64>> {
    loss_and_gradient(spec, params).map(|(_, g)| g)
}

pub fn loss_value(spec: &LossSpec<'_>, params: &ParamVector) -> Result<f64> {
    match spec {
        LossSpec::CrossEntropy { batch, targets } => {
            let probs = forward(params, batch.view())?;
            if targets.dim() != probs.rows.dim() {
                return Err(invalid("targets do not match predictions"));
            }
            Ok(cross_entropy_unchecked(targets.view(), &probs.rows))
        }
        LossSpec::KlToReference { batch, reference } => {
            let probs = forward(params, batch.view())?;
            reference.check_same_shape(&probs)?;
            Ok(kl_unchecked(&reference.rows, &probs.rows))
        }
        _ => loss_and_gradient(spec, params).map(|(v, _)| v),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
