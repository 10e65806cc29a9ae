//! Feed-forward engine: an encoder of `tanh` layers followed by one linear
//! head per task, with exact reverse-mode gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix};
use crate::loss::{self, LossKind, Target};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One affine layer, `y = W x + b` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape(format!(
                "weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(LayerParams { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LayerParams {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Gaussian init scaled by `1/sqrt(in_dim)`, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        LayerParams {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    /// `X Wᵀ + b` for a batch `X` (rows are samples).
    pub fn apply(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = inputs.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Weights then bias, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.extend_flat(&mut flat);
        flat
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    /// Overwrites parameters from `flat`, returning how many values were consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let n = self.num_params();
        if flat.len() < n {
            return Err(Error::shape(format!("need {n} values, got {}", flat.len())));
        }
        let w = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&flat[..w]);
        self.bias.copy_from_slice(&flat[w..n]);
        Ok(n)
    }

    /// Inner product over weights and bias together.
    pub fn dot(&self, other: &LayerParams) -> f64 {
        self.weight.frobenius_dot(&other.weight) + dot(&self.bias, &other.bias)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &LayerParams) -> Result<()> {
        self.ensure_same_shape(other)?;
        self.weight.axpy(alpha, &other.weight)?;
        axpy(&mut self.bias, alpha, &other.bias);
        Ok(())
    }

    pub fn sub(&self, other: &LayerParams) -> Result<LayerParams> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> LayerParams {
        let mut out = self.clone();
        out.weight.scale(s);
        out.bias.iter_mut().for_each(|b| *b *= s);
        out
    }

    pub fn zeros_like(&self) -> LayerParams {
        LayerParams::zeros(self.out_dim(), self.in_dim())
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LayerParams) -> Result<()> {
        if self.shape() != other.shape() || self.bias.len() != other.bias.len() {
            return Err(Error::shape(format!(
                "layer {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Encoder nonlinearity. `Tanh` is the engine's single activation; it is
/// smooth everywhere, so no subgradient convention is needed. `Identity`
/// exists for the linear model family used by the bound checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply_in_place(self, m: &mut Matrix) {
        if let Activation::Tanh = self {
            m.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Addresses one layer of a per-task network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSlot {
    Encoder(usize),
    Head,
}

impl fmt::Display for LayerSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSlot::Encoder(i) => write!(f, "encoder.{i}"),
            LayerSlot::Head => write!(f, "head"),
        }
    }
}

/// A full model: shared encoder plus one head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub encoder: Vec<LayerParams>,
    pub heads: BTreeMap<TaskId, LayerParams>,
}

/// Gradients share the parameter tree's shape.
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new(encoder: Vec<LayerParams>, heads: BTreeMap<TaskId, LayerParams>) -> Result<Self> {
        let p = ParamSet { encoder, heads };
        p.validate()?;
        Ok(p)
    }

    /// Random init for an encoder with widths `dims` (input first) and one
    /// head per `(task, out_dim)`.
    pub fn random(dims: &[usize], heads: &[(TaskId, usize)], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(
                "encoder needs an input and at least one layer width",
            ));
        }
        let encoder = dims
            .windows(2)
            .map(|w| LayerParams::random(w[1], w[0], rng))
            .collect();
        let feat = *dims.last().unwrap();
        let heads = heads
            .iter()
            .map(|&(t, out)| (t, LayerParams::random(out, feat, rng)))
            .collect();
        ParamSet::new(encoder, heads)
    }

    pub fn validate(&self) -> Result<()> {
        validate_encoder(&self.encoder)?;
        let feat = self.feature_dim();
        for (t, head) in &self.heads {
            if let Some(feat) = feat {
                if head.in_dim() != feat {
                    return Err(Error::shape(format!(
                        "head {t} takes {} inputs but the encoder emits {feat}",
                        head.in_dim()
                    )));
                }
            }
            if head.bias.len() != head.out_dim() {
                return Err(Error::shape(format!("head {t} bias length")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.encoder.first().map(LayerParams::in_dim)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.encoder.last().map(LayerParams::out_dim)
    }

    pub fn head(&self, task: TaskId) -> Result<&LayerParams> {
        self.heads.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.heads.keys().copied()
    }

    pub fn layer(&self, task: TaskId, slot: LayerSlot) -> Result<&LayerParams> {
        match slot {
            LayerSlot::Head => self.head(task),
            LayerSlot::Encoder(i) => self
                .encoder
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no encoder layer {i}"))),
        }
    }

    pub fn network(&self, task: TaskId) -> Result<Network<'_>> {
        let mut layers: Vec<&LayerParams> = self.encoder.iter().collect();
        layers.push(self.head(task)?);
        Network::new(layers, Activation::Tanh)
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            encoder: self.encoder.iter().map(LayerParams::zeros_like).collect(),
            heads: self
                .heads
                .iter()
                .map(|(&t, h)| (t, h.zeros_like()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(LayerParams::num_params).sum()
    }

    /// Encoder layers in order, then heads in task order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.encoder.iter().chain(self.heads.values())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            layer.extend_flat(&mut flat);
        }
        flat
    }

    pub fn read_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in self.encoder.iter_mut().chain(self.heads.values_mut()) {
            offset += layer.read_flat(&flat[offset..])?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(LayerParams::is_finite)
    }
}

pub(crate) fn validate_encoder(encoder: &[LayerParams]) -> Result<()> {
    for (i, layer) in encoder.iter().enumerate() {
        if layer.bias.len() != layer.out_dim() {
            return Err(Error::shape(format!("encoder layer {i} bias length")));
        }
    }
    for (i, pair) in encoder.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::shape(format!(
                "encoder layer {i} emits {} values but layer {} takes {}",
                pair[0].out_dim(),
                i + 1,
                pair[1].in_dim()
            )));
        }
    }
    Ok(())
}

/// A borrowed chain of layers; the last one is the head and has no activation.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    layers: Vec<&'a LayerParams>,
    activation: Activation,
}

impl<'a> Network<'a> {
    pub fn new(layers: Vec<&'a LayerParams>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Network { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "inputs have {} features, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Outputs of every layer; entry 0 is the input batch and the last entry the logits.
    fn activations(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        self.check_inputs(inputs)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(acts.last().unwrap())?;
            if i < last {
                self.activation.apply_in_place(&mut z);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.activations(inputs)?.pop().unwrap())
    }

    /// Output of the layer just below the head.
    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut acts = self.activations(inputs)?;
        acts.pop();
        Ok(acts.pop().unwrap())
    }

    /// Loss of `forward(inputs)` against `target`, with its gradient for every
    /// layer (same order as the layers).
    pub fn backward(
        &self,
        inputs: &Matrix,
        target: &Target,
        kind: LossKind,
    ) -> Result<(f64, Vec<LayerParams>)> {
        let acts = self.activations(inputs)?;
        let (value, d_out) = loss::loss_with_grad(acts.last().unwrap(), target, kind)?;
        let grads = self.backprop(&acts, d_out)?;
        Ok((value, grads))
    }

    fn backprop(&self, acts: &[Matrix], mut delta: Matrix) -> Result<Vec<LayerParams>> {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let layer = self.layers[i];
            let prev = &acts[i];
            let weight = delta.transpose_matmul(prev)?;
            let bias = delta.column_sums();
            if i > 0 {
                let mut d_prev = delta.matmul(&layer.weight)?;
                for (d, &y) in d_prev.as_mut_slice().iter_mut().zip(prev.as_slice()) {
                    *d *= self.activation.derivative_from_output(y);
                }
                delta = d_prev;
            }
            grads.push(LayerParams { weight, bias });
        }
        grads.reverse();
        Ok(grads)
    }
}

/// Logits of `task`'s head on top of the shared encoder.
pub fn forward(params: &ParamSet, task: TaskId, inputs: &Matrix) -> Result<Matrix> {
    params.network(task)?.forward(inputs)
}

/// Loss and exact gradients with respect to every parameter of `params`.
/// Heads other than `task`'s receive zero gradient.
pub fn backward(
    params: &ParamSet,
    task: TaskId,
    inputs: &Matrix,
    target: &Target,
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    let net = params.network(task)?;
    let (value, mut layer_grads) = net.backward(inputs, target, kind)?;
    let head_grad = layer_grads.pop().unwrap();
    let mut grads = params.zeros_like();
    grads.encoder = layer_grads;
    grads.heads.insert(task, head_grad);
    Ok((value, grads))
}
