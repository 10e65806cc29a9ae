//! Task vectors and merge operators.
//!
//! Only encoder layers are merged. Heads always stay task-specific. A single
//! coefficient scales a whole layer delta, weights and bias together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::{validate_encoder, Activation, LayerParams, LayerSlot, Network, ParamSet, TaskId};
use crate::{Error, Result};

/// Per-layer deviation of an expert's encoder from the pre-trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub task: TaskId,
    pub deltas: Vec<LayerParams>,
}

impl TaskVector {
    pub fn num_layers(&self) -> usize {
        self.deltas.len()
    }

    pub fn zeros_like(&self) -> TaskVector {
        TaskVector {
            task: self.task,
            deltas: self.deltas.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// `pre + scale * self`, layer by layer.
    pub fn apply_to(&self, pre: &[LayerParams], scale: f64) -> Result<Vec<LayerParams>> {
        check_layers(pre, &self.deltas)?;
        pre.iter()
            .zip(&self.deltas)
            .map(|(p, d)| {
                let mut out = p.clone();
                out.axpy(scale, d)?;
                Ok(out)
            })
            .collect()
    }

    /// `pre + Σ_l scales[l] * delta[l]` with a separate scale per layer.
    pub fn apply_layerwise(&self, pre: &[LayerParams], scales: &[f64]) -> Result<Vec<LayerParams>> {
        check_layers(pre, &self.deltas)?;
        if scales.len() != pre.len() {
            return Err(Error::shape(format!(
                "{} scales for {} layers",
                scales.len(),
                pre.len()
            )));
        }
        pre.iter()
            .zip(&self.deltas)
            .zip(scales)
            .map(|((p, d), &s)| {
                let mut out = p.clone();
                out.axpy(s, d)?;
                Ok(out)
            })
            .collect()
    }
}

fn check_layers(a: &[LayerParams], b: &[LayerParams]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{} layers vs {} layers",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        x.ensure_same_shape(y)?;
    }
    Ok(())
}

pub fn compute_task_vector(task: TaskId, expert: &ParamSet, pre: &ParamSet) -> Result<TaskVector> {
    check_layers(&expert.encoder, &pre.encoder)?;
    let deltas = expert
        .encoder
        .iter()
        .zip(&pre.encoder)
        .map(|(e, p)| e.sub(p))
        .collect::<Result<_>>()?;
    Ok(TaskVector { task, deltas })
}

/// Elementwise mean of the experts' encoders.
pub fn merge_uniform(experts: &[ParamSet]) -> Result<Vec<LayerParams>> {
    let first = experts
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero experts"))?;
    let mut acc: Vec<LayerParams> = first.encoder.iter().map(LayerParams::zeros_like).collect();
    let w = 1.0 / experts.len() as f64;
    for e in experts {
        check_layers(&acc, &e.encoder)?;
        for (a, l) in acc.iter_mut().zip(&e.encoder) {
            a.axpy(w, l)?;
        }
    }
    Ok(acc)
}

/// `θ_pre + λ Σ_k τ_k` for every encoder layer.
pub fn merge_task_arithmetic(
    pre: &[LayerParams],
    vectors: &[TaskVector],
    lambda: f64,
) -> Result<Vec<LayerParams>> {
    let mut out = pre.to_vec();
    for v in vectors {
        check_layers(pre, &v.deltas)?;
        for (o, d) in out.iter_mut().zip(&v.deltas) {
            o.axpy(lambda, d)?;
        }
    }
    Ok(out)
}

/// Layer-wise merging coefficients, one row per task and one column per encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    tasks: Vec<TaskId>,
    layers: usize,
    values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn constant(tasks: Vec<TaskId>, layers: usize, value: f64) -> Self {
        let values = vec![value; tasks.len() * layers];
        CoefficientMatrix {
            tasks,
            layers,
            values,
        }
    }

    pub fn zeros(tasks: Vec<TaskId>, layers: usize) -> Self {
        Self::constant(tasks, layers, 0.0)
    }

    pub fn from_values(tasks: Vec<TaskId>, layers: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != tasks.len() * layers {
            return Err(Error::shape(format!(
                "{} values for {} tasks × {layers} layers",
                values.len(),
                tasks.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite merging coefficient"));
        }
        Ok(CoefficientMatrix {
            tasks,
            layers,
            values,
        })
    }

    pub fn for_vectors(vectors: &[TaskVector], value: f64) -> Self {
        let layers = vectors.first().map_or(0, TaskVector::num_layers);
        Self::constant(vectors.iter().map(|v| v.task).collect(), layers, value)
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn task_index(&self, task: TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|&t| t == task)
            .ok_or(Error::UnknownTask(task))
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.layers + l]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, value: f64) {
        self.values[k * self.layers + l] = value;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.layers..(k + 1) * self.layers]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &CoefficientMatrix, b: f64) -> Result<Self> {
        if self.tasks != other.tasks || self.layers != other.layers {
            return Err(Error::shape("coefficient matrices differ in shape"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(CoefficientMatrix {
            tasks: self.tasks.clone(),
            layers: self.layers,
            values,
        })
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_vec(self.tasks.len(), self.layers, self.values.clone())
            .expect("shape is an invariant")
    }

    fn check_against(&self, vectors: &[TaskVector], layers: usize) -> Result<()> {
        if self.tasks.len() != vectors.len() {
            return Err(Error::shape(format!(
                "{} coefficient rows for {} task vectors",
                self.tasks.len(),
                vectors.len()
            )));
        }
        if self.layers != layers {
            return Err(Error::shape(format!(
                "{} coefficient columns for {layers} encoder layers",
                self.layers
            )));
        }
        for (t, v) in self.tasks.iter().zip(vectors) {
            if *t != v.task {
                return Err(Error::shape(format!(
                    "coefficient row for task {t} paired with the vector of task {}",
                    v.task
                )));
            }
        }
        Ok(())
    }
}

/// `θ^l = θ_pre^l + Σ_k λ_k^l τ_k^l` for every encoder layer `l`.
pub fn merge_layerwise(
    pre: &[LayerParams],
    vectors: &[TaskVector],
    coeffs: &CoefficientMatrix,
) -> Result<Vec<LayerParams>> {
    coeffs.check_against(vectors, pre.len())?;
    let mut out = pre.to_vec();
    for (k, v) in vectors.iter().enumerate() {
        check_layers(pre, &v.deltas)?;
        for (l, (o, d)) in out.iter_mut().zip(&v.deltas).enumerate() {
            o.axpy(coeffs.get(k, l), d)?;
        }
    }
    Ok(out)
}

/// Chain rule through [`merge_layerwise`]: `∂L/∂λ_k^l = ⟨∂L/∂θ^l, τ_k^l⟩`.
pub fn coefficient_grad(
    encoder_grads: &[LayerParams],
    vectors: &[TaskVector],
) -> Result<CoefficientMatrix> {
    let layers = encoder_grads.len();
    let mut out = CoefficientMatrix::zeros(vectors.iter().map(|v| v.task).collect(), layers);
    for (k, v) in vectors.iter().enumerate() {
        check_layers(encoder_grads, &v.deltas)?;
        for (l, (g, d)) in encoder_grads.iter().zip(&v.deltas).enumerate() {
            out.set(k, l, g.dot(d));
        }
    }
    Ok(out)
}

/// Task-specific layers that replace the merged (or frozen) layer for one task.
pub type TrainedLayers = BTreeMap<LayerSlot, LayerParams>;

/// Pre-trained parameters, task vectors, merging coefficients and per-task
/// replacement layers. Heads default to the pre-trained model's heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedAssembly {
    pub pre: ParamSet,
    pub vectors: Vec<TaskVector>,
    pub coeffs: CoefficientMatrix,
    pub trainable: BTreeMap<TaskId, TrainedLayers>,
}

impl MergedAssembly {
    pub fn new(pre: ParamSet, vectors: Vec<TaskVector>, coeffs: CoefficientMatrix) -> Result<Self> {
        let asm = MergedAssembly {
            pre,
            vectors,
            coeffs,
            trainable: BTreeMap::new(),
        };
        asm.validate()?;
        Ok(asm)
    }

    pub fn validate(&self) -> Result<()> {
        self.coeffs
            .check_against(&self.vectors, self.pre.encoder.len())?;
        for v in &self.vectors {
            check_layers(&self.pre.encoder, &v.deltas)?;
        }
        for (task, layers) in &self.trainable {
            for (slot, layer) in layers {
                self.pre.layer(*task, *slot)?.ensure_same_shape(layer)?;
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.pre.tasks().collect()
    }

    pub fn with_trainable(mut self, trainable: BTreeMap<TaskId, TrainedLayers>) -> Result<Self> {
        self.trainable = trainable;
        self.validate()?;
        Ok(self)
    }

    /// Shared merged encoder θ_MTL.
    pub fn materialize(&self) -> Result<Vec<LayerParams>> {
        let enc = merge_layerwise(&self.pre.encoder, &self.vectors, &self.coeffs)?;
        validate_encoder(&enc)?;
        Ok(enc)
    }

    /// `task`'s network over an already materialized encoder, with its
    /// replacement layers swapped in.
    pub fn task_network<'a>(
        &'a self,
        task: TaskId,
        merged: &'a [LayerParams],
    ) -> Result<Network<'a>> {
        let head = self.pre.head(task)?;
        let swaps = self.trainable.get(&task);
        let pick = |slot: LayerSlot, default: &'a LayerParams| -> &'a LayerParams {
            swaps.and_then(|s| s.get(&slot)).unwrap_or(default)
        };
        let mut layers: Vec<&LayerParams> = merged
            .iter()
            .enumerate()
            .map(|(i, l)| pick(LayerSlot::Encoder(i), l))
            .collect();
        layers.push(pick(LayerSlot::Head, head));
        Network::new(layers, Activation::Tanh)
    }

    pub fn forward(&self, task: TaskId, inputs: &Matrix) -> Result<Matrix> {
        let merged = self.materialize()?;
        self.task_network(task, &merged)?.forward(inputs)
    }

    /// A standalone model for `task`: merged encoder, swaps applied, that task's head only.
    pub fn task_params(&self, task: TaskId) -> Result<ParamSet> {
        let mut encoder = self.materialize()?;
        let mut head = self.pre.head(task)?.clone();
        if let Some(swaps) = self.trainable.get(&task) {
            for (slot, layer) in swaps {
                match slot {
                    LayerSlot::Encoder(i) => encoder[*i] = layer.clone(),
                    LayerSlot::Head => head = layer.clone(),
                }
            }
        }
        ParamSet::new(encoder, BTreeMap::from([(task, head)]))
    }
}
