//! Evaluation and diagnostics over frozen models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, Matrix};
use crate::loss::{self, LossKind, Target};
use crate::merge::{CoefficientMatrix, MergedAssembly, TaskVector};
use crate::nn::{Activation, LayerParams, Network, ParamSet, TaskId};
use crate::taskgen::{Labels, Split, TaskData};
use crate::{Error, Result};

/// Default magnitude below which a merging coefficient counts as pruned.
pub const SPARSITY_THRESHOLD: f64 = 1e-5;

pub fn predict_labels(net: &Network<'_>, inputs: &Matrix) -> Result<Vec<usize>> {
    Ok(net.forward(inputs)?.iter_rows().map(argmax).collect())
}

/// Accuracy for classification splits, mean per-sample L1 error for regression splits.
pub fn evaluate_network(net: &Network<'_>, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let out = net.forward(&split.inputs)?;
    match &split.labels {
        Labels::Classes(labels) => {
            if out.cols() <= labels.iter().copied().max().unwrap_or(0) {
                return Err(Error::shape(
                    "head has fewer outputs than the split has classes",
                ));
            }
            let hits = out
                .iter_rows()
                .zip(labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok(hits as f64 / labels.len() as f64)
        }
        Labels::Values(v) => loss::loss_eval(&out, &Target::Vectors(v.clone()), LossKind::L1),
    }
}

pub fn evaluate(params: &ParamSet, task: TaskId, split: &Split) -> Result<f64> {
    evaluate_network(&params.network(task)?, split)
}

pub fn evaluate_assembly(asm: &MergedAssembly, task: TaskId, split: &Split) -> Result<f64> {
    let merged = asm.materialize()?;
    evaluate_network(&asm.task_network(task, &merged)?, split)
}

pub fn evaluate_encoder_head(
    encoder: &[LayerParams],
    head: &LayerParams,
    split: &Split,
) -> Result<f64> {
    evaluate_network(&encoder_head_network(encoder, head)?, split)
}

pub(crate) fn encoder_head_network<'a>(
    encoder: &'a [LayerParams],
    head: &'a LayerParams,
) -> Result<Network<'a>> {
    let mut layers: Vec<&LayerParams> = encoder.iter().collect();
    layers.push(head);
    Network::new(layers, Activation::Tanh)
}

/// Entry `(i, j)`: encoder `i` with head `j`, evaluated on task `j`'s test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskMatrix {
    pub tasks: Vec<TaskId>,
    pub values: Matrix,
}

impl CrossTaskMatrix {
    pub fn get(&self, encoder: usize, head: usize) -> f64 {
        self.values[(encoder, head)]
    }

    /// Mean over `i ≠ j`.
    pub fn off_diagonal_mean(&self) -> f64 {
        let k = self.tasks.len();
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    sum += self.values[(i, j)];
                }
            }
        }
        sum / (k * (k - 1)).max(1) as f64
    }
}

pub fn cross_task_matrix(
    encoders: &[Vec<LayerParams>],
    heads: &[(TaskId, LayerParams)],
    tests: &[&Split],
) -> Result<CrossTaskMatrix> {
    let k = encoders.len();
    if heads.len() != k || tests.len() != k {
        return Err(Error::shape(format!(
            "{k} encoders, {} heads, {} test sets",
            heads.len(),
            tests.len()
        )));
    }
    let mut values = Matrix::zeros(k, k);
    for (i, enc) in encoders.iter().enumerate() {
        for (j, ((_, head), test)) in heads.iter().zip(tests).enumerate() {
            values[(i, j)] = evaluate_encoder_head(enc, head, test)?;
        }
    }
    Ok(CrossTaskMatrix {
        tasks: heads.iter().map(|(t, _)| *t).collect(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferScores {
    pub merged: f64,
    pub cross: f64,
}

/// `merged`: the fully merged encoder with every task's head, averaged over tasks.
/// `cross`: encoder `θ_pre + λ_i∘τ_i` with head `j` on task `j`, averaged over ordered pairs `i ≠ j`.
pub fn transfer_metrics(
    pre: &[LayerParams],
    vectors: &[TaskVector],
    coeffs: &CoefficientMatrix,
    heads: &BTreeMap<TaskId, LayerParams>,
    tests: &BTreeMap<TaskId, &Split>,
) -> Result<TransferScores> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::Undefined(
            "cross score needs at least two tasks".into(),
        ));
    }
    let head = |t: TaskId| heads.get(&t).ok_or(Error::UnknownTask(t));
    let test = |t: TaskId| tests.get(&t).copied().ok_or(Error::UnknownTask(t));

    let merged_enc = crate::merge::merge_layerwise(pre, vectors, coeffs)?;
    let mut merged = 0.0;
    for v in vectors {
        merged += evaluate_encoder_head(&merged_enc, head(v.task)?, test(v.task)?)?;
    }
    merged /= k as f64;

    let mut cross = 0.0;
    for (i, vi) in vectors.iter().enumerate() {
        let single = vi.apply_layerwise(pre, coeffs.row(i))?;
        for vj in vectors.iter().filter(|v| v.task != vi.task) {
            cross += evaluate_encoder_head(&single, head(vj.task)?, test(vj.task)?)?;
        }
    }
    cross /= (k * (k - 1)) as f64;
    Ok(TransferScores { merged, cross })
}

/// One ordered pair `(a, b)`: encoder `a` with head `b`, and the plain
/// average of encoders `a` and `b` with head `b`, both on task `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMergePoint {
    pub encoder_task: TaskId,
    pub head_task: TaskId,
    pub cross: f64,
    pub merged: f64,
}

/// Cross-task accuracy against two-model merge accuracy over every ordered
/// pair of distinct tasks. Heads are the original ones, never retrained.
pub fn pair_merge_study(
    encoders: &BTreeMap<TaskId, Vec<LayerParams>>,
    heads: &BTreeMap<TaskId, LayerParams>,
    tests: &BTreeMap<TaskId, &Split>,
) -> Result<Vec<PairMergePoint>> {
    let mut points = Vec::new();
    for (&a, enc_a) in encoders {
        for (&b, enc_b) in encoders {
            if a == b {
                continue;
            }
            let head = heads.get(&b).ok_or(Error::UnknownTask(b))?;
            let test = tests.get(&b).copied().ok_or(Error::UnknownTask(b))?;
            if enc_a.len() != enc_b.len() {
                return Err(Error::shape("encoders differ in depth"));
            }
            let avg: Vec<LayerParams> = enc_a
                .iter()
                .zip(enc_b)
                .map(|(x, y)| {
                    let mut m = x.scaled(0.5);
                    m.axpy(0.5, y)?;
                    Ok(m)
                })
                .collect::<Result<_>>()?;
            points.push(PairMergePoint {
                encoder_task: a,
                head_task: b,
                cross: evaluate_encoder_head(enc_a, head, test)?,
                merged: evaluate_encoder_head(&avg, head, test)?,
            });
        }
    }
    Ok(points)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's ρ: the Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "{} vs {} observations",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined(
            "spearman needs at least two observations".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN observation"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero rank variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proxy {
    Entropy,
    SelfCe,
    /// The ground-truth loss itself; a control.
    GroundTruthCe,
}

impl Proxy {
    pub fn name(self) -> &'static str {
        match self {
            Proxy::Entropy => "entropy",
            Proxy::SelfCe => "self_ce",
            Proxy::GroundTruthCe => "gt_ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsStage {
    Initial,
    Adapted,
}

impl WeightsStage {
    pub fn name(self) -> &'static str {
        match self {
            WeightsStage::Initial => "initial",
            WeightsStage::Adapted => "adapted",
        }
    }
}

/// `(proxy, ground-truth CE)` for consecutive batches of `split`. The last
/// partial batch is kept. `expert` supplies self-labels for [`Proxy::SelfCe`].
pub fn batch_loss_pairs(
    net: &Network<'_>,
    expert: Option<&Network<'_>>,
    split: &Split,
    batch_size: usize,
    proxy: Proxy,
) -> Result<Vec<(f64, f64)>> {
    let labels = split
        .labels
        .classes()
        .ok_or_else(|| Error::Unsupported("loss correlation needs class labels".into()))?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let logits = net.forward(&split.inputs)?;
    let expert_labels = match (proxy, expert) {
        (Proxy::SelfCe, Some(e)) => Some(predict_labels(e, &split.inputs)?),
        (Proxy::SelfCe, None) => return Err(Error::invalid("self-CE proxy needs an expert")),
        _ => None,
    };
    let idx: Vec<usize> = (0..split.len()).collect();
    idx.chunks(batch_size)
        .map(|chunk| {
            let out = logits.select_rows(chunk);
            let gt = Target::Labels(chunk.iter().map(|&i| labels[i]).collect());
            let gt_loss = loss::loss_eval(&out, &gt, LossKind::CrossEntropyHard)?;
            let p = match proxy {
                Proxy::Entropy => loss::loss_eval(&out, &Target::None, LossKind::Entropy)?,
                Proxy::GroundTruthCe => gt_loss,
                Proxy::SelfCe => {
                    let el = expert_labels.as_ref().expect("checked above");
                    let t = Target::Labels(chunk.iter().map(|&i| el[i]).collect());
                    loss::loss_eval(&out, &t, LossKind::CrossEntropyHard)?
                }
            };
            Ok((p, gt_loss))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub task: TaskId,
    pub proxy: Proxy,
    pub weights: WeightsStage,
    /// `None` when ρ is undefined; `error` then says why.
    pub rho: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub cells: Vec<CorrelationCell>,
}

impl CorrelationReport {
    pub fn rho(&self, task: TaskId, proxy: Proxy, weights: WeightsStage) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.proxy == proxy && c.weights == weights)
            .and_then(|c| c.rho)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> = self.cells.iter().map(|c| c.task).collect();
        t.dedup();
        t
    }
}

/// The three models a correlation study compares: the starting merge, the
/// entropy-adapted merge and the self-label-adapted merge.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationInputs<'a> {
    pub initial: &'a MergedAssembly,
    pub adapted_entropy: &'a MergedAssembly,
    pub adapted_self: &'a MergedAssembly,
}

/// Spearman ρ between each proxy loss and the ground-truth CE over test
/// batches, before and after adaptation. Ground-truth labels are read here
/// only. Regression tasks are skipped.
pub fn loss_correlation_report(
    models: CorrelationInputs<'_>,
    experts: &BTreeMap<TaskId, ParamSet>,
    tasks: &[TaskData],
    batch_size: usize,
) -> Result<CorrelationReport> {
    let initial = models.initial.materialize()?;
    let ent = models.adapted_entropy.materialize()?;
    let slf = models.adapted_self.materialize()?;
    let mut cells = Vec::new();
    for task in tasks.iter().filter(|t| t.kind.is_classification()) {
        if task.test.len().div_ceil(batch_size.max(1)) < 2 {
            return Err(Error::Undefined(format!(
                "task {} has fewer than two test batches",
                task.id
            )));
        }
        let expert = experts
            .get(&task.id)
            .ok_or(Error::UnknownTask(task.id))?
            .network(task.id)?;
        let plan = [
            (
                Proxy::Entropy,
                WeightsStage::Initial,
                models.initial,
                &initial,
            ),
            (
                Proxy::Entropy,
                WeightsStage::Adapted,
                models.adapted_entropy,
                &ent,
            ),
            (
                Proxy::SelfCe,
                WeightsStage::Initial,
                models.initial,
                &initial,
            ),
            (
                Proxy::SelfCe,
                WeightsStage::Adapted,
                models.adapted_self,
                &slf,
            ),
        ];
        for (proxy, weights, asm, enc) in plan {
            let net = asm.task_network(task.id, enc)?;
            let pairs = batch_loss_pairs(&net, Some(&expert), &task.test, batch_size, proxy)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (rho, error) = match spearman(&xs, &ys) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(CorrelationCell {
                task: task.id,
                proxy,
                weights,
                rho,
                error,
            });
        }
    }
    Ok(CorrelationReport { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub n: usize,
    /// Expert right, merged wrong.
    pub fails: usize,
    /// Merged right, expert wrong.
    pub gains: usize,
}

impl DiscrepancyReport {
    pub fn net(&self) -> i64 {
        self.fails as i64 - self.gains as i64
    }
}

pub fn discrepancy(
    merged: &[usize],
    expert: &[usize],
    labels: &[usize],
) -> Result<DiscrepancyReport> {
    if merged.len() != expert.len() || merged.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} merged, {} expert, {} labels",
            merged.len(),
            expert.len(),
            labels.len()
        )));
    }
    let mut r = DiscrepancyReport {
        n: labels.len(),
        fails: 0,
        gains: 0,
    };
    for ((&m, &e), &y) in merged.iter().zip(expert).zip(labels) {
        match (m == y, e == y) {
            (false, true) => r.fails += 1,
            (true, false) => r.gains += 1,
            _ => {}
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub overall: f64,
    pub per_layer: Vec<f64>,
}

/// Fraction of `|λ| < threshold`, overall and per encoder layer.
pub fn sparsity_report(coeffs: &CoefficientMatrix, threshold: f64) -> SparsityReport {
    let k = coeffs.num_tasks();
    let layers = coeffs.num_layers();
    let small = |v: f64| v.abs() < threshold;
    let total = coeffs.values().len();
    let overall = if total == 0 {
        0.0
    } else {
        coeffs.values().iter().filter(|&&v| small(v)).count() as f64 / total as f64
    };
    let per_layer = (0..layers)
        .map(|l| {
            if k == 0 {
                0.0
            } else {
                (0..k).filter(|&t| small(coeffs.get(t, l))).count() as f64 / k as f64
            }
        })
        .collect();
    SparsityReport {
        threshold,
        overall,
        per_layer,
    }
}
