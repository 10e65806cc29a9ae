//! Training loops: building the shared base model, expert fine-tuning,
//! entropy-driven coefficient adaptation, joint self-labeled merge training
//! and the two-stage head-retraining probe.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{encoder_head_network, evaluate_network};
use crate::linalg::Matrix;
use crate::loss::{self, LossKind, Target};
use crate::merge::{
    coefficient_grad, CoefficientMatrix, MergedAssembly, TaskVector, TrainedLayers,
};
use crate::nn::{Activation, LayerParams, LayerSlot, Network, ParamSet, TaskId};
use crate::optim::AdamState;
use crate::seed::{self, Rng};
use crate::taskgen::{gen_pretrain_split, Labels, Split, TaskData, TaskKind, TaskSuite};
use crate::{Error, Result};

/// Which per-task layer is trained alongside the merging coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableLayer {
    #[default]
    Head,
    EncoderIndex(usize),
    None,
    /// Layers `start..end` of the per-task network, where index `L−1` (the
    /// encoder length) is the head. A diagnostic mode.
    Multi {
        start: usize,
        end: usize,
    },
}

impl TrainableLayer {
    pub fn slots(&self, encoder_layers: usize) -> Result<Vec<LayerSlot>> {
        let unified = |i: usize| {
            if i == encoder_layers {
                LayerSlot::Head
            } else {
                LayerSlot::Encoder(i)
            }
        };
        match *self {
            TrainableLayer::Head => Ok(vec![LayerSlot::Head]),
            TrainableLayer::None => Ok(vec![]),
            TrainableLayer::EncoderIndex(i) if i < encoder_layers => {
                Ok(vec![LayerSlot::Encoder(i)])
            }
            TrainableLayer::EncoderIndex(i) => Err(Error::config(
                "trainable_layer",
                format!("encoder index {i} out of range for {encoder_layers} layers"),
            )),
            TrainableLayer::Multi { start, end } if start < end && end <= encoder_layers + 1 => {
                Ok((start..end).map(unified).collect())
            }
            TrainableLayer::Multi { start, end } => Err(Error::config(
                "trainable_layer",
                format!(
                    "layer range {start}..{end} invalid for {} layers",
                    encoder_layers + 1
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Step right after each task's batch.
    #[default]
    Sequential,
    /// Sum every task's loss over one pass, then step once.
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrder {
    #[default]
    ShuffledEachPass,
    Fixed,
}

/// Coefficient initialization: 0.3, or 0.1 for suites of more than eight tasks.
pub fn default_init_coeff(num_tasks: usize) -> f64 {
    if num_tasks > 8 {
        0.1
    } else {
        0.3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Passes over the task list; every pass draws one batch per task.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_coeffs: f64,
    pub lr_layer: f64,
    pub init_coeff: f64,
    pub trainable_layer: TrainableLayer,
    /// Off for the layer-only ablation.
    pub train_coeffs: bool,
    pub filter_enabled: bool,
    pub update_mode: UpdateMode,
    pub task_order: TaskOrder,
    /// Self-labeling loss for classification tasks; regression tasks always use L1.
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 500,
            batch_size: 32,
            lr_coeffs: 0.001,
            lr_layer: 0.01,
            init_coeff: 0.3,
            trainable_layer: TrainableLayer::Head,
            train_coeffs: true,
            filter_enabled: true,
            update_mode: UpdateMode::Sequential,
            task_order: TaskOrder::ShuffledEachPass,
            loss: LossKind::CrossEntropyHard,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.lr_coeffs.is_nan() || self.lr_coeffs <= 0.0 {
            return Err(Error::config("lr_coeffs", "must be positive"));
        }
        if self.lr_layer.is_nan() || self.lr_layer <= 0.0 {
            return Err(Error::config("lr_layer", "must be positive"));
        }
        if !self.init_coeff.is_finite() {
            return Err(Error::config("init_coeff", "must be finite"));
        }
        self.trainable_layer.slots(encoder_layers)?;
        Ok(())
    }
}

/// Cycles through a shuffled permutation of `0..n`, reshuffling on wrap-around.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCycler {
    fn new(n: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchCycler { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let take = size.min(n);
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn supervised_target(labels: &Labels) -> (Target, LossKind) {
    match labels {
        Labels::Classes(c) => (Target::Labels(c.clone()), LossKind::CrossEntropyHard),
        Labels::Values(v) => (Target::Vectors(v.clone()), LossKind::L2),
    }
}

fn flatten<'a>(layers: impl IntoIterator<Item = &'a LayerParams>) -> Vec<f64> {
    let mut flat = Vec::new();
    for l in layers {
        l.extend_flat(&mut flat);
    }
    flat
}

fn unflatten<'a>(
    layers: impl IntoIterator<Item = &'a mut LayerParams>,
    flat: &[f64],
) -> Result<()> {
    let mut offset = 0;
    for l in layers {
        offset += l.read_flat(&flat[offset..])?;
    }
    Ok(())
}

/// Minibatch Adam on the supervised loss of `task`. Returns the mean batch
/// loss of every epoch.
fn train_supervised(
    params: &mut ParamSet,
    task: TaskId,
    split: &Split,
    opts: &TrainOptions,
    train_encoder: bool,
    train_head: bool,
) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    params.head(task)?;
    let (target, kind) = supervised_target(&split.labels);
    let n_enc = params.encoder.len();
    let trained = |i: usize| if i < n_enc { train_encoder } else { train_head };
    if !(train_encoder || train_head) || opts.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut num_params = if train_head {
        params.head(task)?.num_params()
    } else {
        0
    };
    if train_encoder {
        num_params += params
            .encoder
            .iter()
            .map(LayerParams::num_params)
            .sum::<usize>();
    }
    let mut adam = AdamState::new(num_params);
    let mut rng = seed::rng(opts.seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let inputs = split.inputs.select_rows(chunk);
            let t = target.select(chunk);
            let (value, grads) = params.network(task)?.backward(&inputs, &t, kind)?;
            total += value;
            batches += 1;
            let flat_grads = flatten(
                grads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| trained(*i))
                    .map(|(_, g)| g),
            );
            let mut layers: Vec<&mut LayerParams> = Vec::new();
            if train_encoder {
                layers.extend(params.encoder.iter_mut());
            }
            if train_head {
                layers.push(params.heads.get_mut(&task).expect("checked above"));
            }
            let mut flat = flatten(layers.iter().map(|l| &**l));
            adam.step(&mut flat, &flat_grads, opts.lr)?;
            unflatten(layers, &flat)?;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrainOptions {
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Heads stay at their pre-trained values unless set.
    pub train_head: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 0.005,
            batch_size: 32,
            train_head: false,
            seed: 0,
        }
    }
}

/// Fine-tunes the encoder (and optionally the head) of `pre` on one task's
/// labeled training split. Returns the expert and its per-epoch training loss.
pub fn finetune_expert(
    pre: &ParamSet,
    task: TaskId,
    train: &Split,
    cfg: &FinetuneConfig,
) -> Result<(ParamSet, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut expert = pre.clone();
    let opts = TrainOptions {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let history = train_supervised(&mut expert, task, train, &opts, true, cfg.train_head)?;
    Ok((expert, history))
}

/// Fine-tunes one expert per task with per-task sub-seeds.
pub fn finetune_all(
    pre: &ParamSet,
    suite: &TaskSuite,
    cfg: &FinetuneConfig,
) -> Result<BTreeMap<TaskId, ParamSet>> {
    suite
        .tasks
        .iter()
        .map(|t| {
            let cfg = FinetuneConfig {
                seed: seed::sub_seed(cfg.seed, &format!("finetune/{}", t.id)),
                ..cfg.clone()
            };
            let (expert, _) = finetune_expert(pre, t.id, &t.train, &cfg)?;
            Ok((t.id, expert))
        })
        .collect()
}

/// Trains a head on frozen features, starting from `init`.
pub fn fit_head(
    features: &Matrix,
    labels: &Labels,
    init: &LayerParams,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed_value: u64,
) -> Result<LayerParams> {
    let split = Split::new(features.clone(), labels.clone())?;
    let (target, kind) = supervised_target(&split.labels);
    let mut head = init.clone();
    let mut adam = AdamState::new(head.num_params());
    let mut rng = seed::rng(seed_value);
    let mut order: Vec<usize> = (0..split.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let x = split.inputs.select_rows(chunk);
            let t = target.select(chunk);
            let net = Network::new(vec![&head], Activation::Identity)?;
            let (_, grads) = net.backward(&x, &t, kind)?;
            let mut flat = head.to_flat();
            adam.step(&mut flat, &grads[0].to_flat(), lr)?;
            head.read_flat(&flat)?;
        }
    }
    Ok(head)
}

/// How the shared pre-trained model is produced: an encoder trained on an
/// auxiliary classification problem drawn from the suite's shared subspace,
/// then one linear probe head per task fitted on its frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Labeled examples per task the probe heads see; `None` uses the whole
    /// training split. Small values give weak, zero-shot-like heads.
    pub probe_samples: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: vec![32, 32],
            classes: 8,
            samples: 2048,
            epochs: 10,
            lr: 0.005,
            batch_size: 32,
            probe_epochs: 10,
            probe_lr: 0.01,
            probe_samples: None,
            seed: 0,
        }
    }
}

pub fn build_base(suite: &TaskSuite, cfg: &PretrainConfig) -> Result<ParamSet> {
    if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
        return Err(Error::config(
            "pretrain.hidden",
            "needs at least one positive width",
        ));
    }
    let aux = TaskId(u32::MAX);
    let mut dims = vec![suite.input_dim()];
    dims.extend(&cfg.hidden);
    let mut rng = seed::named_rng(cfg.seed, "base/init");
    let mut base = ParamSet::random(&dims, &[(aux, cfg.classes)], &mut rng)?;
    let data = gen_pretrain_split(&suite.config, cfg.classes, cfg.samples)?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: seed::sub_seed(cfg.seed, "base/train"),
    };
    train_supervised(&mut base, aux, &data, &opts, true, true)?;
    base.heads.clear();

    let feat = *cfg.hidden.last().unwrap();
    for t in &suite.tasks {
        let mut hr = seed::named_rng(cfg.seed, &format!("base/head/{}", t.id));
        let init = LayerParams::random(t.kind.output_dim(), feat, &mut hr);
        let n = cfg
            .probe_samples
            .unwrap_or(t.train.len())
            .min(t.train.len());
        let probe_split = t.train.select(&(0..n).collect::<Vec<_>>());
        let feats = encoder_head_network(&base.encoder, &LayerParams::zeros(1, feat))?
            .features(&probe_split.inputs)?;
        let head = fit_head(
            &feats,
            &probe_split.labels,
            &init,
            cfg.probe_epochs,
            cfg.probe_lr,
            cfg.batch_size,
            seed::sub_seed(cfg.seed, &format!("base/probe/{}", t.id)),
        )?;
        base.heads.insert(t.id, head);
    }
    base.validate()?;
    Ok(base)
}

/// Targets produced by a frozen expert on unlabeled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfLabelBatch {
    pub inputs: Matrix,
    pub targets: Target,
    /// Top-1 softmax probability; `None` for regression.
    pub expert_confidence: Option<Vec<f64>>,
}

/// Hard argmax labels plus confidences for classification, raw outputs for regression.
pub fn make_self_labels(
    expert: &ParamSet,
    task: TaskId,
    kind: TaskKind,
    inputs: &Matrix,
) -> Result<SelfLabelBatch> {
    let logits = expert.network(task)?.forward(inputs)?;
    let (targets, expert_confidence) =
        self_label_targets(&logits, kind, LossKind::CrossEntropyHard)?;
    Ok(SelfLabelBatch {
        inputs: inputs.clone(),
        targets,
        expert_confidence,
    })
}

/// Converts expert outputs into the target form `loss` expects.
fn self_label_targets(
    logits: &Matrix,
    kind: TaskKind,
    loss: LossKind,
) -> Result<(Target, Option<Vec<f64>>)> {
    match kind {
        TaskKind::Regression { .. } => Ok((Target::Vectors(logits.clone()), None)),
        TaskKind::Classification { .. } => {
            let (labels, conf) = loss::top1(logits);
            let target = match loss {
                LossKind::CrossEntropyHard => Target::Labels(labels),
                LossKind::CrossEntropySoft | LossKind::Kl | LossKind::Js => {
                    Target::Distributions(loss::softmax(logits))
                }
                LossKind::L1 | LossKind::L2 | LossKind::SmoothL1 | LossKind::Cosine => {
                    Target::Vectors(logits.clone())
                }
                LossKind::Entropy => {
                    return Err(Error::Unsupported(
                        "entropy is not a self-labeling loss; use adamerging_entropy".into(),
                    ))
                }
            };
            Ok((target, Some(conf)))
        }
    }
}

/// `true` keeps a sample: the merged model is no more confident than the expert.
pub fn confidence_filter(merged_conf: &[f64], expert_conf: &[f64]) -> Result<Vec<bool>> {
    if merged_conf.len() != expert_conf.len() {
        return Err(Error::shape(format!(
            "{} merged confidences vs {} expert confidences",
            merged_conf.len(),
            expert_conf.len()
        )));
    }
    Ok(merged_conf
        .iter()
        .zip(expert_conf)
        .map(|(m, e)| m <= e)
        .collect())
}

/// Unlabeled inputs of one task, as seen at test time.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledTask<'a> {
    pub id: TaskId,
    pub kind: TaskKind,
    pub inputs: &'a Matrix,
}

impl<'a> UnlabeledTask<'a> {
    pub fn test_inputs(tasks: &'a [TaskData]) -> Vec<UnlabeledTask<'a>> {
        tasks
            .iter()
            .map(|t| UnlabeledTask {
                id: t.id,
                kind: t.kind,
                inputs: &t.test.inputs,
            })
            .collect()
    }
}

/// One task's batch within one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub task: TaskId,
    pub drawn: usize,
    pub kept: usize,
    /// Loss on the kept samples before the update; `None` when everything was filtered.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub coeffs: CoefficientMatrix,
    pub layers: BTreeMap<TaskId, TrainedLayers>,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

impl AdaptOutcome {
    pub fn into_assembly(self, pre: &ParamSet, vectors: &[TaskVector]) -> Result<MergedAssembly> {
        MergedAssembly::new(pre.clone(), vectors.to_vec(), self.coeffs)?.with_trainable(self.layers)
    }

    /// Mean loss over `task`'s steps whose iteration falls in `range`.
    pub fn mean_loss(&self, task: TaskId, range: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.task == task && range.contains(&s.iteration))
            .filter_map(|s| s.loss)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

enum Objective<'a> {
    Entropy,
    SelfLabel(&'a BTreeMap<TaskId, ParamSet>),
}

/// Per-task precomputed supervision over the whole unlabeled stream.
struct TaskSupervision {
    target: Target,
    confidence: Option<Vec<f64>>,
    loss: LossKind,
}

/// Learns layer-wise coefficients by minimizing the mean prediction entropy
/// of the merged model on unlabeled test batches. Heads stay frozen.
pub fn adamerging_entropy(
    pre: &ParamSet,
    vectors: &[TaskVector],
    tasks: &[UnlabeledTask<'_>],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    if cfg.trainable_layer != TrainableLayer::None {
        return Err(Error::config(
            "trainable_layer",
            "entropy adaptation trains coefficients only; set it to none",
        ));
    }
    if let Some(t) = tasks.iter().find(|t| !t.kind.is_classification()) {
        return Err(Error::Unsupported(format!(
            "entropy is undefined for regression task {}",
            t.id
        )));
    }
    run_adaptation(pre, vectors, tasks, cfg, Objective::Entropy)
}

/// Joint optimization of the merging coefficients and one task-specific layer
/// per task, supervised by the frozen experts' predictions on unlabeled inputs.
pub fn symerge(
    pre: &ParamSet,
    vectors: &[TaskVector],
    experts: &BTreeMap<TaskId, ParamSet>,
    tasks: &[UnlabeledTask<'_>],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    for t in tasks {
        if !experts.contains_key(&t.id) {
            return Err(Error::invalid(format!("missing expert for task {}", t.id)));
        }
    }
    run_adaptation(pre, vectors, tasks, cfg, Objective::SelfLabel(experts))
}

fn run_adaptation(
    pre: &ParamSet,
    vectors: &[TaskVector],
    tasks: &[UnlabeledTask<'_>],
    cfg: &AdaptConfig,
    objective: Objective<'_>,
) -> Result<AdaptOutcome> {
    let n_enc = pre.encoder.len();
    cfg.validate(n_enc)?;
    let slots = cfg.trainable_layer.slots(n_enc)?;
    let coeffs = CoefficientMatrix::for_vectors(vectors, cfg.init_coeff);
    let mut asm = MergedAssembly::new(pre.clone(), vectors.to_vec(), coeffs)?;

    let mut supervision = Vec::with_capacity(tasks.len());
    for t in tasks {
        pre.head(t.id)?;
        if t.inputs.rows() == 0 {
            return Err(Error::invalid(format!("task {} has no inputs", t.id)));
        }
        supervision.push(match &objective {
            Objective::Entropy => TaskSupervision {
                target: Target::None,
                confidence: None,
                loss: LossKind::Entropy,
            },
            Objective::SelfLabel(experts) => {
                let expert = &experts[&t.id];
                let logits = expert.network(t.id)?.forward(t.inputs)?;
                let loss = if t.kind.is_classification() {
                    cfg.loss
                } else {
                    LossKind::L1
                };
                let (target, confidence) = self_label_targets(&logits, t.kind, loss)?;
                TaskSupervision {
                    target,
                    confidence,
                    loss,
                }
            }
        });
        if let Objective::SelfLabel(experts) = &objective {
            let expert = &experts[&t.id];
            let layers: TrainedLayers = slots
                .iter()
                .map(|&s| Ok((s, expert.layer(t.id, s)?.clone())))
                .collect::<Result<_>>()?;
            if !layers.is_empty() {
                asm.trainable.insert(t.id, layers);
            }
        }
    }
    asm.validate()?;

    let mut coeff_adam = AdamState::new(asm.coeffs.values().len());
    let mut layer_adams: Vec<AdamState> = tasks
        .iter()
        .map(|t| {
            let n = asm
                .trainable
                .get(&t.id)
                .map_or(0, |l| l.values().map(LayerParams::num_params).sum());
            AdamState::new(n)
        })
        .collect();
    let mut cyclers: Vec<BatchCycler> = tasks
        .iter()
        .map(|t| {
            BatchCycler::new(
                t.inputs.rows(),
                seed::named_rng(cfg.seed, &format!("adapt/batches/{}", t.id)),
            )
        })
        .collect();
    let mut order_rng = seed::named_rng(cfg.seed, "adapt/order");
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut steps = Vec::with_capacity(cfg.iterations * tasks.len());
    let mut warnings = Vec::new();

    for it in 0..cfg.iterations {
        if cfg.task_order == TaskOrder::ShuffledEachPass {
            order.shuffle(&mut order_rng);
        }
        let mut agg_coeff = vec![0.0; asm.coeffs.values().len()];
        let mut agg_layers: Vec<Option<Vec<f64>>> = vec![None; tasks.len()];
        let mut any_update = false;
        for &ti in &order {
            let task = &tasks[ti];
            let sup = &supervision[ti];
            let idx = cyclers[ti].next(cfg.batch_size);
            let merged = asm.materialize()?;
            let net = asm.task_network(task.id, &merged)?;
            let inputs = task.inputs.select_rows(&idx);

            let kept: Vec<usize> = match (&sup.confidence, cfg.filter_enabled) {
                (Some(expert_conf), true) => {
                    let (_, merged_conf) = loss::top1(&net.forward(&inputs)?);
                    let ec: Vec<f64> = idx.iter().map(|&i| expert_conf[i]).collect();
                    confidence_filter(&merged_conf, &ec)?
                        .into_iter()
                        .enumerate()
                        .filter_map(|(i, keep)| keep.then_some(i))
                        .collect()
                }
                _ => (0..idx.len()).collect(),
            };
            let mut record = StepRecord {
                iteration: it,
                task: task.id,
                drawn: idx.len(),
                kept: kept.len(),
                loss: None,
            };
            if kept.is_empty() {
                steps.push(record);
                continue;
            }
            let rows: Vec<usize> = kept.iter().map(|&i| idx[i]).collect();
            let batch = task.inputs.select_rows(&rows);
            let target = sup.target.select(&rows);
            let (value, grads) = net.backward(&batch, &target, sup.loss)?;
            record.loss = Some(value);
            steps.push(record);
            any_update = true;

            let swaps = asm.trainable.get(&task.id);
            let enc_grads: Vec<LayerParams> = grads[..n_enc]
                .iter()
                .enumerate()
                .map(|(l, g)| {
                    // A swapped-in layer does not depend on the coefficients.
                    if swaps.is_some_and(|s| s.contains_key(&LayerSlot::Encoder(l))) {
                        g.zeros_like()
                    } else {
                        g.clone()
                    }
                })
                .collect();
            let cg = coefficient_grad(&enc_grads, vectors)?;
            let layer_grad = swaps.map(|s| {
                flatten(s.keys().map(|slot| match slot {
                    LayerSlot::Encoder(i) => &grads[*i],
                    LayerSlot::Head => &grads[n_enc],
                }))
            });

            match cfg.update_mode {
                UpdateMode::Sequential => {
                    if cfg.train_coeffs {
                        coeff_adam.step(asm.coeffs.values_mut(), cg.values(), cfg.lr_coeffs)?;
                    }
                    if let Some(g) = layer_grad {
                        step_layers(&mut asm, task.id, &mut layer_adams[ti], &g, cfg.lr_layer)?;
                    }
                }
                UpdateMode::Aggregated => {
                    crate::linalg::axpy(&mut agg_coeff, 1.0, cg.values());
                    agg_layers[ti] = layer_grad;
                }
            }
        }
        if cfg.update_mode == UpdateMode::Aggregated && any_update {
            if cfg.train_coeffs {
                coeff_adam.step(asm.coeffs.values_mut(), &agg_coeff, cfg.lr_coeffs)?;
            }
            for (ti, g) in agg_layers.into_iter().enumerate() {
                if let Some(g) = g {
                    step_layers(
                        &mut asm,
                        tasks[ti].id,
                        &mut layer_adams[ti],
                        &g,
                        cfg.lr_layer,
                    )?;
                }
            }
        }
        if !any_update && !tasks.is_empty() {
            let msg = format!("iteration {it}: every batch was filtered out; no update");
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    Ok(AdaptOutcome {
        coeffs: asm.coeffs,
        layers: asm.trainable,
        steps,
        warnings,
    })
}

fn step_layers(
    asm: &mut MergedAssembly,
    task: TaskId,
    adam: &mut AdamState,
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    let layers = asm
        .trainable
        .get_mut(&task)
        .expect("gradients exist only for trained tasks");
    let mut flat = flatten(layers.values());
    adam.step(&mut flat, grads, lr)?;
    unflatten(layers.values_mut(), &flat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            epochs: 1,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Result of the two-stage probe. Entry `(i, j)` pairs task `i`'s individual
/// encoder with head `j` on task `j`'s test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMatrix {
    pub tasks: Vec<TaskId>,
    pub baseline: Matrix,
    pub retrained: Matrix,
    pub gains: Matrix,
}

impl GainMatrix {
    pub fn mean_off_diagonal_gain(&self) -> f64 {
        let k = self.tasks.len();
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    sum += self.gains[(i, j)];
                }
            }
        }
        sum / (k * (k - 1)).max(1) as f64
    }

    pub fn mean_gain(&self) -> f64 {
        let v = self.gains.as_slice();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Stage 1 retrains every head on frozen `merged_encoder` features with
/// ground-truth labels (starting from `heads`). Stage 2 pairs each retrained
/// head with every task's individual encoder and reports the accuracy change
/// over the original head in the same pairing.
pub fn pilot_two_stage(
    merged_encoder: &[LayerParams],
    heads: &BTreeMap<TaskId, LayerParams>,
    tasks: &[TaskData],
    individual: &BTreeMap<TaskId, Vec<LayerParams>>,
    cfg: &PilotConfig,
) -> Result<GainMatrix> {
    let k = tasks.len();
    let mut retrained = BTreeMap::new();
    for t in tasks {
        if !t.kind.is_classification() {
            return Err(Error::Unsupported(format!(
                "pilot needs class labels (task {})",
                t.id
            )));
        }
        if t.train.is_empty() {
            return Err(Error::invalid(format!(
                "task {} has no labeled training data",
                t.id
            )));
        }
        let head = heads.get(&t.id).ok_or(Error::UnknownTask(t.id))?;
        let feats = encoder_head_network(merged_encoder, head)?.features(&t.train.inputs)?;
        let new_head = fit_head(
            &feats,
            &t.train.labels,
            head,
            cfg.epochs,
            cfg.lr,
            cfg.batch_size,
            seed::sub_seed(cfg.seed, &format!("pilot/{}", t.id)),
        )?;
        retrained.insert(t.id, new_head);
    }
    let mut baseline = Matrix::zeros(k, k);
    let mut after = Matrix::zeros(k, k);
    for (i, ti) in tasks.iter().enumerate() {
        let enc = individual.get(&ti.id).ok_or(Error::UnknownTask(ti.id))?;
        for (j, tj) in tasks.iter().enumerate() {
            let base_net = encoder_head_network(enc, &heads[&tj.id])?;
            let new_net = encoder_head_network(enc, &retrained[&tj.id])?;
            baseline[(i, j)] = evaluate_network(&base_net, &tj.test)?;
            after[(i, j)] = evaluate_network(&new_net, &tj.test)?;
        }
    }
    let gains = after.sub(&baseline)?;
    Ok(GainMatrix {
        tasks: tasks.iter().map(|t| t.id).collect(),
        baseline,
        retrained: after,
        gains,
    })
}
