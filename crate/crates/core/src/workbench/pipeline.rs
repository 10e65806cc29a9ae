//! The experiment pipeline, as library calls. Each stage can persist its
//! outputs to a run directory so the command-line steps can be chained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{Analysis, ExperimentConfig, Method};
use super::dataset;
use super::manifest::Manifest;
use super::report::*;
use crate::adapt::{self, AdaptConfig, AdaptOutcome, TrainableLayer, UnlabeledTask};
use crate::analysis::{self, CorrelationInputs};
use crate::loss::{LossKind, Target};
use crate::merge::{compute_task_vector, CoefficientMatrix, MergedAssembly, TaskVector};
use crate::nn::{LayerParams, LayerSlot, ParamSet, TaskId};
use crate::seed::sub_seed;
use crate::taskgen::{corrupt, gen_suite, CorruptionSpec, TaskData, TaskSuite};
use crate::theory::{self, EvalData, ModelFamily, Prop1Instance};
use crate::{Error, Result};

pub const SUITE_FILE: &str = "suite.bin";
pub const BASE_FILE: &str = "base.ckpt";
pub const MERGE_FILE: &str = "merge.json";
pub const LAYERS_FILE: &str = "layers.bin";
pub const MERGED_FILE: &str = "merged.ckpt";
/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MERGELAB_OUT";

pub fn expert_file(task: TaskId) -> String {
    format!("expert.{task}.ckpt")
}

/// `$MERGELAB_OUT`, or `./runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn generate(cfg: &ExperimentConfig) -> Result<TaskSuite> {
    gen_suite(&cfg.resolved().suite)
}

/// The shared pre-trained model and one fine-tuned expert per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub base: ParamSet,
    pub experts: BTreeMap<TaskId, ParamSet>,
}

impl Models {
    pub fn task_vectors(&self) -> Result<Vec<TaskVector>> {
        self.experts
            .iter()
            .map(|(&t, e)| compute_task_vector(t, e, &self.base))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_checkpoint(&self.base, &dir.join(BASE_FILE))?;
        for (&t, e) in &self.experts {
            checkpoint::save_checkpoint(e, &dir.join(expert_file(t)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, suite: &TaskSuite) -> Result<Self> {
        let base = checkpoint::load_checkpoint(&dir.join(BASE_FILE))?;
        let experts = suite
            .ids()
            .into_iter()
            .map(|t| Ok((t, checkpoint::load_checkpoint(&dir.join(expert_file(t)))?)))
            .collect::<Result<_>>()?;
        Ok(Models { base, experts })
    }
}

pub fn train_models(cfg: &ExperimentConfig, suite: &TaskSuite) -> Result<Models> {
    let cfg = cfg.resolved();
    info!("pretraining base model");
    let base = adapt::build_base(suite, &cfg.pretrain)?;
    info!("fine-tuning {} experts", suite.tasks.len());
    let experts = adapt::finetune_all(&base, suite, &cfg.finetune)?;
    Ok(Models { base, experts })
}

/// What a merging method produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    /// `None` for individual experts.
    pub assembly: Option<MergedAssembly>,
    pub outcome: Option<AdaptOutcome>,
}

/// On-disk record of a merge: the method and its coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub method: Method,
    pub coeffs: CoefficientMatrix,
}

/// Method of the merge saved in `dir`, if any.
pub fn recorded_method(dir: &Path) -> Result<Option<Method>> {
    let path = dir.join(MERGE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let rec: MergeRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    Ok(Some(rec.method))
}

impl MethodRun {
    /// Parameters used for `task`: the expert itself, or the merged encoder
    /// with the task's swapped-in layers.
    pub fn task_params(&self, models: &Models, task: TaskId) -> Result<ParamSet> {
        match &self.assembly {
            None => models
                .experts
                .get(&task)
                .cloned()
                .ok_or(Error::UnknownTask(task)),
            Some(asm) => asm.task_params(task),
        }
    }

    pub fn coeffs(&self) -> Option<&CoefficientMatrix> {
        self.assembly.as_ref().map(|a| &a.coeffs)
    }

    /// One checkpoint holding the merged encoder and every task's head.
    /// Only possible when no encoder layer is task-specific.
    pub fn merged_checkpoint(&self) -> Result<ParamSet> {
        let asm = self.assembly.as_ref().ok_or_else(|| {
            Error::Unsupported("individual experts have no merged checkpoint".into())
        })?;
        let encoder = asm.materialize()?;
        let mut heads = asm.pre.heads.clone();
        for (t, layers) in &asm.trainable {
            for (slot, l) in layers {
                match slot {
                    LayerSlot::Head => {
                        heads.insert(*t, l.clone());
                    }
                    LayerSlot::Encoder(_) => {
                        return Err(Error::Unsupported(
                            "task-specific encoder layers do not fit one checkpoint".into(),
                        ))
                    }
                }
            }
        }
        ParamSet::new(encoder, heads)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(asm) = &self.assembly {
            let rec = MergeRecord {
                method: self.method,
                coeffs: asm.coeffs.clone(),
            };
            std::fs::write(
                dir.join(MERGE_FILE),
                serde_json::to_string_pretty(&rec)? + "\n",
            )?;
            std::fs::write(
                dir.join(LAYERS_FILE),
                checkpoint::encode_trained_layers(&asm.trainable),
            )?;
            if let Ok(p) = self.merged_checkpoint() {
                checkpoint::save_checkpoint(&p, &dir.join(MERGED_FILE))?;
            }
        }
        Ok(())
    }

    /// Reads a saved merge for `method` from `dir`, if one is there.
    pub fn load(dir: &Path, method: Method, models: &Models) -> Result<Option<Self>> {
        if method == Method::Individual {
            return Ok(Some(MethodRun {
                method,
                assembly: None,
                outcome: None,
            }));
        }
        let path = dir.join(MERGE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let rec: MergeRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if rec.method != method {
            return Ok(None);
        }
        let trainable = checkpoint::decode_trained_layers(&std::fs::read(dir.join(LAYERS_FILE))?)?;
        let asm = MergedAssembly::new(models.base.clone(), models.task_vectors()?, rec.coeffs)?
            .with_trainable(trainable)?;
        Ok(Some(MethodRun {
            method,
            assembly: Some(asm),
            outcome: None,
        }))
    }
}

/// Self-labeling teachers: `θ_pre + α·τ_k` with the expert's head. `α = 1`
/// returns the experts themselves.
pub fn supervisors(models: &Models, alpha: f64) -> Result<BTreeMap<TaskId, ParamSet>> {
    if alpha == 1.0 {
        return Ok(models.experts.clone());
    }
    models
        .experts
        .iter()
        .map(|(&t, e)| {
            let tv = compute_task_vector(t, e, &models.base)?;
            let encoder = tv.apply_to(&models.base.encoder, alpha)?;
            let heads = BTreeMap::from([(t, e.head(t)?.clone())]);
            Ok((t, ParamSet::new(encoder, heads)?))
        })
        .collect()
}

fn fixed_assembly(models: &Models, vectors: &[TaskVector], lambda: f64) -> Result<MergedAssembly> {
    MergedAssembly::new(
        models.base.clone(),
        vectors.to_vec(),
        CoefficientMatrix::for_vectors(vectors, lambda),
    )
}

/// Task arithmetic with an explicit λ, regardless of the config's `ta_lambda`.
pub fn task_arithmetic(models: &Models, lambda: f64) -> Result<MethodRun> {
    Ok(MethodRun {
        method: Method::TaskArithmetic,
        assembly: Some(fixed_assembly(models, &models.task_vectors()?, lambda)?),
        outcome: None,
    })
}

fn entropy_config(cfg: &AdaptConfig) -> AdaptConfig {
    AdaptConfig {
        trainable_layer: TrainableLayer::None,
        train_coeffs: true,
        ..cfg.clone()
    }
}

pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    suite: &TaskSuite,
    models: &Models,
) -> Result<MethodRun> {
    run_method_on(cfg, method, &suite.tasks, models)
}

/// Like [`run_method`], but adaptive methods see the test inputs of `tasks`,
/// which may be a shifted copy of the suite.
pub fn run_method_on(
    cfg: &ExperimentConfig,
    method: Method,
    tasks: &[TaskData],
    models: &Models,
) -> Result<MethodRun> {
    let cfg = cfg.resolved();
    let vectors = models.task_vectors()?;
    let unlabeled = UnlabeledTask::test_inputs(tasks);
    let (assembly, outcome) = match method {
        Method::Individual => (None, None),
        Method::WeightAvg => (
            Some(fixed_assembly(
                models,
                &vectors,
                1.0 / vectors.len() as f64,
            )?),
            None,
        ),
        Method::TaskArithmetic => (Some(fixed_assembly(models, &vectors, cfg.ta_lambda)?), None),
        Method::Adamerging => {
            info!("entropy adaptation for {} iterations", cfg.adapt.iterations);
            let out = adapt::adamerging_entropy(
                &models.base,
                &vectors,
                &unlabeled,
                &entropy_config(&cfg.adapt),
            )?;
            (
                Some(out.clone().into_assembly(&models.base, &vectors)?),
                Some(out),
            )
        }
        Method::Symerge => {
            info!(
                "self-labeled merge training for {} iterations",
                cfg.adapt.iterations
            );
            let teachers = supervisors(models, cfg.supervisor_coeff)?;
            let out = adapt::symerge(&models.base, &vectors, &teachers, &unlabeled, &cfg.adapt)?;
            (
                Some(out.clone().into_assembly(&models.base, &vectors)?),
                Some(out),
            )
        }
    };
    Ok(MethodRun {
        method,
        assembly,
        outcome,
    })
}

fn corruption_name(c: &CorruptionSpec) -> String {
    format!("{}@{}", c.kind.name(), c.severity)
}

/// Per-task test scores of `run` on the clean test splits, then on each
/// corrupted copy. Adaptive methods are re-adapted on the corrupted inputs,
/// as a test-time method would be.
pub fn eval_rows(
    cfg: &ExperimentConfig,
    manifest: &str,
    suite: &TaskSuite,
    models: &Models,
    run: &MethodRun,
) -> Result<Vec<EvalRow>> {
    let cfg = cfg.resolved();
    let mut rows = Vec::new();
    let mut push = |split: &str, tasks: &[TaskData], run: &MethodRun| -> Result<()> {
        for t in tasks {
            let params = run.task_params(models, t.id)?;
            rows.push(EvalRow {
                manifest: manifest.to_string(),
                method: run.method.name().into(),
                task: t.id.0,
                split: split.to_string(),
                metric: if t.kind.is_classification() {
                    "accuracy"
                } else {
                    "mean_l1"
                }
                .into(),
                value: analysis::evaluate(&params, t.id, &t.test)?,
            });
        }
        Ok(())
    };
    push("clean", &suite.tasks, run)?;
    for c in &cfg.corruptions {
        let shifted = corrupted_tasks(&cfg, suite, c)?;
        if run.method.is_adaptive() {
            push(
                &corruption_name(c),
                &shifted,
                &run_method_on(&cfg, run.method, &shifted, models)?,
            )?;
        } else {
            push(&corruption_name(c), &shifted, run)?;
        }
    }
    Ok(rows)
}

/// The suite's tasks with corrupted test splits. Train splits are untouched.
pub fn corrupted_tasks(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    spec: &CorruptionSpec,
) -> Result<Vec<TaskData>> {
    let name = corruption_name(spec);
    suite
        .tasks
        .iter()
        .map(|t| {
            let s = sub_seed(cfg.seed, &format!("corrupt/{name}/{}", t.id));
            Ok(TaskData {
                test: corrupt(&t.test, spec, s)?,
                ..t.clone()
            })
        })
        .collect()
}

/// Evaluates a single checkpoint on every task of the suite.
pub fn eval_checkpoint(
    manifest: &str,
    label: &str,
    suite: &TaskSuite,
    params: &ParamSet,
) -> Result<Vec<EvalRow>> {
    suite
        .tasks
        .iter()
        .map(|t| {
            Ok(EvalRow {
                manifest: manifest.to_string(),
                method: label.to_string(),
                task: t.id.0,
                split: "clean".into(),
                metric: if t.kind.is_classification() {
                    "accuracy"
                } else {
                    "mean_l1"
                }
                .into(),
                value: analysis::evaluate(params, t.id, &t.test)?,
            })
        })
        .collect()
}

/// Runs every analysis `cfg` asks for.
pub fn run_analyses(
    cfg: &ExperimentConfig,
    manifest: &str,
    suite: &TaskSuite,
    models: &Models,
    run: &MethodRun,
) -> Result<Reports> {
    let cfg = cfg.resolved();
    let m = || manifest.to_string();
    let vectors = models.task_vectors()?;
    let mut reports = Reports::default();
    let wants = |a: Analysis| cfg.analyses.contains(&a);
    let unlabeled = UnlabeledTask::test_inputs(&suite.tasks);

    if wants(Analysis::Eval) {
        reports.eval = Some(eval_rows(&cfg, manifest, suite, models, run)?);
    }

    if wants(Analysis::CrossMatrix) {
        let encoders: Vec<Vec<LayerParams>> = suite
            .ids()
            .iter()
            .map(|t| models.experts[t].encoder.clone())
            .collect();
        let heads: Vec<(TaskId, LayerParams)> = suite
            .ids()
            .iter()
            .map(|&t| Ok((t, models.base.head(t)?.clone())))
            .collect::<Result<_>>()?;
        let tests: Vec<_> = suite.tasks.iter().map(|t| &t.test).collect();
        let cm = analysis::cross_task_matrix(&encoders, &heads, &tests)?;
        let by_task: BTreeMap<TaskId, Vec<LayerParams>> =
            suite.ids().into_iter().zip(encoders).collect();
        let head_map: BTreeMap<TaskId, LayerParams> = heads.into_iter().collect();
        let test_map = suite.tasks.iter().map(|t| (t.id, &t.test)).collect();
        let points = analysis::pair_merge_study(&by_task, &head_map, &test_map)?;
        let mut rows = Vec::new();
        for (i, &ti) in cm.tasks.iter().enumerate() {
            for (j, &tj) in cm.tasks.iter().enumerate() {
                let pair = points
                    .iter()
                    .find(|p| p.encoder_task == ti && p.head_task == tj);
                rows.push(CrossRow {
                    manifest: m(),
                    encoder_task: ti.0,
                    head_task: tj.0,
                    accuracy: cm.get(i, j),
                    pair_merge_accuracy: pair.map_or(cm.get(i, j), |p| p.merged),
                });
            }
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.cross, p.merged)).unzip();
        let (rho, error) = match analysis::spearman(&xs, &ys) {
            Ok(r) => (Some(r), String::new()),
            Err(e) => (None, e.to_string()),
        };
        reports.cross_merge = Some(vec![CrossMergeRow {
            manifest: m(),
            pairs: points.len(),
            rho,
            error,
        }]);
        reports.cross_matrix = Some(rows);
    }

    if wants(Analysis::Transfer) {
        let asm = run
            .assembly
            .as_ref()
            .ok_or_else(|| Error::Unsupported("transfer needs a merged model".into()))?;
        let mut trained = models.base.heads.clone();
        for (t, layers) in &asm.trainable {
            if let Some(h) = layers.get(&LayerSlot::Head) {
                trained.insert(*t, h.clone());
            }
        }
        let tests = suite.tasks.iter().map(|t| (t.id, &t.test)).collect();
        let ta = CoefficientMatrix::for_vectors(&vectors, cfg.ta_lambda);
        let mut rows = Vec::new();
        for (label, heads) in [("baseline", &models.base.heads), ("symerge", &trained)] {
            let s = analysis::transfer_metrics(&models.base.encoder, &vectors, &ta, heads, &tests)?;
            rows.push(TransferRow {
                manifest: m(),
                heads: label.into(),
                merged: s.merged,
                cross: s.cross,
            });
        }
        reports.transfer = Some(rows);
    }

    if wants(Analysis::Correlation) {
        let initial = fixed_assembly(models, &vectors, cfg.ta_lambda)?;
        let ent = match (run.method, &run.assembly) {
            (Method::Adamerging, Some(a)) => a.clone(),
            _ => adapt::adamerging_entropy(
                &models.base,
                &vectors,
                &unlabeled,
                &entropy_config(&cfg.adapt),
            )?
            .into_assembly(&models.base, &vectors)?,
        };
        let slf = match (run.method, &run.assembly) {
            (Method::Symerge, Some(a)) => a.clone(),
            _ => adapt::symerge(
                &models.base,
                &vectors,
                &supervisors(models, cfg.supervisor_coeff)?,
                &unlabeled,
                &cfg.adapt,
            )?
            .into_assembly(&models.base, &vectors)?,
        };
        let report = analysis::loss_correlation_report(
            CorrelationInputs {
                initial: &initial,
                adapted_entropy: &ent,
                adapted_self: &slf,
            },
            &models.experts,
            &suite.tasks,
            cfg.correlation_batch.unwrap_or(cfg.adapt.batch_size),
        )?;
        reports.correlation = Some(
            report
                .cells
                .into_iter()
                .map(|c| CorrelationRow {
                    manifest: m(),
                    task: c.task.0,
                    proxy: c.proxy.name().into(),
                    weights: c.weights.name().into(),
                    rho: c.rho,
                    error: c.error.unwrap_or_default(),
                })
                .collect(),
        );
    }

    if wants(Analysis::Discrepancy) {
        let mut rows = Vec::new();
        for t in &suite.tasks {
            let labels = t
                .test
                .labels
                .classes()
                .ok_or_else(|| Error::Unsupported("discrepancy needs class labels".into()))?;
            let merged_params = run.task_params(models, t.id)?;
            let merged = analysis::predict_labels(&merged_params.network(t.id)?, &t.test.inputs)?;
            let expert =
                analysis::predict_labels(&models.experts[&t.id].network(t.id)?, &t.test.inputs)?;
            let d = analysis::discrepancy(&merged, &expert, labels)?;
            rows.push(DiscrepancyRow {
                manifest: m(),
                method: run.method.name().into(),
                task: t.id.0,
                n: d.n,
                fails: d.fails,
                gains: d.gains,
                net: d.net(),
                merged_accuracy: analysis::evaluate(&merged_params, t.id, &t.test)?,
                expert_accuracy: analysis::evaluate(&models.experts[&t.id], t.id, &t.test)?,
            });
        }
        reports.discrepancy = Some(rows);
    }

    if wants(Analysis::Sparsity) {
        let coeffs = run
            .coeffs()
            .ok_or_else(|| Error::Unsupported("sparsity needs merging coefficients".into()))?;
        let s = analysis::sparsity_report(coeffs, analysis::SPARSITY_THRESHOLD);
        let mut rows = vec![SparsityRow {
            manifest: m(),
            method: run.method.name().into(),
            threshold: s.threshold,
            scope: "all".into(),
            fraction: s.overall,
        }];
        for (l, f) in s.per_layer.iter().enumerate() {
            rows.push(SparsityRow {
                manifest: m(),
                method: run.method.name().into(),
                threshold: s.threshold,
                scope: LayerSlot::Encoder(l).to_string(),
                fraction: *f,
            });
        }
        reports.sparsity = Some(rows);
    }

    if wants(Analysis::Prop1) {
        let mut rows = Vec::new();
        for ti in &suite.tasks {
            for tj in &suite.tasks {
                if ti.id == tj.id {
                    continue;
                }
                let labels = tj
                    .test
                    .labels
                    .classes()
                    .ok_or_else(|| Error::Unsupported("prop1 needs class labels".into()))?;
                let inst = Prop1Instance {
                    family: ModelFamily::Nonlinear,
                    theta_0: models.base.encoder.clone(),
                    theta_i: models.experts[&ti.id].encoder.clone(),
                    theta_j: models.experts[&tj.id].encoder.clone(),
                    head: models.base.head(tj.id)?.clone(),
                    data: EvalData {
                        inputs: tj.test.inputs.clone(),
                        target: Target::Labels(labels.to_vec()),
                        loss: LossKind::CrossEntropyHard,
                    },
                };
                let r = theory::prop1_verify(&inst)?;
                rows.push(Prop1Row {
                    manifest: m(),
                    task_i: ti.id.0,
                    task_j: tj.id.0,
                    family: "nonlinear".into(),
                    ctl_max: r.ctl_residual.max,
                    ctl_mean: r.ctl_residual.mean,
                    loss_pre: r.loss_pre,
                    loss_i: r.loss_i,
                    loss_j: r.loss_j,
                    loss_merge: r.loss_merge,
                    bound_jensen: r.bound_jensen,
                    jensen_holds: r.jensen_holds,
                    bound_disentangled: r.bound_disentangled,
                    bound_synergy: r.bound_synergy,
                    eps: r.eps,
                    classification: r.classification.name().into(),
                });
            }
        }
        reports.prop1 = Some(rows);
    }

    if wants(Analysis::Pilot) {
        let individual: BTreeMap<TaskId, Vec<LayerParams>> = models
            .experts
            .iter()
            .map(|(&t, e)| (t, e.encoder.clone()))
            .collect();
        let mut rows = Vec::new();
        for &lambda in &cfg.pilot_lambdas {
            let merged =
                crate::merge::merge_task_arithmetic(&models.base.encoder, &vectors, lambda)?;
            let g = adapt::pilot_two_stage(
                &merged,
                &models.base.heads,
                &suite.tasks,
                &individual,
                &cfg.pilot,
            )?;
            for (i, &ti) in g.tasks.iter().enumerate() {
                for (j, &tj) in g.tasks.iter().enumerate() {
                    rows.push(PilotRow {
                        manifest: m(),
                        lambda,
                        encoder_task: ti.0,
                        head_task: tj.0,
                        baseline: g.baseline[(i, j)],
                        retrained: g.retrained[(i, j)],
                        gain: g.gains[(i, j)],
                    });
                }
            }
        }
        reports.pilot = Some(rows);
    }

    Ok(reports)
}

/// Everything one in-process run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub manifest_hash: String,
    pub suite: TaskSuite,
    pub models: Models,
    pub run: MethodRun,
    pub reports: Reports,
}

/// Generation, training, merging and analysis in one call. Writes the
/// manifest and reports when `cfg.output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let manifest = Manifest::new("analyze", cfg);
    let hash = manifest.hash()?;
    let suite = generate(cfg)?;
    let models = train_models(cfg, &suite)?;
    let run = run_method(cfg, cfg.method, &suite, &models)?;
    let reports = run_analyses(cfg, &hash, &suite, &models, &run)?;
    if let Some(dir) = &cfg.output_dir {
        manifest.write(dir)?;
        reports.write(dir)?;
    }
    Ok(RunOutput {
        manifest,
        manifest_hash: hash,
        suite,
        models,
        run,
        reports,
    })
}

/// Loads whatever earlier steps left in `dir` and computes the rest.
pub fn analyze_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<(String, Reports)> {
    cfg.validate()?;
    let manifest = Manifest::new("analyze", cfg);
    let hash = manifest.hash()?;
    let suite_path = dir.join(SUITE_FILE);
    let suite = if suite_path.exists() {
        dataset::load_suite(&suite_path)?
    } else {
        generate(cfg)?
    };
    let models = if dir.join(BASE_FILE).exists() {
        Models::load(dir, &suite)?
    } else {
        train_models(cfg, &suite)?
    };
    let run = match MethodRun::load(dir, cfg.method, &models)? {
        Some(r) => r,
        None => run_method(cfg, cfg.method, &suite, &models)?,
    };
    let reports = run_analyses(cfg, &hash, &suite, &models, &run)?;
    manifest.write(dir)?;
    reports.write(dir)?;
    Ok((hash, reports))
}
