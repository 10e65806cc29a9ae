//! Synthetic multi-task suites.
//!
//! Every task draws its class prototypes from one shared low-rank subspace.
//! Task `k` sees those prototypes through its own label permutation and a
//! rotation `Q_k(ρ)` that turns every plane of a random orthonormal basis by
//! `ρ·π/2`, so `ρ = 0` gives identical tasks up to labeling and larger `ρ`
//! pushes tasks apart. Samples are prototype plus isotropic Gaussian noise.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::nn::TaskId;
use crate::seed::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { dim: usize },
}

impl TaskKind {
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { dim } => dim,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Values(v) => Labels::Values(v.select_rows(indices)),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Classes(c) => Some(c),
            Labels::Values(_) => None,
        }
    }
}

/// Features and labels of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Labels,
}

impl Split {
    pub fn new(inputs: Matrix, labels: Labels) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Split { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.select(indices),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub id: TaskId,
    pub kind: TaskKind,
    pub train: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub shared_subspace_dim: usize,
    pub task_rotation_strength: f64,
    pub noise_std: f64,
    /// Norm of every class prototype.
    pub class_separation: f64,
    /// The last `regression_tasks` tasks are regression tasks.
    pub regression_tasks: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            tasks: 4,
            classes: 4,
            input_dim: 16,
            train_per_task: 256,
            test_per_task: 256,
            shared_subspace_dim: 6,
            task_rotation_strength: 0.5,
            noise_std: 1.0,
            class_separation: 3.0,
            regression_tasks: 0,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes", self.classes),
            ("input_dim", self.input_dim),
            ("train_per_task", self.train_per_task),
            ("test_per_task", self.test_per_task),
            ("shared_subspace_dim", self.shared_subspace_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.shared_subspace_dim > self.input_dim {
            return Err(Error::config(
                "shared_subspace_dim",
                format!(
                    "{} exceeds input_dim {}",
                    self.shared_subspace_dim, self.input_dim
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.task_rotation_strength) {
            return Err(Error::config(
                "task_rotation_strength",
                "must lie in [0, 1]",
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if !self.class_separation.is_finite() || self.class_separation <= 0.0 {
            return Err(Error::config(
                "class_separation",
                "must be finite and positive",
            ));
        }
        if self.regression_tasks > self.tasks {
            return Err(Error::config("regression_tasks", "exceeds the task count"));
        }
        Ok(())
    }

    pub fn task_kind(&self, k: usize) -> TaskKind {
        if k >= self.tasks - self.regression_tasks {
            TaskKind::Regression { dim: self.classes }
        } else {
            TaskKind::Classification {
                classes: self.classes,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<TaskData>,
}

impl TaskSuite {
    pub fn task(&self, id: TaskId) -> Result<&TaskData> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or(Error::UnknownTask(id))
    }

    pub fn ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `cols` orthonormal columns in `dim` dimensions (Gram-Schmidt on Gaussian draws),
/// returned as a list of column vectors.
fn orthonormal_columns(dim: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Rotation by `angle` in every plane spanned by consecutive pairs of a random
/// orthonormal basis. With an odd dimension the last basis vector is fixed.
fn plane_rotation(dim: usize, angle: f64, rng: &mut Rng) -> Matrix {
    let basis = orthonormal_columns(dim, dim, rng);
    let (s, c) = angle.sin_cos();
    let mut q = Matrix::identity(dim);
    for pair in basis.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        // Q += (c−1)(uuᵀ + vvᵀ) + s(vuᵀ − uvᵀ)
        for r in 0..dim {
            for col in 0..dim {
                q[(r, col)] += (c - 1.0) * (u[r] * u[col] + v[r] * v[col])
                    + s * (v[r] * u[col] - u[r] * v[col]);
            }
        }
    }
    q
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|row| dot(row, v)).collect()
}

/// Points in the span of `basis` with norm `scale`.
fn subspace_prototypes(
    basis: &[Vec<f64>],
    count: usize,
    scale: f64,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    let dim = basis[0].len();
    (0..count)
        .map(|_| {
            let mut p = vec![0.0; dim];
            for b in basis {
                let a = gaussian(rng);
                p.iter_mut().zip(b).for_each(|(x, y)| *x += a * y);
            }
            let n = dot(&p, &p).sqrt().max(1e-12);
            p.iter_mut().for_each(|x| *x *= scale / n);
            p
        })
        .collect()
}

/// Class-balanced labels (counts differ by at most one) in random order.
fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn noisy(center: &[f64], noise_std: f64, rng: &mut Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + noise_std * gaussian(rng))
        .collect()
}

fn classification_split(prototypes: &[Vec<f64>], n: usize, noise_std: f64, rng: &mut Rng) -> Split {
    let labels = balanced_labels(n, prototypes.len(), rng);
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| noisy(&prototypes[c], noise_std, rng))
        .collect();
    Split {
        inputs: Matrix::from_rows(&rows).expect("rows share a width"),
        labels: Labels::Classes(labels),
    }
}

pub fn gen_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let mut basis_rng = seed::named_rng(cfg.seed, "suite/basis");
    let basis = orthonormal_columns(cfg.input_dim, cfg.shared_subspace_dim, &mut basis_rng);
    let shared = subspace_prototypes(&basis, cfg.classes, cfg.class_separation, &mut basis_rng);
    let angle = cfg.task_rotation_strength * std::f64::consts::FRAC_PI_2;

    let tasks = (0..cfg.tasks)
        .map(|k| {
            let id = TaskId(k as u32);
            let kind = cfg.task_kind(k);
            let mut rng = seed::named_rng(cfg.seed, &format!("suite/task/{k}"));
            let rotation = plane_rotation(cfg.input_dim, angle, &mut rng);
            let (train, test) = match kind {
                TaskKind::Classification { classes } => {
                    let mut perm: Vec<usize> = (0..classes).collect();
                    perm.shuffle(&mut rng);
                    let protos: Vec<Vec<f64>> = perm
                        .iter()
                        .map(|&c| mat_vec(&rotation, &shared[c]))
                        .collect();
                    let train =
                        classification_split(&protos, cfg.train_per_task, cfg.noise_std, &mut rng);
                    let test =
                        classification_split(&protos, cfg.test_per_task, cfg.noise_std, &mut rng);
                    (train, test)
                }
                TaskKind::Regression { dim } => {
                    let s = cfg.shared_subspace_dim;
                    let readout =
                        Matrix::from_fn(dim, s, |_, _| gaussian(&mut rng) / (s as f64).sqrt());
                    let mut split = |n: usize| -> Split {
                        let mut xs = Vec::with_capacity(n);
                        let mut ys = Vec::with_capacity(n);
                        for _ in 0..n {
                            let z: Vec<f64> = (0..s).map(|_| gaussian(&mut rng)).collect();
                            let mut clean = vec![0.0; cfg.input_dim];
                            for (a, b) in z.iter().zip(&basis) {
                                let w = a * cfg.class_separation / (s as f64).sqrt();
                                clean.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
                            }
                            xs.push(noisy(&mat_vec(&rotation, &clean), cfg.noise_std, &mut rng));
                            ys.push(mat_vec(&readout, &z));
                        }
                        Split {
                            inputs: Matrix::from_rows(&xs).expect("rows share a width"),
                            labels: Labels::Values(
                                Matrix::from_rows(&ys).expect("rows share a width"),
                            ),
                        }
                    };
                    let train = split(cfg.train_per_task);
                    let test = split(cfg.test_per_task);
                    (train, test)
                }
            };
            TaskData {
                id,
                kind,
                train,
                test,
            }
        })
        .collect();
    Ok(TaskSuite {
        config: cfg.clone(),
        tasks,
    })
}

/// Auxiliary classification data for building the shared pre-trained encoder:
/// fresh prototypes in the same shared subspace, no task rotation.
pub fn gen_pretrain_split(cfg: &SuiteConfig, classes: usize, samples: usize) -> Result<Split> {
    cfg.validate()?;
    if classes == 0 || samples == 0 {
        return Err(Error::config(
            "pretrain",
            "needs at least one class and one sample",
        ));
    }
    let mut basis_rng = seed::named_rng(cfg.seed, "suite/basis");
    let basis = orthonormal_columns(cfg.input_dim, cfg.shared_subspace_dim, &mut basis_rng);
    let mut rng = seed::named_rng(cfg.seed, "suite/pretrain");
    let protos = subspace_prototypes(&basis, classes, cfg.class_separation, &mut rng);
    Ok(classification_split(
        &protos,
        samples,
        cfg.noise_std,
        &mut rng,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureMask,
    ContrastScale,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureMask,
        CorruptionKind::ContrastScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureMask => "feature_mask",
            CorruptionKind::ContrastScale => "contrast_scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Noise std per severity step.
pub const NOISE_STEP: f64 = 0.4;
/// Masked feature fraction per severity step.
pub const MASK_STEP: f64 = 0.12;
/// Contrast reduction per severity step.
pub const CONTRAST_STEP: f64 = 0.16;

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    /// Distortion magnitude: noise std, masked fraction, or contrast loss.
    pub fn magnitude(&self) -> f64 {
        let s = self.severity as f64;
        match self.kind {
            CorruptionKind::GaussianNoise => s * NOISE_STEP,
            CorruptionKind::FeatureMask => s * MASK_STEP,
            CorruptionKind::ContrastScale => s * CONTRAST_STEP,
        }
    }
}

/// Feature-space corruption. Labels are untouched. For a fixed seed, the
/// random draws are the same at every severity, so distortion grows monotonically.
pub fn corrupt(split: &Split, spec: &CorruptionSpec, seed_value: u64) -> Result<Split> {
    CorruptionSpec::new(spec.kind, spec.severity)?;
    let mut rng = seed::named_rng(seed_value, &format!("corrupt/{}", spec.kind.name()));
    let mag = spec.magnitude();
    let mut inputs = split.inputs.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in inputs.as_mut_slice() {
                *v += mag * gaussian(&mut rng);
            }
        }
        CorruptionKind::FeatureMask => {
            for v in inputs.as_mut_slice() {
                if rng.random::<f64>() < mag {
                    *v = 0.0;
                }
            }
        }
        CorruptionKind::ContrastScale => {
            let n = inputs.rows().max(1) as f64;
            let means: Vec<f64> = inputs.column_sums().into_iter().map(|s| s / n).collect();
            let factor = 1.0 - mag;
            for r in 0..inputs.rows() {
                for (v, m) in inputs.row_mut(r).iter_mut().zip(&means) {
                    *v = m + factor * (*v - m);
                }
            }
        }
    }
    Ok(Split {
        inputs,
        labels: split.labels.clone(),
    })
}
