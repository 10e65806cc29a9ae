#![allow(dead_code)]

use std::io::Write;

use mergelab::linalg::Matrix;
use mergelab::loss::{self, LossKind, Target};
use mergelab::merge::{coefficient_grad, MergedAssembly};
use mergelab::nn::{LayerParams, LayerSlot, ParamSet, TaskId};
use mergelab::seed::{self, Rng};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Writes past the test harness's output capture, so summary lines always show.
pub fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

/// Random parameters with non-zero biases everywhere.
pub fn random_params(dims: &[usize], heads: &[(TaskId, usize)], rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::random(dims, heads, rng).unwrap();
    let flat: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|v| v + 0.3 * gaussian(rng))
        .collect();
    p.read_flat(&flat).unwrap();
    p
}

pub fn random_layer_like(l: &LayerParams, scale: f64, rng: &mut Rng) -> LayerParams {
    let mut out = l.clone();
    let flat: Vec<f64> = l.to_flat().iter().map(|_| scale * gaussian(rng)).collect();
    out.read_flat(&flat).unwrap();
    out
}

pub fn random_target(kind: LossKind, n: usize, c: usize, rng: &mut Rng) -> Target {
    match kind {
        LossKind::CrossEntropyHard => {
            Target::Labels((0..n).map(|_| rng.random_range(0..c)).collect())
        }
        LossKind::CrossEntropySoft | LossKind::Kl | LossKind::Js => {
            Target::Distributions(loss::softmax(&random_matrix(n, c, 1.5, rng)))
        }
        LossKind::Entropy => Target::None,
        LossKind::L1 | LossKind::L2 | LossKind::SmoothL1 | LossKind::Cosine => {
            Target::Vectors(random_matrix(n, c, 2.0, rng))
        }
    }
}

/// Residuals closer than this to a kink of L1 or smooth-L1 are redrawn, so
/// finite differences never straddle a non-differentiable point.
pub const KINK_MARGIN: f64 = 0.05;

/// Like [`random_target`], but for L1 and smooth-L1 every residual against
/// `outputs` stays at least [`KINK_MARGIN`] away from a kink.
pub fn smooth_target(kind: LossKind, outputs: &Matrix, rng: &mut Rng) -> Target {
    let (n, c) = outputs.shape();
    let kinks: &[f64] = match kind {
        LossKind::L1 => &[0.0],
        LossKind::SmoothL1 => &[0.0, 1.0],
        _ => return random_target(kind, n, c, rng),
    };
    let mut t = random_matrix(n, c, 2.0, rng);
    for (v, &o) in t.as_mut_slice().iter_mut().zip(outputs.as_slice()) {
        while kinks
            .iter()
            .any(|k| ((*v - o).abs() - k).abs() < KINK_MARGIN)
        {
            *v = 2.0 * gaussian(rng);
        }
    }
    Target::Vectors(t)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Five-point central difference of `f` at `x` along one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter of `task`'s network.
pub fn param_fd_error(
    params: &ParamSet,
    task: TaskId,
    inputs: &Matrix,
    target: &Target,
    kind: LossKind,
) -> f64 {
    let (_, grads) = mergelab::nn::backward(params, task, inputs, target, kind).unwrap();
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let eval = |flat: &[f64]| {
        let mut p = params.clone();
        p.read_flat(flat).unwrap();
        let out = mergelab::nn::forward(&p, task, inputs).unwrap();
        loss::loss_eval(&out, target, kind).unwrap()
    };
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for i in 0..base.len() {
        let numeric = central_difference(|d| {
            probe[i] = base[i] + d;
            eval(&probe)
        });
        probe[i] = base[i];
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Analytic `∂L/∂Λ` for one task, as the adaptation loops compute it.
pub fn coefficient_gradient(
    asm: &MergedAssembly,
    task: TaskId,
    inputs: &Matrix,
    target: &Target,
    kind: LossKind,
) -> Vec<f64> {
    let merged = asm.materialize().unwrap();
    let net = asm.task_network(task, &merged).unwrap();
    let (_, grads) = net.backward(inputs, target, kind).unwrap();
    let n_enc = merged.len();
    let swapped = asm.trainable.get(&task);
    let enc: Vec<LayerParams> = grads[..n_enc]
        .iter()
        .enumerate()
        .map(|(l, g)| {
            if swapped.is_some_and(|s| s.contains_key(&LayerSlot::Encoder(l))) {
                g.zeros_like()
            } else {
                g.clone()
            }
        })
        .collect();
    coefficient_grad(&enc, &asm.vectors)
        .unwrap()
        .values()
        .to_vec()
}

pub fn coeff_fd_error(
    asm: &MergedAssembly,
    task: TaskId,
    inputs: &Matrix,
    target: &Target,
    kind: LossKind,
) -> f64 {
    let analytic = coefficient_gradient(asm, task, inputs, target, kind);
    let eval = |a: &MergedAssembly| {
        loss::loss_eval(&a.forward(task, inputs).unwrap(), target, kind).unwrap()
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central_difference(|d| {
            let mut shifted = asm.clone();
            shifted.coeffs.values_mut()[i] += d;
            eval(&shifted)
        });
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

pub fn seeded(seed_value: u64, name: &str) -> Rng {
    seed::named_rng(seed_value, name)
}

/// A small fully trained setting: suite, base model, experts and task vectors.
pub struct World {
    pub suite: mergelab::TaskSuite,
    pub base: ParamSet,
    pub experts: std::collections::BTreeMap<TaskId, ParamSet>,
    pub vectors: Vec<mergelab::TaskVector>,
}

pub fn small_world(seed_value: u64, tasks: usize) -> World {
    use mergelab::adapt::{build_base, finetune_all, FinetuneConfig, PretrainConfig};
    let suite_cfg = mergelab::SuiteConfig {
        tasks,
        classes: 3,
        input_dim: 8,
        train_per_task: 96,
        test_per_task: 64,
        shared_subspace_dim: 4,
        regression_tasks: 0,
        seed: seed::sub_seed(seed_value, "suite"),
        ..mergelab::SuiteConfig::default()
    };
    let suite = mergelab::taskgen::gen_suite(&suite_cfg).unwrap();
    let pre_cfg = PretrainConfig {
        hidden: vec![12],
        samples: 256,
        epochs: 3,
        probe_samples: Some(16),
        seed: seed::sub_seed(seed_value, "pretrain"),
        ..PretrainConfig::default()
    };
    let base = build_base(&suite, &pre_cfg).unwrap();
    let ft = FinetuneConfig {
        epochs: 8,
        seed: seed::sub_seed(seed_value, "finetune"),
        ..FinetuneConfig::default()
    };
    let experts = finetune_all(&base, &suite, &ft).unwrap();
    let vectors = experts
        .iter()
        .map(|(t, e)| mergelab::merge::compute_task_vector(*t, e, &base).unwrap())
        .collect();
    World {
        suite,
        base,
        experts,
        vectors,
    }
}
