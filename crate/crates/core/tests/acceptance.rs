//! Acceptance suite. Each test prints one pass/fail line for its criterion.
//! The directional criteria share one batch of ten seeded runs of the
//! reference configuration.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use mergelab::adapt::TrainableLayer;
use mergelab::analysis::{evaluate, spearman};
use mergelab::loss::LossKind;
use mergelab::merge::{
    compute_task_vector, merge_layerwise, merge_task_arithmetic, CoefficientMatrix, MergedAssembly,
};
use mergelab::seed::Rng;
use mergelab::theory::{
    prop1_verify, random_instance, scalar_instance, RandomInstanceSpec, BOUND_TOLERANCE,
};
use mergelab::workbench::checkpoint::{load_checkpoint, save_checkpoint};
use mergelab::workbench::pipeline::{
    corrupted_tasks, generate, run_analyses, run_method, run_method_on, task_arithmetic,
    train_models, MethodRun, Models,
};
use mergelab::workbench::{run_experiment, Analysis, ExperimentConfig, Manifest, Method};
use mergelab::{LayerParams, ParamSet, TaskId, TaskSuite};
use rand::seq::SliceRandom;
use rand::Rng as _;

const SEEDS: u64 = 10;
const FD_INSTANCES: usize = 50;
const FD_TOLERANCE: f64 = 1e-4;
const MERGE_TOLERANCE: f64 = 1e-12;
const PROP1_INSTANCES: u64 = 100;
/// Mid-range merge coefficients for the pilot probe.
const PILOT_MID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    say(&format!("criterion {n:>2} [{tag}] {name}: {detail}"));
}

fn reference_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    ExperimentConfig::load(&path).expect("reference config")
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradients() {
    let start = Instant::now();
    let mut worst_params = 0.0f64;
    let mut worst_coeffs = 0.0f64;
    let mut instances = 0;
    for kind in LossKind::ALL {
        for i in 0..FD_INSTANCES {
            let mut rng = seeded(i as u64, &format!("acceptance/fd/{}", kind.name()));
            let depth = rng.random_range(1..=3);
            let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=5)).collect();
            let k = rng.random_range(1..=3);
            let classes = rng.random_range(2..=4);
            let heads: Vec<(TaskId, usize)> = (0..k).map(|t| (TaskId(t as u32), classes)).collect();
            let pre = random_params(&dims, &heads, &mut rng);
            let task = TaskId(rng.random_range(0..k) as u32);
            let n = rng.random_range(1..=6);
            let inputs = random_matrix(n, dims[0], 1.0, &mut rng);
            let target = smooth_target(
                kind,
                &mergelab::nn::forward(&pre, task, &inputs).unwrap(),
                &mut rng,
            );
            worst_params = worst_params.max(param_fd_error(&pre, task, &inputs, &target, kind));

            let vectors: Vec<_> = heads
                .iter()
                .map(|&(t, _)| {
                    let mut e = pre.clone();
                    for l in &mut e.encoder {
                        *l = random_layer_like(l, 0.5, &mut rng);
                    }
                    compute_task_vector(t, &e, &pre).unwrap()
                })
                .collect();
            let values = (0..k * depth)
                .map(|_| rng.random_range(-0.5..1.0))
                .collect();
            let coeffs =
                CoefficientMatrix::from_values(heads.iter().map(|h| h.0).collect(), depth, values)
                    .unwrap();
            let asm = MergedAssembly::new(pre, vectors, coeffs).unwrap();
            let target = smooth_target(kind, &asm.forward(task, &inputs).unwrap(), &mut rng);
            worst_coeffs = worst_coeffs.max(coeff_fd_error(&asm, task, &inputs, &target, kind));
            instances += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_params < FD_TOLERANCE
        && worst_coeffs < FD_TOLERANCE
        && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{instances} instances over {} losses, worst rel err params {worst_params:.1e} coeffs {worst_coeffs:.1e} (< {FD_TOLERANCE:e}), {elapsed:.2?} (< 30s)",
            LossKind::ALL.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn max_abs_diff(a: &[LayerParams], b: &[LayerParams]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.to_flat()
                .into_iter()
                .zip(y.to_flat())
                .map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

fn delta(a: &[LayerParams], pre: &[LayerParams]) -> Vec<LayerParams> {
    a.iter().zip(pre).map(|(x, p)| x.sub(p).unwrap()).collect()
}

#[test]
fn criterion_02_merge_algebra() {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let cases = 200;
    for i in 0..cases {
        let mut rng: Rng = seeded(i, "acceptance/merge");
        let depth = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=7)).collect();
        let k = rng.random_range(1..=5);
        let heads: Vec<(TaskId, usize)> = (0..k).map(|t| (TaskId(t as u32), 2)).collect();
        let pre = random_params(&dims, &heads, &mut rng);
        let experts: Vec<ParamSet> = (0..k)
            .map(|_| {
                let mut e = pre.clone();
                for l in &mut e.encoder {
                    *l = random_layer_like(l, 1.0, &mut rng);
                }
                e
            })
            .collect();
        let vectors: Vec<_> = experts
            .iter()
            .enumerate()
            .map(|(t, e)| compute_task_vector(TaskId(t as u32), e, &pre).unwrap())
            .collect();
        let tasks: Vec<TaskId> = vectors.iter().map(|v| v.task).collect();
        let random_coeffs = |rng: &mut Rng| {
            let values = (0..k * depth)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            CoefficientMatrix::from_values(tasks.clone(), depth, values).unwrap()
        };

        // Round trip.
        for (v, e) in vectors.iter().zip(&experts) {
            worst[0] = worst[0].max(max_abs_diff(
                &v.apply_to(&pre.encoder, 1.0).unwrap(),
                &e.encoder,
            ));
        }
        // Null merge.
        let zero = CoefficientMatrix::for_vectors(&vectors, 0.0);
        worst[1] = worst[1].max(max_abs_diff(
            &merge_layerwise(&pre.encoder, &vectors, &zero).unwrap(),
            &pre.encoder,
        ));
        // One-hot selection.
        let pick = rng.random_range(0..k);
        let mut one_hot = zero.clone();
        (0..depth).for_each(|l| one_hot.set(pick, l, 1.0));
        let selected = merge_layerwise(&pre.encoder, &vectors, &one_hot).unwrap();
        worst[2] = worst[2].max(max_abs_diff(&selected, &experts[pick].encoder));
        // Constant coefficients reduce to task arithmetic.
        let lambda = rng.random_range(-1.0..1.0);
        let constant = CoefficientMatrix::for_vectors(&vectors, lambda);
        worst[3] = worst[3].max(max_abs_diff(
            &merge_layerwise(&pre.encoder, &vectors, &constant).unwrap(),
            &merge_task_arithmetic(&pre.encoder, &vectors, lambda).unwrap(),
        ));
        // Linearity of the merged delta in the coefficients.
        let (c1, c2) = (random_coeffs(&mut rng), random_coeffs(&mut rng));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let lhs = delta(
            &merge_layerwise(&pre.encoder, &vectors, &c1.combine(a, &c2, b).unwrap()).unwrap(),
            &pre.encoder,
        );
        let d1 = delta(
            &merge_layerwise(&pre.encoder, &vectors, &c1).unwrap(),
            &pre.encoder,
        );
        let d2 = delta(
            &merge_layerwise(&pre.encoder, &vectors, &c2).unwrap(),
            &pre.encoder,
        );
        let rhs: Vec<LayerParams> = d1
            .iter()
            .zip(&d2)
            .map(|(x, y)| {
                let mut out = x.scaled(a);
                out.axpy(b, y).unwrap();
                out
            })
            .collect();
        worst[4] = worst[4].max(max_abs_diff(&lhs, &rhs));
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&w| w <= MERGE_TOLERANCE) && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "merge algebra",
        pass,
        &format!(
            "{cases} shapes, max deviation round-trip {:.1e} null {:.1e} one-hot {:.1e} constant {:.1e} linearity {:.1e} (<= 1e-12), {elapsed:.2?} (< 5s)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_merged_loss_bound() {
    let start = Instant::now();
    let convex: Vec<LossKind> = LossKind::ALL
        .into_iter()
        .filter(|k| k.is_convex_in_output())
        .collect();
    let mut jensen_ok = 0;
    let mut identity_ok = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for s in 0..PROP1_INSTANCES {
        let spec = RandomInstanceSpec {
            loss: convex[s as usize % convex.len()],
            ..RandomInstanceSpec::default()
        };
        let r = prop1_verify(&random_instance(&spec, s).unwrap()).unwrap();
        worst_excess = worst_excess.max(r.loss_merge - r.bound_jensen);
        jensen_ok += usize::from(r.loss_merge <= r.bound_jensen + BOUND_TOLERANCE);
        identity_ok += usize::from(r.bound_synergy == r.bound_disentangled - r.eps / 2.0);
    }
    let scalar = prop1_verify(&scalar_instance(0.0, 0.5, 1.0)).unwrap();
    let scalar_ok = scalar.loss_merge == 0.0625
        && scalar.bound_jensen == 0.125
        && scalar.bound_disentangled == 0.5
        && scalar.eps == 0.75
        && scalar.bound_synergy == 0.125;
    let elapsed = start.elapsed();
    let n = PROP1_INSTANCES as usize;
    let pass = jensen_ok == n && identity_ok == n && scalar_ok && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "merged-loss bound",
        pass,
        &format!(
            "jensen {jensen_ok}/{n} (max excess {worst_excess:.1e}, tol 1e-10), synergy identity {identity_ok}/{n}, \
             scalar L_merge {} <= {} disentangled {} synergy {}, {elapsed:.2?} (< 10s)",
            scalar.loss_merge, scalar.bound_jensen, scalar.bound_disentangled, scalar.bound_synergy
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4 to 9

struct SeedRun {
    individual: f64,
    task_arithmetic: f64,
    symerge: f64,
    coeffs_only: f64,
    layer_only: f64,
    correlation_wins: usize,
    correlation_tasks: usize,
    transfer_baseline: (f64, f64),
    transfer_symerge: (f64, f64),
    pilot: BTreeMap<u64, f64>,
    corrupted_ta: f64,
    corrupted_symerge: f64,
    discrepancy_checked: usize,
    discrepancy_exact: usize,
    elapsed: Duration,
}

fn mean_accuracy(run: &MethodRun, models: &Models, tasks: &[mergelab::taskgen::TaskData]) -> f64 {
    tasks
        .iter()
        .map(|t| evaluate(&run.task_params(models, t.id).unwrap(), t.id, &t.test).unwrap())
        .sum::<f64>()
        / tasks.len() as f64
}

fn lambda_key(l: f64) -> u64 {
    (l * 10.0).round() as u64
}

fn seed_run(base: &ExperimentConfig, seed_value: u64) -> SeedRun {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seed: seed_value,
        ..base.clone()
    };
    let suite: TaskSuite = generate(&cfg).unwrap();
    let models = train_models(&cfg, &suite).unwrap();
    let method = |c: &ExperimentConfig, m| run_method(c, m, &suite, &models).unwrap();

    let individual = method(&cfg, Method::Individual);
    let ta = task_arithmetic(&models, cfg.ta_lambda).unwrap();
    let sy = method(&cfg, Method::Symerge);
    let mut coeffs_cfg = cfg.clone();
    coeffs_cfg.adapt.trainable_layer = TrainableLayer::None;
    let coeffs_only = method(&coeffs_cfg, Method::Symerge);
    let mut layer_cfg = cfg.clone();
    layer_cfg.adapt.train_coeffs = false;
    let layer_only = method(&layer_cfg, Method::Symerge);

    let mut study = cfg.clone();
    study.method = Method::Symerge;
    study.analyses = [Analysis::Transfer, Analysis::Correlation, Analysis::Pilot].into();
    let reports = run_analyses(&study, "acceptance", &suite, &models, &sy).unwrap();

    let corr = reports.correlation.unwrap();
    let rho = |task: TaskId, proxy: &str| {
        corr.iter()
            .find(|c| c.task == task.0 && c.proxy == proxy && c.weights == "adapted")
            .and_then(|c| c.rho)
    };
    let correlation_wins = suite
        .ids()
        .into_iter()
        .filter(|&t| match (rho(t, "self_ce"), rho(t, "entropy")) {
            (Some(s), Some(e)) => s >= e,
            (Some(_), None) => true,
            _ => false,
        })
        .count();

    let transfer = reports.transfer.unwrap();
    let scores = |label: &str| {
        let r = transfer.iter().find(|r| r.heads == label).unwrap();
        (r.merged, r.cross)
    };

    let mut pilot = BTreeMap::new();
    for l in &cfg.pilot_lambdas {
        let gains: Vec<f64> = reports
            .pilot
            .as_ref()
            .unwrap()
            .iter()
            .filter(|p| p.lambda == *l && p.encoder_task != p.head_task)
            .map(|p| p.gain)
            .collect();
        pilot.insert(
            lambda_key(*l),
            gains.iter().sum::<f64>() / gains.len() as f64,
        );
    }

    // Test-time methods adapt on the shifted stream; task arithmetic cannot.
    let (mut corrupted_ta, mut corrupted_symerge) = (0.0, 0.0);
    let severe: Vec<_> = cfg.corruptions.iter().filter(|c| c.severity == 5).collect();
    for c in &severe {
        let shifted = corrupted_tasks(&cfg, &suite, c).unwrap();
        corrupted_ta += mean_accuracy(&ta, &models, &shifted);
        let adapted = run_method_on(&cfg, Method::Symerge, &shifted, &models).unwrap();
        corrupted_symerge += mean_accuracy(&adapted, &models, &shifted);
    }
    corrupted_ta /= severe.len() as f64;
    corrupted_symerge /= severe.len() as f64;

    let mut discrepancy_checked = 0;
    let mut discrepancy_exact = 0;
    let weight_avg = method(&cfg, Method::WeightAvg);
    let adamerging = method(&cfg, Method::Adamerging);
    let mut disc = cfg.clone();
    disc.analyses = [Analysis::Discrepancy].into();
    for run in [
        &individual,
        &weight_avg,
        &ta,
        &adamerging,
        &sy,
        &coeffs_only,
        &layer_only,
    ] {
        disc.method = run.method;
        for row in run_analyses(&disc, "acceptance", &suite, &models, run)
            .unwrap()
            .discrepancy
            .unwrap()
        {
            discrepancy_checked += 1;
            let lhs = row.merged_accuracy - row.expert_accuracy;
            let rhs = (row.gains as f64 - row.fails as f64) / row.n as f64;
            discrepancy_exact += usize::from(lhs == rhs);
        }
    }

    let tasks = &suite.tasks;
    SeedRun {
        individual: mean_accuracy(&individual, &models, tasks),
        task_arithmetic: mean_accuracy(&ta, &models, tasks),
        symerge: mean_accuracy(&sy, &models, tasks),
        coeffs_only: mean_accuracy(&coeffs_only, &models, tasks),
        layer_only: mean_accuracy(&layer_only, &models, tasks),
        correlation_wins,
        correlation_tasks: suite.tasks.len(),
        transfer_baseline: scores("baseline"),
        transfer_symerge: scores("symerge"),
        pilot,
        corrupted_ta,
        corrupted_symerge,
        discrepancy_checked,
        discrepancy_exact,
        elapsed: start.elapsed(),
    }
}

struct Study {
    runs: Vec<SeedRun>,
    wall: Duration,
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let cfg = reference_config();
        let start = Instant::now();
        let runs = std::thread::scope(|s| {
            let handles: Vec<_> = (0..SEEDS)
                .map(|seed_value| {
                    s.spawn({
                        let cfg = &cfg;
                        move || seed_run(cfg, seed_value)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Study {
            runs,
            wall: start.elapsed(),
        }
    })
}

fn count(runs: &[SeedRun], f: impl Fn(&SeedRun) -> bool) -> usize {
    runs.iter().filter(|r| f(r)).count()
}

#[test]
fn criterion_04_end_to_end_synergy() {
    let s = study();
    let beats_ta = count(&s.runs, |r| r.symerge >= r.task_arithmetic);
    let near_individual = count(&s.runs, |r| r.symerge >= r.individual - 0.05);
    let slowest = s.runs.iter().map(|r| r.elapsed).max().unwrap();
    let mean = |f: fn(&SeedRun) -> f64| s.runs.iter().map(f).sum::<f64>() / s.runs.len() as f64;
    let pass = beats_ta >= 9 && near_individual >= 8 && slowest < Duration::from_secs(180);
    verdict(
        4,
        "end-to-end synergy",
        pass,
        &format!(
            "symerge >= task arithmetic on {beats_ta}/10 (need 9), within 5 points of individual on {near_individual}/10 (need 8); \
             mean acc individual {:.3} ta {:.3} symerge {:.3}; slowest seed {slowest:.1?} (< 3 min), all seeds {:.1?}",
            mean(|r| r.individual),
            mean(|r| r.task_arithmetic),
            mean(|r| r.symerge),
            s.wall
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_component_ablation() {
    let s = study();
    let wins = count(&s.runs, |r| r.symerge >= r.coeffs_only.max(r.layer_only));
    let mean = |f: fn(&SeedRun) -> f64| s.runs.iter().map(f).sum::<f64>() / s.runs.len() as f64;
    let pass = wins >= 7;
    verdict(
        5,
        "component ablation",
        pass,
        &format!(
            "joint >= max(coefficients-only, layer-only) on {wins}/10 (need 7); mean acc joint {:.3} coefficients {:.3} layer {:.3}",
            mean(|r| r.symerge),
            mean(|r| r.coeffs_only),
            mean(|r| r.layer_only)
        ),
    );
    assert!(pass);
}

/// Spearman for distinct ranks: `1 − 6Σd²/(n³ − n)`, as one exact-integer division.
fn rank_formula(xs: &[usize], ys: &[usize]) -> f64 {
    let n = xs.len() as i128;
    let d2: i128 = xs
        .iter()
        .zip(ys)
        .map(|(&a, &b)| (a as i128 - b as i128).pow(2))
        .sum();
    (n * n * n - n - 6 * d2) as f64 / (n * n * n - n) as f64
}

#[test]
fn criterion_06_loss_correlation() {
    let s = study();
    let seeds_ok = count(&s.runs, |r| 2 * r.correlation_wins > r.correlation_tasks);
    let per_seed: Vec<String> = s
        .runs
        .iter()
        .map(|r| format!("{}/{}", r.correlation_wins, r.correlation_tasks))
        .collect();

    let mut rng = seeded(0, "acceptance/spearman");
    let mut exact = 0;
    let trials = 1000;
    for _ in 0..trials {
        let n = rng.random_range(2..=200);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let ident: Vec<usize> = (0..n).collect();
        let xs: Vec<f64> = ident.iter().map(|&v| v as f64 * 0.37 - 4.0).collect();
        let ys: Vec<f64> = perm.iter().map(|&v| (v as f64).powi(3)).collect();
        exact += usize::from(spearman(&xs, &ys).unwrap() == rank_formula(&ident, &perm));
    }
    let pass = seeds_ok >= 8 && exact == trials;
    verdict(
        6,
        "loss correlation",
        pass,
        &format!(
            "self-CE rho >= entropy rho on a majority of tasks for {seeds_ok}/10 seeds (need 8; per seed {}); \
             spearman equals the rank formula on {exact}/{trials} permutations",
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_cross_task_transfer() {
    let s = study();
    let mid_gain: Vec<(u64, f64)> = PILOT_MID
        .iter()
        .map(|&l| {
            let k = lambda_key(l);
            (
                k,
                s.runs.iter().map(|r| r.pilot[&k]).sum::<f64>() / s.runs.len() as f64,
            )
        })
        .collect();
    let pilot_ok = mid_gain.iter().all(|&(_, g)| g > 0.0);
    let transfer_wins = count(&s.runs, |r| {
        r.transfer_symerge.0 > r.transfer_baseline.0 && r.transfer_symerge.1 > r.transfer_baseline.1
    });
    let pass = pilot_ok && transfer_wins >= 7;
    let gains: Vec<String> = mid_gain
        .iter()
        .map(|(k, g)| format!("0.{k}:{g:+.4}"))
        .collect();
    verdict(
        7,
        "cross-task transfer",
        pass,
        &format!(
            "pilot mean off-diagonal gain by lambda [{}] (all > 0); symerge heads beat baseline heads in merged and cross on {transfer_wins}/10 (need 7)",
            gains.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_corruption_robustness() {
    let s = study();
    let wins = count(&s.runs, |r| r.corrupted_symerge > r.corrupted_ta);
    let mean = |f: fn(&SeedRun) -> f64| s.runs.iter().map(f).sum::<f64>() / s.runs.len() as f64;
    let pass = wins >= 7;
    verdict(
        8,
        "corruption robustness",
        pass,
        &format!(
            "severity-5 symerge > task arithmetic on {wins}/10 (need 7); mean corrupted acc ta {:.3} symerge {:.3}",
            mean(|r| r.corrupted_ta),
            mean(|r| r.corrupted_symerge)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_discrepancy_accounting() {
    let s = study();
    let checked: usize = s.runs.iter().map(|r| r.discrepancy_checked).sum();
    let exact: usize = s.runs.iter().map(|r| r.discrepancy_exact).sum();
    let pass = checked > 0 && exact == checked;
    verdict(
        9,
        "discrepancy accounting",
        pass,
        &format!("merged - expert == (gains - fails)/n exactly on {exact}/{checked} method-task evaluations"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path: PathBuf = e.unwrap().path();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    out
}

#[test]
fn criterion_10_reproducibility() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut cfg = reference_config();
    cfg.seed = 3;
    cfg.output_dir = Some(first.path().to_path_buf());
    let out = run_experiment(&cfg).unwrap();

    let manifest = Manifest::load(&first.path().join(out.manifest.file_name())).unwrap();
    let mut replay = manifest.config.clone();
    replay.output_dir = Some(second.path().to_path_buf());
    run_experiment(&replay).unwrap();
    let (a, b) = (files(first.path()), files(second.path()));
    let reports_identical = a == b;
    let report_count = a.keys().filter(|k| k.ends_with(".csv")).count();

    let ckpt_dir = tempfile::tempdir().unwrap();
    let mut models: Vec<ParamSet> = vec![
        out.models.base.clone(),
        out.run.merged_checkpoint().unwrap(),
    ];
    models.extend(out.models.experts.values().cloned());
    let mut round_trips = 0;
    for (i, p) in models.iter().enumerate() {
        let path = ckpt_dir.path().join(format!("{i}.ckpt"));
        save_checkpoint(p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |q: &ParamSet| q.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        round_trips += usize::from(back == *p && bits(&back) == bits(p));
    }
    let pass = reports_identical && report_count > 0 && round_trips == models.len();
    verdict(
        10,
        "reproducibility",
        pass,
        &format!(
            "re-running the manifest reproduced {} of {} output files byte-identically ({report_count} report tables); \
             {round_trips}/{} checkpoints round-tripped bit-exactly",
            a.iter().filter(|(k, v)| b.get(*k) == Some(v)).count(),
            a.len(),
            models.len()
        ),
    );
    assert!(pass);
}
