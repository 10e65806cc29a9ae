//! End-to-end runs of the `mergelab` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mergelab");
/// Numeric tolerance against the stored golden tables.
const GOLDEN_TOL: f64 = 1e-9;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference_config() -> PathBuf {
    repo_root().join("configs/reference.json")
}

fn mergelab(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MERGELAB_OUT")
        .output()
        .expect("run mergelab")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = mergelab(args, out);
    assert!(
        o.status.success(),
        "mergelab {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// A small config so the chained steps stay fast.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let cfg = r#"{
        "seed": 5,
        "suite": { "tasks": 3, "classes": 3, "input_dim": 8, "train_per_task": 64, "test_per_task": 64 },
        "pretrain": { "hidden": [12], "samples": 256, "epochs": 3, "probe_samples": 16 },
        "finetune": { "epochs": 5 },
        "adapt": { "iterations": 20, "batch_size": 16 },
        "analyses": ["eval", "sparsity"]
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen", "--config", cfg.to_str().unwrap()], dir);
    }
    for f in ["suite.bin", "gen.manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    // A different seed gives a different suite.
    let c = tmp.path().join("c");
    ok(
        &["gen", "--config", cfg.to_str().unwrap(), "--seed", "6"],
        &c,
    );
    assert_ne!(
        std::fs::read(a.join("suite.bin")).unwrap(),
        std::fs::read(c.join("suite.bin")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(
        Command::new(BIN)
            .arg("frobnicate")
            .output()
            .unwrap()
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        Command::new(BIN)
            .arg("--help")
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        mergelab(&["merge", "--method", "average"], out)
            .status
            .code(),
        Some(1)
    );

    let bad = out.join("bad.json");
    std::fs::write(&bad, r#"{ "suite": { "tasks": 0 } }"#).unwrap();
    let o = mergelab(&["gen", "--config", bad.to_str().unwrap()], out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("suite.tasks"));

    std::fs::write(&bad, r#"{ "adapt": { "batch_size": 0 } }"#).unwrap();
    let o = mergelab(&["gen", "--config", bad.to_str().unwrap()], out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("adapt.batch_size"));

    std::fs::write(&bad, r#"{ "no_such_field": 1 }"#).unwrap();
    assert_eq!(
        mergelab(&["gen", "--config", bad.to_str().unwrap()], out)
            .status
            .code(),
        Some(2)
    );

    // Missing inputs are runtime errors.
    let empty = out.join("empty");
    assert_eq!(mergelab(&["finetune"], &empty).status.code(), Some(3));
    let garbage = out.join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let cfg = small_config(out);
    let run = out.join("run");
    ok(&["gen", "--config", cfg.to_str().unwrap()], &run);
    assert_eq!(
        mergelab(&["eval", "--checkpoint", garbage.to_str().unwrap()], &run)
            .status
            .code(),
        Some(3)
    );
}

fn eval_values(dir: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[2].to_string(), cols[5].to_string())
        })
        .collect()
}

#[test]
fn zero_lambda_merge_scores_like_the_base_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["gen", "--config", cfg.to_str().unwrap()], &run);
    ok(&["finetune"], &run);
    ok(
        &["merge", "--method", "task_arithmetic", "--lambda", "0"],
        &run,
    );
    let merged_dir = tmp.path().join("merged");
    let base_dir = tmp.path().join("base");
    ok(
        &["eval", "--report-dir", merged_dir.to_str().unwrap()],
        &run,
    );
    let base = run.join("base.ckpt");
    ok(
        &[
            "eval",
            "--checkpoint",
            base.to_str().unwrap(),
            "--report-dir",
            base_dir.to_str().unwrap(),
        ],
        &run,
    );
    let (m, b) = (eval_values(&merged_dir), eval_values(&base_dir));
    assert_eq!(m.len(), 3);
    assert_eq!(m, b);
}

#[test]
fn chained_steps_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["gen", "--config", cfg.to_str().unwrap()], &run);
    ok(&["finetune"], &run);
    ok(&["adapt", "--method", "adamerging"], &run);
    let o = ok(&["analyze"], &run);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("manifest "), "{stdout}");
    for f in [
        "eval.csv",
        "eval.json",
        "sparsity.csv",
        "analyze.manifest.json",
        "merged.ckpt",
        "merge.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(
        eval.lines().skip(1).all(|l| l.contains(",adamerging,")),
        "{eval}"
    );

    // A second seed, then the cross-run summary.
    let other = tmp.path().join("other");
    ok(
        &["gen", "--config", cfg.to_str().unwrap(), "--seed", "9"],
        &other,
    );
    ok(&["finetune"], &other);
    ok(&["adapt", "--method", "adamerging"], &other);
    ok(&["analyze"], &other);
    let summary = tmp.path().join("summary");
    ok(
        &["report", run.to_str().unwrap(), other.to_str().unwrap()],
        &summary,
    );
    let text = std::fs::read_to_string(summary.join("summary.csv")).unwrap();
    assert!(
        text.lines()
            .any(|l| l.contains(",adamerging,mean,clean,accuracy,2,")),
        "{text}"
    );
    assert!(
        text.lines()
            .skip(1)
            .all(|l| l.split(',').next().unwrap().len() == 64),
        "{text}"
    );
}

fn read_table(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn cells_match(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y || (x - y).abs() <= GOLDEN_TOL * x.abs().max(1.0),
        _ => a == b,
    }
}

/// The reference experiment, step by step, against stored golden tables.
/// Set `MERGELAB_BLESS=1` to rewrite them.
#[test]
fn reference_run_matches_golden_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = reference_config();
    ok(&["gen", "--config", cfg.to_str().unwrap()], &run);
    ok(&["finetune"], &run);
    ok(&["adapt", "--method", "symerge"], &run);
    ok(&["analyze"], &run);

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let produced: BTreeMap<String, PathBuf> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    if std::env::var_os("MERGELAB_BLESS").is_some() {
        std::fs::create_dir_all(&golden).unwrap();
        for (name, path) in &produced {
            std::fs::copy(path, golden.join(name)).unwrap();
        }
    }
    let expected: Vec<String> = std::fs::read_dir(&golden)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(
        expected.len(),
        produced.len(),
        "table set differs from golden"
    );
    for name in expected {
        let (want, got) = (
            read_table(&golden.join(&name)),
            read_table(&produced[&name]),
        );
        assert_eq!(want.len(), got.len(), "{name}: row count");
        for (r, (w, g)) in want.iter().zip(&got).enumerate() {
            assert_eq!(w.len(), g.len(), "{name} row {r}");
            for (c, (a, b)) in w.iter().zip(g).enumerate() {
                assert!(
                    cells_match(a, b),
                    "{name} row {r} col {c}: golden {a} vs {b}"
                );
            }
        }
    }
}
