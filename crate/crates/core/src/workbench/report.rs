//! Fixed-schema report tables. Each table is written twice, as `<name>.csv`
//! and `<name>.json`, with the same fields. Every row starts with the hash of
//! the manifest that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Result;

/// A report row. `COLUMNS` is the CSV header and must match the field order.
pub trait Row: Serialize + DeserializeOwned {
    const TABLE: &'static str;
    const COLUMNS: &'static [&'static str];
}

macro_rules! row {
    ($(#[$m:meta])* $name:ident, $table:literal { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub manifest: String,
            $(pub $field: $ty,)*
        }

        impl Row for $name {
            const TABLE: &'static str = $table;
            const COLUMNS: &'static [&'static str] = &["manifest", $(stringify!($field)),*];
        }
    };
}

row!(
    /// `value` is accuracy for classification, mean L1 error for regression.
    EvalRow, "eval" {
        method: String,
        task: u32,
        split: String,
        metric: String,
        value: f64,
    }
);

row!(
    /// `pair_merge_accuracy`: encoders of both tasks averaged, with the head's task head.
    CrossRow, "cross_matrix" {
        encoder_task: u32,
        head_task: u32,
        accuracy: f64,
        pair_merge_accuracy: f64,
    }
);

row!(
    /// Spearman ρ between cross-task and two-model merge accuracy over ordered task pairs.
    CrossMergeRow, "cross_merge" {
        pairs: usize,
        rho: Option<f64>,
        error: String,
    }
);

row!(TransferRow, "transfer" {
    heads: String,
    merged: f64,
    cross: f64,
});

row!(
    /// `rho` is empty when undefined; `error` then says why.
    CorrelationRow, "correlation" {
        task: u32,
        proxy: String,
        weights: String,
        rho: Option<f64>,
        error: String,
    }
);

row!(DiscrepancyRow, "discrepancy" {
    method: String,
    task: u32,
    n: usize,
    fails: usize,
    gains: usize,
    net: i64,
    merged_accuracy: f64,
    expert_accuracy: f64,
});

row!(
    /// `scope` is `all` or an encoder layer name.
    SparsityRow, "sparsity" {
        method: String,
        threshold: f64,
        scope: String,
        fraction: f64,
    }
);

row!(Prop1Row, "prop1" {
    task_i: u32,
    task_j: u32,
    family: String,
    ctl_max: f64,
    ctl_mean: f64,
    loss_pre: f64,
    loss_i: f64,
    loss_j: f64,
    loss_merge: f64,
    bound_jensen: f64,
    jensen_holds: bool,
    bound_disentangled: f64,
    bound_synergy: f64,
    eps: f64,
    classification: String,
});

row!(PilotRow, "pilot" {
    lambda: f64,
    encoder_task: u32,
    head_task: u32,
    baseline: f64,
    retrained: f64,
    gain: f64,
});

row!(
    /// Aggregate of eval rows across runs. `task` is a task id or `mean`.
    SummaryRow, "summary" {
        method: String,
        task: String,
        split: String,
        metric: String,
        runs: usize,
        mean: f64,
        std: f64,
    }
);

/// The tables one run produced. `None` means the analysis was not requested.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reports {
    pub eval: Option<Vec<EvalRow>>,
    pub cross_matrix: Option<Vec<CrossRow>>,
    pub cross_merge: Option<Vec<CrossMergeRow>>,
    pub transfer: Option<Vec<TransferRow>>,
    pub correlation: Option<Vec<CorrelationRow>>,
    pub discrepancy: Option<Vec<DiscrepancyRow>>,
    pub sparsity: Option<Vec<SparsityRow>>,
    pub prop1: Option<Vec<Prop1Row>>,
    pub pilot: Option<Vec<PilotRow>>,
}

impl Reports {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        macro_rules! emit {
            ($($f:ident),*) => {$(
                if let Some(rows) = &self.$f {
                    out.extend(write_table(dir, rows)?);
                }
            )*};
        }
        emit!(
            eval,
            cross_matrix,
            cross_merge,
            transfer,
            correlation,
            discrepancy,
            sparsity,
            prop1,
            pilot
        );
        Ok(out)
    }
}

pub fn csv_string<R: Row>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(R::COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("csv: {e}"))
}

/// Writes `<table>.csv` and `<table>.json`.
pub fn write_table<R: Row>(dir: &Path, rows: &[R]) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", R::TABLE));
    let json_path = dir.join(format!("{}.json", R::TABLE));
    std::fs::write(&csv_path, csv_string(rows)?)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(rows)? + "\n")?;
    Ok([csv_path, json_path])
}

pub fn read_csv<R: Row>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != R::COLUMNS {
        return Err(crate::Error::Format(format!(
            "{} does not have the {} schema",
            path.display(),
            R::TABLE
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// SHA-256 over the sorted, distinct manifest hashes of `rows`.
pub fn source_hash(rows: &[EvalRow]) -> String {
    use sha2::{Digest, Sha256};
    let hashes: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.manifest.as_str()).collect();
    let mut h = Sha256::new();
    for m in hashes {
        h.update(m.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Mean and sample standard deviation of eval values across runs, per task
/// and averaged over tasks. Rows carry the [`source_hash`] of the inputs.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    // (method, split, metric) -> manifest -> task -> value
    type PerRun = BTreeMap<String, BTreeMap<u32, f64>>;
    let mut groups: BTreeMap<(String, String, String), PerRun> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.split.clone(), r.metric.clone()))
            .or_default()
            .entry(r.manifest.clone())
            .or_default()
            .insert(r.task, r.value);
    }
    let stats = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let source = source_hash(rows);
    let mut out = Vec::new();
    for ((method, split, metric), runs) in groups {
        let mut per_task: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut run_means = Vec::new();
        for tasks in runs.values() {
            for (&t, &v) in tasks {
                per_task.entry(t).or_default().push(v);
            }
            run_means.push(tasks.values().sum::<f64>() / tasks.len() as f64);
        }
        let mut push = |task: String, vals: &[f64]| {
            let (mean, std) = stats(vals);
            out.push(SummaryRow {
                manifest: source.clone(),
                method: method.clone(),
                task,
                split: split.clone(),
                metric: metric.clone(),
                runs: vals.len(),
                mean,
                std,
            });
        };
        for (t, vals) in &per_task {
            push(t.to_string(), vals);
        }
        push("mean".into(), &run_means);
    }
    out
}
