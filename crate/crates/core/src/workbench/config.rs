use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, FinetuneConfig, PilotConfig, PretrainConfig, TrainableLayer};
use crate::seed::sub_seed;
use crate::taskgen::{CorruptionSpec, SuiteConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Individual,
    WeightAvg,
    TaskArithmetic,
    Adamerging,
    Symerge,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Individual,
        Method::WeightAvg,
        Method::TaskArithmetic,
        Method::Adamerging,
        Method::Symerge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Individual => "individual",
            Method::WeightAvg => "weight_avg",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Adamerging => "adamerging",
            Method::Symerge => "symerge",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }

    /// Whether the method produces a coefficient matrix.
    pub fn has_coefficients(self) -> bool {
        !matches!(self, Method::Individual)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Adamerging | Method::Symerge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Eval,
    CrossMatrix,
    Transfer,
    Correlation,
    Discrepancy,
    Sparsity,
    Prop1,
    Pilot,
}

impl Analysis {
    pub const ALL: [Analysis; 8] = [
        Analysis::Eval,
        Analysis::CrossMatrix,
        Analysis::Transfer,
        Analysis::Correlation,
        Analysis::Discrepancy,
        Analysis::Sparsity,
        Analysis::Prop1,
        Analysis::Pilot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Eval => "eval",
            Analysis::CrossMatrix => "cross_matrix",
            Analysis::Transfer => "transfer",
            Analysis::Correlation => "correlation",
            Analysis::Discrepancy => "discrepancy",
            Analysis::Sparsity => "sparsity",
            Analysis::Prop1 => "prop1",
            Analysis::Pilot => "pilot",
        }
    }
}

/// Everything a run needs. Every nested `seed` field is overwritten from the
/// top-level `seed` by [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub adapt: AdaptConfig,
    pub method: Method,
    /// Scaling for task arithmetic, and the fixed merge the transfer and
    /// correlation analyses start from.
    pub ta_lambda: f64,
    pub analyses: BTreeSet<Analysis>,
    /// Test batch size for the loss-correlation study. Defaults to the
    /// adaptation batch size when unset.
    pub correlation_batch: Option<usize>,
    /// Self-labeling teacher for each task is `θ_pre + supervisor_coeff·τ_k`;
    /// 1 uses the experts as they are.
    pub supervisor_coeff: f64,
    /// Extra test-set corruptions scored by the eval analysis.
    pub corruptions: Vec<CorruptionSpec>,
    pub pilot: PilotConfig,
    /// Merge coefficients swept by the pilot analysis.
    pub pilot_lambdas: Vec<f64>,
    /// Not part of the experiment's identity.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            suite: SuiteConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            adapt: AdaptConfig::default(),
            method: Method::Symerge,
            ta_lambda: 0.3,
            analyses: BTreeSet::from([Analysis::Eval]),
            correlation_batch: None,
            supervisor_coeff: 1.0,
            corruptions: Vec::new(),
            pilot: PilotConfig::default(),
            pilot_lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(json_field(&e, text), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with every component seed derived from the top-level seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.suite.seed = sub_seed(self.seed, "suite");
        c.pretrain.seed = sub_seed(self.seed, "pretrain");
        c.finetune.seed = sub_seed(self.seed, "finetune");
        c.adapt.seed = sub_seed(self.seed, "adapt");
        c.pilot.seed = sub_seed(self.seed, "pilot");
        c
    }

    pub fn validate(&self) -> Result<()> {
        prefixed("suite", self.suite.validate())?;
        let layers = self.pretrain.hidden.len();
        if layers == 0 || self.pretrain.hidden.contains(&0) {
            return Err(Error::config(
                "pretrain.hidden",
                "needs at least one positive width",
            ));
        }
        if self.pretrain.classes < 2 {
            return Err(Error::config(
                "pretrain.classes",
                "needs at least two classes",
            ));
        }
        if self.pretrain.samples == 0 {
            return Err(Error::config("pretrain.samples", "must be positive"));
        }
        for (field, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.probe_lr", self.pretrain.probe_lr),
            ("finetune.lr", self.finetune.lr),
            ("pilot.lr", self.pilot.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("pilot.batch_size", self.pilot.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        prefixed("adapt", self.adapt.validate(layers))?;
        if self.correlation_batch == Some(0) {
            return Err(Error::config("correlation_batch", "must be positive"));
        }
        if !self.supervisor_coeff.is_finite() {
            return Err(Error::config("supervisor_coeff", "must be finite"));
        }
        if !self.ta_lambda.is_finite() {
            return Err(Error::config("ta_lambda", "must be finite"));
        }
        for c in &self.corruptions {
            CorruptionSpec::new(c.kind, c.severity)
                .map_err(|e| Error::config("corruptions", e.to_string()))?;
        }
        if self.pilot_lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::config("pilot_lambdas", "must be finite"));
        }
        let has_regression = self.suite.regression_tasks > 0;
        for a in &self.analyses {
            let problem = match a {
                Analysis::Sparsity if !self.method.has_coefficients() => {
                    Some("sparsity needs a method with merging coefficients")
                }
                Analysis::Transfer if self.method != Method::Symerge => {
                    Some("transfer compares symerge-trained heads; set method to symerge")
                }
                Analysis::Transfer if self.adapt.trainable_layer != TrainableLayer::Head => {
                    Some("transfer needs trained heads (adapt.trainable_layer = head)")
                }
                Analysis::Transfer | Analysis::CrossMatrix if self.suite.tasks < 2 => {
                    Some("cross-task analyses need at least two tasks")
                }
                Analysis::Correlation
                | Analysis::Pilot
                | Analysis::Discrepancy
                | Analysis::Prop1
                    if has_regression =>
                {
                    Some("this analysis needs an all-classification suite")
                }
                Analysis::Pilot if self.pilot_lambdas.is_empty() => {
                    Some("pilot needs pilot_lambdas")
                }
                _ => None,
            };
            if let Some(msg) = problem {
                return Err(Error::config(format!("analyses.{}", a.name()), msg));
            }
        }
        if self.method == Method::Adamerging && has_regression {
            return Err(Error::config(
                "method",
                "entropy adaptation needs an all-classification suite",
            ));
        }
        Ok(())
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    })
}

/// Best-effort field name for a JSON decoding error.
fn json_field(err: &serde_json::Error, text: &str) -> String {
    let msg = err.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    // Fall back to the last key before the failing position.
    let line = err.line().saturating_sub(1);
    text.lines()
        .take(line + 1)
        .filter_map(|l| {
            l.trim_start()
                .strip_prefix('"')
                .and_then(|r| r.split('"').next())
        })
        .last()
        .unwrap_or("<root>")
        .to_string()
}
