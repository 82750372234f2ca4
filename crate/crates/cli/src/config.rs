//! Experiment configuration files.
//!
//! JSON with unknown keys rejected at every level. A config is fully
//! validated before any data is generated or read.

use std::path::{Path, PathBuf};

use feddq_core::federation::{Execution, FederationConfig, Partition};
use feddq_core::numerics::{make_synthetic, BatchSize, DatasetShard, ModelSpec, SgdConfig, SyntheticTask};
use feddq_core::policy::PolicyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub federation: FederationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<PolicyConfig>,
    /// Train-loss threshold for the bits/rounds-to-target summary fields.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Record exact global gradient norms for bound checks.
    #[serde(default)]
    pub verification: bool,
    /// Run client tasks on a thread pool.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Linreg,
    LogregBlobs,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        task: TaskName,
        n_train: usize,
        n_eval: usize,
        noise_sigma: f64,
        /// Distance between the two cluster centres (`logreg-blobs` only).
        #[serde(default)]
        separation: Option<f64>,
    },
    /// Comma-separated rows, features then label, no header; `#` starts a comment line.
    File { train_path: PathBuf, eval_path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub n_clients: usize,
    #[serde(default)]
    pub r_selected: Option<usize>,
    pub rounds: usize,
    pub eta: f64,
    pub tau: usize,
    #[serde(default = "full_batch")]
    pub batch_size: BatchSize,
    #[serde(default)]
    pub partition: Partition,
}

fn full_batch() -> BatchSize {
    BatchSize::Full
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn policy_list(&self) -> Vec<PolicyConfig> {
        self.policy.iter().cloned().chain(self.policies.iter().cloned()).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| field("model", e))?;
        self.federation_config().validate().map_err(|e| field("federation", e))?;
        match (&self.policy, self.policies.is_empty()) {
            (None, true) => return Err(field("policy", "give either `policy` or a non-empty `policies` list")),
            (Some(_), false) => return Err(field("policy", "`policy` and `policies` are mutually exclusive")),
            _ => {}
        }
        let mut labels = Vec::new();
        for (k, p) in self.policy_list().iter().enumerate() {
            p.validate().map_err(|e| field(&format!("policies[{k}]"), e))?;
            let label = p.label();
            if label.is_empty() || label.contains(['/', '\\']) || label == "." || label == ".." {
                return Err(field(&format!("policies[{k}].label"), format!("{label:?} is not usable as a directory name")));
            }
            if labels.contains(&label) {
                return Err(field(&format!("policies[{k}].label"), format!("duplicate policy label {label:?}")));
            }
            labels.push(label);
        }
        if let Some(t) = self.target_loss {
            if !t.is_finite() {
                return Err(field("target_loss", "must be finite"));
            }
        }
        if self.verification && self.federation.r_selected.is_some_and(|r| r != self.federation.n_clients) {
            return Err(field("verification", "needs r_selected == n_clients"));
        }
        if let DataConfig::Synthetic {
            task,
            n_train,
            n_eval,
            noise_sigma,
            separation,
        } = &self.data
        {
            if *n_train == 0 {
                return Err(field("data.n_train", "must be positive"));
            }
            if *n_eval == 0 {
                return Err(field("data.n_eval", "must be positive"));
            }
            if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                return Err(field("data.noise_sigma", "must be finite and >= 0"));
            }
            match (task, separation) {
                (TaskName::LogregBlobs, None) => return Err(field("data.separation", "required for logreg-blobs")),
                (TaskName::LogregBlobs, Some(s)) if !(*s >= 0.0 && s.is_finite()) => {
                    return Err(field("data.separation", "must be finite and >= 0"))
                }
                (TaskName::Linreg | TaskName::Quadratic, Some(_)) => {
                    return Err(field("data.separation", "only applies to logreg-blobs"))
                }
                _ => {}
            }
            let expected = match task {
                TaskName::Linreg => "linear-regression",
                TaskName::LogregBlobs => "logistic-regression or mlp",
                TaskName::Quadratic => "quadratic",
            };
            use feddq_core::numerics::ModelKind::*;
            let ok = matches!(
                (task, self.model.kind),
                (TaskName::Linreg, LinearRegression) | (TaskName::LogregBlobs, LogisticRegression | Mlp) | (TaskName::Quadratic, Quadratic)
            );
            if !ok {
                return Err(field("model.kind", format!("task {task:?} needs a {expected} model")));
            }
            if *task == TaskName::LogregBlobs && self.model.output_dim != 1 && self.model.output_dim != 2 {
                return Err(field("model.output_dim", "logreg-blobs has two classes"));
            }
        }
        Ok(())
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            n_clients: f.n_clients,
            r_selected: f.r_selected.unwrap_or(f.n_clients),
            rounds: f.rounds,
            sgd: SgdConfig {
                eta: f.eta,
                tau: f.tau,
                batch_size: f.batch_size,
            },
            seed: self.seed,
            partition: f.partition,
            execution: if self.parallel { Execution::Parallel } else { Execution::Sequential },
            verification: self.verification,
        }
    }

    /// Training and evaluation sets.
    pub fn load_data(&self) -> Result<(DatasetShard, DatasetShard), CliError> {
        match &self.data {
            DataConfig::Synthetic {
                task,
                n_train,
                n_eval,
                noise_sigma,
                separation,
            } => {
                let task = match task {
                    TaskName::Linreg => SyntheticTask::Linreg,
                    TaskName::LogregBlobs => SyntheticTask::LogregBlobs {
                        separation: separation.unwrap_or(0.0),
                    },
                    TaskName::Quadratic => SyntheticTask::Quadratic,
                };
                let data = make_synthetic(task, self.model.input_dim, n_train + n_eval, *noise_sigma, self.seed)
                    .map_err(|e| field("data", e))?;
                Ok(data.shard.split_at(*n_train))
            }
            DataConfig::File { train_path, eval_path } => Ok((
                read_table(train_path, self.model.input_dim)?,
                read_table(eval_path, self.model.input_dim)?,
            )),
        }
    }
}

/// Read a `features..., label` table. Width must be `input_dim + 1`.
pub fn read_table(path: &Path, input_dim: usize) -> Result<DatasetShard, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if rec.len() != input_dim + 1 {
            return Err(CliError::Input(format!(
                "{} row {}: expected {} columns, found {}",
                path.display(),
                line + 1,
                input_dim + 1,
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| CliError::Input(format!("{} row {} column {}: {cell:?} is not a number", path.display(), line + 1, j + 1)))?;
            if j < input_dim {
                features.push(v);
            } else {
                labels.push(v);
            }
        }
    }
    DatasetShard::new(features, labels, input_dim).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
