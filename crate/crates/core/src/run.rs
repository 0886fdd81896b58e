//! On-disk run description and the JSON report written after a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::merkle::canonical_weight_bytes;
use crate::protocol::{
    estimate_log_entries, AuditOutput, ProtocolError, RunOutput, StepStats, StorageEstimate,
    TrainConfig, TrainOutput,
};
use crate::simnet::{evaluate, Dataset, DeviceProfile, ModelWeights};

fn default_log() -> PathBuf {
    "run.vtrl".into()
}

fn default_tree() -> PathBuf {
    "run.vtmt".into()
}

fn default_weights() -> PathBuf {
    "weights.bin".into()
}

fn default_report() -> PathBuf {
    "report.json".into()
}

/// Artifact file names, resolved against the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactPaths {
    #[serde(default = "default_log")]
    pub log: PathBuf,
    #[serde(default = "default_tree")]
    pub tree: PathBuf,
    #[serde(default = "default_weights")]
    pub weights: PathBuf,
    #[serde(default = "default_report")]
    pub report: PathBuf,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        Self {
            log: default_log(),
            tree: default_tree(),
            weights: default_weights(),
            report: default_report(),
        }
    }
}

impl ArtifactPaths {
    pub fn under(&self, dir: &Path) -> Self {
        Self {
            log: dir.join(&self.log),
            tree: dir.join(&self.tree),
            weights: dir.join(&self.weights),
            report: dir.join(&self.report),
        }
    }
}

/// A TOML run file: the shared training parameters plus local conveniences.
///
/// An adaptive threshold table, once searched, is cached in `train.tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    /// Default profile for `audit` when none is given.
    #[serde(default)]
    pub auditor_profile: Option<DeviceProfile>,
    #[serde(default)]
    pub paths: ArtifactPaths,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let file: Self =
            toml::from_str(text).map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
        file.train.validate()?;
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ProtocolError> {
        toml::to_string_pretty(self).map_err(|e| ProtocolError::InvalidConfig(e.to_string()))
    }
}

/// Final weights at the target precision, little-endian, canonical order.
pub fn write_weights(
    path: impl AsRef<Path>,
    weights: &ModelWeights,
    b_m: u32,
) -> Result<(), ProtocolError> {
    fs::write(path, canonical_weight_bytes(weights, b_m)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    Trainer,
    Auditor,
    Uncorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub entries: u64,
    pub bytes: u64,
    pub compressed: bool,
    /// Counts of down, ignore, up.
    pub histogram: [u64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corrections {
    pub forward: u64,
    pub backward: u64,
}

impl From<StepStats> for Corrections {
    fn from(s: StepStats) -> Self {
        Self {
            forward: s.forward,
            backward: s.backward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub role: RunRole,
    pub profile: String,
    pub b_r: u32,
    pub steps: usize,
    pub checkpoints: usize,
    /// Merkle root over checkpoint digests, lowercase hex.
    pub root: String,
    pub final_digest: String,
    /// For a trainer, non-ignore directions logged; for an auditor, applied
    /// corrections.
    pub totals: Corrections,
    /// `[forward, backward]` per step.
    pub per_step: Vec<[u64; 2]>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub log: Option<LogSummary>,
    pub estimate: StorageEstimate,
    /// Weight distance to a reference run at each checkpoint, when one was
    /// compared against.
    pub l2_series: Option<Vec<f64>>,
    pub wall_seconds: f64,
    pub finished_unix: u64,
}

impl RunReport {
    fn new(
        role: RunRole,
        cfg: &TrainConfig,
        profile: &DeviceProfile,
        run: &RunOutput,
        data: &Dataset,
    ) -> Result<Self, ProtocolError> {
        let eval = evaluate(&cfg.model, &run.final_weights, data, profile)?;
        Ok(Self {
            role,
            profile: profile.to_string(),
            b_r: cfg.b_r,
            steps: run.per_step.len(),
            checkpoints: run.tree.leaf_count(),
            root: run.root().to_hex(),
            final_digest: run.final_digest.to_hex(),
            totals: run.totals().into(),
            per_step: run
                .per_step
                .iter()
                .map(|s| [s.forward, s.backward])
                .collect(),
            final_loss: eval.loss,
            train_accuracy: eval.accuracy,
            log: None,
            estimate: estimate_log_entries(cfg),
            l2_series: None,
            wall_seconds: run.elapsed.as_secs_f64(),
            finished_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// `log_bytes` is the size of the file the log was written to.
    pub fn for_training(
        cfg: &TrainConfig,
        out: &TrainOutput,
        log_bytes: u64,
        data: &Dataset,
    ) -> Result<Self, ProtocolError> {
        let mut report = Self::new(RunRole::Trainer, cfg, &cfg.trainer_profile, &out.run, data)?;
        report.log = Some(LogSummary {
            entries: out.log.entry_count,
            bytes: log_bytes,
            compressed: out.log.compressed,
            histogram: out.histogram,
        });
        Ok(report)
    }

    pub fn for_audit(
        cfg: &TrainConfig,
        profile: &DeviceProfile,
        out: &AuditOutput,
        data: &Dataset,
    ) -> Result<Self, ProtocolError> {
        let role = if out.corrected {
            RunRole::Auditor
        } else {
            RunRole::Uncorrected
        };
        Self::new(role, cfg, profile, &out.run, data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
