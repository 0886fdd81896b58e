use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::fpround::{tau_upper_bound, Grid, RoundingParams};
use crate::simnet::{DeviceProfile, LayerSpec, LossKind, ModelSpec};

/// Threshold key for the loss gradient of a model ending in a sigmoid.
pub const BCE_TAU_KEY: &str = "binary_cross_entropy";

/// How the logging threshold is chosen per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum TauPolicy {
    Fixed {
        value: f64,
    },
    /// Per layer kind, keyed by [`LayerSpec::kind_name`] (plus
    /// [`BCE_TAU_KEY`] for sigmoid-terminated models).
    Adaptive {
        table: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub size: usize,
    pub dim: usize,
    pub classes: usize,
}

fn default_b_tr() -> u32 {
    64
}

fn default_b_m() -> u32 {
    32
}

/// Everything trainer and auditor must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
    #[serde(default = "default_b_tr")]
    pub b_tr: u32,
    #[serde(default = "default_b_m")]
    pub b_m: u32,
    pub b_r: u32,
    pub tau: TauPolicy,
    pub trainer_profile: DeviceProfile,
    #[serde(default)]
    pub compress_log: bool,
    pub model: ModelSpec,
}

impl TrainConfig {
    /// Optimizer steps, `floor(|D| * E / B)`.
    pub fn steps(&self) -> usize {
        self.data.size * self.epochs / self.batch_size.max(1)
    }

    /// Checkpoints taken: one every `k` steps plus one after a partial tail.
    pub fn checkpoint_count(&self) -> usize {
        self.steps().div_ceil(self.checkpoint_interval.max(1))
    }

    pub fn grid(&self) -> Result<Grid, ProtocolError> {
        Ok(Grid::new(self.b_r)?)
    }

    /// Keys a threshold table must provide for this model.
    pub fn tau_keys(&self) -> Vec<&'static str> {
        let mut keys: Vec<&'static str> =
            self.model.layers.iter().map(LayerSpec::kind_name).collect();
        if matches!(
            self.model.shape().map(|s| s.loss),
            Ok(LossKind::BinaryCrossEntropy)
        ) {
            keys.push(BCE_TAU_KEY);
        }
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn rounding_params(&self, key: &str) -> Result<RoundingParams, ProtocolError> {
        let tau = match &self.tau {
            TauPolicy::Fixed { value } => *value,
            TauPolicy::Adaptive { table } => *table.get(key).ok_or_else(|| {
                ProtocolError::InvalidConfig(format!(
                    "adaptive threshold table has no entry for {key:?}"
                ))
            })?,
        };
        Ok(RoundingParams::new(self.grid()?, tau)?)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |msg: String| Err(ProtocolError::InvalidConfig(msg));
        if self.b_tr != 64 {
            return bad(format!("b_tr must be 64, got {}", self.b_tr));
        }
        if self.b_m != 32 {
            return bad(format!("b_m must be 32, got {}", self.b_m));
        }
        if !(26..=32).contains(&self.b_r) {
            return bad(format!("b_r must lie in [26, 32], got {}", self.b_r));
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > self.data.size {
            return bad(format!(
                "batch_size {} must be in [1, {}]",
                self.batch_size, self.data.size
            ));
        }
        if self.steps() == 0 {
            return bad("the run must contain at least one step".into());
        }
        if !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate {} is not finite",
                self.learning_rate
            ));
        }
        let shape = self.model.shape()?;
        if shape.input_dim != self.data.dim || shape.classes != self.data.classes {
            return bad(format!(
                "model takes {} inputs and {} classes but data has dim {} and {} classes",
                shape.input_dim, shape.classes, self.data.dim, self.data.classes
            ));
        }
        let grid = self.grid()?;
        let upper = tau_upper_bound(grid);
        let check_tau = |name: &str, tau: f64| {
            if tau.is_finite() && tau >= 0.0 && tau <= upper {
                Ok(())
            } else {
                bad(format!(
                    "threshold {name} = {tau:e} must lie in [0, {upper:e}]"
                ))
            }
        };
        match &self.tau {
            TauPolicy::Fixed { value } => check_tau("value", *value)?,
            TauPolicy::Adaptive { table } => {
                for key in self.tau_keys() {
                    match table.get(key) {
                        Some(&tau) => check_tau(key, tau)?,
                        None => return bad(format!("adaptive threshold table lacks {key:?}")),
                    }
                }
            }
        }
        Ok(())
    }
}
