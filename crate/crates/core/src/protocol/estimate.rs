use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::roundlog::{payload_len, HEADER_LEN};
use crate::simnet::{LayerSpec, ModelSpec};

/// Predicted size of a rounding log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageEstimate {
    pub steps: u64,
    pub forward_per_step: u64,
    pub backward_per_step: u64,
    pub entries: u64,
    /// Size of an uncompressed log file: header plus five entries per byte.
    pub bytes: u64,
    /// `|D| * E * B * (sum of per-example forward and backward outputs)`, the
    /// closed form as literally written, for comparison.
    pub literal_formula_entries: u128,
}

/// Entries one step logs, forward and backward, for a batch of `batch` rows.
///
/// Dense layers log their outputs going forward and the gradient w.r.t. their
/// input going back; elementwise layers log both at their own width. A loss
/// layer logs only the gradient of the loss w.r.t. its input, and a model
/// ending in a sigmoid gets the same for its implied binary cross-entropy.
pub fn step_entries(model: &ModelSpec, batch: usize) -> (u64, u64) {
    let b = batch as u64;
    let mut width = match model.layers.first() {
        Some(LayerSpec::Dense { inputs, .. }) => *inputs as u64,
        _ => 0,
    };
    let (mut fwd, mut bwd) = (0, 0);
    for layer in &model.layers {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                fwd += b * outputs as u64;
                bwd += b * inputs as u64;
                width = outputs as u64;
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => {
                fwd += b * width;
                bwd += b * width;
            }
            LayerSpec::SoftmaxCrossEntropy => bwd += b * width,
        }
    }
    if matches!(model.layers.last(), Some(LayerSpec::Sigmoid)) {
        bwd += b * width;
    }
    (fwd, bwd)
}

pub fn estimate_log_entries(cfg: &TrainConfig) -> StorageEstimate {
    let (fwd, bwd) = step_entries(&cfg.model, cfg.batch_size);
    let steps = cfg.steps() as u64;
    let entries = steps * (fwd + bwd);
    let per_example = (fwd + bwd) / cfg.batch_size.max(1) as u64;
    StorageEstimate {
        steps,
        forward_per_step: fwd,
        backward_per_step: bwd,
        entries,
        bytes: HEADER_LEN + payload_len(entries),
        literal_formula_entries: cfg.data.size as u128
            * cfg.epochs as u128
            * cfg.batch_size as u128
            * per_example as u128,
    }
}
