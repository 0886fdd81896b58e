//! Shared fixtures for the benchmarks.

use vtrain_core::protocol::{DataSpec, TauPolicy, TrainConfig};
use vtrain_core::simnet::{DeviceProfile, ModelSpec, Rng};

/// The 16 -> 32 -> 3 MLP cut down to `epochs` passes over 512 points.
pub fn mlp_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        data: DataSpec {
            size: 512,
            dim: 16,
            classes: 3,
        },
        epochs,
        batch_size: 32,
        learning_rate: 0.5,
        checkpoint_interval: 4,
        seed: 7,
        b_tr: 64,
        b_m: 32,
        b_r: 32,
        tau: TauPolicy::Fixed {
            value: 0.25 * 2f64.powi(-23),
        },
        trainer_profile: DeviceProfile::sequential(),
        compress_log: false,
        model: ModelSpec::mlp(16, 32, 3),
    }
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}
