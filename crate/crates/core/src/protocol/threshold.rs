use crate::fpround::{exponent_scale, tau_lower_bound, tau_upper_bound, Grid};
use crate::simnet::layers::{dense_forward, relu_forward, sigmoid_forward, softmax_xent_forward};
use crate::simnet::{DeviceProfile, LayerSpec, Rng, Tensor};

use super::ProtocolError;

/// Distance of a straddling output from its own rounding, in units of its
/// exponent scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSample {
    pub normalized_distance: f64,
}

fn grid_tensor(
    rng: &mut Rng,
    grid: Grid,
    shape: Vec<usize>,
    bound: f64,
) -> Result<Tensor, ProtocolError> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(grid.round(rng.uniform(-bound, bound))?.get());
    }
    Ok(Tensor::from_vec(shape, data)?)
}

/// Runs `layer` on `samples` random inputs under both profiles and collects
/// the outputs that land on opposite sides of a rounding boundary.
///
/// `width` is the input width of elementwise and loss layers; dense layers
/// use their own input size.
pub fn collect_divergence(
    layer: &LayerSpec,
    width: usize,
    b_r: u32,
    profiles: (&DeviceProfile, &DeviceProfile),
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<DivergenceSample>, ProtocolError> {
    let grid = Grid::new(b_r)?;
    let mut found = Vec::new();
    for _ in 0..samples {
        let (a, b) = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let x = grid_tensor(rng, grid, vec![1, inputs], 1.0)?;
                let w = grid_tensor(
                    rng,
                    grid,
                    vec![inputs, outputs],
                    1.0 / (inputs as f64).sqrt(),
                )?;
                let bias = grid_tensor(rng, grid, vec![outputs], 0.1)?;
                (
                    dense_forward(&x, &w, &bias, profiles.0)?,
                    dense_forward(&x, &w, &bias, profiles.1)?,
                )
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => {
                let x = grid_tensor(rng, grid, vec![1, width], 4.0)?;
                let y = if matches!(layer, LayerSpec::Relu) {
                    relu_forward(&x)
                } else {
                    sigmoid_forward(&x)
                };
                (y.clone(), y)
            }
            LayerSpec::SoftmaxCrossEntropy => {
                let logits = grid_tensor(rng, grid, vec![1, width], 4.0)?;
                let label = [rng.below(width as u64) as usize];
                (
                    softmax_xent_forward(&logits, &label, profiles.0)?.1,
                    softmax_xent_forward(&logits, &label, profiles.1)?.1,
                )
            }
        };
        for (&y1, &y2) in a.data().iter().zip(b.data()) {
            let (r1, r2) = (grid.round(y1)?.get(), grid.round(y2)?.get());
            if r1 == r2 {
                continue;
            }
            // Adjacent grid values: the two outputs sit either side of the
            // boundary between them.
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            if grid.next_up(lo)?.get() != hi {
                continue;
            }
            for (y, r) in [(y1, r1), (y2, r2)] {
                found.push(DivergenceSample {
                    normalized_distance: (y - r).abs() / exponent_scale(y)?,
                });
            }
        }
    }
    Ok(found)
}

/// Binary search for the largest threshold below every sample distance.
pub fn search_tau(
    samples: &[DivergenceSample],
    b_r: u32,
    iters: usize,
) -> Result<f64, ProtocolError> {
    let upper = tau_upper_bound(Grid::new(b_r)?);
    if samples.is_empty() {
        return Ok(upper);
    }
    let (mut lo, mut hi) = (tau_lower_bound(), upper);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if samples.iter().all(|s| s.normalized_distance >= mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub fn threshold_search(
    layer: &LayerSpec,
    width: usize,
    b_r: u32,
    profiles: (&DeviceProfile, &DeviceProfile),
    samples: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<f64, ProtocolError> {
    let found = collect_divergence(layer, width, b_r, profiles, samples, rng)?;
    search_tau(&found, b_r, iters)
}
