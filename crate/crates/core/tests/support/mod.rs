//! Oracles and fixtures shared by the integration tests. Everything here is
//! computed independently of the code under test.

#![allow(dead_code)]

use std::path::PathBuf;

use vtrain_core::fpround::{exponent_scale, Grid, RoundingDirection, RoundingParams};
use vtrain_core::merkle::Digest;
use vtrain_core::simnet::layers::{
    bce_forward, dense_backward, dense_forward, sigmoid_backward, sigmoid_forward,
    softmax_xent_forward,
};
use vtrain_core::simnet::{DeviceProfile, Rng, Tensor};
use vtrain_core::RunConfigFile;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load_config(name: &str) -> RunConfigFile {
    RunConfigFile::load(config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

// ---- grid oracle over FP32 bit patterns ----

fn step_bits(bits: u32) -> u32 {
    1 << (32 - bits)
}

/// Grid values bracketing `a >= 0`: the FP32 patterns with the low bits
/// cleared just below and above.
fn candidates(a: f64, bits: u32) -> Vec<f64> {
    let step = step_bits(bits);
    let p = (a as f32).to_bits() & !(step - 1);
    let mut out = vec![f32::from_bits(p) as f64];
    if p >= step {
        out.push(f32::from_bits(p - step) as f64);
    }
    let up = f32::from_bits(p + step);
    if up.is_finite() {
        out.push(up as f64);
    }
    out
}

fn kept_lsb_is_even(v: f64, bits: u32) -> bool {
    (v as f32).to_bits() & step_bits(bits) == 0
}

pub fn oracle_round(x: f64, bits: u32) -> f64 {
    let a = x.abs();
    let mut best = f64::NAN;
    for c in candidates(a, bits) {
        let (d, db) = ((a - c).abs(), (a - best).abs());
        if best.is_nan() || d < db || (d == db && kept_lsb_is_even(c, bits)) {
            best = c;
        }
    }
    best.copysign(x)
}

/// Largest grid value <= x and smallest >= x.
pub fn oracle_neighbors(x: f64, bits: u32) -> (f64, f64) {
    let a = x.abs();
    let cs = candidates(a, bits);
    let below = cs
        .iter()
        .copied()
        .filter(|&c| c <= a)
        .fold(f64::NEG_INFINITY, f64::max);
    let above = cs
        .iter()
        .copied()
        .filter(|&c| c >= a)
        .fold(f64::INFINITY, f64::min);
    if x < 0.0 {
        (-above, -below)
    } else {
        (below, above)
    }
}

pub fn oracle_scale(x: f64) -> f64 {
    if x == 0.0 {
        return 2f64.powi(-126);
    }
    let e = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    2f64.powi(e.max(-126))
}

pub fn on_grid(v: f64, bits: u32) -> bool {
    let f = v as f32;
    f as f64 == v && f.to_bits() & (step_bits(bits) - 1) == 0
}

/// Finite values spread over many binades, with a share placed right at
/// grid midpoints and on the grid itself.
pub fn fuzz_value(rng: &mut Rng, bits: u32) -> f64 {
    let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
    let exp = rng.below(90) as i32 - 60;
    let base = (1.0 + rng.next_f64()) * 2f64.powi(exp);
    let v = match rng.below(8) {
        0 => oracle_round(base, bits),
        1 => {
            let (lo, hi) = oracle_neighbors(base, bits);
            lo + (hi - lo) / 2.0
        }
        2 => {
            // Just off a midpoint.
            let (lo, hi) = oracle_neighbors(base, bits);
            let mid = lo + (hi - lo) / 2.0;
            mid + (hi - lo) * 1e-6 * rng.uniform(-1.0, 1.0)
        }
        3 => rng.next_f64() * 2f64.powi(-128),
        _ => base,
    };
    sign * v
}

fn oracle_rev(x: f64, bits: u32, dir: RoundingDirection) -> f64 {
    let nearest = oracle_round(x, bits);
    let (below, above) = oracle_neighbors(x, bits);
    match dir {
        RoundingDirection::Down if x < nearest => below,
        RoundingDirection::Up if x > nearest => above,
        _ => nearest,
    }
}

#[derive(Debug, Default)]
pub struct GridReport {
    pub values: usize,
    pub sync_pairs: usize,
}

/// Checks rounding, idempotence, grid membership, `rev` and the sync
/// property on `n` fuzzed values.
pub fn check_grid_properties(bits: u32, n: usize, seed: u64) -> Result<GridReport, String> {
    let grid = Grid::new(bits).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(seed);
    let mut report = GridReport::default();
    let eps_rel = 2f64.powi(9 - bits as i32);
    let lower = 0.25 * 2f64.powi(-23);
    let dirs = [
        RoundingDirection::Down,
        RoundingDirection::Ignore,
        RoundingDirection::Up,
    ];
    for _ in 0..n {
        let x = fuzz_value(&mut rng, bits);
        let r = grid
            .round(x)
            .map_err(|e| format!("round({x:e}): {e}"))?
            .get();
        let expect = oracle_round(x, bits);
        if r != expect {
            return Err(format!("b={bits} round({x:e}) = {r:e}, oracle {expect:e}"));
        }
        if grid.round(r).map_err(|e| e.to_string())?.get() != r {
            return Err(format!("b={bits} round not idempotent at {x:e}"));
        }
        if grid.round(-x).map_err(|e| e.to_string())?.get() != -r {
            return Err(format!("b={bits} round not sign-symmetric at {x:e}"));
        }
        if !on_grid(r, bits) {
            return Err(format!("b={bits} round({x:e}) = {r:e} has low bits set"));
        }
        let scale = exponent_scale(x).map_err(|e| e.to_string())?;
        if scale != oracle_scale(x) {
            return Err(format!("exponent_scale({x:e}) = {scale:e}"));
        }
        if r != 0.0 {
            let spacing = eps_rel * oracle_scale(r);
            if (r - x).abs() > 0.5 * spacing {
                return Err(format!(
                    "b={bits} |round({x:e}) - x| exceeds half the spacing"
                ));
            }
        }

        let tau = rng.uniform(lower, 0.25 * eps_rel);
        let params = RoundingParams::new(grid, tau).map_err(|e| e.to_string())?;
        if params.direction(r).map_err(|e| e.to_string())? != RoundingDirection::Ignore {
            return Err(format!(
                "b={bits} direction of grid value {r:e} is not ignore"
            ));
        }
        for dir in dirs {
            let got = grid.reverse(x, dir).map_err(|e| e.to_string())?.get();
            let want = oracle_rev(x, bits, dir);
            if got != want {
                return Err(format!(
                    "b={bits} rev({x:e}, {dir:?}) = {got:e}, oracle {want:e}"
                ));
            }
            if !on_grid(got, bits) {
                return Err(format!("b={bits} rev({x:e}, {dir:?}) off grid"));
            }
        }

        // Sync: a nearby auditor value replays to the trainer's choice.
        let dir = params.direction(x).map_err(|e| e.to_string())?;
        let target = grid.reverse(x, dir).map_err(|e| e.to_string())?.get();
        let bound = (0.25 * eps_rel * scale).min(tau * scale);
        let xa = x + bound * rng.uniform(-1.0, 1.0) * (1.0 - 1e-9);
        if xa != 0.0 && oracle_scale(xa) == scale && (xa - x).abs() < bound {
            report.sync_pairs += 1;
            let replayed = grid.reverse(xa, dir).map_err(|e| e.to_string())?.get();
            if replayed != target {
                return Err(format!(
                    "b={bits} sync broken: x_t={x:e} x_a={xa:e} tau={tau:e} dir={dir:?}: {replayed:e} vs {target:e}"
                ));
            }
        }
        report.values += 1;
    }
    Ok(report)
}

// ---- finite differences ----

fn random_tensor(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect()).unwrap()
}

/// Relative error with a floor on the denominator, so that gradients which
/// are zero up to rounding are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Loss of a dense layer followed by softmax cross-entropy, or by a sigmoid
/// and binary cross-entropy when the layer has one output.
fn head_loss(x: &Tensor, w: &Tensor, b: &Tensor, labels: &[usize], p: &DeviceProfile) -> f64 {
    let z = dense_forward(x, w, b, p).unwrap();
    if w.shape()[1] == 1 {
        bce_forward(&sigmoid_forward(&z), labels, p).unwrap().0
    } else {
        softmax_xent_forward(&z, labels, p).unwrap().0
    }
}

/// Largest relative error between analytic and central-difference gradients
/// of weights, bias and input over `cases` random small layers.
pub fn dense_fd_max_error(cases: usize, seed: u64) -> f64 {
    let p = DeviceProfile::sequential();
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let batch = 1 + rng.below(4) as usize;
        let inputs = 1 + rng.below(6) as usize;
        let outputs = 1 + rng.below(5) as usize;
        let classes = if outputs == 1 { 2 } else { outputs };
        let x = random_tensor(&mut rng, vec![batch, inputs], 1.0);
        let w = random_tensor(&mut rng, vec![inputs, outputs], 1.0);
        let b = random_tensor(&mut rng, vec![outputs], 0.5);
        let labels: Vec<usize> = (0..batch)
            .map(|_| rng.below(classes as u64) as usize)
            .collect();

        let z = dense_forward(&x, &w, &b, &p).unwrap();
        let upstream = if outputs == 1 {
            let y = sigmoid_forward(&z);
            let g = bce_forward(&y, &labels, &p).unwrap().1;
            sigmoid_backward(&g, &y).unwrap()
        } else {
            softmax_xent_forward(&z, &labels, &p).unwrap().1
        };
        let grads = dense_backward(&upstream, &x, &w, &p).unwrap();

        let mut probe = |which: usize, analytic: &[f64]| {
            let mut t = [x.clone(), w.clone(), b.clone()];
            for (i, &a) in analytic.iter().enumerate() {
                let v = t[which].data()[i];
                let h = 1e-6 * v.abs().max(1.0);
                t[which].data_mut()[i] = v + h;
                let up = head_loss(&t[0], &t[1], &t[2], &labels, &p);
                t[which].data_mut()[i] = v - h;
                let down = head_loss(&t[0], &t[1], &t[2], &labels, &p);
                t[which].data_mut()[i] = v;
                worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
            }
        };
        probe(0, grads.grad_x.data());
        probe(1, grads.grad_w.data());
        probe(2, grads.grad_b.data());
    }
    worst
}

// ---- merkle ----

/// Index of the first differing leaf by straight comparison.
pub fn linear_first_divergence(a: &[Digest], b: &[Digest]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}

/// `ceil(log2(n))` for `n >= 1`.
pub fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize
}

// ---- dispute game over loopback ----

/// Serves `tree` for exactly one session on an ephemeral port.
pub fn serve_once(
    tree: vtrain_core::MerkleTree,
) -> (
    std::net::SocketAddr,
    std::thread::JoinHandle<Vec<vtrain_core::game::SessionEnd>>,
) {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        vtrain_core::game::serve(
            &tree,
            &listener,
            Some(std::time::Duration::from_secs(10)),
            Some(1),
        )
        .unwrap()
    });
    (addr, handle)
}
