//! The training loop shared by trainer, auditor and the uncorrected replay.
//! Only the treatment of each freshly computed tensor differs between them.

use std::fs::File;
use std::io::{Read, Seek, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{ProtocolError, TrainConfig, BCE_TAU_KEY};
use crate::fpround::{Grid, RoundingDirection, RoundingParams};
use crate::merkle::{hash_weights, Digest, MerkleTree};
use crate::roundlog::{LogError, LogHeader, LogReader, LogWriter};
use crate::simnet::layers::{
    bce_forward, dense_backward, dense_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, softmax_xent_forward,
};
use crate::simnet::{
    init_weights, make_dataset, Batcher, Dataset, DeviceProfile, LayerSpec, LossKind, ModelWeights,
    Rng, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

/// Per-step counters split by pass. For a trainer these are logged non-ignore
/// directions; for an auditor, elements where `rev` overrode `rnd`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub forward: u64,
    pub backward: u64,
}

impl StepStats {
    fn bump(&mut self, phase: Phase) {
        match phase {
            Phase::Forward => self.forward += 1,
            Phase::Backward => self.backward += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

/// Replace one parameter with the next grid value up right after the update
/// of `step` (1-based). Used for fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightTamper {
    pub step: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub tamper: Option<WeightTamper>,
    /// Keep a copy of the weights at every checkpoint.
    pub keep_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tree: MerkleTree,
    pub final_weights: ModelWeights,
    pub final_digest: Digest,
    pub per_step: Vec<StepStats>,
    /// Rounded mean batch loss of every step.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<ModelWeights>,
    pub elapsed: Duration,
}

impl RunOutput {
    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn totals(&self) -> StepStats {
        self.per_step
            .iter()
            .fold(StepStats::default(), |acc, s| StepStats {
                forward: acc.forward + s.forward,
                backward: acc.backward + s.backward,
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub run: RunOutput,
    pub log: LogHeader,
    /// Logged directions by code: down, ignore, up.
    pub histogram: [u64; 3],
}

#[derive(Debug, Clone)]
pub struct AuditOutput {
    pub run: RunOutput,
    /// False for the uncorrected replay.
    pub corrected: bool,
}

trait Settle {
    fn settle(
        &mut self,
        values: &mut [f64],
        params: &RoundingParams,
        phase: Phase,
    ) -> Result<(), ProtocolError>;
    fn end_step(&mut self) -> StepStats;
}

struct Logging<W: Write + Seek> {
    writer: LogWriter<W>,
    step: StepStats,
    histogram: [u64; 3],
}

impl<W: Write + Seek> Settle for Logging<W> {
    fn settle(
        &mut self,
        values: &mut [f64],
        params: &RoundingParams,
        phase: Phase,
    ) -> Result<(), ProtocolError> {
        for v in values {
            let dir = params.direction(*v)?;
            self.writer.write(dir)?;
            self.histogram[dir.code() as usize] += 1;
            if dir != RoundingDirection::Ignore {
                self.step.bump(phase);
            }
            *v = params.grid.round(*v)?.get();
        }
        Ok(())
    }

    fn end_step(&mut self) -> StepStats {
        std::mem::take(&mut self.step)
    }
}

struct Replaying<R: Read> {
    reader: LogReader<R>,
    step: StepStats,
}

impl<R: Read> Settle for Replaying<R> {
    fn settle(
        &mut self,
        values: &mut [f64],
        params: &RoundingParams,
        phase: Phase,
    ) -> Result<(), ProtocolError> {
        for v in values {
            let dir = match self.reader.read() {
                Ok(dir) => dir,
                Err(LogError::Exhausted(n)) => {
                    return Err(ProtocolError::OperationCountMismatch(format!(
                        "log ran out after {n} entries"
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            let natural = params.grid.round(*v)?;
            let forced = params.grid.reverse(*v, dir)?;
            if forced != natural {
                self.step.bump(phase);
            }
            *v = forced.get();
        }
        Ok(())
    }

    fn end_step(&mut self) -> StepStats {
        std::mem::take(&mut self.step)
    }
}

struct Naive;

impl Settle for Naive {
    fn settle(
        &mut self,
        values: &mut [f64],
        params: &RoundingParams,
        _: Phase,
    ) -> Result<(), ProtocolError> {
        round_all(values, params.grid)
    }

    fn end_step(&mut self) -> StepStats {
        StepStats::default()
    }
}

fn round_all(values: &mut [f64], grid: Grid) -> Result<(), ProtocolError> {
    for v in values {
        *v = grid.round(*v)?.get();
    }
    Ok(())
}

/// The synthetic dataset a config trains on. It is the first thing drawn
/// from the seed, ahead of weight initialisation and batching.
pub fn training_data(cfg: &TrainConfig) -> Result<Dataset, ProtocolError> {
    let mut rng = Rng::new(cfg.seed);
    Ok(make_dataset(
        cfg.data.size,
        cfg.data.dim,
        cfg.data.classes,
        &mut rng,
    )?)
}

/// Threshold parameters for one layer's outputs, resolved once per run.
struct LayerPlan {
    spec: LayerSpec,
    params: RoundingParams,
    /// Index into `ModelWeights::layers` for dense layers.
    dense: Option<usize>,
}

fn plan(cfg: &TrainConfig) -> Result<(Vec<LayerPlan>, LossKind, RoundingParams), ProtocolError> {
    let shape = cfg.model.shape()?;
    let mut dense = 0;
    let mut layers = Vec::new();
    for spec in cfg.model.activation_layers() {
        let index = matches!(spec, LayerSpec::Dense { .. }).then(|| {
            dense += 1;
            dense - 1
        });
        layers.push(LayerPlan {
            spec: *spec,
            params: cfg.rounding_params(spec.kind_name())?,
            dense: index,
        });
    }
    let loss_key = match shape.loss {
        LossKind::SoftmaxCrossEntropy { .. } => LayerSpec::SoftmaxCrossEntropy.kind_name(),
        LossKind::BinaryCrossEntropy => BCE_TAU_KEY,
    };
    Ok((layers, shape.loss, cfg.rounding_params(loss_key)?))
}

fn run<S: Settle>(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    settle: &mut S,
    opts: &RunOptions,
) -> Result<RunOutput, ProtocolError> {
    cfg.validate()?;
    let started = Instant::now();
    let grid = cfg.grid()?;
    let (layers, loss_kind, loss_params) = plan(cfg)?;

    let mut rng = Rng::new(cfg.seed);
    let data = make_dataset(cfg.data.size, cfg.data.dim, cfg.data.classes, &mut rng)?;
    let mut weights = init_weights(&cfg.model, &mut rng)?;
    for p in &mut weights.layers {
        round_all(p.weight.data_mut(), grid)?;
        round_all(p.bias.data_mut(), grid)?;
    }
    let mut batcher = Batcher::new(data.len(), cfg.batch_size)?;

    let steps = cfg.steps();
    let mut leaves = Vec::with_capacity(cfg.checkpoint_count());
    let mut checkpoints = Vec::new();
    let mut per_step = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    let mut inputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut grads_w: Vec<(Tensor, Tensor)> = Vec::with_capacity(weights.layers.len());

    for step in 1..=steps {
        let at_step = |e: ProtocolError| e.at_step(step);
        let idx = batcher.next_batch(&mut rng);
        let (mut act, labels) = data.gather(&idx)?;

        inputs.clear();
        for layer in &layers {
            let mut out = match layer.spec {
                LayerSpec::Dense { .. } => {
                    let p = &weights.layers[layer.dense.expect("dense index")];
                    dense_forward(&act, &p.weight, &p.bias, profile)?
                }
                LayerSpec::Relu => relu_forward(&act),
                LayerSpec::Sigmoid => sigmoid_forward(&act),
                LayerSpec::SoftmaxCrossEntropy => unreachable!("loss layer is not an activation"),
            };
            settle
                .settle(out.data_mut(), &layer.params, Phase::Forward)
                .map_err(at_step)?;
            inputs.push(std::mem::replace(&mut act, out));
        }

        let (loss, mut grad) = match loss_kind {
            LossKind::SoftmaxCrossEntropy { .. } => softmax_xent_forward(&act, &labels, profile)?,
            LossKind::BinaryCrossEntropy => bce_forward(&act, &labels, profile)?,
        };
        if !loss.is_finite() {
            return Err(ProtocolError::NonFiniteLoss { step });
        }
        losses.push(
            grid.round(loss)
                .map_err(|e| ProtocolError::from(e).at_step(step))?
                .get(),
        );
        settle
            .settle(grad.data_mut(), &loss_params, Phase::Backward)
            .map_err(at_step)?;

        grads_w.clear();
        let mut output = act;
        for (layer, input) in layers.iter().zip(inputs.drain(..)).rev() {
            let mut next = match layer.spec {
                LayerSpec::Dense { .. } => {
                    let p = &weights.layers[layer.dense.expect("dense index")];
                    let g = dense_backward(&grad, &input, &p.weight, profile)?;
                    grads_w.push((g.grad_w, g.grad_b));
                    g.grad_x
                }
                LayerSpec::Relu => relu_backward(&grad, &input)?,
                LayerSpec::Sigmoid => sigmoid_backward(&grad, &output)?,
                LayerSpec::SoftmaxCrossEntropy => unreachable!("loss layer is not an activation"),
            };
            settle
                .settle(next.data_mut(), &layer.params, Phase::Backward)
                .map_err(at_step)?;
            grad = next;
            output = input;
        }

        // Gradients were collected last layer first.
        for (p, (gw, gb)) in weights.layers.iter_mut().zip(grads_w.drain(..).rev()) {
            for (w, g) in p.weight.data_mut().iter_mut().zip(gw.data()) {
                *w = grid
                    .round(*w - cfg.learning_rate * g)
                    .map_err(|e| ProtocolError::from(e).at_step(step))?
                    .get();
            }
            for (b, g) in p.bias.data_mut().iter_mut().zip(gb.data()) {
                *b = grid
                    .round(*b - cfg.learning_rate * g)
                    .map_err(|e| ProtocolError::from(e).at_step(step))?
                    .get();
            }
        }
        if let Some(t) = opts.tamper.filter(|t| t.step == step) {
            let count = weights.parameter_count();
            let w = weights.value_mut(t.index).ok_or_else(|| {
                ProtocolError::InvalidConfig(format!(
                    "tamper index {} outside {count} parameters",
                    t.index
                ))
            })?;
            *w = grid.next_up(*w)?.get();
        }

        per_step.push(settle.end_step());
        if step % cfg.checkpoint_interval == 0 || step == steps {
            leaves.push(hash_weights(&weights, cfg.b_m)?);
            if opts.keep_checkpoints {
                checkpoints.push(weights.clone());
            }
        }
    }

    let final_digest = hash_weights(&weights, cfg.b_m)?;
    Ok(RunOutput {
        tree: MerkleTree::build(leaves)?,
        final_weights: weights,
        final_digest,
        per_step,
        losses,
        checkpoints,
        elapsed: started.elapsed(),
    })
}

/// Trains on `cfg.trainer_profile`, streaming the rounding log into `sink`.
pub fn train_with<W: Write + Seek>(
    cfg: &TrainConfig,
    sink: W,
    opts: &RunOptions,
) -> Result<(TrainOutput, W), ProtocolError> {
    let b_r = u8::try_from(cfg.b_r)
        .map_err(|_| ProtocolError::InvalidConfig(format!("b_r {}", cfg.b_r)))?;
    let mut logging = Logging {
        writer: LogWriter::new(sink, b_r, cfg.compress_log)?,
        step: StepStats::default(),
        histogram: [0; 3],
    };
    let run = run(cfg, &cfg.trainer_profile, &mut logging, opts)?;
    let (sink, log) = logging.writer.finish()?;
    let out = TrainOutput {
        run,
        log,
        histogram: logging.histogram,
    };
    Ok((out, sink))
}

pub fn train(cfg: &TrainConfig, log_path: impl AsRef<Path>) -> Result<TrainOutput, ProtocolError> {
    train_file(cfg, log_path, &RunOptions::default())
}

pub fn train_file(
    cfg: &TrainConfig,
    log_path: impl AsRef<Path>,
    opts: &RunOptions,
) -> Result<TrainOutput, ProtocolError> {
    let file = File::create(log_path.as_ref())?;
    let (out, file) = train_with(cfg, file, opts)?;
    file.sync_all()?;
    Ok(out)
}

/// Replays training on `profile`, forcing the trainer's logged rounding
/// decisions.
pub fn audit<R: Read>(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    log: LogReader<R>,
) -> Result<AuditOutput, ProtocolError> {
    audit_with(cfg, profile, log, &RunOptions::default())
}

pub fn audit_with<R: Read>(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    log: LogReader<R>,
    opts: &RunOptions,
) -> Result<AuditOutput, ProtocolError> {
    let header = *log.header();
    if u32::from(header.b_r) != cfg.b_r {
        return Err(ProtocolError::LogMismatch(format!(
            "log was written with b_r = {}, config says {}",
            header.b_r, cfg.b_r
        )));
    }
    let mut replay = Replaying {
        reader: log,
        step: StepStats::default(),
    };
    let run = run(cfg, profile, &mut replay, opts)?;
    let left = replay.reader.remaining();
    if left > 0 {
        return Err(ProtocolError::OperationCountMismatch(format!(
            "{left} log entries left after the last step"
        )));
    }
    replay.reader.finish()?;
    Ok(AuditOutput {
        run,
        corrected: true,
    })
}

pub fn audit_file(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    log_path: impl AsRef<Path>,
) -> Result<AuditOutput, ProtocolError> {
    audit(cfg, profile, LogReader::open(log_path)?)
}

/// Replays training on `profile` with plain nearest rounding everywhere.
pub fn audit_without_corrections(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
) -> Result<AuditOutput, ProtocolError> {
    audit_without_corrections_with(cfg, profile, &RunOptions::default())
}

pub fn audit_without_corrections_with(
    cfg: &TrainConfig,
    profile: &DeviceProfile,
    opts: &RunOptions,
) -> Result<AuditOutput, ProtocolError> {
    let run = run(cfg, profile, &mut Naive, opts)?;
    Ok(AuditOutput {
        run,
        corrected: false,
    })
}

/// Euclidean distance over all parameters, summed left to right.
pub fn weight_l2_distance(a: &ModelWeights, b: &ModelWeights) -> Result<f64, ProtocolError> {
    let same_shape = a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.weight.shape() == y.weight.shape() && x.bias.shape() == y.bias.shape());
    if !same_shape {
        return Err(ProtocolError::ShapeMismatch);
    }
    let squares: Vec<f64> = a
        .values()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    Ok(DeviceProfile::sequential().reduce(&squares).sqrt())
}

/// Distance between matching checkpoints of two runs.
pub fn l2_series(a: &[ModelWeights], b: &[ModelWeights]) -> Result<Vec<f64>, ProtocolError> {
    if a.len() != b.len() {
        return Err(ProtocolError::ShapeMismatch);
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| weight_l2_distance(x, y))
        .collect()
}
