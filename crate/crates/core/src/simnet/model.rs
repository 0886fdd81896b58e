use serde::{Deserialize, Serialize};

use super::layers::{
    bce_forward, dense_forward, relu_forward, sigmoid_forward, softmax_xent_forward,
};
use super::{Dataset, DeviceProfile, Rng, SimError, Tensor};

/// One entry of a model architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Relu,
    Sigmoid,
    SoftmaxCrossEntropy,
}

impl LayerSpec {
    /// Stable name used as the key of adaptive threshold tables.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Sigmoid)
    }
}

/// Training objective, derived from the tail of the layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// The model ends in a `SoftmaxCrossEntropy` layer over `classes` logits.
    SoftmaxCrossEntropy { classes: usize },
    /// The model ends in a width-1 `Sigmoid`; binary cross-entropy is applied
    /// to its output.
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub classes: usize,
    pub loss: LossKind,
}

impl ModelSpec {
    /// `dim -> hidden -> classes` with ReLU and softmax cross-entropy.
    pub fn mlp(dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Dense {
                    inputs: dim,
                    outputs: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: hidden,
                    outputs: classes,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
        }
    }

    /// Dense layer to one output followed by a sigmoid.
    pub fn logistic(dim: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Dense {
                    inputs: dim,
                    outputs: 1,
                },
                LayerSpec::Sigmoid,
            ],
        }
    }

    /// Checks dimension compatibility and identifies the loss.
    pub fn shape(&self) -> Result<ModelShape, SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        let Some(LayerSpec::Dense { inputs, .. }) = self.layers.first() else {
            return bad("a model must start with a dense layer".into());
        };
        let input_dim = *inputs;
        let mut width = input_dim;
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != width || inputs == 0 || outputs == 0 {
                        return bad(format!(
                            "layer {idx}: dense {inputs}->{outputs} after width {width}"
                        ));
                    }
                    width = outputs;
                }
                LayerSpec::SoftmaxCrossEntropy if idx + 1 != self.layers.len() => {
                    return bad(format!("layer {idx}: softmax cross-entropy must be last"));
                }
                _ => {}
            }
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxCrossEntropy) if width >= 2 => Ok(ModelShape {
                input_dim,
                classes: width,
                loss: LossKind::SoftmaxCrossEntropy { classes: width },
            }),
            Some(LayerSpec::Sigmoid) if width == 1 => Ok(ModelShape {
                input_dim,
                classes: 2,
                loss: LossKind::BinaryCrossEntropy,
            }),
            _ => bad("a model must end in softmax cross-entropy or a width-1 sigmoid".into()),
        }
    }

    /// Layers that produce a logged activation (everything but a loss layer).
    pub fn activation_layers(&self) -> &[LayerSpec] {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxCrossEntropy) => &self.layers[..self.layers.len() - 1],
            _ => &self.layers,
        }
    }

    pub fn dense_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. }))
            .count()
    }
}

/// Weight matrix `[inputs, outputs]` and bias `[outputs]` of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable state in declaration order, one entry per dense layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub layers: Vec<DenseParams>,
}

impl ModelWeights {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Every parameter in canonical order: per layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    /// Mutable access to the `index`-th parameter in canonical order.
    pub fn value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let (w, b) = (layer.weight.len(), layer.bias.len());
            if index < w {
                return Some(&mut layer.weight.data_mut()[index]);
            }
            if index < w + b {
                return Some(&mut layer.bias.data_mut()[index - w]);
            }
            index -= w + b;
        }
        None
    }
}

/// Draws dense weights uniformly in `±1/sqrt(fan_in)`, row-major in layer order;
/// biases start at zero.
pub fn init_weights(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelWeights, SimError> {
    let mut layers = Vec::with_capacity(spec.dense_count());
    for layer in &spec.layers {
        if let LayerSpec::Dense { inputs, outputs } = *layer {
            let bound = 1.0 / (inputs as f64).sqrt();
            let data = (0..inputs * outputs)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            layers.push(DenseParams {
                weight: Tensor::from_vec(vec![inputs, outputs], data)?,
                bias: Tensor::zeros(&[outputs])?,
            });
        }
    }
    Ok(ModelWeights { layers })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Plain full-dataset forward pass, no rounding.
pub fn evaluate(
    spec: &ModelSpec,
    weights: &ModelWeights,
    data: &Dataset,
    profile: &DeviceProfile,
) -> Result<Evaluation, SimError> {
    let shape = spec.shape()?;
    let mut act = data.features.clone();
    let mut dense = weights.layers.iter();
    for layer in spec.activation_layers() {
        act = match layer {
            LayerSpec::Dense { .. } => {
                let p = dense
                    .next()
                    .ok_or_else(|| SimError::InvalidSpec("missing dense parameters".into()))?;
                dense_forward(&act, &p.weight, &p.bias, profile)?
            }
            LayerSpec::Relu => relu_forward(&act),
            LayerSpec::Sigmoid => sigmoid_forward(&act),
            LayerSpec::SoftmaxCrossEntropy => unreachable!("loss layer is not an activation"),
        };
    }
    let (rows, width) = act.matrix_dims()?;
    let correct = (0..rows)
        .filter(|&r| {
            let row = act.row(r);
            let predicted = match shape.loss {
                LossKind::BinaryCrossEntropy => usize::from(row[0] >= 0.5),
                LossKind::SoftmaxCrossEntropy { .. } => (0..width)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0),
            };
            predicted == data.labels[r]
        })
        .count();
    let loss = match shape.loss {
        LossKind::SoftmaxCrossEntropy { .. } => {
            softmax_xent_forward(&act, &data.labels, profile)?.0
        }
        LossKind::BinaryCrossEntropy => bce_forward(&act, &data.labels, profile)?.0,
    };
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / rows as f64,
    })
}
