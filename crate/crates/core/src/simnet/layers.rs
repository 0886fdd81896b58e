//! Forward and backward kernels. Every reduction goes through the device
//! profile; elementwise work is identical on all profiles.

use super::{DeviceProfile, SimError, Tensor};

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), SimError> {
    if cond {
        Ok(())
    } else {
        Err(SimError::Shape(msg()))
    }
}

/// `y = x W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    profile: &DeviceProfile,
) -> Result<Tensor, SimError> {
    let (batch, inputs) = x.matrix_dims()?;
    let (w_in, outputs) = w.matrix_dims()?;
    check(w.shape().len() == 2 && w_in == inputs, || {
        format!(
            "dense weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )
    })?;
    check(b.len() == outputs, || {
        format!("bias of length {} for {outputs} outputs", b.len())
    })?;

    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut products = vec![0.0; inputs];
    let mut out = Vec::with_capacity(batch * outputs);
    for r in 0..batch {
        let row = &xd[r * inputs..(r + 1) * inputs];
        for j in 0..outputs {
            for (i, p) in products.iter_mut().enumerate() {
                *p = row[i] * wd[i * outputs + j];
            }
            out.push(profile.reduce(&products) + bd[j]);
        }
    }
    Tensor::from_vec(vec![batch, outputs], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

pub fn dense_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    profile: &DeviceProfile,
) -> Result<DenseGrads, SimError> {
    let (batch, inputs) = x.matrix_dims()?;
    let (w_in, outputs) = w.matrix_dims()?;
    check(w_in == inputs, || {
        format!(
            "dense weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )
    })?;
    check(grad_out.shape() == [batch, outputs], || {
        format!(
            "upstream gradient {:?}, expected [{batch}, {outputs}]",
            grad_out.shape()
        )
    })?;
    let (g, xd, wd) = (grad_out.data(), x.data(), w.data());

    let mut terms = vec![0.0; outputs];
    let mut grad_x = Vec::with_capacity(batch * inputs);
    for r in 0..batch {
        let grow = &g[r * outputs..(r + 1) * outputs];
        for i in 0..inputs {
            let wrow = &wd[i * outputs..(i + 1) * outputs];
            for (t, (&gv, &wv)) in terms.iter_mut().zip(grow.iter().zip(wrow)) {
                *t = gv * wv;
            }
            grad_x.push(profile.reduce(&terms));
        }
    }

    let mut terms = vec![0.0; batch];
    let mut grad_w = Vec::with_capacity(inputs * outputs);
    for i in 0..inputs {
        for j in 0..outputs {
            for (r, t) in terms.iter_mut().enumerate() {
                *t = xd[r * inputs + i] * g[r * outputs + j];
            }
            grad_w.push(profile.reduce(&terms));
        }
    }
    let mut grad_b = Vec::with_capacity(outputs);
    for j in 0..outputs {
        for (r, t) in terms.iter_mut().enumerate() {
            *t = g[r * outputs + j];
        }
        grad_b.push(profile.reduce(&terms));
    }

    Ok(DenseGrads {
        grad_x: Tensor::from_vec(vec![batch, inputs], grad_x)?,
        grad_w: Tensor::from_vec(vec![inputs, outputs], grad_w)?,
        grad_b: Tensor::from_vec(vec![outputs], grad_b)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through ReLU given the layer's forward input.
pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor, SimError> {
    check(grad_out.shape() == x.shape(), || {
        format!(
            "relu gradient {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )
    })?;
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape().to_vec(), data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Gradient through the sigmoid given the layer's forward output `y`.
pub fn sigmoid_backward(grad_out: &Tensor, y: &Tensor) -> Result<Tensor, SimError> {
    check(grad_out.shape() == y.shape(), || {
        format!(
            "sigmoid gradient {:?} vs output {:?}",
            grad_out.shape(),
            y.shape()
        )
    })?;
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &p)| g * p * (1.0 - p))
        .collect();
    Tensor::from_vec(grad_out.shape().to_vec(), data)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), SimError> {
    check(labels.len() == batch, || {
        format!("{} labels for a batch of {batch}", labels.len())
    })?;
    match labels.iter().find(|&&l| l >= classes) {
        Some(&bad) => Err(SimError::InvalidLabel {
            label: bad,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent_forward(
    logits: &Tensor,
    labels: &[usize],
    profile: &DeviceProfile,
) -> Result<(f64, Tensor), SimError> {
    let (batch, classes) = logits.matrix_dims()?;
    check_labels(labels, batch, classes)?;
    let scale = 1.0 / batch as f64;
    let mut row_losses = Vec::with_capacity(batch);
    let mut grad = Vec::with_capacity(batch * classes);
    let mut exps = vec![0.0; classes];
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (e, &z) in exps.iter_mut().zip(row) {
            *e = (z - max).exp();
        }
        let total = profile.reduce(&exps);
        row_losses.push(total.ln() - (row[label] - max));
        for (k, &e) in exps.iter().enumerate() {
            let target = if k == label { 1.0 } else { 0.0 };
            grad.push((e / total - target) * scale);
        }
    }
    let loss = profile.reduce(&row_losses) * scale;
    Ok((loss, Tensor::from_vec(vec![batch, classes], grad)?))
}

/// Probabilities are clamped this far away from 0 and 1 inside the loss.
const BCE_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy of probabilities `[batch, 1]` against 0/1 labels,
/// and its gradient w.r.t. the probabilities.
pub fn bce_forward(
    probs: &Tensor,
    labels: &[usize],
    profile: &DeviceProfile,
) -> Result<(f64, Tensor), SimError> {
    let (batch, width) = probs.matrix_dims()?;
    check(width == 1, || {
        format!("binary cross-entropy needs width 1, got {width}")
    })?;
    check_labels(labels, batch, 2)?;
    let scale = 1.0 / batch as f64;
    let mut row_losses = Vec::with_capacity(batch);
    let mut grad = Vec::with_capacity(batch);
    for (&p, &label) in probs.data().iter().zip(labels) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = label as f64;
        row_losses.push(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()));
        grad.push((p - y) / (p * (1.0 - p)) * scale);
    }
    let loss = profile.reduce(&row_losses) * scale;
    Ok((loss, Tensor::from_vec(vec![batch, 1], grad)?))
}
