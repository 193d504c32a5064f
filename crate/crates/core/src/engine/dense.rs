//! Fully connected layers, ReLU, softmax cross-entropy and the SGD update.

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `weights[d * outputs + h]`, i.e. a `D x H` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_dense(input: &Tensor, w: &DenseWeights) -> Result<()> {
    if input.sample_len() != w.inputs || input.dims().len() < 2 {
        return Err(Error::Shape(format!(
            "fully connected layer expects {} inputs per sample, got dims {:?}",
            w.inputs,
            input.dims()
        )));
    }
    Ok(())
}

/// Affine map of the flattened sample: `B x D -> B x H`.
pub fn dense_forward(input: &Tensor, w: &DenseWeights) -> Result<Tensor> {
    check_dense(input, w)?;
    let b = input.batch();
    let mut out = Vec::with_capacity(b * w.outputs);
    for _ in 0..b {
        out.extend_from_slice(&w.bias);
    }
    gemm(b, w.inputs, w.outputs, input.data(), false, &w.weights, false, 1.0, &mut out);
    Tensor::new(vec![b, w.outputs], out)
}

pub fn dense_backward(input: &Tensor, w: &DenseWeights, grad_out: &Tensor) -> Result<DenseGrads> {
    check_dense(input, w)?;
    let b = input.batch();
    if grad_out.dims() != [b, w.outputs] {
        return Err(Error::Shape(format!(
            "fully connected gradient dims {:?}, expected [{b}, {}]",
            grad_out.dims(),
            w.outputs
        )));
    }
    let mut gw = vec![0.0; w.inputs * w.outputs];
    gemm(w.inputs, b, w.outputs, input.data(), true, grad_out.data(), false, 0.0, &mut gw);
    let mut gb = vec![0.0; w.outputs];
    for row in grad_out.data().chunks(w.outputs) {
        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    let mut gin = vec![0.0; b * w.inputs];
    gemm(b, w.outputs, w.inputs, grad_out.data(), false, &w.weights, true, 0.0, &mut gin);
    Ok(DenseGrads {
        input: Tensor::new(input.dims().to_vec(), gin)?,
        weights: gw,
        bias: gb,
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same shape")
}

/// Passes the gradient where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.dims() != grad_out.dims() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Row-wise softmax of a `B x K` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax")?;
    let k = logits.dims()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.dims().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "softmax cross-entropy")?;
    let (b, k) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} outside [0, {k})")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}

/// `p <- p - lr * g`. A non-finite gradient aborts before any write.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd: {} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient {} at index {i}", grads[i])));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}
