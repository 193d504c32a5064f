//! Batch normalization over every non-channel position.

use super::linalg::pairwise_sum;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics may be updated afterwards.
    Train,
    /// Running statistics only.
    Eval,
}

/// Learned scale/shift plus running moments for `C` features.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self::with_constants(channels, DEFAULT_EPSILON, DEFAULT_MOMENTUM)
    }

    pub fn with_constants(channels: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Fold the batch moments of a train-mode pass into the running moments.
    /// The running variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != NormMode::Train {
            return;
        }
        let m = self.momentum;
        let unbias = cache.count as f64 / (cache.count as f64 - 1.0);
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * cache.mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * cache.var[c] * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub mode: NormMode,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

fn channel_values(data: &[f64], channels: usize, c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(channels).copied().collect()
}

pub fn batch_norm_forward(input: &Tensor, state: &BatchNormState, mode: NormMode) -> Result<(Tensor, BatchNormCache)> {
    let ch = state.channels();
    if input.dims().len() < 2 || *input.dims().last().unwrap() != ch {
        return Err(Error::Shape(format!(
            "batch norm over {ch} features got dims {:?}",
            input.dims()
        )));
    }
    if mode == NormMode::Train && input.batch() < 2 {
        return Err(Error::Config(format!(
            "batch norm in train mode needs at least 2 samples, got {}",
            input.batch()
        )));
    }
    let count = input.len() / ch;
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let vals = channel_values(input.data(), ch, c);
                let mu = pairwise_sum(&vals) / count as f64;
                let sq: Vec<f64> = vals.iter().map(|v| (v - mu) * (v - mu)).collect();
                mean[c] = mu;
                var[c] = pairwise_sum(&sq) / count as f64;
            }
            (mean, var)
        }
        NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut normalized = Vec::with_capacity(input.len());
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(ch) {
        for c in 0..ch {
            let xh = (row[c] - mean[c]) * inv_std[c];
            normalized.push(xh);
            out.push(state.scale[c] * xh + state.shift[c]);
        }
    }
    let cache = BatchNormCache {
        mode,
        normalized,
        inv_std,
        mean,
        var,
        count,
    };
    Ok((Tensor::new(input.dims().to_vec(), out)?, cache))
}

pub fn batch_norm_backward(grad_out: &Tensor, state: &BatchNormState, cache: &BatchNormCache) -> Result<BatchNormGrads> {
    let ch = state.channels();
    if grad_out.len() != cache.normalized.len() {
        return Err(Error::Shape("batch norm gradient does not match cached forward".into()));
    }
    let m = cache.count as f64;
    let mut gscale = vec![0.0; ch];
    let mut gshift = vec![0.0; ch];
    for c in 0..ch {
        let gy = channel_values(grad_out.data(), ch, c);
        let xh = channel_values(&cache.normalized, ch, c);
        let prod: Vec<f64> = gy.iter().zip(&xh).map(|(a, b)| a * b).collect();
        gshift[c] = pairwise_sum(&gy);
        gscale[c] = pairwise_sum(&prod);
    }
    let mut gin = Vec::with_capacity(grad_out.len());
    match cache.mode {
        NormMode::Train => {
            for (gy, xh) in grad_out.data().chunks(ch).zip(cache.normalized.chunks(ch)) {
                for c in 0..ch {
                    let k = state.scale[c] * cache.inv_std[c];
                    gin.push(k * (gy[c] - gshift[c] / m - xh[c] * gscale[c] / m));
                }
            }
        }
        NormMode::Eval => {
            for gy in grad_out.data().chunks(ch) {
                for c in 0..ch {
                    gin.push(gy[c] * state.scale[c] * cache.inv_std[c]);
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.dims().to_vec(), gin)?,
        scale: gscale,
        shift: gshift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tensor::inner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_feature() {
        let x = random(vec![4, 10, 3], 1);
        let st = BatchNormState::with_constants(3, 0.0, 0.9);
        let (y, _) = batch_norm_forward(&x, &st, NormMode::Train).unwrap();
        for c in 0..3 {
            let v = channel_values(y.data(), 3, c);
            let mean = v.iter().sum::<f64>() / 40.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_is_near_identity() {
        let x = random(vec![2, 5, 2], 2);
        let st = BatchNormState::with_constants(2, 1e-12, 0.9);
        let (y, _) = batch_norm_forward(&x, &st, NormMode::Eval).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn single_sample_train_is_config_error() {
        let st = BatchNormState::new(2);
        assert!(matches!(
            batch_norm_forward(&Tensor::zeros(vec![1, 4, 2]), &st, NormMode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_variance_is_finite() {
        let st = BatchNormState::new(1);
        let x = Tensor::new(vec![3, 2, 1], vec![4.0; 6]).unwrap();
        let (y, _) = batch_norm_forward(&x, &st, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn running_stats_move_toward_batch_moments() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (_, cache) = batch_norm_forward(&x, &st, NormMode::Train).unwrap();
        st.update_running(&cache);
        assert!((st.running_mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((st.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let x = random(vec![4, 10, 3], 3);
        let mut st = BatchNormState::new(3);
        st.scale = vec![0.7, 1.3, -0.4];
        st.shift = vec![0.1, -0.2, 0.3];
        let probe = random(vec![4, 10, 3], 4);
        let loss = |x: &Tensor, st: &BatchNormState| {
            let (y, _) = batch_norm_forward(x, st, NormMode::Train).unwrap();
            // quadratic so the gradient through the normalization is non-trivial
            inner(y.data(), probe.data()) + 0.5 * inner(y.data(), y.data())
        };
        let (y, cache) = batch_norm_forward(&x, &st, NormMode::Train).unwrap();
        let gy = Tensor::new(
            y.dims().to_vec(),
            y.data().iter().zip(probe.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let g = batch_norm_backward(&gy, &st, &cache).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += eps;
            b.data_mut()[i] -= eps;
            let fd = (loss(&a, &st) - loss(&b, &st)) / (2.0 * eps);
            assert!(rel(fd, g.input.data()[i]) < 1e-5, "input {i}: {fd} vs {}", g.input.data()[i]);
        }
        for c in 0..3 {
            let (mut a, mut b) = (st.clone(), st.clone());
            a.scale[c] += eps;
            b.scale[c] -= eps;
            let fd = (loss(&x, &a) - loss(&x, &b)) / (2.0 * eps);
            assert!(rel(fd, g.scale[c]) < 1e-5);
            let (mut a, mut b) = (st.clone(), st.clone());
            a.shift[c] += eps;
            b.shift[c] -= eps;
            let fd = (loss(&x, &a) - loss(&x, &b)) / (2.0 * eps);
            assert!(rel(fd, g.shift[c]) < 1e-5);
        }
    }
}
