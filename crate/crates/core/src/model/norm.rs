//! Per-channel batch normalization.

use super::params::Slot;
use super::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Slot,
    pub beta: Slot,
    /// Running statistics in the state buffer.
    pub running_mean: Slot,
    pub running_var: Slot,
}

#[derive(Debug, Clone, Default)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased variance per channel, for the running update.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    /// Normalizes with batch statistics.
    pub fn forward_train(&self, values: &[f64], x: &Tensor) -> (Tensor, BnCache) {
        let (n, c, plane) = (x.n(), x.c(), x.plane());
        assert_eq!(c, self.channels);
        let gamma = self.gamma.get(values);
        let beta = self.beta.get(values);
        let count = (n * plane) as f64;
        let mut y = Tensor::zeros(x.shape);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; c];
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        for ch in 0..c {
            let range = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let mean = (0..n).map(|i| x.data[range(i)].iter().sum::<f64>()).sum::<f64>() / count;
            let var = (0..n)
                .map(|i| x.data[range(i)].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            for i in 0..n {
                for j in range(i) {
                    let h = (x.data[j] - mean) * is;
                    xhat[j] = h;
                    y.data[j] = gamma[ch] * h + beta[ch];
                }
            }
            inv_std[ch] = is;
            batch_mean[ch] = mean;
            batch_var[ch] = if count > 1.0 { var * count / (count - 1.0) } else { var };
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        };
        (y, cache)
    }

    /// Normalizes one sample with the running statistics.
    pub fn forward_infer_sample(&self, values: &[f64], state: &[f64], x: &mut [f64]) {
        let gamma = self.gamma.get(values);
        let beta = self.beta.get(values);
        let mean = self.running_mean.get(state);
        let var = self.running_var.get(state);
        let plane = x.len() / self.channels;
        for (ch, xc) in x.chunks_exact_mut(plane).enumerate() {
            let scale = gamma[ch] / (var[ch] + BN_EPSILON).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            for v in xc {
                *v = *v * scale + shift;
            }
        }
    }

    pub fn backward(&self, values: &[f64], cache: &BnCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let (n, c, plane) = (dy.n(), dy.c(), dy.plane());
        let gamma = self.gamma.get(values).to_vec();
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let range = |i: usize| (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for i in 0..n {
                for j in range(i) {
                    sum_dy += dy.data[j];
                    sum_dy_xhat += dy.data[j] * cache.xhat[j];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * cache.inv_std[ch] / count;
            for i in 0..n {
                for j in range(i) {
                    dx.data[j] = k * (count * dy.data[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                }
            }
        }
        for (g, d) in self.gamma.get_mut(grads).iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (g, d) in self.beta.get_mut(grads).iter_mut().zip(&dbeta) {
            *g += d;
        }
        dx
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(&self, state: &mut [f64], cache: &BnCache) {
        for (r, b) in self.running_mean.get_mut(state).iter_mut().zip(&cache.batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.running_var.get_mut(state).iter_mut().zip(&cache.batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}
