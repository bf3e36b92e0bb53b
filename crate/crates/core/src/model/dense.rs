//! Fully connected layer, `[in, out]` weights.

use super::params::Slot;

#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Dense {
    /// `y = x W + b` for one sample.
    pub fn forward_sample(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        let w = self.weight.get(values);
        y.copy_from_slice(self.bias.get(values));
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * self.outputs..(i + 1) * self.outputs];
            for (yo, &wv) in y.iter_mut().zip(row) {
                *yo += xi * wv;
            }
        }
    }

    /// Batch forward over row-major `[N, inputs]`.
    pub fn forward(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.inputs;
        let mut y = vec![0.0; n * self.outputs];
        for (xs, ys) in x.chunks_exact(self.inputs).zip(y.chunks_exact_mut(self.outputs)) {
            self.forward_sample(values, xs, ys);
        }
        debug_assert_eq!(y.len(), n * self.outputs);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, values: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = self.weight.get(values);
        let mut dx = vec![0.0; x.len()];
        for ((xs, ds), dxs) in x
            .chunks_exact(self.inputs)
            .zip(dy.chunks_exact(self.outputs))
            .zip(dx.chunks_exact_mut(self.inputs))
        {
            for (g, d) in self.bias.get_mut(grads).iter_mut().zip(ds) {
                *g += d;
            }
            let dw = self.weight.get_mut(grads);
            for (i, &xi) in xs.iter().enumerate() {
                let row = &mut dw[i * self.outputs..(i + 1) * self.outputs];
                for (g, d) in row.iter_mut().zip(ds) {
                    *g += xi * d;
                }
                let wrow = &w[i * self.outputs..(i + 1) * self.outputs];
                dxs[i] = wrow.iter().zip(ds).map(|(a, b)| a * b).sum();
            }
        }
        dx
    }
}
