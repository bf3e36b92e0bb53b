//! Convolutional LSTM returning the full hidden-state sequence.
//!
//! Gates `i, f, c, o` come from one 2D convolution over the concatenation of
//! the current input and the previous hidden state:
//!
//! ```text
//! i = sigmoid(a_i)   f = sigmoid(a_f)   g = tanh(a_c)   o = sigmoid(a_o)
//! c_t = f * c_{t-1} + i * g             h_t = o * tanh(c_t)
//! ```

use super::conv::{col2im, im2col, ConvGeom};
use super::params::Slot;
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone)]
pub struct ConvLstm {
    pub inputs: usize,
    pub filters: usize,
    /// 3x3 same-padded geometry over one `[1, p, p]` frame.
    pub geom: ConvGeom,
    /// `[4F, (inputs + F) * 9]`, gate blocks in the order i, f, c, o.
    pub weight: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone, Default)]
struct Step {
    cols: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LstmCache {
    /// `[sample][timestep]`
    steps: Vec<Vec<Step>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ConvLstm {
    pub fn new(inputs: usize, filters: usize, size: [usize; 2], weight: Slot, bias: Slot) -> Self {
        ConvLstm {
            inputs,
            filters,
            geom: ConvGeom::same([1, size[0], size[1]], [1, 3, 3], [1, 1, 1]),
            weight,
            bias,
        }
    }

    pub fn macs_per_step(&self) -> usize {
        self.geom.macs(self.inputs + self.filters, 4 * self.filters)
    }

    /// One sample `[inputs, T, H, W]` to `[F, T, H, W]`.
    fn forward_sample(&self, values: &[f64], x: &[f64], t: usize, y: &mut [f64], keep: bool) -> Vec<Step> {
        let w = self.weight.get(values);
        let b = self.bias.get(values);
        let (cx, f) = (self.inputs, self.filters);
        let p = self.geom.out_len();
        let rows = (cx + f) * 9;
        let mut h = vec![0.0; f * p];
        let mut c = vec![0.0; f * p];
        let mut u = vec![0.0; (cx + f) * p];
        let mut gates = vec![0.0; 4 * f * p];
        let mut steps = Vec::with_capacity(if keep { t } else { 0 });
        for ti in 0..t {
            for ch in 0..cx {
                let src = &x[(ch * t + ti) * p..(ch * t + ti + 1) * p];
                u[ch * p..(ch + 1) * p].copy_from_slice(src);
            }
            u[cx * p..].copy_from_slice(&h);
            let mut cols = vec![0.0; rows * p];
            im2col(&u, cx + f, &self.geom, &mut cols);
            for (gi, gc) in gates.chunks_exact_mut(p).enumerate() {
                gc.fill(b[gi]);
            }
            gemm(w, 4 * f, rows, false, &cols, rows, p, false, 1.0, &mut gates);
            let (ga, rest) = gates.split_at(f * p);
            let (gf, rest) = rest.split_at(f * p);
            let (gg, go) = rest.split_at(f * p);
            let i: Vec<f64> = ga.iter().map(|&v| sigmoid(v)).collect();
            let fg: Vec<f64> = gf.iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = gg.iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = go.iter().map(|&v| sigmoid(v)).collect();
            let c_prev = std::mem::take(&mut c);
            c = (0..f * p).map(|j| fg[j] * c_prev[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            for j in 0..f * p {
                h[j] = o[j] * tanh_c[j];
            }
            for ch in 0..f {
                y[(ch * t + ti) * p..(ch * t + ti + 1) * p].copy_from_slice(&h[ch * p..(ch + 1) * p]);
            }
            if keep {
                steps.push(Step {
                    cols,
                    i,
                    f: fg,
                    g,
                    o,
                    c_prev,
                    tanh_c,
                });
            }
        }
        steps
    }

    pub fn forward(&self, values: &[f64], x: &Tensor, keep: bool) -> (Tensor, LstmCache) {
        let [n, cx, t, hh, ww] = x.shape;
        assert_eq!(cx, self.inputs);
        assert_eq!([1, hh, ww], self.geom.input);
        let mut y = Tensor::zeros([n, self.filters, t, hh, ww]);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.forward_sample(values, x.sample(i), t, y.sample_mut(i), keep);
            if keep {
                steps.push(s);
            }
        }
        (y, LstmCache { steps })
    }

    /// Inference for one sample, no cache.
    pub fn infer_sample(&self, values: &[f64], x: &[f64], t: usize, y: &mut [f64]) {
        self.forward_sample(values, x, t, y, false);
    }

    /// Backpropagation through time. Input gradients are not needed by the
    /// network and are not returned.
    pub fn backward(&self, values: &[f64], cache: &LstmCache, dy: &Tensor, grads: &mut [f64]) {
        let w = self.weight.get(values);
        let (cx, f) = (self.inputs, self.filters);
        let t = dy.shape[2];
        let p = self.geom.out_len();
        let rows = (cx + f) * 9;
        for (ni, steps) in cache.steps.iter().enumerate() {
            let dys = dy.sample(ni);
            let mut dh_next = vec![0.0; f * p];
            let mut dc_next = vec![0.0; f * p];
            let mut dgates = vec![0.0; 4 * f * p];
            let mut dcols = vec![0.0; rows * p];
            let mut du = vec![0.0; (cx + f) * p];
            for ti in (0..t).rev() {
                let s = &steps[ti];
                for ch in 0..f {
                    let src = &dys[(ch * t + ti) * p..(ch * t + ti + 1) * p];
                    for (j, v) in src.iter().enumerate() {
                        dh_next[ch * p + j] += v;
                    }
                }
                for j in 0..f * p {
                    let dh = dh_next[j];
                    let (i, fg, g, o, tc) = (s.i[j], s.f[j], s.g[j], s.o[j], s.tanh_c[j]);
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                    dgates[j] = dc * g * i * (1.0 - i);
                    dgates[f * p + j] = dc * s.c_prev[j] * fg * (1.0 - fg);
                    dgates[2 * f * p + j] = dc * i * (1.0 - g * g);
                    dgates[3 * f * p + j] = dh * tc * o * (1.0 - o);
                    dc_next[j] = dc * fg;
                }
                {
                    let db = self.bias.get_mut(grads);
                    for (gi, d) in dgates.chunks_exact(p).enumerate() {
                        db[gi] += d.iter().sum::<f64>();
                    }
                }
                let dw = self.weight.get_mut(grads);
                gemm(&dgates, 4 * f, p, false, &s.cols, rows, p, true, 1.0, dw);
                if ti == 0 {
                    break;
                }
                gemm(w, 4 * f, rows, true, &dgates, 4 * f, p, false, 0.0, &mut dcols);
                du.fill(0.0);
                col2im(&dcols, cx + f, &self.geom, &mut du);
                dh_next.copy_from_slice(&du[cx * p..]);
            }
        }
    }
}
