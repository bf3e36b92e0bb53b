//! 3D convolution and its transpose via im2col / col2im.

use super::params::Slot;
use super::tensor::{gemm, Tensor};

/// Geometry of a strided 3D convolution from `input` to `output` dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Leading zero padding per axis.
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// "Same" padding: `out = ceil(in / stride)`, with the odd padding pixel
    /// placed after the data.
    pub fn same(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = input[a].div_ceil(stride[a]);
            let needed = (output[a] - 1) * stride[a] + kernel[a];
            pad[a] = needed.saturating_sub(input[a]) / 2;
        }
        ConvGeom {
            input,
            kernel,
            stride,
            pad,
            output,
        }
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Multiply-accumulates per sample for `cin -> cout` channels.
    pub fn macs(&self, cin: usize, cout: usize) -> usize {
        cin * cout * self.kernel_len() * self.out_len()
    }
}

/// Source index along one axis, or `None` inside the zero padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// Unfolds a `[c, input]` volume into a `[c * kernel, output]` matrix.
pub fn im2col(x: &[f64], c: usize, g: &ConvGeom, cols: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    debug_assert_eq!(cols.len(), c * kd * kh * kw * p);
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let Some(iz) = source(z, a, sd, pd, id) else {
                            dst[z * oh * ow..(z + 1) * oh * ow].fill(0.0);
                            continue;
                        };
                        for y in 0..oh {
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let Some(iy) = source(y, b, sh, ph, ih) else {
                                out.fill(0.0);
                                continue;
                            };
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            for (xo, v) in out.iter_mut().enumerate() {
                                *v = match source(xo, e, sw, pw, iw) {
                                    Some(ix) => src[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds `[c * kernel, output]` columns back,
/// accumulating into `x`.
pub fn col2im(cols: &[f64], c: usize, g: &ConvGeom, x: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let Some(iz) = source(z, a, sd, pd, id) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = source(y, b, sh, ph, ih) else {
                                continue;
                            };
                            let dst = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let col = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (xo, &v) in col.iter().enumerate() {
                                if let Some(ix) = source(xo, e, sw, pw, iw) {
                                    dst[ix] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// A convolution (`transpose == false`, `[cin, input] -> [cout, output]`) or
/// its exact adjoint (`transpose == true`, `[cin, output] -> [cout, input]`)
/// with a per-output-channel bias.
///
/// Weights are `[cout, cin * kernel]` for a convolution and
/// `[cin, cout * kernel]` for a transpose.
#[derive(Debug, Clone)]
pub struct Conv {
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
    pub weight: Slot,
    pub bias: Slot,
    pub transpose: bool,
}

/// What backward needs: unfolded inputs for a convolution, raw inputs for a
/// transpose.
#[derive(Debug, Clone, Default)]
pub struct ConvCache {
    saved: Vec<Vec<f64>>,
}

impl Conv {
    pub fn output_dims(&self) -> [usize; 3] {
        if self.transpose {
            self.geom.input
        } else {
            self.geom.output
        }
    }

    pub fn input_dims(&self) -> [usize; 3] {
        if self.transpose {
            self.geom.output
        } else {
            self.geom.input
        }
    }

    pub fn macs(&self) -> usize {
        self.geom.macs(self.cin, self.cout)
    }

    /// One sample: writes `y` (overwritten) and returns the cache entry.
    pub fn forward_sample(&self, values: &[f64], x: &[f64], y: &mut [f64], keep: bool) -> Vec<f64> {
        let w = self.weight.get(values);
        let b = self.bias.get(values);
        let g = &self.geom;
        let k = g.kernel_len();
        if !self.transpose {
            let p = g.out_len();
            let rows = self.cin * k;
            let mut cols = vec![0.0; rows * p];
            im2col(x, self.cin, g, &mut cols);
            for (co, yc) in y.chunks_exact_mut(p).enumerate() {
                yc.fill(b[co]);
            }
            gemm(w, self.cout, rows, false, &cols, rows, p, false, 1.0, y);
            if keep {
                cols
            } else {
                Vec::new()
            }
        } else {
            let p = g.out_len();
            let rows = self.cout * k;
            let mut cols = vec![0.0; rows * p];
            gemm(w, self.cin, rows, true, x, self.cin, p, false, 0.0, &mut cols);
            let plane = g.in_len();
            for (co, yc) in y.chunks_exact_mut(plane).enumerate() {
                yc.fill(b[co]);
            }
            col2im(&cols, self.cout, g, y);
            if keep {
                x.to_vec()
            } else {
                Vec::new()
            }
        }
    }

    pub fn forward(&self, values: &[f64], x: &Tensor, keep: bool) -> (Tensor, ConvCache) {
        assert_eq!(x.c(), self.cin, "conv input channels");
        assert_eq!(x.dims(), self.input_dims(), "conv input dims");
        let od = self.output_dims();
        let mut y = Tensor::zeros([x.n(), self.cout, od[0], od[1], od[2]]);
        let mut saved = Vec::with_capacity(if keep { x.n() } else { 0 });
        for n in 0..x.n() {
            let s = self.forward_sample(values, x.sample(n), y.sample_mut(n), keep);
            if keep {
                saved.push(s);
            }
        }
        (y, ConvCache { saved })
    }

    /// One sample of backward: accumulates weight and bias gradients and, if
    /// `dx` is given, overwrites it with the input gradient.
    pub fn backward_sample(
        &self,
        values: &[f64],
        saved: &[f64],
        dy: &[f64],
        grads: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let w = self.weight.get(values);
        let g = &self.geom;
        let k = g.kernel_len();
        let plane_out = if self.transpose { g.in_len() } else { g.out_len() };
        {
            let db = self.bias.get_mut(grads);
            for (co, d) in dy.chunks_exact(plane_out).enumerate() {
                db[co] += d.iter().sum::<f64>();
            }
        }
        let p = g.out_len();
        if !self.transpose {
            let rows = self.cin * k;
            let dw = self.weight.get_mut(grads);
            gemm(dy, self.cout, p, false, saved, rows, p, true, 1.0, dw);
            if let Some(dx) = dx {
                let mut dcols = vec![0.0; rows * p];
                gemm(w, self.cout, rows, true, dy, self.cout, p, false, 0.0, &mut dcols);
                dx.fill(0.0);
                col2im(&dcols, self.cin, g, dx);
            }
        } else {
            let rows = self.cout * k;
            let mut dcols = vec![0.0; rows * p];
            im2col(dy, self.cout, g, &mut dcols);
            let dw = self.weight.get_mut(grads);
            gemm(saved, self.cin, p, false, &dcols, rows, p, true, 1.0, dw);
            if let Some(dx) = dx {
                gemm(w, self.cin, rows, false, &dcols, rows, p, false, 0.0, dx);
            }
        }
    }

    pub fn backward(
        &self,
        values: &[f64],
        cache: &ConvCache,
        dy: &Tensor,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Tensor> {
        let id = self.input_dims();
        let mut dx = need_dx.then(|| Tensor::zeros([dy.n(), self.cin, id[0], id[1], id[2]]));
        for n in 0..dy.n() {
            let slot = dx.as_mut().map(|t| t.sample_mut(n));
            self.backward_sample(values, &cache.saved[n], dy.sample(n), grads, slot);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_geometry_matches_tf_rules() {
        let g = ConvGeom::same([4, 16, 16], [3, 3, 3], [2, 2, 2]);
        assert_eq!(g.output, [2, 8, 8]);
        assert_eq!(g.pad, [0, 0, 0]);
        let g = ConvGeom::same([1, 4, 4], [3, 3, 3], [2, 2, 2]);
        assert_eq!(g.output, [1, 2, 2]);
        assert_eq!(g.pad, [1, 0, 0]);
        let g = ConvGeom::same([5, 5, 5], [3, 3, 3], [1, 1, 1]);
        assert_eq!((g.output, g.pad), ([5, 5, 5], [1, 1, 1]));
    }

    /// `<im2col(x), c> == <x, col2im(c)>` for random x and c.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (input, stride) in [([4, 7, 6], [2, 2, 2]), ([2, 5, 5], [1, 1, 1]), ([1, 3, 4], [2, 1, 2])] {
            let g = ConvGeom::same(input, [3, 3, 3], stride);
            let c = 2;
            let x: Vec<f64> = (0..c * g.in_len()).map(|_| rng.random()).collect();
            let cols_len = c * g.kernel_len() * g.out_len();
            let r: Vec<f64> = (0..cols_len).map(|_| rng.random()).collect();
            let mut cols = vec![0.0; cols_len];
            im2col(&x, c, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&r, c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    /// Direct nested-loop convolution as an oracle.
    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom::same([3, 5, 4], [3, 3, 3], [2, 2, 1]);
        let (cin, cout) = (2, 3);
        let k = g.kernel_len();
        let values: Vec<f64> = (0..cout * cin * k + cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = Conv {
            geom: g,
            cin,
            cout,
            weight: Slot { offset: 0, len: cout * cin * k },
            bias: Slot { offset: cout * cin * k, len: cout },
            transpose: false,
        };
        let x = Tensor {
            data: (0..cin * g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            shape: [1, cin, 3, 5, 4],
        };
        let (y, _) = conv.forward(&values, &x, false);
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        for co in 0..cout {
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = values[cout * cin * k + co];
                        for ci in 0..cin {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for e in 0..3 {
                                        let iz = (z * 2 + a) as isize - g.pad[0] as isize;
                                        let iy = (r * 2 + b) as isize - g.pad[1] as isize;
                                        let ix = (c + e) as isize - g.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= id || iy >= ih || ix >= iw {
                                            continue;
                                        }
                                        let wi = co * cin * k + ci * k + (a * 3 + b) * 3 + e;
                                        acc += values[wi] * x.data[((ci * id + iz) * ih + iy) * iw + ix];
                                    }
                                }
                            }
                        }
                        let got = y.data[((co * od + z) * oh + r) * ow + c];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
