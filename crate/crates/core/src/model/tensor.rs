//! Dense channels-first batches and the GEMM wrapper used by every layer.

use ndarray::{linalg::general_mat_mul, Array5, ArrayView2, ArrayView5, ArrayViewMut2};

/// A contiguous `[N, C, D, H, W]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: [usize; 5],
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape,
        }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Elements per channel of one sample.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Converts `N x T x p x p x C` patches to `[N, C, T, p, p]`.
    pub fn from_patches(patches: ArrayView5<f64>) -> Self {
        let (n, t, h, w, c) = patches.dim();
        let mut out = Tensor::zeros([n, c, t, h, w]);
        for ((ni, ti, y, x, ci), &v) in patches.indexed_iter() {
            out.data[(((ni * c + ci) * t + ti) * h + y) * w + x] = v;
        }
        out
    }

    /// Inverse of [`Tensor::from_patches`].
    pub fn to_patches(&self) -> Array5<f64> {
        let [n, c, t, h, w] = self.shape;
        Array5::from_shape_fn((n, t, h, w, c), |(ni, ti, y, x, ci)| {
            self.data[(((ni * c + ci) * t + ti) * h + y) * w + x]
        })
    }

    /// Channel-wise concatenation of two batches with equal N and spatial dims.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.n(), b.n());
        assert_eq!(a.dims(), b.dims());
        let [n, ca, d, h, w] = a.shape;
        let mut out = Tensor::zeros([n, ca + b.c(), d, h, w]);
        for i in 0..n {
            let dst = out.sample_mut(i);
            let la = a.sample_len();
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Splits off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let [n, c, d, h, w] = self.shape;
        let mut a = Tensor::zeros([n, ca, d, h, w]);
        let mut b = Tensor::zeros([n, c - ca, d, h, w]);
        let la = a.sample_len();
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `op`
/// optionally transposes. `a` is stored as `a_rows x a_cols` before `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs shape");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm output shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}
