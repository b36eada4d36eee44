//! Dense row-major tensors and the raw numeric kernels behind them.
//!
//! Every reduction in this module runs left to right over its index range,
//! so results are bit-reproducible for identical inputs.

use crate::error::{bail, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional array of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether the tensor participates in gradient computation when it is
    /// placed on a tape as a leaf.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} values, buffer has {}",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {i} out of range");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Slice `index` along the leading dimension.
    pub fn row(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Tensor { shape: self.shape[1..].to_vec(), data, requires_grad: false }
    }

    /// Stack equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            bail!(Dimension, "cannot stack an empty list");
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                bail!(Dimension, "stack of {:?} and {:?}", first.shape, t.shape);
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Gather the given leading-dimension rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(inner * rows.len());
        for &r in rows {
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            bail!(Dimension, "matmul of {:?} and {:?}", self.shape, other.shape);
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            bail!(Dimension, "transpose needs a matrix, got {:?}", self.shape);
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        transpose_into(&self.data, &mut out, m, n);
        Tensor::new(&[n, m], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            bail!(Dimension, "elementwise op on {:?} and {:?}", self.shape, other.shape);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
///
/// Four `k` terms are folded per pass over a row of `c`; the additions are
/// still applied one after another, so the result is bit-identical to the
/// plain triple loop.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((cv, x0), x1), x2), x3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            p += 4;
        }
        for p in k4..k {
            let av = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ` as row-by-row dot products.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let n4 = n - n % 4;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j < n4 {
            let r0 = &b[j * k..(j + 1) * k];
            let r1 = &b[(j + 1) * k..(j + 2) * k];
            let r2 = &b[(j + 2) * k..(j + 3) * k];
            let r3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for ((((x, y0), y1), y2), y3) in a_row.iter().zip(r0).zip(r1).zip(r2).zip(r3) {
                s0 += x * y0;
                s1 += x * y1;
                s2 += x * y2;
                s3 += x * y3;
            }
            c[i * n + j] += s0;
            c[i * n + j + 1] += s1;
            c[i * n + j + 2] += s2;
            c[i * n + j + 3] += s3;
            j += 4;
        }
        for j in n4..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`, accumulating over `k` in ascending order.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (a[p * m + i], a[(p + 1) * m + i], a[(p + 2) * m + i], a[(p + 3) * m + i]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((cv, x0), x1), x2), x3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            p += 4;
        }
        for p in k4..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            bail!(Dimension, "conv2d expects 4-d input and kernel, got {:?} and {:?}", input, kernel);
        }
        if input[1] != kernel[1] {
            bail!(Dimension, "conv2d channel mismatch: input {:?}, kernel {:?}", input, kernel);
        }
        if stride == 0 {
            bail!(Dimension, "conv2d stride must be positive");
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kernel[2] > h || kernel[3] > w {
            bail!(
                Dimension,
                "kernel {}x{} larger than padded input {}x{}",
                kernel[2],
                kernel[3],
                h,
                w
            );
        }
        Ok(Self {
            channels: input[1],
            height: input[2],
            width: input[3],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfold one image `[c×h×w]` into columns `[c·kh·kw × oh·ow]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if y < 0 || y >= self.height as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - pad;
                            *d = if x < 0 || x >= self.width as isize { 0.0 } else { src[x as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Fold columns back onto an image, accumulating overlaps.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Batched cross-correlation. `input: [b×c×h×w]`, `kernel: [o×c×kh×kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (b, o) = (input.shape()[0], kernel.shape()[0]);
    let (pl, l) = (geo.patch_len(), geo.out_len());
    let in_len = geo.channels * geo.height * geo.width;
    let mut out = vec![0.0; b * o * l];
    let mut cols = vec![0.0; pl * l];
    for s in 0..b {
        geo.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
        gemm(kernel.data(), &cols, &mut out[s * o * l..(s + 1) * o * l], o, pl, l);
    }
    Tensor::new(&[b, o, geo.out_h(), geo.out_w()], out)
}

/// Gradients of [`conv2d`] with respect to the input and/or the kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)
        .expect("geometry validated in forward");
    let (b, o) = (input.shape()[0], kernel.shape()[0]);
    let (pl, l) = (geo.patch_len(), geo.out_len());
    let in_len = geo.channels * geo.height * geo.width;
    let mut d_input = want_input.then(|| vec![0.0; input.numel()]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.numel()]);
    let mut cols = vec![0.0; pl * l];
    for s in 0..b {
        let gy = &grad_out[s * o * l..(s + 1) * o * l];
        if let Some(dk) = d_kernel.as_mut() {
            geo.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
            gemm_nt(gy, &cols, dk, o, l, pl);
        }
        if let Some(dx) = d_input.as_mut() {
            cols.fill(0.0);
            gemm_tn(kernel.data(), gy, &mut cols, pl, o, l);
            geo.col2im(&cols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    (d_input, d_kernel)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        bail!(Dimension, "softmax axis {} out of range for {:?}", axis, x.shape());
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(out[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (out[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}
