//! Forward and backward numeric kernels shared by [`Tensor`] and the tape.

use super::{Tensor, DIV_REJECT, EPS};
use crate::error::{dim_err, CsgError, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are asserted above and the strides describe exactly
    // those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return dim_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub(crate) fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => dim_err(format!("expected a matrix, got shape {:?}", s)),
    }
}

/// Elementwise binary op with scalar broadcasting on either side.
pub(crate) fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.is_scalar() {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else if a.is_scalar() {
        let x = a.data()[0];
        return Tensor::new(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect());
    } else {
        return dim_err(format!(
            "elementwise op on shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    };
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn check_divisor(t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| v.abs() < DIV_REJECT) {
        return Err(CsgError::NumericDomain(format!("division by {:e}", v)));
    }
    Ok(())
}

/// Push a divisor's magnitude up to `EPS`, keeping its sign.
pub(crate) fn guard(b: f64) -> f64 {
    if b.abs() < EPS {
        EPS.copysign(b)
    } else {
        b
    }
}

pub(crate) fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
        return dim_err(format!("invalid axes {:?} for shape {:?}", axes, shape));
    }
    Ok(sorted)
}

/// For each input element, the flat index of the output element it reduces into.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let mut o = 0;
        for (d, &i) in idx.iter().enumerate() {
            if !axes.contains(&d) {
                o = o * shape[d] + i;
            }
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (out_shape, map)
}

pub(crate) fn sum_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let axes = validate_axes(t.shape(), axes)?;
    let (out_shape, map) = reduce_map(t.shape(), &axes);
    let mut out = vec![0.0; out_shape.iter().product()];
    for (&v, &o) in t.data().iter().zip(&map) {
        out[o] += v;
    }
    Tensor::new(out_shape, out)
}

/// Normalise every last-axis row; returns the output and the clamped norms.
pub(crate) fn l2_normalize_rows(t: &Tensor) -> (Tensor, Vec<f64>) {
    let width = *t.shape().last().unwrap_or(&1);
    let mut out = t.data().to_vec();
    let mut norms = Vec::with_capacity(t.numel() / width.max(1));
    for row in out.chunks_mut(width.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (Tensor { shape: t.shape().to_vec(), data: out }, norms)
}

/// Geometry of a batched convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub batched: bool,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }
}

pub(crate) fn conv_geometry(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let (batch, c_in, h, w, batched) = match input {
        [c, h, w] => (1, *c, *h, *w, false),
        [n, c, h, w] => (*n, *c, *h, *w, true),
        s => return dim_err(format!("conv2d input must be CxHxW or NxCxHxW, got {:?}", s)),
    };
    let (c_out, kc, kh, kw) = match kernel {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return dim_err(format!("conv2d kernel must be rank 4, got {:?}", s)),
    };
    if kc != c_in {
        return dim_err(format!("kernel expects {} input channels, input has {}", kc, c_in));
    }
    if kh != kw {
        return dim_err(format!("only square kernels are supported, got {}x{}", kh, kw));
    }
    if stride == 0 {
        return dim_err("conv2d stride must be at least 1");
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return dim_err(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * padding,
            w + 2 * padding
        ));
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        padding,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (w + 2 * padding - kw) / stride + 1,
        batched,
    })
}

fn im2col(g: &ConvGeom, image: &[f64], col: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.w_out + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            image[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], image: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            image[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-image im2col buffers for the backward pass.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeom)> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return dim_err(format!("bias of {} for {} output channels", b.numel(), g.c_out));
        }
    }
    let (kk, p) = (g.patch(), g.positions());
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * p;
    let mut cols = vec![0.0; g.batch * kk * p];
    let mut out = vec![0.0; g.batch * out_size];
    for n in 0..g.batch {
        let col = &mut cols[n * kk * p..(n + 1) * kk * p];
        im2col(&g, &input.data()[n * in_size..(n + 1) * in_size], col);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(g.c_out, kk, p, kernel.data(), false, col, false, dst, 1.0);
    }
    Ok((Tensor::new(g.out_shape(), out)?, cols, g))
}

/// Gradients for (input, kernel, bias) given the upstream gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (kk, p) = (g.patch(), g.positions());
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * p;
    let mut d_kernel = vec![0.0; g.c_out * kk];
    let mut d_bias = vec![0.0; g.c_out];
    let mut d_input = want_input.then(|| vec![0.0; g.batch * in_size]);
    let mut d_col = vec![0.0; kk * p];
    for n in 0..g.batch {
        let go = &grad_out[n * out_size..(n + 1) * out_size];
        let col = &cols[n * kk * p..(n + 1) * kk * p];
        gemm(g.c_out, p, kk, go, false, col, true, &mut d_kernel, 1.0);
        for (co, chunk) in go.chunks(p).enumerate() {
            d_bias[co] += chunk.iter().sum::<f64>();
        }
        if let Some(di) = d_input.as_mut() {
            gemm(kk, g.c_out, p, kernel, true, go, false, &mut d_col, 0.0);
            col2im(g, &d_col, &mut di[n * in_size..(n + 1) * in_size]);
        }
    }
    (d_input, d_kernel, d_bias)
}

pub(crate) fn upsample_nearest(t: &Tensor, factor: usize) -> Result<Tensor> {
    if t.rank() < 2 || factor == 0 {
        return dim_err(format!("upsample x{} of shape {:?}", factor, t.shape()));
    }
    let r = t.rank();
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    let planes = t.numel() / (h * w);
    let (ho, wo) = (h * factor, w * factor);
    let mut data = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            let src = (p * h + y / factor) * w;
            for (x, d) in data[(p * ho + y) * wo..(p * ho + y + 1) * wo].iter_mut().enumerate() {
                *d = t.data()[src + x / factor];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, data)
}
