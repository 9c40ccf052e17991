//! Pure forward primitives and the analytic vector-Jacobian products the
//! tape replays. Every function here is free of side effects.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor, Window};
use crate::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, false);
    Tensor::new(&[m, n], out)
}

/// `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![0.0; m * k];
    gemm_nt(dc.data(), b.data(), &mut da, m, n, k, false);
    let mut db = vec![0.0; k * n];
    gemm_tn(a.data(), dc.data(), &mut db, k, m, n, false);
    (Tensor::raw(&[m, k], da), Tensor::raw(&[k, n], db))
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, alloc::format!("axis {axis} out of range")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = math::exp(src[idx(j)] - max);
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// `dx = y ⊙ (dy − Σ_axis dy⊙y)`.
pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split("softmax", y.shape(), axis).expect("validated on forward");
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yv[idx(j)] * gv[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] = yv[idx(j)] * (gv[idx(j)] - dot);
            }
        }
    }
    Tensor::raw(y.shape(), dx)
}

fn check_kernel(op: &'static str, w: &Tensor) -> Result<[usize; 3]> {
    match w.shape()[..] {
        [a, b, kh, kw] if kh == kw => Ok([a, b, kh]),
        _ => Err(Error::shape(op, w.shape(), "expected a square 4-D kernel")),
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::mismatch(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

fn add_channel_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (c, &bv) in b.data().iter().enumerate() {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
    }
}

fn channel_sums(dy: &Tensor) -> Tensor {
    let c = dy.shape()[0];
    let plane = dy.numel() / c;
    Tensor::from_fn(&[c], |i| dy.data()[i * plane..(i + 1) * plane].iter().sum())
}

pub(crate) fn conv2d_window(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Window> {
    let dims = x.dims3("conv2d")?;
    let [_, cin, k] = check_kernel("conv2d", w)?;
    if cin != dims[0] {
        return Err(Error::mismatch("conv2d", x.shape(), w.shape()));
    }
    Window::new("conv2d", dims, k, stride, pad)
}

/// Cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×k×k`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let win = conv2d_window(x, w, stride, pad)?;
    conv2d_with_cols(&win, &win.im2col(x.data()), w, bias)
}

pub(crate) fn conv2d_with_cols(win: &Window, cols: &[f64], w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let cout = w.shape()[0];
    check_bias("conv2d", bias, cout)?;
    let n = win.cols();
    let mut out = vec![0.0; cout * n];
    gemm(w.data(), cols, &mut out, cout, win.rows(), n, false);
    add_channel_bias(&mut out, bias, n);
    Tensor::new(&[cout, win.out_h, win.out_w], out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when the input needs no gradient.
pub(crate) fn conv2d_backward(
    win: &Window,
    cols: &[f64],
    w: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let cout = w.shape()[0];
    let (rows, n) = (win.rows(), win.cols());
    let mut dw = vec![0.0; cout * rows];
    gemm_nt(dy.data(), cols, &mut dw, cout, n, rows, false);
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; rows * n];
        gemm_tn(w.data(), dy.data(), &mut dcols, rows, cout, n, false);
        Tensor::raw(&[win.channels, win.height, win.width], win.col2im(&dcols))
    });
    (dx, Tensor::raw(w.shape(), dw), channel_sums(dy))
}

pub(crate) fn deconv2d_window(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Window> {
    let [cin, h_in, w_in] = x.dims3("deconv2d")?;
    let [wcin, cout, k] = check_kernel("deconv2d", w)?;
    if wcin != cin {
        return Err(Error::mismatch("deconv2d", x.shape(), w.shape()));
    }
    if stride == 0 {
        return Err(Error::Config("deconv2d: stride must be positive".into()));
    }
    let h = (h_in - 1) * stride + k;
    let wd = (w_in - 1) * stride + k;
    if h <= 2 * pad || wd <= 2 * pad {
        return Err(Error::shape("deconv2d", x.shape(), "padding consumes the whole output"));
    }
    let win = Window::new("deconv2d", [cout, h - 2 * pad, wd - 2 * pad], k, stride, pad)?;
    if win.out_h != h_in || win.out_w != w_in {
        return Err(Error::shape(
            "deconv2d",
            x.shape(),
            "inconsistent with the paired conv geometry",
        ));
    }
    Ok(win)
}

/// Transposed convolution of `x: C_in×H'×W'` with `w: C_in×C_out×k×k`.
/// Output spatial size is `(H'−1)·stride − 2·pad + k`. With the same `w`
/// it is the adjoint of [`conv2d`].
pub fn deconv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let win = deconv2d_window(x, w, stride, pad)?;
    deconv2d_forward(&win, x, w, bias)
}

pub(crate) fn deconv2d_forward(win: &Window, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let cin = x.shape()[0];
    check_bias("deconv2d", bias, win.channels)?;
    let (rows, n) = (win.rows(), win.cols());
    let mut cols = vec![0.0; rows * n];
    gemm_tn(w.data(), x.data(), &mut cols, rows, cin, n, false);
    let mut out = win.col2im(&cols);
    add_channel_bias(&mut out, bias, win.height * win.width);
    Tensor::new(&[win.channels, win.height, win.width], out)
}

pub(crate) fn deconv2d_backward(
    win: &Window,
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let cin = x.shape()[0];
    let (rows, n) = (win.rows(), win.cols());
    let dcols = win.im2col(dy.data());
    let mut dw = vec![0.0; cin * rows];
    gemm_nt(x.data(), &dcols, &mut dw, cin, n, rows, false);
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; cin * n];
        gemm(w.data(), &dcols, &mut dx, cin, rows, n, false);
        Tensor::raw(x.shape(), dx)
    });
    (dx, Tensor::raw(w.shape(), dw), channel_sums(dy))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(math::sigmoid)
}

pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    x.map(|v| v.clamp(lo, hi))
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("elementwise_mul", a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| v * s)
}

/// Mean of every element.
pub fn mean(x: &Tensor) -> f64 {
    x.sum() / x.numel() as f64
}
