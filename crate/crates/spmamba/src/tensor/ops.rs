//! Differentiable primitive ops.
//!
//! Every op computes its output eagerly and, when any input is tracked,
//! registers a backward closure on the tape. Cross-correlation semantics for
//! conv (no kernel flip). No broadcasting beyond per-channel bias and scalar
//! ops.

use crate::error::{Error, Result};
use crate::tensor::tape::{any_tracked, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Silu,
    Softplus,
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^{-|x|}) is overflow-safe on both tails.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, defined for y > 0.
#[inline]
pub fn softplus_inv_scalar(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

// ---------------------------------------------------------------------------
// matmul kernels (row-major, used by conv2d and linear)
// ---------------------------------------------------------------------------

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T (shared inner dim is the row length)
pub(crate) fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for p in 0..m {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

fn unary_op(
    tape: &mut Tape,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // derivative as a function of (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let y: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out = Tensor::new(x.shape(), y.clone())?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    let xd = if track { x.data().to_vec() } else { Vec::new() };
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let Some(id) = xn else { return Vec::new() };
            let gx: Vec<f64> = g
                .iter()
                .zip(xd.iter().zip(y.iter()))
                .map(|(gv, (xv, yv))| gv * df(*xv, *yv))
                .collect();
            vec![(id, gx)]
        }),
    )
}

pub fn activation(tape: &mut Tape, x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => unary_op(tape, x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Sigmoid => unary_op(tape, x, sigmoid_scalar, |_, s| s * (1.0 - s)),
        Activation::Silu => unary_op(tape, x, |v| v * sigmoid_scalar(v), |v, _| {
            let s = sigmoid_scalar(v);
            s * (1.0 + v * (1.0 - s))
        }),
        Activation::Softplus => unary_op(tape, x, softplus_scalar, |v, _| sigmoid_scalar(v)),
    }
}

pub fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    activation(tape, x, Activation::Relu)
}

pub fn sigmoid(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    activation(tape, x, Activation::Sigmoid)
}

pub fn silu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    activation(tape, x, Activation::Silu)
}

pub fn softplus(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    activation(tape, x, Activation::Softplus)
}

/// y = k * x
pub fn scale(tape: &mut Tape, x: &Tensor, k: f64) -> Result<Tensor> {
    unary_op(tape, x, move |v| k * v, move |_, _| k)
}

/// y = x + k
pub fn add_const(tape: &mut Tape, x: &Tensor, k: f64) -> Result<Tensor> {
    unary_op(tape, x, move |v| v + k, |_, _| 1.0)
}

/// Identity forward; backward multiplies the gradient by `k`. Exists for
/// fault injection in gradient-check tests.
pub fn scale_grad(tape: &mut Tape, x: &Tensor, k: f64) -> Result<Tensor> {
    let out = Tensor::new(x.shape(), x.data().to_vec())?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let Some(id) = xn else { return Vec::new() };
            vec![(id, g.iter().map(|v| v * k).collect())]
        }),
    )
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn binary_op(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    name: &str,
    f: impl Fn(f64, f64) -> f64,
    // partials as functions of (a, b)
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    check_same_shape(a, b, name)?;
    let y: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&av, &bv)| f(av, bv))
        .collect();
    let out = Tensor::new(a.shape(), y)?;
    let track = any_tracked(&[a, b]);
    let an = a.node();
    let bn = b.node();
    let (ad, bd) = if track {
        (a.data().to_vec(), b.data().to_vec())
    } else {
        (Vec::new(), Vec::new())
    };
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let mut outs = Vec::new();
            if let Some(id) = an {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(gv, (av, bv))| gv * dfa(*av, *bv))
                    .collect();
                outs.push((id, ga));
            }
            if let Some(id) = bn {
                let gb: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(gv, (av, bv))| gv * dfb(*av, *bv))
                    .collect();
                outs.push((id, gb));
            }
            outs
        }),
    )
}

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(tape, a, b, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(tape, a, b, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(tape, a, b, "mul", |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(
        tape,
        a,
        b,
        "div",
        |x, y| x / y,
        |_, y| 1.0 / y,
        |x, y| -x / (y * y),
    )
}

/// Elementwise minimum; ties send the gradient to the first argument.
pub fn emin(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(
        tape,
        a,
        b,
        "emin",
        |x, y| if x <= y { x } else { y },
        |x, y| if x <= y { 1.0 } else { 0.0 },
        |x, y| if x <= y { 0.0 } else { 1.0 },
    )
}

/// Elementwise maximum; ties send the gradient to the first argument.
pub fn emax(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op(
        tape,
        a,
        b,
        "emax",
        |x, y| if x >= y { x } else { y },
        |x, y| if x >= y { 1.0 } else { 0.0 },
        |x, y| if x >= y { 0.0 } else { 1.0 },
    )
}

pub fn sum_all(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    let out = Tensor::scalar(s);
    let track = any_tracked(&[x]);
    let xn = x.node();
    let n = x.numel();
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let Some(id) = xn else { return Vec::new() };
            vec![(id, vec![g[0]; n])]
        }),
    )
}

pub fn mean_all(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::Dim("mean over empty tensor".into()));
    }
    let n = x.numel();
    let s: f64 = x.data().iter().sum();
    let out = Tensor::scalar(s / n as f64);
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let Some(id) = xn else { return Vec::new() };
            vec![(id, vec![g[0] / n as f64; n])]
        }),
    )
}

/// Reinterpret shape; identity on data and gradient.
pub fn reshape(tape: &mut Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Dim(format!(
            "reshape {:?} -> {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    let out = Tensor::new(shape, x.data().to_vec())?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |g| {
            let Some(id) = xn else { return Vec::new() };
            vec![(id, g.to_vec())]
        }),
    )
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// y[N x G] = x[N x F] * w[G x F]^T + b[G]
pub fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::Dim(format!(
            "linear: x {:?} incompatible with w {:?}",
            xs, ws
        )));
    }
    let (n, f, g_out) = (xs[0], xs[1], ws[0]);
    if let Some(bias) = b {
        if bias.shape() != [g_out] {
            return Err(Error::Dim(format!(
                "linear: bias {:?} does not match out features {}",
                bias.shape(),
                g_out
            )));
        }
    }
    let mut y = vec![0.0; n * g_out];
    matmul_abt_acc(x.data(), w.data(), &mut y, n, f, g_out);
    if let Some(bias) = b {
        for row in y.chunks_exact_mut(g_out) {
            for (v, bv) in row.iter_mut().zip(bias.data().iter()) {
                *v += bv;
            }
        }
    }
    let out = Tensor::new(&[n, g_out], y)?;

    let mut inputs: Vec<&Tensor> = vec![x, w];
    if let Some(bias) = b {
        inputs.push(bias);
    }
    let track = any_tracked(&inputs);
    let (xn, wn, bn) = (x.node(), w.node(), b.and_then(|t| t.node()));
    let (xd, wd) = if track {
        (x.data().to_vec(), w.data().to_vec())
    } else {
        (Vec::new(), Vec::new())
    };
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            if let Some(id) = xn {
                let mut gx = vec![0.0; n * f];
                matmul_acc(gy, &wd, &mut gx, n, g_out, f);
                outs.push((id, gx));
            }
            if let Some(id) = wn {
                let mut gw = vec![0.0; g_out * f];
                matmul_atb_acc(gy, &xd, &mut gw, n, g_out, f);
                outs.push((id, gw));
            }
            if let Some(id) = bn {
                let mut gb = vec![0.0; g_out];
                for row in gy.chunks_exact(g_out) {
                    for (acc, v) in gb.iter_mut().zip(row.iter()) {
                        *acc += v;
                    }
                }
                outs.push((id, gb));
            }
            outs
        }),
    )
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], d: &ConvDims, img: usize, group: usize, col: &mut [f64]) {
    let cg = d.cin / d.groups;
    let ow = d.ho * d.wo;
    col.fill(0.0);
    for ci in 0..cg {
        let c = group * cg + ci;
        let x_base = (img * d.cin + c) * d.h * d.w;
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let col_base = row * ow;
                for ho in 0..d.ho {
                    let iy = (ho * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let x_row = x_base + iy as usize * d.w;
                    let col_row = col_base + ho * d.wo;
                    for wo in 0..d.wo {
                        let ix = (wo * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        col[col_row + wo] = x[x_row + ix as usize];
                    }
                }
            }
        }
    }
}

fn col2im_acc(col: &[f64], d: &ConvDims, img: usize, group: usize, gx: &mut [f64]) {
    let cg = d.cin / d.groups;
    for ci in 0..cg {
        let c = group * cg + ci;
        let x_base = (img * d.cin + c) * d.h * d.w;
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let col_base = row * d.ho * d.wo;
                for ho in 0..d.ho {
                    let iy = (ho * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let x_row = x_base + iy as usize * d.w;
                    let col_row = col_base + ho * d.wo;
                    for wo in 0..d.wo {
                        let ix = (wo * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        gx[x_row + ix as usize] += col[col_row + wo];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over NCHW input with OIkk weights.
///
/// `groups = in_channels` with one-channel kernels gives depthwise behavior.
pub fn conv2d(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d: want 4-D input and weight, got {:?} and {:?}",
            xs, ws
        )));
    }
    if ws[2] != ws[3] {
        return Err(Error::Dim("conv2d: only square kernels supported".into()));
    }
    let (n, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
    if stride < 1 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: groups {} must divide in/out channels {}/{}",
            groups, cin, cout
        )));
    }
    if wcin != cin / groups {
        return Err(Error::Dim(format!(
            "conv2d: weight expects {} in-channels per group, input has {}",
            wcin,
            cin / groups
        )));
    }
    if h + 2 * pad < k || win + 2 * pad < k {
        return Err(Error::Dim(format!(
            "conv2d: kernel {k} does not fit padded input {}x{}",
            h + 2 * pad,
            win + 2 * pad
        )));
    }
    if let Some(bias) = b {
        if bias.shape() != [cout] {
            return Err(Error::Dim(format!(
                "conv2d: bias {:?} does not match out channels {}",
                bias.shape(),
                cout
            )));
        }
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;
    let d = ConvDims {
        cin,
        h,
        w: win,
        k,
        stride,
        pad,
        groups,
        ho,
        wo,
    };

    let cg_in = cin / groups;
    let cg_out = cout / groups;
    let krows = cg_in * k * k;
    let ow = ho * wo;
    let mut y = vec![0.0; n * cout * ow];
    let mut col = vec![0.0; krows * ow];
    for img in 0..n {
        for g in 0..groups {
            im2col(x.data(), &d, img, g, &mut col);
            let w_g = &w.data()[g * cg_out * krows..(g + 1) * cg_out * krows];
            let y_g = &mut y[(img * cout + g * cg_out) * ow..(img * cout + (g + 1) * cg_out) * ow];
            matmul_acc(w_g, &col, y_g, cg_out, krows, ow);
        }
    }
    if let Some(bias) = b {
        for img in 0..n {
            for c in 0..cout {
                let base = (img * cout + c) * ow;
                let bv = bias.data()[c];
                for v in &mut y[base..base + ow] {
                    *v += bv;
                }
            }
        }
    }
    let out = Tensor::new(&[n, cout, ho, wo], y)?;

    let mut inputs: Vec<&Tensor> = vec![x, w];
    if let Some(bias) = b {
        inputs.push(bias);
    }
    let track = any_tracked(&inputs);
    let (xn, wn, bn) = (x.node(), w.node(), b.and_then(|t| t.node()));
    let (xd, wd) = if track {
        (x.data().to_vec(), w.data().to_vec())
    } else {
        (Vec::new(), Vec::new())
    };
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            let mut col = vec![0.0; krows * ow];
            let mut gx = if xn.is_some() {
                vec![0.0; n * cin * d.h * d.w]
            } else {
                Vec::new()
            };
            let mut gw = if wn.is_some() {
                vec![0.0; cout * krows]
            } else {
                Vec::new()
            };
            let mut gcol = vec![0.0; krows * ow];
            for img in 0..n {
                for g in 0..groups {
                    let gy_g =
                        &gy[(img * cout + g * cg_out) * ow..(img * cout + (g + 1) * cg_out) * ow];
                    if wn.is_some() {
                        im2col(&xd, &d, img, g, &mut col);
                        let gw_g = &mut gw[g * cg_out * krows..(g + 1) * cg_out * krows];
                        matmul_abt_acc(gy_g, &col, gw_g, cg_out, ow, krows);
                    }
                    if xn.is_some() {
                        gcol.fill(0.0);
                        let w_g = &wd[g * cg_out * krows..(g + 1) * cg_out * krows];
                        matmul_atb_acc(w_g, gy_g, &mut gcol, cg_out, krows, ow);
                        col2im_acc(&gcol, &d, img, g, &mut gx);
                    }
                }
            }
            if let Some(id) = xn {
                outs.push((id, gx));
            }
            if let Some(id) = wn {
                outs.push((id, gw));
            }
            if let Some(id) = bn {
                let mut gb = vec![0.0; cout];
                for img in 0..n {
                    for c in 0..cout {
                        let base = (img * cout + c) * ow;
                        gb[c] += gy[base..base + ow].iter().sum::<f64>();
                    }
                }
                outs.push((id, gb));
            }
            outs
        }),
    )
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling. Padding acts as -inf and is never selected; ties within a
/// window resolve to the first cell in row-major order.
pub fn maxpool2d(tape: &mut Tape, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("maxpool2d: want NCHW, got {:?}", xs)));
    }
    if k < 1 || stride < 1 {
        return Err(Error::Config("maxpool2d: k and stride must be >= 1".into()));
    }
    if pad >= k {
        return Err(Error::Config(
            "maxpool2d: pad must be < k so every window sees real input".into(),
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Dim(format!(
            "maxpool2d: window {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    for img in 0..n {
        for ch in 0..c {
            let x_base = (img * c + ch) * h * w;
            let o_base = (img * c + ch) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = x_base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[o_base + oy * wo + ox] = best;
                    arg[o_base + oy * wo + ox] = best_idx;
                }
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    let in_numel = n * c * h * w;
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; in_numel];
            for (gv, &idx) in gy.iter().zip(arg.iter()) {
                gx[idx] += gv;
            }
            vec![(id, gx)]
        }),
    )
}

/// Spatial mean per channel: NCHW -> NC11.
pub fn global_avg_pool(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("global_avg_pool: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Dim("global_avg_pool: empty spatial extent".into()));
    }
    let mut y = vec![0.0; n * c];
    for (i, chunk) in x.data().chunks_exact(hw).enumerate() {
        y[i] = chunk.iter().sum::<f64>() / hw as f64;
    }
    let out = Tensor::new(&[n, c, 1, 1], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; n * c * hw];
            for (i, gv) in gy.iter().enumerate() {
                let v = gv / hw as f64;
                for gxv in &mut gx[i * hw..(i + 1) * hw] {
                    *gxv = v;
                }
            }
            vec![(id, gx)]
        }),
    )
}

/// Nearest-neighbor 2x upsample.
pub fn upsample_nearest2(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("upsample: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (h * 2, w * 2);
    let mut y = vec![0.0; n * c * ho * wo];
    let xd = x.data();
    for nc in 0..n * c {
        let xb = nc * h * w;
        let yb = nc * ho * wo;
        for iy in 0..h {
            for ix in 0..w {
                let v = xd[xb + iy * w + ix];
                let o = yb + (iy * 2) * wo + ix * 2;
                y[o] = v;
                y[o + 1] = v;
                y[o + wo] = v;
                y[o + wo + 1] = v;
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                let xb = nc * h * w;
                let yb = nc * ho * wo;
                for iy in 0..h {
                    for ix in 0..w {
                        let o = yb + (iy * 2) * wo + ix * 2;
                        gx[xb + iy * w + ix] = gy[o] + gy[o + 1] + gy[o + wo] + gy[o + wo + 1];
                    }
                }
            }
            vec![(id, gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

pub struct BatchNormOut {
    pub y: Tensor,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Train-mode batch norm over NCHW: per-channel batch statistics with
/// population variance (divisor N*H*W).
pub fn batchnorm2d_train(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<BatchNormOut> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("batchnorm2d: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dim("batchnorm2d: gamma/beta must have shape [C]".into()));
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::Dim("batchnorm2d: empty batch".into()));
    }
    let hw = h * w;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            mean[ch] += xd[base..base + hw].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mu = mean[ch];
            var[ch] += xd[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
        }
    }
    let out = Tensor::new(xs, y)?;
    let track = any_tracked(&[x, gamma, beta]);
    let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
    let gamma_d = gamma.data().to_vec();
    let batch_mean = mean.clone();
    let batch_var = var.clone();
    let y = tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            // per-channel sums of gy and gy*xhat
            let mut sum_gy = vec![0.0; c];
            let mut sum_gy_xh = vec![0.0; c];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    for i in base..base + hw {
                        sum_gy[ch] += gy[i];
                        sum_gy_xh[ch] += gy[i] * xhat[i];
                    }
                }
            }
            if let Some(id) = xn {
                let mut gx = vec![0.0; gy.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let scale = gamma_d[ch] * inv_std[ch];
                        let mg = sum_gy[ch] / m as f64;
                        let mgx = sum_gy_xh[ch] / m as f64;
                        for i in base..base + hw {
                            gx[i] = scale * (gy[i] - mg - xhat[i] * mgx);
                        }
                    }
                }
                outs.push((id, gx));
            }
            if let Some(id) = gn {
                outs.push((id, sum_gy_xh.clone()));
            }
            if let Some(id) = bn {
                outs.push((id, sum_gy.clone()));
            }
            outs
        }),
    )?;
    Ok(BatchNormOut {
        y,
        batch_mean,
        batch_var,
    })
}

/// Eval-mode batch norm with frozen running statistics.
pub fn batchnorm2d_eval(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("batchnorm2d: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dim("batchnorm2d: gamma/beta must have shape [C]".into()));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::State(
            "batchnorm2d eval: running stats not initialized for this channel count".into(),
        ));
    }
    let hw = h * w;
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (mu, is) = (running_mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
        }
    }
    let out = Tensor::new(xs, y)?;
    let track = any_tracked(&[x, gamma, beta]);
    let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
    let gamma_d = gamma.data().to_vec();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            if let Some(id) = xn {
                let mut gx = vec![0.0; gy.len()];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let s = gamma_d[ch] * inv_std[ch];
                        for i in base..base + hw {
                            gx[i] = gy[i] * s;
                        }
                    }
                }
                outs.push((id, gx));
            }
            if let Some(id) = gn {
                let mut gg = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for i in base..base + hw {
                            gg[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                outs.push((id, gg));
            }
            if let Some(id) = bn {
                let mut gb = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        gb[ch] += gy[base..base + hw].iter().sum::<f64>();
                    }
                }
                outs.push((id, gb));
            }
            outs
        }),
    )
}

/// Layer norm across the channel axis at every (n, h, w) position.
pub fn layer_norm_channels(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("layer_norm: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dim("layer_norm: gamma/beta must have shape [C]".into()));
    }
    let hw = h * w;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; n * hw];
    for img in 0..n {
        for p in 0..hw {
            let mut mu = 0.0;
            for ch in 0..c {
                mu += xd[(img * c + ch) * hw + p];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[(img * c + ch) * hw + p] - mu;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[img * hw + p] = is;
            for ch in 0..c {
                let i = (img * c + ch) * hw + p;
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    let out = Tensor::new(xs, y)?;
    let track = any_tracked(&[x, gamma, beta]);
    let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
    let gamma_d = gamma.data().to_vec();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            if let Some(id) = xn {
                let mut gx = vec![0.0; gy.len()];
                for img in 0..n {
                    for p in 0..hw {
                        let is = inv_std[img * hw + p];
                        let mut mg = 0.0;
                        let mut mgx = 0.0;
                        for ch in 0..c {
                            let i = (img * c + ch) * hw + p;
                            let gh = gy[i] * gamma_d[ch];
                            mg += gh;
                            mgx += gh * xhat[i];
                        }
                        mg /= c as f64;
                        mgx /= c as f64;
                        for ch in 0..c {
                            let i = (img * c + ch) * hw + p;
                            let gh = gy[i] * gamma_d[ch];
                            gx[i] = is * (gh - mg - xhat[i] * mgx);
                        }
                    }
                }
                outs.push((id, gx));
            }
            if let Some(id) = gn {
                let mut gg = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for p in 0..hw {
                            gg[ch] += gy[base + p] * xhat[base + p];
                        }
                    }
                }
                outs.push((id, gg));
            }
            if let Some(id) = bn {
                let mut gb = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        gb[ch] += gy[base..base + hw].iter().sum::<f64>();
                    }
                }
                outs.push((id, gb));
            }
            outs
        }),
    )
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(tape: &mut Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    let xs = x.shape();
    if axis >= xs.len() {
        return Err(Error::Dim(format!(
            "softmax_axis: axis {} out of range for shape {:?}",
            axis, xs
        )));
    }
    let axis_len = xs[axis];
    let inner: usize = xs[axis + 1..].iter().product();
    let outer: usize = xs[..axis].iter().product();
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis_len + a) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..axis_len {
                mx = mx.max(xd[idx(a)]);
            }
            let mut denom = 0.0;
            for a in 0..axis_len {
                let e = (xd[idx(a)] - mx).exp();
                y[idx(a)] = e;
                denom += e;
            }
            for a in 0..axis_len {
                y[idx(a)] /= denom;
            }
        }
    }
    let out = Tensor::new(xs, y.clone())?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; gy.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * axis_len + a) * inner + i;
                    let mut dot = 0.0;
                    for a in 0..axis_len {
                        dot += gy[idx(a)] * y[idx(a)];
                    }
                    for a in 0..axis_len {
                        gx[idx(a)] = y[idx(a)] * (gy[idx(a)] - dot);
                    }
                }
            }
            vec![(id, gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// concat / split
// ---------------------------------------------------------------------------

/// Concatenate along an arbitrary axis; all other extents must agree.
pub fn concat_axis(tape: &mut Tape, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Dim("concat: empty input list".into()));
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(Error::Dim(format!("concat: axis {axis} out of range")));
    }
    for t in xs {
        if t.shape().len() != rank {
            return Err(Error::Dim("concat: rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != xs[0].shape()[d] {
                return Err(Error::Dim(format!(
                    "concat: extent mismatch at axis {d}: {:?} vs {:?}",
                    t.shape(),
                    xs[0].shape()
                )));
            }
        }
    }
    let outer: usize = xs[0].shape()[..axis].iter().product();
    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
    let sizes: Vec<usize> = xs.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut shape = xs[0].shape().to_vec();
    shape[axis] = total;
    let mut y = vec![0.0; outer * total * inner];
    let mut off = 0usize;
    for (t, &sz) in xs.iter().zip(sizes.iter()) {
        let td = t.data();
        for o in 0..outer {
            let src = o * sz * inner;
            let dst = (o * total + off) * inner;
            y[dst..dst + sz * inner].copy_from_slice(&td[src..src + sz * inner]);
        }
        off += sz;
    }
    let out = Tensor::new(&shape, y)?;
    let track = any_tracked(xs);
    let nodes: Vec<Option<usize>> = xs.iter().map(|t| t.node()).collect();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            let mut off = 0usize;
            for (node, &sz) in nodes.iter().zip(sizes.iter()) {
                if let Some(id) = node {
                    let mut g = vec![0.0; outer * sz * inner];
                    for o in 0..outer {
                        let dst = o * sz * inner;
                        let src = (o * total + off) * inner;
                        g[dst..dst + sz * inner].copy_from_slice(&gy[src..src + sz * inner]);
                    }
                    outs.push((*id, g));
                }
                off += sz;
            }
            outs
        }),
    )
}

/// Split along an axis into pieces of the given sizes.
pub fn split_axis(tape: &mut Tape, x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let xs = x.shape();
    if axis >= xs.len() {
        return Err(Error::Dim(format!("split: axis {axis} out of range")));
    }
    let total: usize = sizes.iter().sum();
    if total != xs[axis] {
        return Err(Error::Dim(format!(
            "split: sizes {:?} do not sum to extent {}",
            sizes, xs[axis]
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Dim("split: zero-size piece".into()));
    }
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let xd = x.data();
    let track = any_tracked(&[x]);
    let xn = x.node();
    let in_numel = x.numel();
    let mut outs = Vec::with_capacity(sizes.len());
    let mut off = 0usize;
    for &sz in sizes {
        let mut shape = xs.to_vec();
        shape[axis] = sz;
        let mut y = vec![0.0; outer * sz * inner];
        for o in 0..outer {
            let src = (o * total + off) * inner;
            let dst = o * sz * inner;
            y[dst..dst + sz * inner].copy_from_slice(&xd[src..src + sz * inner]);
        }
        let piece = Tensor::new(&shape, y)?;
        let this_off = off;
        let t = tape.emit(
            piece,
            track,
            Box::new(move |gy| {
                let Some(id) = xn else { return Vec::new() };
                let mut gx = vec![0.0; in_numel];
                for o in 0..outer {
                    let dst = (o * total + this_off) * inner;
                    let src = o * sz * inner;
                    gx[dst..dst + sz * inner].copy_from_slice(&gy[src..src + sz * inner]);
                }
                vec![(id, gx)]
            }),
        )?;
        outs.push(t);
        off += sz;
    }
    Ok(outs)
}

/// Channel concat for NCHW feature maps.
pub fn concat_channels(tape: &mut Tape, xs: &[&Tensor]) -> Result<Tensor> {
    for t in xs {
        if t.shape().len() != 4 {
            return Err(Error::Dim("concat_channels: want NCHW inputs".into()));
        }
    }
    concat_axis(tape, xs, 1)
}

/// Channel split for NCHW feature maps.
pub fn split_channels(tape: &mut Tape, x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if x.shape().len() != 4 {
        return Err(Error::Dim("split_channels: want NCHW input".into()));
    }
    split_axis(tape, x, 1, sizes)
}

// ---------------------------------------------------------------------------
// spatial rearrangement
// ---------------------------------------------------------------------------

/// Fixed 2x2 phase order used by the space-to-depth rearrangement.
pub const PHASE_ORDER: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn phase_index_map(c: usize, h: usize, w: usize) -> Vec<usize> {
    // out[(phase*C + c, y, x)] = in[(c, 2y+py, 2x+px)]; returns for each
    // output element its source flat index within one image.
    let (h2, w2) = (h / 2, w / 2);
    let mut map = vec![0usize; 4 * c * h2 * w2];
    let mut o = 0usize;
    for (p, &(py, px)) in PHASE_ORDER.iter().enumerate() {
        let _ = p;
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    map[o] = (ch * h + (2 * y + py)) * w + (2 * x + px);
                    o += 1;
                }
            }
        }
    }
    map
}

/// Space-to-depth: NCHW -> N(4C)(H/2)(W/2) via the four 2x2 sampling phases.
/// A bijection on the per-image data.
pub fn phase_split(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("phase_split: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim(format!(
            "phase_split: H and W must be even, got {h}x{w} (caller pads)"
        )));
    }
    let map = phase_index_map(c, h, w);
    let per_img = c * h * w;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for img in 0..n {
        let src = &xd[img * per_img..(img + 1) * per_img];
        let dst = &mut y[img * per_img..(img + 1) * per_img];
        for (d, &s) in dst.iter_mut().zip(map.iter()) {
            *d = src[s];
        }
    }
    let out = Tensor::new(&[n, 4 * c, h / 2, w / 2], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; gy.len()];
            for img in 0..gy.len() / per_img {
                let src = &gy[img * per_img..(img + 1) * per_img];
                let dst = &mut gx[img * per_img..(img + 1) * per_img];
                for (g, &s) in src.iter().zip(map.iter()) {
                    dst[s] = *g;
                }
            }
            vec![(id, gx)]
        }),
    )
}

/// Inverse of [`phase_split`]: N(4C)(H/2)(W/2) -> NCHW.
pub fn phase_merge(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("phase_merge: want NCHW, got {:?}", xs)));
    }
    let (n, c4, h2, w2) = (xs[0], xs[1], xs[2], xs[3]);
    if c4 % 4 != 0 {
        return Err(Error::Dim("phase_merge: channel count must be divisible by 4".into()));
    }
    let c = c4 / 4;
    let (h, w) = (h2 * 2, w2 * 2);
    let map = phase_index_map(c, h, w);
    let per_img = c * h * w;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for img in 0..n {
        let src = &xd[img * per_img..(img + 1) * per_img];
        let dst = &mut y[img * per_img..(img + 1) * per_img];
        for (s, &d) in src.iter().zip(map.iter()) {
            dst[d] = *s;
        }
    }
    let out = Tensor::new(&[n, c, h, w], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; gy.len()];
            for img in 0..gy.len() / per_img {
                let src = &gy[img * per_img..(img + 1) * per_img];
                let dst = &mut gx[img * per_img..(img + 1) * per_img];
                for (g, &d) in dst.iter_mut().zip(map.iter()) {
                    *g = src[d];
                }
            }
            vec![(id, gx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// indexing helpers for the detection head
// ---------------------------------------------------------------------------

/// Gather a channel range at a list of (image, y, x) cells from an NCHW map.
/// Output is [K x ch_len] with backward scatter-add.
pub fn gather_cells(
    tape: &mut Tape,
    x: &Tensor,
    cells: &[(usize, usize, usize)],
    ch_off: usize,
    ch_len: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("gather_cells: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if ch_off + ch_len > c {
        return Err(Error::Dim(format!(
            "gather_cells: channels [{ch_off}, {}) out of range {c}",
            ch_off + ch_len
        )));
    }
    let k = cells.len();
    let mut idx = Vec::with_capacity(k * ch_len);
    for &(img, y, xcol) in cells {
        if img >= n || y >= h || xcol >= w {
            return Err(Error::Dim(format!(
                "gather_cells: cell ({img},{y},{xcol}) out of bounds {n}x{h}x{w}"
            )));
        }
        for ch in ch_off..ch_off + ch_len {
            idx.push(((img * c + ch) * h + y) * w + xcol);
        }
    }
    let xd = x.data();
    let y: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
    let out = Tensor::new(&[k, ch_len], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    let in_numel = x.numel();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; in_numel];
            for (gv, &i) in gy.iter().zip(idx.iter()) {
                gx[i] += gv;
            }
            vec![(id, gx)]
        }),
    )
}

/// Column `j` of a [K x F] tensor as a length-K vector.
pub fn column(tape: &mut Tape, x: &Tensor, j: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || j >= xs[1] {
        return Err(Error::Dim(format!("column: index {j} invalid for {:?}", xs)));
    }
    let (k, f) = (xs[0], xs[1]);
    let y: Vec<f64> = (0..k).map(|r| x.data()[r * f + j]).collect();
    let out = Tensor::new(&[k], y)?;
    let track = any_tracked(&[x]);
    let xn = x.node();
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let Some(id) = xn else { return Vec::new() };
            let mut gx = vec![0.0; k * f];
            for (r, gv) in gy.iter().enumerate() {
                gx[r * f + j] = *gv;
            }
            vec![(id, gx)]
        }),
    )
}

/// Multiply each channel plane of NCHW `x` by the matching entry of the
/// [N x C] scale tensor (spatial broadcast).
pub fn scale_channels(tape: &mut Tape, x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dim(format!("scale_channels: want NCHW, got {:?}", xs)));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if s.shape() != [n, c] {
        return Err(Error::Dim(format!(
            "scale_channels: scale {:?} does not match [N, C] = [{n}, {c}]",
            s.shape()
        )));
    }
    let hw = h * w;
    let xd = x.data();
    let sd = s.data();
    let mut y = vec![0.0; xd.len()];
    for nc in 0..n * c {
        let sv = sd[nc];
        for i in nc * hw..(nc + 1) * hw {
            y[i] = xd[i] * sv;
        }
    }
    let out = Tensor::new(xs, y)?;
    let track = any_tracked(&[x, s]);
    let (xn, sn) = (x.node(), s.node());
    let (xd_c, sd_c) = if track {
        (x.data().to_vec(), s.data().to_vec())
    } else {
        (Vec::new(), Vec::new())
    };
    tape.emit(
        out,
        track,
        Box::new(move |gy| {
            let mut outs = Vec::new();
            if let Some(id) = xn {
                let mut gx = vec![0.0; gy.len()];
                for nc in 0..n * c {
                    let sv = sd_c[nc];
                    for i in nc * hw..(nc + 1) * hw {
                        gx[i] = gy[i] * sv;
                    }
                }
                outs.push((id, gx));
            }
            if let Some(id) = sn {
                let mut gs = vec![0.0; n * c];
                for nc in 0..n * c {
                    let mut acc = 0.0;
                    for i in nc * hw..(nc + 1) * hw {
                        acc += gy[i] * xd_c[i];
                    }
                    gs[nc] = acc;
                }
                outs.push((id, gs));
            }
            outs
        }),
    )
}
