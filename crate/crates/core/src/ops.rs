//! Math kernels shared by the layer API and the autograd graph.
//!
//! Conventions:
//! - Image tensors are `[batch, height, width, channels]`; kernels are
//!   `[L, L, out_kernels, in_channels]` so `w[a][b][i][j]` follows the index
//!   order of the layer equations.
//! - Accumulations run in ascending index order with plain mul/add, so a naive
//!   loop written the same way reproduces results bit-for-bit.
//! - ReLU's subgradient at exactly 0 is 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Optional output activation of a layer (the psi of the layer equations).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => relu_scalar(v),
        }
    }

    /// Derivative with respect to the preactivation value.
    #[inline]
    pub fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => relu_grad_scalar(pre),
        }
    }
}

#[inline]
pub fn relu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
pub fn relu_grad_scalar(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(relu_scalar)
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| relu_grad_scalar(v) * g)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shapes checked")
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

fn mat_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(DacError::shape("matmul expects matrices", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(DacError::shape("matmul inner dimensions", a.shape(), b.shape()));
    }
    Ok((m, k, n))
}

pub(crate) fn matmul_raw(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// `a [m x k]` times `b [k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = mat_dims(a, b)?;
    let mut c = vec![0.0; m * n];
    matmul_raw(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

pub fn transpose2(t: &Tensor) -> Tensor {
    assert_eq!(t.shape().len(), 2, "transpose2 expects a matrix");
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape checked")
}

/// Gradients of `c = a b` given `dc`: `da = dc b^T`, `db = a^T dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dc, &transpose2(b))?;
    let db = matmul(&transpose2(a), dc)?;
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// Convolution geometry and im2col
// ---------------------------------------------------------------------------

/// Output spatial dims of a convolution, for shape tracing without data.
pub fn conv_output_hw(
    in_h: usize,
    in_w: usize,
    l: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if l % 2 == 0 || stride == 0 {
        return Err(DacError::Contract(format!(
            "kernel size must be odd and stride >= 1, got L={l} stride={stride}"
        )));
    }
    match padding {
        Padding::Valid => {
            if in_h < l || in_w < l {
                return Err(DacError::Contract(format!(
                    "kernel {l}x{l} larger than input {in_h}x{in_w} with valid padding"
                )));
            }
            Ok(((in_h - l) / stride + 1, (in_w - l) / stride + 1))
        }
        Padding::Same => Ok((in_h.div_ceil(stride), in_w.div_ceil(stride))),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_ch: usize,
    pub l: usize,
    pub out_kernels: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// True when the input had no batch axis (rank 3).
    pub unbatched: bool,
}

pub(crate) fn conv_geom(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (batch, in_h, in_w, in_ch, unbatched) = match *x.shape() {
        [s, t, m] => (1, s, t, m, true),
        [b, s, t, m] => (b, s, t, m, false),
        _ => {
            return Err(DacError::shape(
                "conv input must be [s,t,m] or [batch,s,t,m]",
                x.shape(),
                w.shape(),
            ))
        }
    };
    let &[l, l2, out_kernels, w_in] = w.shape() else {
        return Err(DacError::shape("conv kernel must be [L,L,n,m]", w.shape(), x.shape()));
    };
    if l != l2 {
        return Err(DacError::Contract(format!("kernel must be square, got {l}x{l2}")));
    }
    if l % 2 == 0 {
        return Err(DacError::Contract(format!("kernel size must be odd, got {l}")));
    }
    if stride == 0 {
        return Err(DacError::Contract("stride must be >= 1".into()));
    }
    if w_in != in_ch {
        return Err(DacError::shape("conv input channels vs kernel", x.shape(), w.shape()));
    }
    let (out_h, out_w, pad_top, pad_left, padded_h, padded_w) = match padding {
        Padding::Valid => {
            if in_h < l || in_w < l {
                return Err(DacError::Contract(format!(
                    "kernel {l}x{l} larger than input {in_h}x{in_w} with valid padding"
                )));
            }
            let oh = (in_h - l) / stride + 1;
            let ow = (in_w - l) / stride + 1;
            (oh, ow, 0, 0, in_h, in_w)
        }
        Padding::Same => {
            let oh = in_h.div_ceil(stride);
            let ow = in_w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + l).saturating_sub(in_h);
            let pad_w = ((ow - 1) * stride + l).saturating_sub(in_w);
            (oh, ow, pad_h / 2, pad_w / 2, in_h + pad_h, in_w + pad_w)
        }
    };
    Ok(ConvGeom {
        batch,
        in_h,
        in_w,
        in_ch,
        l,
        out_kernels,
        stride,
        pad_top,
        pad_left,
        padded_h,
        padded_w,
        out_h,
        out_w,
        unbatched,
    })
}

/// Copies one `[in_h, in_w, in_ch]` sample into a zero-padded buffer.
fn pad_sample(g: &ConvGeom, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let row_len = g.in_w * g.in_ch;
    for r in 0..g.in_h {
        let src = &x[r * row_len..(r + 1) * row_len];
        let dst_off = ((r + g.pad_top) * g.padded_w + g.pad_left) * g.in_ch;
        out[dst_off..dst_off + row_len].copy_from_slice(src);
    }
}

/// Row `(h,k)` of `cols` holds the window values ordered `(a, b, j)`.
fn im2col(g: &ConvGeom, xp: &[f64], cols: &mut [f64]) {
    let win = g.l * g.l * g.in_ch;
    for h in 0..g.out_h {
        for k in 0..g.out_w {
            let row = &mut cols[(h * g.out_w + k) * win..(h * g.out_w + k + 1) * win];
            for a in 0..g.l {
                let src_r = h * g.stride + a;
                for b in 0..g.l {
                    let src_c = k * g.stride + b;
                    let src = (src_r * g.padded_w + src_c) * g.in_ch;
                    let dst = (a * g.l + b) * g.in_ch;
                    row[dst..dst + g.in_ch].copy_from_slice(&xp[src..src + g.in_ch]);
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the padded image.
fn col2im(g: &ConvGeom, dcols: &[f64], dxp: &mut [f64]) {
    let win = g.l * g.l * g.in_ch;
    for h in 0..g.out_h {
        for k in 0..g.out_w {
            let row = &dcols[(h * g.out_w + k) * win..(h * g.out_w + k + 1) * win];
            for a in 0..g.l {
                let dst_r = h * g.stride + a;
                for b in 0..g.l {
                    let dst_c = k * g.stride + b;
                    let dst = (dst_r * g.padded_w + dst_c) * g.in_ch;
                    let src = (a * g.l + b) * g.in_ch;
                    for j in 0..g.in_ch {
                        dxp[dst + j] += row[src + j];
                    }
                }
            }
        }
    }
}

fn unpad_sample(g: &ConvGeom, dxp: &[f64], out: &mut [f64]) {
    let row_len = g.in_w * g.in_ch;
    for r in 0..g.in_h {
        let src_off = ((r + g.pad_top) * g.padded_w + g.pad_left) * g.in_ch;
        out[r * row_len..(r + 1) * row_len].copy_from_slice(&dxp[src_off..src_off + row_len]);
    }
}

/// Kernel `[L,L,n,m]` reordered to a `[L*L*m, n]` matrix for im2col products.
fn kernel_matrix(g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let win = g.l * g.l * g.in_ch;
    let mut km = vec![0.0; win * g.out_kernels];
    for a in 0..g.l {
        for b in 0..g.l {
            for i in 0..g.out_kernels {
                for j in 0..g.in_ch {
                    let src = ((a * g.l + b) * g.out_kernels + i) * g.in_ch + j;
                    km[((a * g.l + b) * g.in_ch + j) * g.out_kernels + i] = w[src];
                }
            }
        }
    }
    km
}

fn out_shape(g: &ConvGeom, channels: usize) -> Vec<usize> {
    if g.unbatched {
        vec![g.out_h, g.out_w, channels]
    } else {
        vec![g.batch, g.out_h, g.out_w, channels]
    }
}

// ---------------------------------------------------------------------------
// Raw and standard convolution
// ---------------------------------------------------------------------------

/// Cross-correlation without bias or activation.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    conv2d_std(x, w, None, stride, padding, Activation::None)
}

/// Standard convolution: optional bias plus optional output activation.
pub fn conv2d_std(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    act: Activation,
) -> Result<Tensor> {
    let g = conv_geom(x, w, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_kernels] {
            return Err(DacError::shape("conv bias", b.shape(), w.shape()));
        }
    }
    let km = kernel_matrix(&g, w.data());
    let sample_in = g.in_h * g.in_w * g.in_ch;
    let sample_out = g.out_h * g.out_w * g.out_kernels;
    let win = g.l * g.l * g.in_ch;
    let mut out = vec![0.0; g.batch * sample_out];

    out.par_chunks_mut(sample_out)
        .zip(x.data().par_chunks(sample_in))
        .for_each(|(o, xs)| {
            let mut xp = vec![0.0; g.padded_h * g.padded_w * g.in_ch];
            pad_sample(&g, xs, &mut xp);
            let mut cols = vec![0.0; g.out_h * g.out_w * win];
            im2col(&g, &xp, &mut cols);
            matmul_raw(g.out_h * g.out_w, win, g.out_kernels, &cols, &km, o);
            if let Some(b) = bias {
                let bd = b.data();
                for row in o.chunks_mut(g.out_kernels) {
                    for (v, &bi) in row.iter_mut().zip(bd) {
                        *v += bi;
                    }
                }
            }
            if act == Activation::Relu {
                for v in o.iter_mut() {
                    *v = relu_scalar(*v);
                }
            }
        });

    Tensor::new(out_shape(&g, g.out_kernels), out)
}

pub struct ConvStdGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub dbias: Option<Tensor>,
}

pub fn conv2d_std_backward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    act: Activation,
    dy: &Tensor,
) -> Result<ConvStdGrads> {
    let g = conv_geom(x, w, stride, padding)?;
    let km = kernel_matrix(&g, w.data());
    let win = g.l * g.l * g.in_ch;
    let sample_in = g.in_h * g.in_w * g.in_ch;
    let sample_out = g.out_h * g.out_w * g.out_kernels;

    // Per-sample gradients, reduced in index order afterwards.
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..g.batch)
        .into_par_iter()
        .map(|r| {
            let xs = &x.data()[r * sample_in..(r + 1) * sample_in];
            let dys = &dy.data()[r * sample_out..(r + 1) * sample_out];

            let mut xp = vec![0.0; g.padded_h * g.padded_w * g.in_ch];
            pad_sample(&g, xs, &mut xp);
            let mut cols = vec![0.0; g.out_h * g.out_w * win];
            im2col(&g, &xp, &mut cols);

            // Undo the activation: need the preactivation sign, recomputed here.
            let mut gpre = dys.to_vec();
            if act == Activation::Relu {
                let mut pre = vec![0.0; sample_out];
                matmul_raw(g.out_h * g.out_w, win, g.out_kernels, &cols, &km, &mut pre);
                if let Some(b) = bias {
                    let bd = b.data();
                    for row in pre.chunks_mut(g.out_kernels) {
                        for (v, &bi) in row.iter_mut().zip(bd) {
                            *v += bi;
                        }
                    }
                }
                for (gv, &p) in gpre.iter_mut().zip(&pre) {
                    *gv *= relu_grad_scalar(p);
                }
            }

            let mut dbias = vec![0.0; g.out_kernels];
            for row in gpre.chunks(g.out_kernels) {
                for (acc, &v) in dbias.iter_mut().zip(row) {
                    *acc += v;
                }
            }

            // dkm = cols^T * gpre, dcols = gpre * km^T
            let mut dkm = vec![0.0; win * g.out_kernels];
            {
                let rows = g.out_h * g.out_w;
                for p in 0..rows {
                    let crow = &cols[p * win..(p + 1) * win];
                    let grow = &gpre[p * g.out_kernels..(p + 1) * g.out_kernels];
                    for (q, &cv) in crow.iter().enumerate() {
                        let drow = &mut dkm[q * g.out_kernels..(q + 1) * g.out_kernels];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += cv * gv;
                        }
                    }
                }
            }
            let mut dcols = vec![0.0; g.out_h * g.out_w * win];
            {
                let rows = g.out_h * g.out_w;
                for p in 0..rows {
                    let grow = &gpre[p * g.out_kernels..(p + 1) * g.out_kernels];
                    let drow = &mut dcols[p * win..(p + 1) * win];
                    for q in 0..win {
                        let krow = &km[q * g.out_kernels..(q + 1) * g.out_kernels];
                        let mut acc = 0.0;
                        for (gv, kv) in grow.iter().zip(krow) {
                            acc += gv * kv;
                        }
                        drow[q] = acc;
                    }
                }
            }
            let mut dxp = vec![0.0; g.padded_h * g.padded_w * g.in_ch];
            col2im(&g, &dcols, &mut dxp);
            let mut dxs = vec![0.0; sample_in];
            unpad_sample(&g, &dxp, &mut dxs);
            (dxs, dkm, dbias)
        })
        .collect();

    let mut dx = vec![0.0; g.batch * sample_in];
    let mut dkm_total = vec![0.0; win * g.out_kernels];
    let mut dbias_total = vec![0.0; g.out_kernels];
    for (r, (dxs, dkm, dbias)) in per_sample.into_iter().enumerate() {
        dx[r * sample_in..(r + 1) * sample_in].copy_from_slice(&dxs);
        for (acc, v) in dkm_total.iter_mut().zip(dkm) {
            *acc += v;
        }
        for (acc, v) in dbias_total.iter_mut().zip(dbias) {
            *acc += v;
        }
    }

    // dkm [(a,b,j), i] back to kernel layout [a,b,i,j].
    let mut dw = vec![0.0; w.numel()];
    for a in 0..g.l {
        for b in 0..g.l {
            for i in 0..g.out_kernels {
                for j in 0..g.in_ch {
                    dw[((a * g.l + b) * g.out_kernels + i) * g.in_ch + j] =
                        dkm_total[((a * g.l + b) * g.in_ch + j) * g.out_kernels + i];
                }
            }
        }
    }

    Ok(ConvStdGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        dbias: bias.map(|_| Tensor::new(vec![g.out_kernels], dbias_total).expect("shape")),
    })
}

// ---------------------------------------------------------------------------
// DAC convolution
// ---------------------------------------------------------------------------

/// Activation plane of one output kernel: `relu(b_ij + x)` on the interior
/// of the padded image, `relu(b_ij)` on the zero-padded border.
fn fill_activated_plane(g: &ConvGeom, db: &[f64], xs: &[f64], out: &mut [f64]) {
    let border: Vec<f64> = db.iter().map(|&b| relu_scalar(b)).collect();
    for chunk in out.chunks_mut(g.in_ch) {
        chunk.copy_from_slice(&border);
    }
    let row_len = g.in_w * g.in_ch;
    for r in 0..g.in_h {
        let src = &xs[r * row_len..(r + 1) * row_len];
        let dst_off = ((r + g.pad_top) * g.padded_w + g.pad_left) * g.in_ch;
        let dst = &mut out[dst_off..dst_off + row_len];
        for (pix, &s) in src.iter().enumerate() {
            dst[pix] = relu_scalar(db[pix % g.in_ch] + s);
        }
    }
}

fn check_dac_biases(w: &Tensor, dac_biases: &Tensor) -> Result<(usize, usize)> {
    let n = w.shape()[w.shape().len() - 2];
    let m = w.shape()[w.shape().len() - 1];
    if dac_biases.shape() != [n, m] {
        return Err(DacError::shape(
            "dac biases must be [out, in]",
            dac_biases.shape(),
            w.shape(),
        ));
    }
    Ok((n, m))
}

/// DAC convolution. For every output kernel `i` the input activation plane
/// `relu(b[i][j] + y[.., j])` is materialized once on the padded image and
/// reused across all kernel positions; zero-padded border positions therefore
/// see `relu(b[i][j])`.
pub fn conv2d_dac(
    x: &Tensor,
    w: &Tensor,
    dac_biases: &Tensor,
    out_bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    act: Activation,
) -> Result<Tensor> {
    let g = conv_geom(x, w, stride, padding)?;
    check_dac_biases(w, dac_biases)?;
    if let Some(b) = out_bias {
        if b.shape() != [g.out_kernels] {
            return Err(DacError::shape("conv out_bias", b.shape(), w.shape()));
        }
    }
    let win = g.l * g.l * g.in_ch;
    let sample_in = g.in_h * g.in_w * g.in_ch;
    let sample_out = g.out_h * g.out_w * g.out_kernels;

    // Per-kernel column vectors of w: wk[i][(a,b,j)].
    let km = kernel_matrix(&g, w.data());

    let mut out = vec![0.0; g.batch * sample_out];
    out.par_chunks_mut(sample_out)
        .zip(x.data().par_chunks(sample_in))
        .for_each(|(o, xs)| {
            let mut act_plane = vec![0.0; g.padded_h * g.padded_w * g.in_ch];
            let mut cols = vec![0.0; g.out_h * g.out_w * win];
            for i in 0..g.out_kernels {
                // Cached activation planes for this output kernel. Padded
                // border positions all carry relu(b_ij + 0) = relu(b_ij),
                // computed once per (i, j); interior positions need one add
                // each, which is the mnst caching cost.
                let db = &dac_biases.data()[i * g.in_ch..(i + 1) * g.in_ch];
                fill_activated_plane(&g, db, xs, &mut act_plane);
                im2col(&g, &act_plane, &mut cols);
                let bi = out_bias.map_or(0.0, |b| b.data()[i]);
                for (p, crow) in cols.chunks(win).enumerate() {
                    let mut acc = 0.0;
                    for (q, &cv) in crow.iter().enumerate() {
                        acc += km[q * g.out_kernels + i] * cv;
                    }
                    o[p * g.out_kernels + i] = act.apply(bi + acc);
                }
            }
        });

    Tensor::new(out_shape(&g, g.out_kernels), out)
}

pub struct ConvDacGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub ddac_biases: Tensor,
    pub dout_bias: Option<Tensor>,
}

pub fn conv2d_dac_backward(
    x: &Tensor,
    w: &Tensor,
    dac_biases: &Tensor,
    out_bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
    act: Activation,
    dy: &Tensor,
) -> Result<ConvDacGrads> {
    let g = conv_geom(x, w, stride, padding)?;
    check_dac_biases(w, dac_biases)?;
    let win = g.l * g.l * g.in_ch;
    let sample_in = g.in_h * g.in_w * g.in_ch;
    let sample_out = g.out_h * g.out_w * g.out_kernels;
    let km = kernel_matrix(&g, w.data());

    type SampleGrads = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let per_sample: Vec<SampleGrads> = (0..g.batch)
        .into_par_iter()
        .map(|r| {
            let xs = &x.data()[r * sample_in..(r + 1) * sample_in];
            let dys = &dy.data()[r * sample_out..(r + 1) * sample_out];

            let mut xp = vec![0.0; g.padded_h * g.padded_w * g.in_ch];
            pad_sample(&g, xs, &mut xp);
            let mut act_plane = vec![0.0; xp.len()];
            let mut cols = vec![0.0; g.out_h * g.out_w * win];
            let mut dcols = vec![0.0; g.out_h * g.out_w * win];
            let mut dact = vec![0.0; xp.len()];
            let mut dxp = vec![0.0; xp.len()];

            let mut dkm = vec![0.0; win * g.out_kernels];
            let mut ddac = vec![0.0; g.out_kernels * g.in_ch];
            let mut dob = vec![0.0; g.out_kernels];

            for i in 0..g.out_kernels {
                let db = &dac_biases.data()[i * g.in_ch..(i + 1) * g.in_ch];
                for (ap, chunk) in act_plane.chunks_mut(g.in_ch).zip(xp.chunks(g.in_ch)) {
                    for j in 0..g.in_ch {
                        ap[j] = relu_scalar(db[j] + chunk[j]);
                    }
                }
                im2col(&g, &act_plane, &mut cols);
                let bi = out_bias.map_or(0.0, |b| b.data()[i]);

                // Gradient through psi and the output bias.
                for (p, crow) in cols.chunks(win).enumerate() {
                    let mut acc = 0.0;
                    for (q, &cv) in crow.iter().enumerate() {
                        acc += km[q * g.out_kernels + i] * cv;
                    }
                    let gpre = dys[p * g.out_kernels + i] * act.grad(bi + acc);
                    dob[i] += gpre;
                    // dkm column for kernel i, and dcols row.
                    let crow = &cols[p * win..(p + 1) * win];
                    let drow = &mut dcols[p * win..(p + 1) * win];
                    for q in 0..win {
                        dkm[q * g.out_kernels + i] += gpre * crow[q];
                        drow[q] = gpre * km[q * g.out_kernels + i];
                    }
                }

                dact.fill(0.0);
                col2im(&g, &dcols, &mut dact);

                // Through the cached activation: mask by relu'(b_ij + x).
                for (pos, (da, chunk)) in dact.chunks(g.in_ch).zip(xp.chunks(g.in_ch)).enumerate() {
                    let dxp_row = &mut dxp[pos * g.in_ch..(pos + 1) * g.in_ch];
                    for j in 0..g.in_ch {
                        let m = relu_grad_scalar(db[j] + chunk[j]);
                        let v = da[j] * m;
                        ddac[i * g.in_ch + j] += v;
                        dxp_row[j] += v;
                    }
                }
            }

            let mut dxs = vec![0.0; sample_in];
            unpad_sample(&g, &dxp, &mut dxs);
            (dxs, dkm, ddac, dob)
        })
        .collect();

    let mut dx = vec![0.0; g.batch * sample_in];
    let mut dkm_total = vec![0.0; win * g.out_kernels];
    let mut ddac_total = vec![0.0; g.out_kernels * g.in_ch];
    let mut dob_total = vec![0.0; g.out_kernels];
    for (r, (dxs, dkm, ddac, dob)) in per_sample.into_iter().enumerate() {
        dx[r * sample_in..(r + 1) * sample_in].copy_from_slice(&dxs);
        for (acc, v) in dkm_total.iter_mut().zip(dkm) {
            *acc += v;
        }
        for (acc, v) in ddac_total.iter_mut().zip(ddac) {
            *acc += v;
        }
        for (acc, v) in dob_total.iter_mut().zip(dob) {
            *acc += v;
        }
    }

    let mut dw = vec![0.0; w.numel()];
    for a in 0..g.l {
        for b in 0..g.l {
            for i in 0..g.out_kernels {
                for j in 0..g.in_ch {
                    dw[((a * g.l + b) * g.out_kernels + i) * g.in_ch + j] =
                        dkm_total[((a * g.l + b) * g.in_ch + j) * g.out_kernels + i];
                }
            }
        }
    }

    Ok(ConvDacGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        ddac_biases: Tensor::new(vec![g.out_kernels, g.in_ch], ddac_total)?,
        dout_bias: out_bias.map(|_| Tensor::new(vec![g.out_kernels], dob_total).expect("shape")),
    })
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

fn dense_dims(y: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, bool)> {
    let (batch, m, unbatched) = match *y.shape() {
        [m] => (1, m, true),
        [b, m] => (b, m, false),
        _ => {
            return Err(DacError::shape(
                "dense input must be [m] or [batch,m]",
                y.shape(),
                w.shape(),
            ))
        }
    };
    let &[n, wm] = w.shape() else {
        return Err(DacError::shape("dense weights must be [n,m]", w.shape(), y.shape()));
    };
    if wm != m {
        return Err(DacError::shape("dense input vs weights", y.shape(), w.shape()));
    }
    Ok((batch, m, n, unbatched))
}

fn dense_out_shape(batch: usize, n: usize, unbatched: bool) -> Vec<usize> {
    if unbatched {
        vec![n]
    } else {
        vec![batch, n]
    }
}

/// Standard dense layer: `act(bias_i + sum_j w_ij y_j)` per row.
pub fn dense_std(y: &Tensor, w: &Tensor, bias: &Tensor, act: Activation) -> Result<Tensor> {
    let (batch, m, n, unbatched) = dense_dims(y, w)?;
    if bias.shape() != [n] {
        return Err(DacError::shape("dense bias", bias.shape(), w.shape()));
    }
    let mut out = vec![0.0; batch * n];
    for r in 0..batch {
        let yr = &y.data()[r * m..(r + 1) * m];
        let or = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            let wr = &w.data()[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += wr[j] * yr[j];
            }
            or[i] = act.apply(bias.data()[i] + acc);
        }
    }
    Tensor::new(dense_out_shape(batch, n, unbatched), out)
}

pub struct DenseStdGrads {
    pub dy: Tensor,
    pub dw: Tensor,
    pub dbias: Tensor,
}

pub fn dense_std_backward(
    y: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    act: Activation,
    dout: &Tensor,
) -> Result<DenseStdGrads> {
    let (batch, m, n, _) = dense_dims(y, w)?;
    let mut dyv = vec![0.0; batch * m];
    let mut dwv = vec![0.0; n * m];
    let mut dbv = vec![0.0; n];
    for r in 0..batch {
        let yr = &y.data()[r * m..(r + 1) * m];
        let dor = &dout.data()[r * n..(r + 1) * n];
        let dyr = &mut dyv[r * m..(r + 1) * m];
        for i in 0..n {
            let wr = &w.data()[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += wr[j] * yr[j];
            }
            let gpre = dor[i] * act.grad(bias.data()[i] + acc);
            dbv[i] += gpre;
            let dwr = &mut dwv[i * m..(i + 1) * m];
            for j in 0..m {
                dwr[j] += gpre * yr[j];
                dyr[j] += gpre * wr[j];
            }
        }
    }
    Ok(DenseStdGrads {
        dy: Tensor::new(y.shape().to_vec(), dyv)?,
        dw: Tensor::new(w.shape().to_vec(), dwv)?,
        dbias: Tensor::new(vec![n], dbv)?,
    })
}

/// DAC dense layer: `act(b_i + sum_j w_ij relu(d_ij + y_j))` per row, with
/// `b_i` treated as 0 and `act` as identity when absent.
pub fn dense_dac(
    y: &Tensor,
    w: &Tensor,
    dac_biases: &Tensor,
    out_bias: Option<&Tensor>,
    act: Activation,
) -> Result<Tensor> {
    let (batch, m, n, unbatched) = dense_dims(y, w)?;
    check_dac_biases(w, dac_biases)?;
    if let Some(b) = out_bias {
        if b.shape() != [n] {
            return Err(DacError::shape("dense out_bias", b.shape(), w.shape()));
        }
    }
    let mut out = vec![0.0; batch * n];
    for r in 0..batch {
        let yr = &y.data()[r * m..(r + 1) * m];
        let or = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            let wr = &w.data()[i * m..(i + 1) * m];
            let dr = &dac_biases.data()[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += wr[j] * relu_scalar(dr[j] + yr[j]);
            }
            let bi = out_bias.map_or(0.0, |b| b.data()[i]);
            or[i] = act.apply(bi + acc);
        }
    }
    Tensor::new(dense_out_shape(batch, n, unbatched), out)
}

pub struct DenseDacGrads {
    pub dy: Tensor,
    pub dw: Tensor,
    pub ddac_biases: Tensor,
    pub dout_bias: Option<Tensor>,
}

pub fn dense_dac_backward(
    y: &Tensor,
    w: &Tensor,
    dac_biases: &Tensor,
    out_bias: Option<&Tensor>,
    act: Activation,
    dout: &Tensor,
) -> Result<DenseDacGrads> {
    let (batch, m, n, _) = dense_dims(y, w)?;
    check_dac_biases(w, dac_biases)?;
    let mut dyv = vec![0.0; batch * m];
    let mut dwv = vec![0.0; n * m];
    let mut ddv = vec![0.0; n * m];
    let mut dbv = vec![0.0; n];
    for r in 0..batch {
        let yr = &y.data()[r * m..(r + 1) * m];
        let dor = &dout.data()[r * n..(r + 1) * n];
        let dyr = &mut dyv[r * m..(r + 1) * m];
        for i in 0..n {
            let wr = &w.data()[i * m..(i + 1) * m];
            let dr = &dac_biases.data()[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += wr[j] * relu_scalar(dr[j] + yr[j]);
            }
            let bi = out_bias.map_or(0.0, |b| b.data()[i]);
            let gpre = dor[i] * act.grad(bi + acc);
            dbv[i] += gpre;
            let dwr = &mut dwv[i * m..(i + 1) * m];
            let ddr = &mut ddv[i * m..(i + 1) * m];
            for j in 0..m {
                let filtered = relu_scalar(dr[j] + yr[j]);
                let mask = relu_grad_scalar(dr[j] + yr[j]);
                dwr[j] += gpre * filtered;
                let through = gpre * wr[j] * mask;
                ddr[j] += through;
                dyr[j] += through;
            }
        }
    }
    Ok(DenseDacGrads {
        dy: Tensor::new(y.shape().to_vec(), dyv)?,
        dw: Tensor::new(w.shape().to_vec(), dwv)?,
        ddac_biases: Tensor::new(vec![n, m], ddv)?,
        dout_bias: out_bias.map(|_| Tensor::new(vec![n], dbv).expect("shape")),
    })
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

fn bn_dims(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.is_empty() || shape[shape.len() - 1] != channels {
        return Err(DacError::shape("batchnorm channels", shape, &[channels]));
    }
    let c = channels;
    let rows = x.numel() / c;
    Ok((rows, c))
}

/// Per-channel batch statistics over all leading axes: `(mean, biased var)`.
pub fn batch_stats(x: &Tensor, channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, c) = bn_dims(x, channels)?;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= rows as f64;
    }
    Ok((mean, var))
}

/// Batch normalization over batch and spatial dims per channel. In training
/// mode the batch statistics are used; otherwise `running` must be provided.
/// When `beta` is absent no shift is added after scaling.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: Option<&Tensor>,
    running: Option<(&Tensor, &Tensor)>,
    epsilon: f64,
    training: bool,
) -> Result<Tensor> {
    let c = gamma.numel();
    let (_, _) = bn_dims(x, c)?;
    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        batch_stats(x, c)?
    } else {
        let (rm, rv) = running.ok_or_else(|| {
            DacError::Contract("batchnorm inference requires running statistics".into())
        })?;
        (rm.data().to_vec(), rv.data().to_vec())
    };
    let scale: Vec<f64> = (0..c)
        .map(|j| gamma.data()[j] / (var[j] + epsilon).sqrt())
        .collect();
    let mut out = vec![0.0; x.numel()];
    for (orow, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        for j in 0..c {
            let mut v = (row[j] - mean[j]) * scale[j];
            if let Some(b) = beta {
                v += b.data()[j];
            }
            orow[j] = v;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub struct BatchNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Option<Tensor>,
}

pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: Option<&Tensor>,
    running: Option<(&Tensor, &Tensor)>,
    epsilon: f64,
    training: bool,
    dy: &Tensor,
) -> Result<BatchNormGrads> {
    let c = gamma.numel();
    let (rows, _) = bn_dims(x, c)?;
    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        batch_stats(x, c)?
    } else {
        let (rm, rv) = running.ok_or_else(|| {
            DacError::Contract("batchnorm inference requires running statistics".into())
        })?;
        (rm.data().to_vec(), rv.data().to_vec())
    };
    let inv_std: Vec<f64> = (0..c).map(|j| 1.0 / (var[j] + epsilon).sqrt()).collect();

    // Accumulate per-channel sums of dy and dy*xhat.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (drow, row) in dy.data().chunks(c).zip(x.data().chunks(c)) {
        for j in 0..c {
            let xhat = (row[j] - mean[j]) * inv_std[j];
            sum_dy[j] += drow[j];
            sum_dy_xhat[j] += drow[j] * xhat;
        }
    }

    let n = rows as f64;
    let mut dx = vec![0.0; x.numel()];
    for ((dxrow, drow), row) in dx
        .chunks_mut(c)
        .zip(dy.data().chunks(c))
        .zip(x.data().chunks(c))
    {
        for j in 0..c {
            let xhat = (row[j] - mean[j]) * inv_std[j];
            dxrow[j] = if training {
                gamma.data()[j] * inv_std[j]
                    * (drow[j] - sum_dy[j] / n - xhat * sum_dy_xhat[j] / n)
            } else {
                gamma.data()[j] * inv_std[j] * drow[j]
            };
        }
    }

    Ok(BatchNormGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], sum_dy_xhat)?,
        dbeta: beta.map(|_| Tensor::new(vec![c], sum_dy).expect("shape")),
    })
}

// ---------------------------------------------------------------------------
// Small structural ops
// ---------------------------------------------------------------------------

/// Adds a per-channel bias over the trailing axis.
pub fn channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.numel();
    let (_, _) = bn_dims(x, c)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn channel_bias_backward(x: &Tensor, bias: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = bias.numel();
    let (_, _) = bn_dims(x, c)?;
    let mut db = vec![0.0; c];
    for row in dy.data().chunks(c) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((dy.clone(), Tensor::new(vec![c], db)?))
}

/// Global average pooling `[b,s,t,c] -> [b,c]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let &[b, s, t, c] = x.shape() else {
        return Err(DacError::shape("gap expects [b,s,t,c]", x.shape(), &[]));
    };
    let area = (s * t) as f64;
    let mut out = vec![0.0; b * c];
    for r in 0..b {
        let or = &mut out[r * c..(r + 1) * c];
        for row in x.data()[r * s * t * c..(r + 1) * s * t * c].chunks(c) {
            for (acc, &v) in or.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in or.iter_mut() {
            *v /= area;
        }
    }
    Tensor::new(vec![b, c], out)
}

pub fn gap_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let &[b, s, t, c] = x.shape() else {
        return Err(DacError::shape("gap expects [b,s,t,c]", x.shape(), &[]));
    };
    let area = (s * t) as f64;
    let mut dx = vec![0.0; x.numel()];
    for r in 0..b {
        let dr = &dy.data()[r * c..(r + 1) * c];
        for row in dx[r * s * t * c..(r + 1) * s * t * c].chunks_mut(c) {
            for (v, &g) in row.iter_mut().zip(dr) {
                *v = g / area;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Identity shortcut with optional stride-subsampling and zero-padded channel
/// growth (ResNet option A).
pub fn shortcut_project(x: &Tensor, stride: usize, out_channels: usize) -> Result<Tensor> {
    let &[b, s, t, c] = x.shape() else {
        return Err(DacError::shape("shortcut expects [b,s,t,c]", x.shape(), &[]));
    };
    if out_channels < c {
        return Err(DacError::Contract(format!(
            "shortcut cannot shrink channels: {c} -> {out_channels}"
        )));
    }
    let oh = s.div_ceil(stride);
    let ow = t.div_ceil(stride);
    let mut out = vec![0.0; b * oh * ow * out_channels];
    for r in 0..b {
        for h in 0..oh {
            for k in 0..ow {
                let src = ((r * s + h * stride) * t + k * stride) * c;
                let dst = ((r * oh + h) * ow + k) * out_channels;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::new(vec![b, oh, ow, out_channels], out)
}

pub fn shortcut_project_backward(
    x: &Tensor,
    stride: usize,
    out_channels: usize,
    dy: &Tensor,
) -> Result<Tensor> {
    let &[b, s, t, c] = x.shape() else {
        return Err(DacError::shape("shortcut expects [b,s,t,c]", x.shape(), &[]));
    };
    let oh = s.div_ceil(stride);
    let ow = t.div_ceil(stride);
    let mut dx = vec![0.0; x.numel()];
    for r in 0..b {
        for h in 0..oh {
            for k in 0..ow {
                let dst = ((r * s + h * stride) * t + k * stride) * c;
                let src = ((r * oh + h) * ow + k) * out_channels;
                for j in 0..c {
                    dx[dst + j] += dy.data()[src + j];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Concatenates `factor` copies of each row: `[.., m] -> [.., factor*m]`.
pub fn replicate(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(DacError::Contract(format!(
            "replication factor must be >= 1, got {factor}"
        )));
    }
    let shape = x.shape();
    let m = *shape.last().ok_or_else(|| {
        DacError::Contract("replicate expects a tensor with at least one axis".into())
    })?;
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = m * factor;
    let mut out = Vec::with_capacity(x.numel() * factor);
    for row in x.data().chunks(m) {
        for _ in 0..factor {
            out.extend_from_slice(row);
        }
    }
    Tensor::new(out_shape, out)
}

pub fn replicate_backward(x: &Tensor, factor: usize, dy: &Tensor) -> Result<Tensor> {
    let m = *x.shape().last().unwrap();
    let mut dx = vec![0.0; x.numel()];
    for (dxrow, dyrow) in dx.chunks_mut(m).zip(dy.data().chunks(m * factor)) {
        for rep in dyrow.chunks(m) {
            for (acc, &v) in dxrow.iter_mut().zip(rep) {
                *acc += v;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch. Returns a scalar tensor.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[b, k] = logits.shape() else {
        return Err(DacError::shape("logits must be [batch,k]", logits.shape(), &[]));
    };
    if labels.len() != b {
        return Err(DacError::Contract(format!(
            "got {} labels for batch {b}",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        if label >= k {
            return Err(DacError::Contract(format!("label {label} out of range {k}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(Tensor::scalar(total / b as f64))
}

pub fn softmax_cross_entropy_backward(
    logits: &Tensor,
    labels: &[usize],
    dloss: f64,
) -> Result<Tensor> {
    let &[b, k] = logits.shape() else {
        return Err(DacError::shape("logits must be [batch,k]", logits.shape(), &[]));
    };
    let mut dx = vec![0.0; logits.numel()];
    for (r, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let drow = &mut dx[r * k..(r + 1) * k];
        for j in 0..k {
            let p = (row[j] - max).exp() / denom;
            drow[j] = dloss * (p - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Tensor::new(logits.shape().to_vec(), dx)
}
