//! Forward and backward kernels behind the graph operations.
//!
//! Convolutions lower to one GEMM per call: the whole batch is unrolled into a
//! single `[Cin*K*K, B*Ho*Wo]` column matrix.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Geometry of a square-kernel convolution over one spatial plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("convolution kernel has a zero extent"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }
}

/// `[B, C, H, W]` -> columns `[C*kh*kw, B*oh*ow]`.
fn im2col<T: Scalar>(x: &[T], batch: usize, channels: usize, g: &ConvGeom) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let ncols = batch * plane_out;
    let mut cols = vec![T::zero(); channels * g.kh * g.kw * ncols];
    for c in 0..channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * channels + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane_out..(b + 1) * plane_out];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let dst_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[B, C, H, W]`.
fn col2im<T: Scalar>(cols: &[T], batch: usize, channels: usize, g: &ConvGeom) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let ncols = batch * plane_out;
    let mut x = vec![T::zero(); batch * channels * g.h * g.w];
    for c in 0..channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut x[(b * channels + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane_out..(b + 1) * plane_out];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for (oj, &s) in src[oi * g.ow..(oi + 1) * g.ow].iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst_row[jj as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, P]` -> `[C, B*P]`.
fn batch_to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * plane..][..plane];
            out[c * batch * plane + b * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
fn channel_to_batch_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &x[c * batch * plane + b * plane..][..plane];
            out[(b * channels + c) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

pub(crate) fn conv2d_geom<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, cin, h, w] = x.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    check_bias(bias, cout)?;
    ConvGeom::new(h, w, kh, kw, stride, pad)
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let [b, cin, _, _] = x.dims4().expect("checked");
    let cout = weight.shape()[0];
    let plane = g.oh * g.ow;
    let ckk = cin * g.kh * g.kw;
    let mut out_cm = vec![T::zero(); cout * b * plane];
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let cols_owned;
    let cols: &[T] = if pointwise && b == 1 {
        x.data()
    } else if pointwise {
        cols_owned = batch_to_channel_major(x.data(), b, cin, plane);
        &cols_owned
    } else {
        cols_owned = im2col(x.data(), b, cin, g);
        &cols_owned
    };
    gemm(
        MatRef::new(weight.data(), cout, ckk),
        MatRef::new(cols, ckk, b * plane),
        &mut out_cm,
        false,
    );
    for (c, row) in out_cm.chunks_exact_mut(b * plane).enumerate() {
        let bc = bias.data()[c];
        row.iter_mut().for_each(|v| *v += bc);
    }
    let data = if b == 1 {
        out_cm
    } else {
        channel_to_batch_major(&out_cm, b, cout, plane)
    };
    Tensor::from_vec(&[b, cout, g.oh, g.ow], data).expect("conv output shape")
}

/// Gradients `(d_input, d_weight, d_bias)` of a conv2d given `d_out`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [b, cin, h, w] = x.dims4().expect("checked");
    let cout = weight.shape()[0];
    let plane = g.oh * g.ow;
    let ckk = cin * g.kh * g.kw;
    let dy_cm = if b == 1 {
        d_out.data().to_vec()
    } else {
        batch_to_channel_major(d_out.data(), b, cout, plane)
    };
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let cols = if pointwise {
        batch_to_channel_major(x.data(), b, cin, plane)
    } else {
        im2col(x.data(), b, cin, g)
    };

    let mut dw = vec![T::zero(); cout * ckk];
    gemm(
        MatRef::new(&dy_cm, cout, b * plane),
        MatRef::t(&cols, b * plane, ckk),
        &mut dw,
        false,
    );
    let db: Vec<T> = dy_cm
        .chunks_exact(b * plane)
        .map(|row| row.iter().copied().sum())
        .collect();

    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); ckk * b * plane];
        gemm(
            MatRef::t(weight.data(), ckk, cout),
            MatRef::new(&dy_cm, cout, b * plane),
            &mut dcols,
            false,
        );
        let data = if pointwise {
            channel_to_batch_major(&dcols, b, cin, plane)
        } else {
            col2im(&dcols, b, cin, g)
        };
        Tensor::from_vec(&[b, cin, h, w], data).expect("conv input grad shape")
    });
    (
        dx,
        Tensor::from_vec(weight.shape(), dw).expect("weight grad shape"),
        Tensor::from_vec(&[cout], db).expect("bias grad shape"),
    )
}

/// Geometry for a transposed convolution. The returned geometry describes the
/// equivalent forward convolution whose *input* is the transposed output.
pub(crate) fn conv_transpose_geom<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, cin, h, w] = x.dims4()?;
    let [wcin, cout, kh, kw] = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d_transpose weight expects {wcin} input channels, input has {cin}"
        )));
    }
    check_bias(bias, cout)?;
    if stride == 0 {
        return Err(Error::invalid("convolution stride must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("conv2d_transpose input has a zero spatial extent"));
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(format!(
            "conv2d_transpose output would be empty (padding {pad} consumes {full_h}x{full_w})"
        )));
    }
    let g = ConvGeom::new(full_h - 2 * pad, full_w - 2 * pad, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok(g)
}

pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let [b, cin, h, w] = x.dims4().expect("checked");
    let cout = weight.shape()[1];
    let ckk = cout * g.kh * g.kw;
    let plane = h * w;
    let x_cm = batch_to_channel_major(x.data(), b, cin, plane);
    let mut cols = vec![T::zero(); ckk * b * plane];
    gemm(
        MatRef::t(weight.data(), ckk, cin),
        MatRef::new(&x_cm, cin, b * plane),
        &mut cols,
        false,
    );
    let mut out = col2im(&cols, b, cout, g);
    let out_plane = g.h * g.w;
    for (i, chunk) in out.chunks_exact_mut(out_plane).enumerate() {
        let bc = bias.data()[i % cout];
        chunk.iter_mut().for_each(|v| *v += bc);
    }
    Tensor::from_vec(&[b, cout, g.h, g.w], out).expect("transposed conv output shape")
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [b, cin, h, w] = x.dims4().expect("checked");
    let cout = weight.shape()[1];
    let ckk = cout * g.kh * g.kw;
    let plane = h * w;
    let dcols = im2col(d_out.data(), b, cout, g);
    let x_cm = batch_to_channel_major(x.data(), b, cin, plane);

    let mut dw = vec![T::zero(); cin * ckk];
    gemm(
        MatRef::new(&x_cm, cin, b * plane),
        MatRef::t(&dcols, b * plane, ckk),
        &mut dw,
        false,
    );
    let out_plane = g.h * g.w;
    let mut db = vec![T::zero(); cout];
    for (i, chunk) in d_out.data().chunks_exact(out_plane).enumerate() {
        db[i % cout] += chunk.iter().copied().sum();
    }
    let dx = need_input.then(|| {
        let mut dx_cm = vec![T::zero(); cin * b * plane];
        gemm(
            MatRef::new(weight.data(), cin, ckk),
            MatRef::new(&dcols, ckk, b * plane),
            &mut dx_cm,
            false,
        );
        Tensor::from_vec(&[b, cin, h, w], channel_to_batch_major(&dx_cm, b, cin, plane))
            .expect("transposed conv input grad shape")
    });
    (
        dx,
        Tensor::from_vec(weight.shape(), dw).expect("weight grad shape"),
        Tensor::from_vec(&[cout], db).expect("bias grad shape"),
    )
}

/// Max pooling; returns the output and, per output cell, the flat input index
/// of the winning element. Ties go to the smallest row-major index.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max-pool window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::shape(format!("max-pool window {k} larger than input {h}x{w}")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let data = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best_idx = base + oi * stride * w + oj * stride;
                let mut best = data[best_idx];
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, oh, ow], out)?, arg))
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if factor < 1 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub(crate) fn upsample_backward<T: Scalar>(d_out: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [b, c, oh, ow] = d_out.dims4().expect("checked");
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &d_out.data()[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / factor) * w + j / factor] += src[i * ow + j];
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], dx).expect("upsample grad shape")
}

pub(crate) fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let [b, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let [tb, tc, th, tw] = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::shape(format!(
                "concat_channels inputs disagree: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total_c * plane);
    for bi in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
        }
    }
    Tensor::from_vec(&[b, total_c, h, w], out)
}
