//! Neural-network primitives over [`Tensor`]: convolution, linear maps,
//! normalization, softmax, bilinear interpolation, and activations.
//!
//! Two interpolation conventions coexist deliberately:
//! [`bilinear_resize`] clamps at the borders (resizing a feature map should
//! not fade to zero at its edge), while [`sample_point`] zero-pads outside
//! the image (a sampling location that leaves the map reads nothing).
//! Both use half-pixel centers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Direct 2-D convolution; `x` is `[C_in,H,W]`, `w` is `[C_out,C_in/groups,k,k]`.
///
/// Output spatial size is `(H + 2·padding − dilation·(k−1) − 1) / stride + 1`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    let [cin, h, win] = x.shape()[..] else {
        return Err(Error::shape(format!("conv2d input rank: {:?}", x.shape())));
    };
    let [cout, cin_g, kh, kw] = w.shape()[..] else {
        return Err(Error::shape(format!("conv2d weight rank: {:?}", w.shape())));
    };
    if kh != kw {
        return Err(Error::config(format!("conv2d expects square kernels, got {kh}x{kw}")));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::shape(format!(
            "conv2d channels: in {cin}, weight expects {cin_g} per group, groups {groups}"
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::config("conv2d stride/dilation must be positive"));
    }
    let span = dilation * (kh - 1) + 1;
    if h + 2 * padding < span || win + 2 * padding < span {
        return Err(Error::shape(format!(
            "conv2d: input {h}x{win} too small for kernel span {span} at padding {padding}"
        )));
    }
    let oh = (h + 2 * padding - span) / stride + 1;
    let ow = (win + 2 * padding - span) / stride + 1;
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("conv2d bias: {:?}", b.shape())));
        }
    }

    let xs = x.data();
    let ws = w.data();
    let per_group_out = cout / groups;
    let mut out = vec![0.0f32; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
        let g = oc / per_group_out;
        let bias = b.map_or(0.0, |b| b.data()[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let x_plane = &xs[ic * h * win..(ic + 1) * h * win];
                    let w_plane = &ws[(oc * cin_g + icg) * kh * kw..(oc * cin_g + icg + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &x_plane[iy as usize * win..(iy as usize + 1) * win];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            acc += row[ix as usize] * w_plane[ky * kw + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new(&[cout, oh, ow], out)
}

/// `x [n,D_in] x w [D_out,D_in]^T + b -> [n,D_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = x.matmul_nt(w)?;
    if let Some(b) = b {
        let dout = y.shape()[1];
        if b.shape() != [dout] {
            return Err(Error::shape(format!("linear bias: {:?}", b.shape())));
        }
        let bs = b.data().to_vec();
        for i in 0..y.shape()[0] {
            let row = y.row_mut(i);
            for (v, bv) in row.iter_mut().zip(&bs) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Normalizes each row of `[n,D]` to zero mean / unit variance, then applies
/// the affine (gamma, beta). Moments are accumulated in f64.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let [n, d] = x.shape()[..] else {
        return Err(Error::shape(format!("layer_norm input: {:?}", x.shape())));
    };
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm affine: gamma {:?}, beta {:?}, D = {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let g = gamma.data();
    let bt = beta.data();
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            out[i * d + j] = (((row[j] as f64 - mean) * inv) as f32) * g[j] + bt[j];
        }
    }
    Tensor::new(&[n, d], out)
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let [n, d] = x.shape()[..] else {
        return Err(Error::shape(format!("softmax input: {:?}", x.shape())));
    };
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = x.row(i);
        softmax_slice(row, &mut out[i * d..(i + 1) * d]);
    }
    Tensor::new(&[n, d], out)
}

/// Max-shifted softmax of one slice into another.
pub(crate) fn softmax_slice(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - max) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Resizes `[C,H,W]` to `[C,oh,ow]` with half-pixel centers, clamping at the
/// borders, separable in the two axes.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!("bilinear_resize input: {:?}", x.shape())));
    };
    if oh == 0 || ow == 0 {
        return Err(Error::input("bilinear_resize to empty output"));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    // Precompute source taps per output coordinate.
    let taps = |o: usize, osz: usize, isz: usize| -> (usize, usize, f32) {
        let src = (o as f32 + 0.5) * isz as f32 / osz as f32 - 0.5;
        let i0 = src.floor();
        let frac = src - i0;
        let a = (i0 as isize).clamp(0, isz as isize - 1) as usize;
        let b = (i0 as isize + 1).clamp(0, isz as isize - 1) as usize;
        (a, b, frac)
    };
    let ytaps: Vec<_> = (0..oh).map(|o| taps(o, oh, h)).collect();
    let xtaps: Vec<_> = (0..ow).map(|o| taps(o, ow, w)).collect();
    let xs = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, plane)| {
        let src = &xs[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let tl = src[y0 * w + x0];
                let tr = src[y0 * w + x1];
                let bl = src[y1 * w + x0];
                let br = src[y1 * w + x1];
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                plane[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    });
    Tensor::new(&[c, oh, ow], out)
}

/// Bilinearly samples all channels of `[C,H,W]` at one normalized point
/// `(px, py)` in `[0,1]²`; taps outside the map contribute zero.
pub fn sample_point(x: &Tensor, px: f32, py: f32, out: &mut [f32]) -> Result<()> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!("sample_point input: {:?}", x.shape())));
    };
    if out.len() != c {
        return Err(Error::shape(format!("sample_point out: {} != C {c}", out.len())));
    }
    let sx = px * w as f32 - 0.5;
    let sy = py * h as f32 - 0.5;
    let x0 = sx.floor() as isize;
    let y0 = sy.floor() as isize;
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    let wts = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let xs = x.data();
    out.fill(0.0);
    for (ix, iy, wt) in wts {
        if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize || wt == 0.0 {
            continue;
        }
        let base = iy as usize * w + ix as usize;
        for ch in 0..c {
            out[ch] += xs[ch * h * w + base] * wt;
        }
    }
    Ok(())
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Logit; the inverse of [`sigmoid`], with inputs clamped away from {0,1}.
pub fn inverse_sigmoid(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Tanh-form GELU.
pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn silu(v: f32) -> f32 {
    v * sigmoid(v)
}

pub fn relu(v: f32) -> f32 {
    v.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let y = Tensor::new(&[1, 3], vec![10.3, 8.8, 12.0]).unwrap();
        let a = softmax(&x).unwrap();
        let b = softmax(&y).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x = Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 2).unwrap(), x);
    }

    #[test]
    fn sample_at_pixel_center_reads_pixel() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut out = [0.0f32];
        // center of pixel (0,0) in a 2x2 map is (0.25, 0.25) normalized
        sample_point(&x, 0.25, 0.25, &mut out).unwrap();
        assert_eq!(out[0], 1.0);
        sample_point(&x, 0.75, 0.75, &mut out).unwrap();
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn sample_outside_is_zero() {
        let x = Tensor::full(&[1, 2, 2], 5.0);
        let mut out = [0.0f32];
        sample_point(&x, -0.5, 0.5, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        sample_point(&x, 0.5, 1.4, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
    }
}
