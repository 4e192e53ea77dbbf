//! Raw kernels behind the tape operations.
//!
//! Convolution is the hot path; the forward kernel blocks over output
//! channels and fuses all kernel taps of a row into one pass so each padded
//! input row is loaded once per block. Accumulation order is fixed
//! (ic, dy, dx ascending with `mul_add`), which keeps results bit-identical
//! between the specialized and generic paths.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Output spatial size of a convolution along one axis.
pub(crate) fn conv_out_dim(input: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Cross-correlation with zero padding. `kernel` has shape
/// (out_ch, in_ch, kh, kw); `bias`, when present, has length out_ch.
pub(crate) fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    pad: (usize, usize),
    stride: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (c_out, c_in, kh, kw) = (ks.n, ks.c, ks.h, ks.w);
    if xs.c != c_in {
        return Err(Error::shape("channels", c_in, xs.c, "conv2d input vs kernel in_ch"));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("out_channels", c_out, b.len(), "conv2d bias length"));
        }
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let oh = conv_out_dim(xs.h, kh, pad.0, stride)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::invalid(format!("conv2d output height empty: input {}x{}, kernel {kh}x{kw}, pad {pad:?}", xs.h, xs.w)))?;
    let ow = conv_out_dim(xs.w, kw, pad.1, stride)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::invalid(format!("conv2d output width empty: input {}x{}, kernel {kh}x{kw}, pad {pad:?}", xs.h, xs.w)))?;

    let out_shape = Shape::new(xs.n, c_out, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let in_plane = xs.hw();
    let out_plane = oh * ow;

    // Padded copy of one input row; zeros stand in for the padding.
    let mut row = vec![0.0; xs.w + 2 * pad.1];
    const BLOCK: usize = 8;
    let mut acc = vec![0.0; BLOCK * ow];

    for n in 0..xs.n {
        let x_batch = &x.data()[n * c_in * in_plane..(n + 1) * c_in * in_plane];
        let out_batch = &mut out[n * c_out * out_plane..(n + 1) * c_out * out_plane];
        let mut ocb = 0;
        while ocb < c_out {
            let nb = (c_out - ocb).min(BLOCK);
            for oy in 0..oh {
                for (b, a) in acc.chunks_mut(ow).take(nb).enumerate() {
                    let init = bias.map_or(0.0, |bv| bv[ocb + b]);
                    a.iter_mut().for_each(|v| *v = init);
                }
                for ic in 0..c_in {
                    let x_plane = &x_batch[ic * in_plane..(ic + 1) * in_plane];
                    for dy in 0..kh {
                        let iy = oy * stride + dy;
                        if iy < pad.0 || iy >= xs.h + pad.0 {
                            continue;
                        }
                        let iy = iy - pad.0;
                        row[..pad.1].iter_mut().for_each(|v| *v = 0.0);
                        row[pad.1 + xs.w..].iter_mut().for_each(|v| *v = 0.0);
                        row[pad.1..pad.1 + xs.w].copy_from_slice(&x_plane[iy * xs.w..(iy + 1) * xs.w]);
                        for b in 0..nb {
                            let kbase = (((ocb + b) * c_in + ic) * kh + dy) * kw;
                            let taps = &kernel.data()[kbase..kbase + kw];
                            let a = &mut acc[b * ow..b * ow + ow];
                            if kw == 3 && stride == 1 {
                                let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
                                for (ox, av) in a.iter_mut().enumerate() {
                                    *av = row[ox + 2].mul_add(w2, row[ox + 1].mul_add(w1, row[ox].mul_add(w0, *av)));
                                }
                            } else {
                                for (dx, &tap) in taps.iter().enumerate() {
                                    for (ox, av) in a.iter_mut().enumerate() {
                                        *av = row[ox * stride + dx].mul_add(tap, *av);
                                    }
                                }
                            }
                        }
                    }
                }
                for b in 0..nb {
                    out_batch[(ocb + b) * out_plane + oy * ow..(ocb + b) * out_plane + (oy + 1) * ow]
                        .copy_from_slice(&acc[b * ow..b * ow + ow]);
                }
            }
            ocb += nb;
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    in_shape: Shape,
    pad: (usize, usize),
    stride: usize,
) -> Result<Tensor> {
    let ks = kernel.shape();
    let (c_out, c_in, kh, kw) = (ks.n, ks.c, ks.h, ks.w);
    if stride == 1 {
        // Full correlation with the spatially flipped, channel-transposed kernel.
        let mut flipped = vec![0.0; ks.numel()];
        for oc in 0..c_out {
            for ic in 0..c_in {
                for dy in 0..kh {
                    for dx in 0..kw {
                        flipped[((ic * c_out + oc) * kh + (kh - 1 - dy)) * kw + (kw - 1 - dx)] =
                            kernel.data()[((oc * c_in + ic) * kh + dy) * kw + dx];
                    }
                }
            }
        }
        let flipped = Tensor::new(Shape::new(c_in, c_out, kh, kw), flipped)?;
        let dx = conv2d(grad_out, &flipped, None, (kh - 1 - pad.0, kw - 1 - pad.1), 1)?;
        if dx.shape() != in_shape {
            return Err(Error::shape("numel", in_shape.numel(), dx.shape().numel(), "conv2d_grad_input (stride 1)"));
        }
        return Ok(dx);
    }

    // Strided case: scatter each output gradient into its input window.
    let gs = grad_out.shape();
    let mut dx = Tensor::zeros(in_shape);
    let in_plane = in_shape.hw();
    let out_plane = gs.hw();
    for n in 0..in_shape.n {
        for oc in 0..c_out {
            let g_plane = grad_out.plane(n, oc);
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    let g = g_plane[oy * gs.w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..c_in {
                        let dst = &mut dx.data_mut()[(n * c_in + ic) * in_plane..(n * c_in + ic + 1) * in_plane];
                        for dy in 0..kh {
                            let iy = oy * stride + dy;
                            if iy < pad.0 || iy >= in_shape.h + pad.0 {
                                continue;
                            }
                            let iy = iy - pad.0;
                            for dx_tap in 0..kw {
                                let ix = ox * stride + dx_tap;
                                if ix < pad.1 || ix >= in_shape.w + pad.1 {
                                    continue;
                                }
                                let ix = ix - pad.1;
                                dst[iy * in_shape.w + ix] +=
                                    g * kernel.data()[((oc * c_in + ic) * kh + dy) * kw + dx_tap];
                            }
                        }
                    }
                }
            }
        }
    }
    let _ = out_plane;
    Ok(dx)
}

/// Dot product with four fixed partial accumulators (deterministic order).
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            s[j] = a[i * 4 + j].mul_add(b[i * 4 + j], s[j]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Gradient of `conv2d` with respect to the kernel.
pub(crate) fn conv2d_grad_kernel(
    grad_out: &Tensor,
    x: &Tensor,
    kernel_shape: Shape,
    pad: (usize, usize),
    stride: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let gs = grad_out.shape();
    let (c_out, c_in, kh, kw) = (kernel_shape.n, kernel_shape.c, kernel_shape.h, kernel_shape.w);
    let mut dk = vec![0.0; kernel_shape.numel()];
    for n in 0..xs.n {
        for oc in 0..c_out {
            let g_plane = grad_out.plane(n, oc);
            for ic in 0..c_in {
                let x_plane = x.plane(n, ic);
                for dy in 0..kh {
                    for dx_tap in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..gs.h {
                            let iy = oy * stride + dy;
                            if iy < pad.0 || iy >= xs.h + pad.0 {
                                continue;
                            }
                            let iy = iy - pad.0;
                            // Valid ox range so that ix = ox*stride + dx - pad stays in bounds.
                            let ox_lo = if pad.1 >= dx_tap { (pad.1 - dx_tap + stride - 1) / stride } else { 0 };
                            let ox_hi = ((xs.w + pad.1 - dx_tap - 1) / stride + 1).min(gs.w);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let g_row = &g_plane[oy * gs.w + ox_lo..oy * gs.w + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + dx_tap - pad.1;
                                let x_row = &x_plane[iy * xs.w + ix0..iy * xs.w + ix0 + g_row.len()];
                                acc += dot4(g_row, x_row);
                            } else {
                                let mut s = 0.0;
                                for (i, &g) in g_row.iter().enumerate() {
                                    let ix = (ox_lo + i) * stride + dx_tap - pad.1;
                                    s = g.mul_add(x_plane[iy * xs.w + ix], s);
                                }
                                acc += s;
                            }
                        }
                        dk[((oc * c_in + ic) * kh + dy) * kw + dx_tap] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape, dk)
}

/// Gradient of `conv2d` with respect to the bias: per-channel sum of grad_out.
pub(crate) fn conv2d_grad_bias(grad_out: &Tensor) -> Vec<f64> {
    let gs = grad_out.shape();
    let mut db = vec![0.0; gs.c];
    for n in 0..gs.n {
        for (c, dbc) in db.iter_mut().enumerate() {
            let plane = grad_out.plane(n, c);
            let mut s = [0.0f64; 4];
            let chunks = plane.len() / 4;
            for i in 0..chunks {
                for j in 0..4 {
                    s[j] += plane[i * 4 + j];
                }
            }
            let mut tail = 0.0;
            for v in &plane[chunks * 4..] {
                tail += v;
            }
            *dbc += (s[0] + s[1]) + (s[2] + s[3]) + tail;
        }
    }
    db
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Concatenation along the channel axis.
pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape("height", sa.h, sb.h, format!("concat_channels of {sa} with {sb}")));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        for c in 0..sa.c {
            data.extend_from_slice(a.plane(n, c));
        }
        for c in 0..sb.c {
            data.extend_from_slice(b.plane(n, c));
        }
    }
    Tensor::new(out_shape, data)
}

/// Nearest-neighbor upsampling by an integer factor.
pub(crate) fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c, xs.h * factor, xs.w * factor);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let plane = x.plane(n, c);
            for oy in 0..out_shape.h {
                let iy = oy / factor;
                for ox in 0..out_shape.w {
                    out.push(plane[iy * xs.w + ox / factor]);
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn upsample_nearest_grad(grad_out: &Tensor, in_shape: Shape, factor: usize) -> Tensor {
    let gs = grad_out.shape();
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g_plane = grad_out.plane(n, c);
            let base = (n * in_shape.c + c) * in_shape.hw();
            for iy in 0..in_shape.h {
                for ix in 0..in_shape.w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx_tap in 0..factor {
                            s += g_plane[(iy * factor + dy) * gs.w + ix * factor + dx_tap];
                        }
                    }
                    dx.data_mut()[base + iy * in_shape.w + ix] = s;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Plain six-fold loop convolution; the independent reference the fast
    /// kernel is checked against.
    pub(crate) fn conv2d_direct(
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&[f64]>,
        pad: (usize, usize),
        stride: usize,
    ) -> Tensor {
        let xs = x.shape();
        let ks = kernel.shape();
        let oh = conv_out_dim(xs.h, ks.h, pad.0, stride).unwrap();
        let ow = conv_out_dim(xs.w, ks.w, pad.1, stride).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, oh, ow));
        for n in 0..xs.n {
            for oc in 0..ks.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[oc]);
                        for ic in 0..ks.c {
                            for dy in 0..ks.h {
                                for dx in 0..ks.w {
                                    let iy = (oy * stride + dy) as isize - pad.0 as isize;
                                    let ix = (ox * stride + dx) as isize - pad.1 as isize;
                                    if iy >= 0 && (iy as usize) < xs.h && ix >= 0 && (ix as usize) < xs.w {
                                        acc += kernel.at(oc, ic, dy, dx) * x.at(n, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let scale = b.data().iter().fold(1e-30_f64, |m, v| m.max(v.abs()));
        let diff = a.max_abs_diff(b).unwrap();
        assert!(diff / scale < tol, "relative deviation {} exceeds {tol}", diff / scale);
    }

    #[test]
    fn all_ones_same_padding_corner_arithmetic() {
        let x = Tensor::filled(Shape::image(1, 3, 3), 1.0);
        let k = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let out = conv2d(&x, &k, Some(&[0.0]), (1, 1), 1).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 2), 4.0);
        assert_eq!(out.at(0, 0, 2, 0), 4.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = rand_tensor(Shape::image(2, 7, 9), 3);
        let mut k = Tensor::zeros(Shape::new(2, 2, 3, 3));
        *k.at_mut(0, 0, 1, 1) = 1.0;
        *k.at_mut(1, 1, 1, 1) = 1.0;
        let out = conv2d(&x, &k, None, (1, 1), 1).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn matches_direct_convolution() {
        let x = rand_tensor(Shape::new(1, 2, 8, 8), 11);
        let k = rand_tensor(Shape::new(3, 2, 3, 3), 12);
        let b = [0.3, -0.2, 0.05];
        let fast = conv2d(&x, &k, Some(&b), (1, 1), 1).unwrap();
        let slow = conv2d_direct(&x, &k, Some(&b), (1, 1), 1);
        assert_close(&fast, &slow, 1e-12);
    }

    #[test]
    fn matches_direct_convolution_strided_and_rect() {
        for (kh, kw, pad, stride, h, w) in
            [(3, 3, (1, 1), 2, 8, 10), (5, 5, (2, 2), 1, 9, 9), (1, 3, (0, 1), 1, 6, 7), (5, 1, (0, 0), 2, 11, 6), (3, 3, (1, 1), 2, 7, 7)]
        {
            let x = rand_tensor(Shape::new(2, 3, h, w), 21);
            let k = rand_tensor(Shape::new(4, 3, kh, kw), 22);
            let fast = conv2d(&x, &k, None, pad, stride).unwrap();
            let slow = conv2d_direct(&x, &k, None, pad, stride);
            assert_close(&fast, &slow, 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::zeros(Shape::image(2, 4, 4));
        let k = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &k, None, (1, 1), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "unexpected error: {msg}");
    }

    #[test]
    fn upsample_then_grad_roundtrip_counts() {
        let x = rand_tensor(Shape::image(2, 3, 4), 5);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), Shape::image(2, 6, 8));
        assert_eq!(up.at(0, 1, 5, 7), x.at(0, 1, 2, 3));
        let g = Tensor::filled(up.shape(), 1.0);
        let dx = upsample_nearest_grad(&g, x.shape(), 2);
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }
}
