//! Parameter-free tensor operations with their backward passes.
//!
//! Every forward function is pure; what the backward pass needs is either the
//! forward input or output, which callers keep around in their own caches.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Output spatial size of a strided window op.
pub fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "window {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Like [`out_size`] but `None` when the window does not fit.
pub fn checked_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad >= kernel).then(|| (input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            out_size(self.height, self.kernel, self.stride, self.pad),
            out_size(self.width, self.kernel, self.stride, self.pad),
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one CHW image into a `(C·k·k) × (Ho·Wo)` column matrix with zero padding.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    let k = g.kernel;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a CHW image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with `weight: [Cout, Cin, k, k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, k, _) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = ConvGeom {
        channels: cin,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut cols = vec![T::zero(); rows * plane];
    let in_per = cin * h * w;
    let out_per = cout * plane;
    for s in 0..n {
        let y = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                y[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if k == 1 && stride == 1 && pad == 0 {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            T::gemm(
                cout, rows, plane, T::one(), weight.data(), rows as isize, 1, xs, plane as isize, 1,
                beta, y, plane as isize, 1,
            );
        } else {
            im2col(&x.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
            T::gemm(
                cout, rows, plane, T::one(), weight.data(), rows as isize, 1, &cols, plane as isize,
                1, beta, y, plane as isize, 1,
            );
        }
    }
    out
}

/// Gradients of [`conv2d`]. Weight/bias gradients are accumulated into the
/// given buffers; the input gradient is returned when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    dweight: &mut Tensor<T>,
    dbias: Option<&mut Tensor<T>>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let g = ConvGeom {
        channels: cin,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    assert_eq!(dy.shape(), &[n, cout, ho, wo], "conv2d_backward dy shape");
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = vec![T::zero(); if direct { 0 } else { rows * plane }];
    let mut dcols = vec![T::zero(); if direct || !need_dx { 0 } else { rows * plane }];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let in_per = cin * h * w;
    let out_per = cout * plane;
    let mut dbias = dbias;
    for s in 0..n {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        if let Some(db) = dbias.as_deref_mut() {
            for (co, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += dys[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let src: &[T] = if direct {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW (cout×rows) += dy (cout×plane) · colsᵀ (plane×rows)
        T::gemm(
            cout, plane, rows, T::one(), dys, plane as isize, 1, src, 1, plane as isize, T::one(),
            dweight.data_mut(), rows as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            if direct {
                T::gemm(
                    rows, cout, plane, T::one(), weight.data(), 1, rows as isize, dys,
                    plane as isize, 1, T::zero(), dxs, plane as isize, 1,
                );
            } else {
                T::gemm(
                    rows, cout, plane, T::one(), weight.data(), 1, rows as isize, dys,
                    plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1,
                );
                col2im(&dcols, &g, dxs);
            }
        }
    }
    dx
}

/// Reflection padding (edge pixel not repeated), NCHW.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(p < h && p < w, "reflect pad {p} too large for {h}x{w}");
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[n, c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * hp * wp..(plane + 1) * hp * wp];
        for y in 0..hp {
            let sy = reflect_index(y as isize - p as isize, h);
            for xx in 0..wp {
                let sx = reflect_index(xx as isize - p as isize, w);
                d[y * wp + xx] = s[sy * w + sx];
            }
        }
    }
    out
}

pub fn reflect_pad_backward<T: Scalar>(dy: &Tensor<T>, p: usize) -> Tensor<T> {
    let (n, c, hp, wp) = dy.dims4();
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * hp * wp..(plane + 1) * hp * wp];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..hp {
            let sy = reflect_index(y as isize - p as isize, h);
            for xx in 0..wp {
                let sx = reflect_index(xx as isize - p as isize, w);
                d[sy * w + sx] += s[y * wp + xx];
            }
        }
    }
    dx
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[plane * h * w + (y / 2) * w + xx / 2] += src[plane * h2 * w2 + y * w2 + xx];
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2 (odd trailing rows/cols are dropped).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let q = lit::<T>(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..];
        for y in 0..ho {
            for xx in 0..wo {
                let a = s[2 * y * w + 2 * xx]
                    + s[2 * y * w + 2 * xx + 1]
                    + s[(2 * y + 1) * w + 2 * xx]
                    + s[(2 * y + 1) * w + 2 * xx + 1];
                dst[plane * ho * wo + y * wo + xx] = a * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, c, ho, wo) = dy.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    let q = lit::<T>(0.25);
    let mut dx = Tensor::zeros(in_shape);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = src[plane * ho * wo + y * wo + xx] * q;
                let d = &mut dst[plane * h * w..];
                d[2 * y * w + 2 * xx] += g;
                d[2 * y * w + 2 * xx + 1] += g;
                d[(2 * y + 1) * w + 2 * xx] += g;
                d[(2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
    dx
}

/// Max pooling; returns the output and the flat argmax index per output cell.
pub fn max_pool<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let ho = out_size(h, kernel, stride, pad);
    let wo = out_size(w, kernel, stride, pad);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let src = x.data();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = plane * h * w + iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[usize], in_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Mean over the spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).expect("hw");
    Tensor::from_fn(&[n, c], |i| {
        x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let hw = in_shape[2] * in_shape[3];
    let inv = T::one() / T::from_usize(hw).expect("hw");
    Tensor::from_fn(in_shape, |i| dy.data()[i / hw] * inv)
}

/// Channel concatenation of NCHW tensors sharing N, H, W.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = parts[0].dims4();
    let ctot: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, ctot, h, w]);
    for s in 0..n {
        let mut off = 0;
        for p in parts {
            let (pn, c, ph, pw) = p.dims4();
            assert!(pn == n && ph == h && pw == w, "concat shape mismatch");
            let src = &p.data()[s * c * hw..(s + 1) * c * hw];
            out.data_mut()[(s * ctot + off) * hw..(s * ctot + off + c) * hw].copy_from_slice(src);
            off += c;
        }
    }
    out
}

/// Inverse of [`concat_channels`]: splits a gradient into per-part slices.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    let (n, ctot, h, w) = x.dims4();
    assert_eq!(sizes.iter().sum::<usize>(), ctot, "split sizes");
    let hw = h * w;
    let mut out: Vec<Tensor<T>> = sizes.iter().map(|&c| Tensor::zeros(&[n, c, h, w])).collect();
    for s in 0..n {
        let mut off = 0;
        for (t, &c) in out.iter_mut().zip(sizes) {
            t.data_mut()[s * c * hw..(s + 1) * c * hw]
                .copy_from_slice(&x.data()[(s * ctot + off) * hw..(s * ctot + off + c) * hw]);
            off += c;
        }
    }
    out
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU given its forward output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |yv, g| if yv > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through leaky ReLU given its forward output (sign is preserved).
pub fn leaky_relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    y.zip_map(dy, |yv, g| if yv > T::zero() { g } else { g * slope })
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |yv, g| g * (T::one() - yv * yv))
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Instance normalisation without affine terms; returns `(y, inv_std)` per (n, c).
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = T::from_usize(hw).expect("hw");
    let mut y = Tensor::zeros(x.shape());
    let mut inv = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let s = &x.data()[plane * hw..(plane + 1) * hw];
        let mean = s.iter().copied().sum::<T>() / m;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in y.data_mut()[plane * hw..(plane + 1) * hw].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

/// Backward of a normalisation over groups of `group` contiguous elements
/// (instance norm) given normalised output `xhat` and per-group `inv_std`.
pub fn instance_norm_backward<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = xhat.dims4();
    let hw = h * w;
    let m = T::from_usize(hw).expect("hw");
    let mut dx = Tensor::zeros(xhat.shape());
    for (plane, &is) in inv_std.iter().enumerate() {
        let r = plane * hw..(plane + 1) * hw;
        let xh = &xhat.data()[r.clone()];
        let g = &dy.data()[r.clone()];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = is / m;
        for ((o, &gv), &xv) in dx.data_mut()[r].iter_mut().zip(g).zip(xh) {
            *o = scale * (m * gv - sum_g - xv * sum_gx);
        }
    }
    dx
}
