//! Forward and adjoint kernels for the layers the networks use.
//!
//! Convolutions lower to GEMM through im2col. Every kernel walks its
//! output in a fixed order, so results are bitwise reproducible.

use crate::tensor::Tensor;

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
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// C = alpha·op(A)·op(B) + beta·C for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    // Row-major M×K has strides (K, 1); its transpose viewed as M×K has (1, M).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused buffer of `len` values with unspecified contents.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.take());
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    SCRATCH.with(|s| s.replace(buf));
    out
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (k, s) = (g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (y0, y1) = span(ky, g.pad, s, g.height, oh);
            for kx in 0..k {
                let (x0, x1) = span(kx, g.pad, s, g.width, ow);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..y0 * ow].fill(0.0);
                dst[y1 * ow..].fill(0.0);
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    if x0 == x1 {
                        continue;
                    }
                    let first = x0 * s + kx - g.pad;
                    if s == 1 {
                        line[x0..x1].copy_from_slice(&src[first..first + x1 - x0]);
                    } else {
                        for (o, v) in line[x0..x1].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (k, s) = (g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (y0, y1) = span(ky, g.pad, s, g.height, oh);
            for kx in 0..k {
                let (x0, x1) = span(kx, g.pad, s, g.width, ow);
                if x0 == x1 {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let first = x0 * s + kx - g.pad;
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.pad;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * ow + x0..oy * ow + x1];
                    if s == 1 {
                        for (d, v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad(dy: &[f64], db: &mut [f64], plane: usize) {
    for (c, acc) in db.iter_mut().enumerate() {
        *acc += dy[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
}

/// Output positions `o` whose input coordinate `o·stride + off - pad` lies in `0..len`.
fn span(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(off).div_ceil(stride);
    if len + pad <= off {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| p * q).sum();
    for (p, q) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += p[l] * q[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

// Single-output-channel convolutions are a 1×K by K×P product, which GEMM
// handles poorly; these loops skip the column buffer altogether.

fn direct_forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (y0, y1) = span(ky, g.pad, s, g.height, oh);
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let (x0, x1) = span(kx, g.pad, s, g.width, ow);
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if x0 == x1 {
                        continue;
                    }
                    let first = x0 * s + kx - g.pad;
                    if s == 1 {
                        for (d, v) in dst[x0..x1].iter_mut().zip(&src[first..first + x1 - x0]) {
                            *d += wv * v;
                        }
                    } else {
                        for (d, v) in dst[x0..x1].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, mut dx: Option<&mut [f64]>, mut dw: Option<&mut [f64]>) {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let area = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..k {
            let (y0, y1) = span(ky, g.pad, s, g.height, oh);
            for kx in 0..k {
                let tap = (c * k + ky) * k + kx;
                let (x0, x1) = span(kx, g.pad, s, g.width, ow);
                let mut acc = 0.0;
                for oy in y0..y1 {
                    let iy = oy * s + ky - g.pad;
                    let row = c * area + iy * g.width;
                    let grad = &dy[oy * ow..(oy + 1) * ow];
                    if dw.is_some() {
                        let src = &x[row..row + g.width];
                        if x0 < x1 {
                            let first = x0 * s + kx - g.pad;
                            acc += if s == 1 {
                                dot(&grad[x0..x1], &src[first..first + x1 - x0])
                            } else {
                                (x0..x1).zip(src[first..].iter().step_by(s)).map(|(ox, v)| grad[ox] * v).sum()
                            };
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dst = &mut dx[row..row + g.width];
                        if x0 < x1 {
                            let first = x0 * s + kx - g.pad;
                            if s == 1 {
                                for (d, v) in dst[first..first + x1 - x0].iter_mut().zip(&grad[x0..x1]) {
                                    *d += w[tap] * v;
                                }
                            } else {
                                for (d, v) in dst[first..].iter_mut().step_by(s).zip(&grad[x0..x1]) {
                                    *d += w[tap] * v;
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[tap] += acc;
                }
            }
        }
    }
}

/// Zero-padded convolution. `w` is Cout×Cin×k×k.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let g = ConvGeom {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let in_stride = cin * h * wd;
    with_scratch(if cout == 1 { 0 } else { g.rows() * p }, |cols| {
        for i in 0..n {
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let dst = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
            if cout == 1 {
                direct_forward(xi, w.data(), &g, dst);
            } else {
                im2col(xi, &g, cols);
                gemm(cout, g.rows(), p, w.data(), false, cols, false, 0.0, dst);
            }
            if let Some(b) = b {
                add_bias(dst, b.data(), p);
            }
        }
    });
    out
}

/// Gradients of `conv2d` with respect to the input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let p = g.cols();
    let rows = g.rows();
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut db = need.2.then(|| Tensor::zeros(&[cout]));
    let in_stride = cin * h * wd;
    if cout == 1 {
        for i in 0..n {
            let dyi = &dy.data()[i * p..(i + 1) * p];
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let dxi = dx.as_mut().map(|d| &mut d.data_mut()[i * in_stride..(i + 1) * in_stride]);
            direct_backward(xi, w.data(), dyi, &g, dxi, dw.as_mut().map(|d| d.data_mut()));
            if let Some(db) = db.as_mut() {
                accumulate_bias_grad(dyi, db.data_mut(), p);
            }
        }
        return (dx, dw, db);
    }
    with_scratch(rows * p, |cols| {
        for i in 0..n {
            let dyi = &dy.data()[i * cout * p..(i + 1) * cout * p];
            if let Some(dw) = dw.as_mut() {
                im2col(&x.data()[i * in_stride..(i + 1) * in_stride], &g, cols);
                gemm(cout, p, rows, dyi, false, cols, true, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, cout, p, w.data(), true, dyi, false, 0.0, cols);
                col2im(cols, &g, &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride]);
            }
            if let Some(db) = db.as_mut() {
                accumulate_bias_grad(dyi, db.data_mut(), p);
            }
        }
    });
    (dx, dw, db)
}

/// Transposed convolution. `w` is Cin×Cout×k×k, output side is
/// `(in - 1)·stride - 2·pad + k + out_pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
    // The adjoint of a convolution from (oh, ow) down to (h, wd).
    let g = ConvGeom {
        channels: cout,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad,
    };
    debug_assert_eq!((g.out_height(), g.out_width()), (h, wd));
    let p = h * wd;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let out_stride = cout * oh * ow;
    with_scratch(g.rows() * p, |cols| {
        for i in 0..n {
            let xi = &x.data()[i * cin * p..(i + 1) * cin * p];
            gemm(g.rows(), cin, p, w.data(), true, xi, false, 0.0, cols);
            let dst = &mut out.data_mut()[i * out_stride..(i + 1) * out_stride];
            col2im(cols, &g, dst);
            if let Some(b) = b {
                add_bias(dst, b.data(), oh * ow);
            }
        }
    });
    out
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let g = ConvGeom {
        channels: cout,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad,
    };
    let p = h * wd;
    let rows = g.rows();
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut db = need.2.then(|| Tensor::zeros(&[cout]));
    let out_stride = cout * oh * ow;
    with_scratch(rows * p, |cols| {
        for i in 0..n {
            let dyi = &dy.data()[i * out_stride..(i + 1) * out_stride];
            if dx.is_some() || dw.is_some() {
                im2col(dyi, &g, cols);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(cin, rows, p, w.data(), false, cols, false, 0.0, &mut dx.data_mut()[i * cin * p..(i + 1) * cin * p]);
            }
            if let Some(dw) = dw.as_mut() {
                let xi = &x.data()[i * cin * p..(i + 1) * cin * p];
                gemm(cin, p, rows, xi, false, cols, true, 1.0, dw.data_mut());
            }
            if let Some(db) = db.as_mut() {
                accumulate_bias_grad(dyi, db.data_mut(), oh * ow);
            }
        }
    });
    (dx, dw, db)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
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

pub fn reflect_pad(x: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(pad < h && pad < w, "reflect padding {pad} too large for {h}x{w}");
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * ph * pw..(plane + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xo in 0..pw {
                let sx = reflect(xo as isize - pad as isize, w);
                d[y * pw + xo] = s[sy * w + sx];
            }
        }
    }
    out
}

pub fn reflect_pad_backward(dy: &Tensor, pad: usize, input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.dims4();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * ph * pw..(plane + 1) * ph * pw];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xo in 0..pw {
                let sx = reflect(xo as isize - pad as isize, w);
                d[sy * w + sx] += s[y * pw + xo];
            }
        }
    }
    dx
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization without affine parameters.
/// Returns the output and the inverse standard deviation of every plane.
pub fn instance_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for (src, dst) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        let mean = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn instance_norm_backward(y: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
    let (_, _, h, w) = y.dims4();
    let plane = h * w;
    let m = plane as f64;
    let mut dx = Tensor::zeros(y.shape());
    for (((yp, dyp), dxp), &inv) in y
        .data()
        .chunks_exact(plane)
        .zip(dy.data().chunks_exact(plane))
        .zip(dx.data_mut().chunks_exact_mut(plane))
        .zip(inv_std)
    {
        let sum_dy: f64 = dyp.iter().sum();
        let sum_dy_y: f64 = dyp.iter().zip(yp).map(|(a, b)| a * b).sum();
        for ((d, &g), &yv) in dxp.iter_mut().zip(dyp).zip(yp) {
            *d = inv * (g - sum_dy / m - yv * sum_dy_y / m);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((i * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((i * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = seq(&[2, 3, 9, 8], 1.0);
        let w = seq(&[4, 3, 3, 3], 0.7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let fast = conv2d(&x, &w, None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_output_channel_matches_gemm_path() {
        let x = seq(&[2, 3, 11, 9], 1.0);
        let w1 = seq(&[1, 3, 7, 7], 0.4);
        // A second all-zero filter routes the same computation through GEMM.
        let mut w2 = Tensor::zeros(&[2, 3, 7, 7]);
        w2.data_mut()[..w1.len()].copy_from_slice(w1.data());
        for (stride, pad) in [(1, 3), (1, 0), (2, 3), (2, 1)] {
            let one = conv2d(&x, &w1, None, stride, pad);
            let slow = naive_conv(&x, &w1, stride, pad);
            for (a, b) in one.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let dy1 = seq(one.shape(), 1.3);
            let (_, _, oh, ow) = one.dims4();
            let mut dy2 = Tensor::zeros(&[2, 2, oh, ow]);
            for i in 0..2 {
                let p = oh * ow;
                dy2.data_mut()[2 * i * p..(2 * i + 1) * p].copy_from_slice(&dy1.data()[i * p..(i + 1) * p]);
            }
            let (dx1, dw1, db1) = conv2d_backward(&x, &w1, &dy1, stride, pad, (true, true, true));
            let (dx2, dw2, db2) = conv2d_backward(&x, &w2, &dy2, stride, pad, (true, true, true));
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-10);
            assert!(close(dx1.unwrap().data(), dx2.unwrap().data()));
            assert!(close(dw1.unwrap().data(), &dw2.unwrap().data()[..w1.len()]));
            assert!(close(db1.unwrap().data(), &db2.unwrap().data()[..1]));
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for the same weight.
        let x = seq(&[1, 3, 8, 8], 1.0);
        let w = seq(&[5, 3, 3, 3], 0.3);
        let y = conv2d(&x, &w, None, 2, 1);
        let dy = seq(y.shape(), 2.0);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let back = conv_transpose2d(&dy, &w, None, 2, 1, 1);
        assert_eq!(back.shape(), x.shape());
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn reflect_pad_matches_numpy_convention() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 3, 4], [x.data(), x.data(), x.data()].concat()).unwrap();
        let p = reflect_pad(&x, 2);
        assert_eq!(&p.data()[2 * 8..3 * 8], &[3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn instance_norm_has_zero_mean_unit_variance() {
        let x = seq(&[2, 2, 5, 5], 3.0);
        let (y, _) = instance_norm(&x);
        for plane in y.data().chunks(25) {
            let m = plane.iter().sum::<f64>() / 25.0;
            let v = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
