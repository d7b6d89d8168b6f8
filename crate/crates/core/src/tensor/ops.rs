//! Raw numeric kernels behind the tape operations. Everything here works on
//! plain slices and tensors; the tape layers recording and gradient routing on
//! top.

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride-1 geometry that preserves spatial size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    /// Padding chosen so that a stride-`s` conv maps `h` to `ceil(h / s)`.
    pub const fn strided(kernel: usize, stride: usize) -> Self {
        ConvSpec::new(stride, 1, (kernel - 1) / 2)
    }
}

/// `floor((input + 2p - d(k-1) - 1) / s) + 1`, or `None` when non-positive.
pub fn conv_output_size(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    if spec.stride == 0 || spec.dilation == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * spec.padding;
    let span = spec.dilation * (kernel - 1) + 1;
    if padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: Shape, w: Shape, spec: ConvSpec) -> Result<Self> {
        if w.h != w.w {
            return Err(Error::config(format!("conv kernel must be square, got {w}")));
        }
        if w.c != x.c {
            return Err(Error::shape("conv2d", x, w));
        }
        let k = w.h;
        let oh = conv_output_size(x.h, k, spec);
        let ow = conv_output_size(x.w, k, spec);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                c_in: x.c,
                c_out: w.n,
                k,
                h: x.h,
                w: x.w,
                oh,
                ow,
                spec,
            }),
            _ => Err(Error::config(format!(
                "conv2d on {x} with kernel {k} and {spec:?} has non-positive output size"
            ))),
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn out_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.c_out, self.oh, self.ow)
    }

    /// Unfold one `(c, h, w)` item into a `(c*k*k, oh*ow)` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, d, p) = (self.k, self.spec.stride, self.spec.dilation, self.spec.padding);
        let plane = self.out_plane();
        for c in 0..self.c_in {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky * d) as isize - p as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx * d) as isize - p as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add a patch matrix back into an item.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, d, p) = (self.k, self.spec.stride, self.spec.dilation, self.spec.padding);
        let plane = self.out_plane();
        for c in 0..self.c_in {
            let xc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky * d) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * s + kx * d) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                xc[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = alpha * A (m x k) * B (k x n) + beta * C`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, g.c_out, 1, 1) {
            return Err(Error::shape("conv2d bias", w.shape(), b.shape()));
        }
    }
    let n = x.shape().n;
    let (pl, op) = (g.patch_len(), g.out_plane());
    let in_item = g.c_in * g.h * g.w;
    let mut out = Tensor::zeros(g.out_shape(n));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; pl * op]
    };
    for i in 0..n {
        let xi = &x.data()[i * in_item..(i + 1) * in_item];
        let patches: &[f64] = if g.is_pointwise() {
            xi
        } else {
            g.im2col(xi, &mut cols);
            &cols
        };
        let oi = &mut out.data_mut()[i * g.c_out * op..(i + 1) * g.c_out * op];
        gemm(g.c_out, pl, op, w.data(), (pl, 1), patches, (op, 1), 0.0, oi);
        if let Some(b) = bias {
            for (o, row) in oi.chunks_mut(op).enumerate() {
                let bv = b.data()[o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let n = x.shape().n;
    let (pl, op) = (g.patch_len(), g.out_plane());
    let in_item = g.c_in * g.h * g.w;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(Shape::new(1, g.c_out, 1, 1));
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; pl * op];
    let mut dcols = vec![0.0; pl * op];
    for i in 0..n {
        let xi = &x.data()[i * in_item..(i + 1) * in_item];
        let dyi = &dy.data()[i * g.c_out * op..(i + 1) * g.c_out * op];
        for (o, row) in dyi.chunks(op).enumerate() {
            db.data_mut()[o] += row.iter().sum::<f64>();
        }
        let patches: &[f64] = if g.is_pointwise() {
            xi
        } else {
            g.im2col(xi, &mut cols);
            &cols
        };
        gemm(g.c_out, op, pl, dyi, (op, 1), patches, (1, op), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_item..(i + 1) * in_item];
            if g.is_pointwise() {
                gemm(pl, g.c_out, op, w.data(), (1, pl), dyi, (op, 1), 1.0, dxi);
            } else {
                gemm(pl, g.c_out, op, w.data(), (1, pl), dyi, (op, 1), 0.0, &mut dcols);
                g.col2im(&dcols, dxi);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Direct sliding-window convolution. Slow, used to cross-check the
/// patch-matrix path.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let n = x.shape().n;
    let mut out = Tensor::zeros(g.out_shape(n));
    for b in 0..n {
        for o in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, ky, kx) * x.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Per-output-coordinate interpolation taps for one axis under the
/// half-pixel-center convention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (oh, ow) {
        return x.clone();
    }
    let ty = bilinear_taps(s.h, oh);
    let tx = bilinear_taps(s.w, ow);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for y in &ty {
            let r0 = &plane[y.i0 * s.w..(y.i0 + 1) * s.w];
            let r1 = &plane[y.i1 * s.w..(y.i1 + 1) * s.w];
            for t in &tx {
                let top = r0[t.i0] * (1.0 - t.frac) + r0[t.i1] * t.frac;
                let bot = r1[t.i0] * (1.0 - t.frac) + r1[t.i1] * t.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("resize output length")
}

pub(crate) fn resize_backward(in_shape: Shape, dy: &Tensor) -> Tensor {
    let o = dy.shape();
    if (in_shape.h, in_shape.w) == (o.h, o.w) {
        return dy.clone();
    }
    let ty = bilinear_taps(in_shape.h, o.h);
    let tx = bilinear_taps(in_shape.w, o.w);
    let mut dx = Tensor::zeros(in_shape);
    let ip = in_shape.plane();
    for (p, g) in dy.data().chunks(o.plane()).enumerate() {
        let dplane = &mut dx.data_mut()[p * ip..(p + 1) * ip];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, t) in tx.iter().enumerate() {
                let v = g[yi * o.w + xi];
                let top = v * (1.0 - y.frac);
                let bot = v * y.frac;
                dplane[y.i0 * in_shape.w + t.i0] += top * (1.0 - t.frac);
                dplane[y.i0 * in_shape.w + t.i1] += top * t.frac;
                dplane[y.i1 * in_shape.w + t.i0] += bot * (1.0 - t.frac);
                dplane[y.i1 * in_shape.w + t.i1] += bot * t.frac;
            }
        }
    }
    dx
}

/// Numerically stable logistic function, kept strictly inside `(0, 1)`.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    // Largest double below 1.
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let x = x.clamp(-709.0, 709.0);
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.min(UPPER)
}

/// Per-channel statistics over `(n, h, w)`.
pub(crate) fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        mean[i % s.c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, plane) in x.data().chunks(s.plane()).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
