//! 2-D convolution via chunked im2col and GEMM.
//!
//! Three mutually adjoint operations are closed under differentiation:
//! the convolution itself, its input gradient (a transposed convolution),
//! and its weight gradient.

use super::{want, Backward, Tensor};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry { stride, padding, dilation }
    }

    pub const fn unit() -> Self {
        ConvGeometry::new(1, 0, 1)
    }

    /// Output length along one axis, `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Upper bound on im2col buffer elements per chunk.
const CHUNK_ELEMS: usize = 1 << 16;

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Dims {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeometry::unit()
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.k() * self.wo).max(1)).clamp(1, self.ho.max(1))
    }

    /// Output columns `[lo, hi)` whose input column for kernel column `kx`
    /// falls inside the image, and the input column of `lo`.
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let ConvGeometry { stride, padding, dilation } = self.geom;
        let off = kx * dilation;
        let lo = if padding > off { (padding - off).div_ceil(stride) } else { 0 }.min(self.wo);
        let hi = if self.w + padding > off { ((self.w - 1 + padding - off) / stride + 1).min(self.wo) } else { 0 };
        let hi = hi.max(lo);
        (lo, hi, lo * stride + off - padding.min(lo * stride + off))
    }

    /// Fills `col` (`k x rows*wo`, row-major) from one input sample.
    fn im2col(&self, x: &[f64], oy0: usize, oy1: usize, col: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        let ConvGeometry { stride, padding, dilation } = self.geom;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi, ix0) = self.valid_cols(kx);
                    for (r, oy) in (oy0..oy1).enumerate() {
                        let out = &mut dst[r * self.wo..(r + 1) * self.wo];
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if stride == 1 {
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (o, s) in out[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(stride)) {
                                *o = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into one input-gradient sample.
    fn col2im(&self, col: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        let ConvGeometry { stride, padding, dilation } = self.geom;
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi, ix0) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    for (r, oy) in (oy0..oy1).enumerate() {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let vals = &src[r * self.wo + lo..r * self.wo + hi];
                        for (d, v) in dst[ix0..].iter_mut().step_by(stride).zip(vals) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let step = self.rows_per_chunk();
        (0..self.ho).step_by(step).map(move |y0| (y0, (y0 + step).min(self.ho)))
    }
}

/// `c = alpha * a * b + beta * c` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access in bounds.
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
            rsc as isize,
            csc as isize,
        );
    }
}

fn conv_dims(x_shape: (usize, usize, usize, usize), w_shape: &[usize], geom: ConvGeometry) -> Dims {
    let (n, ci, h, w) = x_shape;
    let [co, wci, kh, kw] = *w_shape else { panic!("conv weight must be rank 4") };
    assert_eq!(ci, wci, "conv input channels {ci} do not match weight {wci}");
    let ho = geom.out_len(h, kh).unwrap_or_else(|| panic!("kernel {kh} does not fit height {h}"));
    let wo = geom.out_len(w, kw).unwrap_or_else(|| panic!("kernel {kw} does not fit width {w}"));
    Dims { n, ci, h, w, co, kh, kw, ho, wo, geom }
}

fn forward(x: &[f64], weight: &[f64], d: &Dims) -> Vec<f64> {
    let (k, out_plane, in_size) = (d.k(), d.ho * d.wo, d.ci * d.h * d.w);
    let mut out = vec![0.0; d.n * d.co * out_plane];
    let mut col = Vec::new();
    for b in 0..d.n {
        let xs = &x[b * in_size..(b + 1) * in_size];
        let os = &mut out[b * d.co * out_plane..(b + 1) * d.co * out_plane];
        if d.is_pointwise() {
            gemm(d.co, k, out_plane, weight, (k, 1), xs, (out_plane, 1), 0.0, os, (out_plane, 1));
            continue;
        }
        for (y0, y1) in d.chunks() {
            let p = (y1 - y0) * d.wo;
            col.resize(k * p, 0.0);
            d.im2col(xs, y0, y1, &mut col);
            gemm(d.co, k, p, weight, (k, 1), &col, (p, 1), 0.0, &mut os[y0 * d.wo..], (out_plane, 1));
        }
    }
    out
}

fn input_grad(g: &[f64], weight: &[f64], d: &Dims) -> Vec<f64> {
    let (k, out_plane, in_size) = (d.k(), d.ho * d.wo, d.ci * d.h * d.w);
    let mut dx = vec![0.0; d.n * in_size];
    let mut col = Vec::new();
    for b in 0..d.n {
        let gs = &g[b * d.co * out_plane..(b + 1) * d.co * out_plane];
        let dxs = &mut dx[b * in_size..(b + 1) * in_size];
        if d.is_pointwise() {
            gemm(k, d.co, out_plane, weight, (1, k), gs, (out_plane, 1), 0.0, dxs, (out_plane, 1));
            continue;
        }
        for (y0, y1) in d.chunks() {
            let p = (y1 - y0) * d.wo;
            col.resize(k * p, 0.0);
            gemm(k, d.co, p, weight, (1, k), &gs[y0 * d.wo..], (out_plane, 1), 0.0, &mut col, (p, 1));
            d.col2im(&col, y0, y1, dxs);
        }
    }
    dx
}

fn weight_grad(x: &[f64], g: &[f64], d: &Dims) -> Vec<f64> {
    let (k, out_plane, in_size) = (d.k(), d.ho * d.wo, d.ci * d.h * d.w);
    let mut dw = vec![0.0; d.co * k];
    let mut col = Vec::new();
    for b in 0..d.n {
        let xs = &x[b * in_size..(b + 1) * in_size];
        let gs = &g[b * d.co * out_plane..(b + 1) * d.co * out_plane];
        if d.is_pointwise() {
            gemm(d.co, out_plane, k, gs, (out_plane, 1), xs, (1, out_plane), 1.0, &mut dw, (k, 1));
            continue;
        }
        for (y0, y1) in d.chunks() {
            let p = (y1 - y0) * d.wo;
            col.resize(k * p, 0.0);
            d.im2col(xs, y0, y1, &mut col);
            gemm(d.co, p, k, &gs[y0 * d.wo..], (out_plane, 1), &col, (1, p), 1.0, &mut dw, (k, 1));
        }
    }
    dw
}

impl Tensor {
    /// Cross-correlation of `[N, Ci, H, W]` with weights `[Co, Ci, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor, geom: ConvGeometry) -> Tensor {
        let d = conv_dims(self.dims4(), weight.shape(), geom);
        let out = forward(self.data(), weight.data(), &d);
        Tensor::from_op(vec![d.n, d.co, d.ho, d.wo], out, vec![self.clone(), weight.clone()], ConvOp { geom })
    }

    /// Gradient of a convolution with respect to its input, given the
    /// output gradient `self` and the input spatial size.
    pub fn conv2d_input_grad(&self, weight: &Tensor, geom: ConvGeometry, input_hw: (usize, usize)) -> Tensor {
        let (n, co, ho, wo) = self.dims4();
        let ci = weight.shape()[1];
        let d = conv_dims((n, ci, input_hw.0, input_hw.1), weight.shape(), geom);
        assert_eq!((co, ho, wo), (d.co, d.ho, d.wo), "output gradient shape mismatch");
        let dx = input_grad(self.data(), weight.data(), &d);
        Tensor::from_op(
            vec![n, ci, input_hw.0, input_hw.1],
            dx,
            vec![self.clone(), weight.clone()],
            ConvInputGradOp { geom, input_hw },
        )
    }

    /// Gradient of a convolution with respect to its weights, given the
    /// input `self`, the output gradient and the kernel size.
    pub fn conv2d_weight_grad(&self, out_grad: &Tensor, geom: ConvGeometry, kernel: (usize, usize)) -> Tensor {
        let (_, ci, _, _) = self.dims4();
        let co = out_grad.dims4().1;
        let d = conv_dims(self.dims4(), &[co, ci, kernel.0, kernel.1], geom);
        assert_eq!(out_grad.shape(), &[d.n, d.co, d.ho, d.wo], "output gradient shape mismatch");
        let dw = weight_grad(self.data(), out_grad.data(), &d);
        Tensor::from_op(
            vec![co, ci, kernel.0, kernel.1],
            dw,
            vec![self.clone(), out_grad.clone()],
            ConvWeightGradOp { geom, kernel },
        )
    }
}

struct ConvOp {
    geom: ConvGeometry,
}
impl Backward for ConvOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (_, _, h, wd) = x.dims4();
        let k = (w.shape()[2], w.shape()[3]);
        vec![
            want(inputs, 0).then(|| g.conv2d_input_grad(w, self.geom, (h, wd))),
            want(inputs, 1).then(|| x.conv2d_weight_grad(g, self.geom, k)),
        ]
    }
}

struct ConvInputGradOp {
    geom: ConvGeometry,
    input_hw: (usize, usize),
}
impl Backward for ConvInputGradOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let (g, w) = (&inputs[0], &inputs[1]);
        debug_assert_eq!(up.dims4().2, self.input_hw.0);
        let k = (w.shape()[2], w.shape()[3]);
        vec![
            want(inputs, 0).then(|| up.conv2d(w, self.geom)),
            want(inputs, 1).then(|| up.conv2d_weight_grad(g, self.geom, k)),
        ]
    }
}

struct ConvWeightGradOp {
    geom: ConvGeometry,
    kernel: (usize, usize),
}
impl Backward for ConvWeightGradOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, up: &Tensor) -> Vec<Option<Tensor>> {
        let (x, g) = (&inputs[0], &inputs[1]);
        debug_assert_eq!((up.shape()[2], up.shape()[3]), self.kernel);
        let (_, _, h, w) = x.dims4();
        vec![
            want(inputs, 0).then(|| g.conv2d_input_grad(up, self.geom, (h, w))),
            want(inputs, 1).then(|| x.conv2d(up, self.geom)),
        ]
    }
}
