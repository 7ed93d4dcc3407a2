//! Half-spectrum 2-D Fourier analysis and synthesis as differentiable ops.
//!
//! Spectra are stored as real tensors `[N, 2C, H, W/2 + 1]` with the real
//! part of channel `c` at `2c` and the imaginary part at `2c + 1`.
//!
//! Analysis with column weights `a` maps `x` to `a[v] * X[u, v]`.
//! Synthesis with column weights `s` maps `Y` to
//! `y[h, w] = Re sum_{u, v} s[v] Y[u, v] exp(+2 pi i (u h / H + v w / W))`.
//! Each is the adjoint of the other with the same weights, so both the
//! forward FFT and the inverse real FFT are covered by this pair.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::{Backward, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Number of stored frequency columns for a real signal of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Column weights turning synthesis into the exact inverse of the real FFT:
/// columns that stand for a conjugate pair count twice, and the result is
/// normalized by `H * W`.
pub fn inverse_weights(h: usize, w: usize) -> Vec<f64> {
    let norm = 1.0 / (h * w) as f64;
    (0..half_width(w))
        .map(|v| if v == 0 || (w % 2 == 0 && v == w / 2) { norm } else { 2.0 * norm })
        .collect()
}

/// Forward 2-D DFT of one real plane, keeping `W/2 + 1` columns.
pub(crate) fn analyze_plane(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let wf = half_width(w);
    let row_fft = plan(w, FftDirection::Forward);
    let col_fft = plan(h, FftDirection::Forward);
    let mut half = vec![Complex64::new(0.0, 0.0); h * wf];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&plane[y * w..(y + 1) * w]) {
            *r = Complex64::new(v, 0.0);
        }
        row_fft.process(&mut row);
        half[y * wf..(y + 1) * wf].copy_from_slice(&row[..wf]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wf {
        for (u, c) in col.iter_mut().enumerate() {
            *c = half[u * wf + v];
        }
        col_fft.process(&mut col);
        for (u, c) in col.iter().enumerate() {
            half[u * wf + v] = *c;
        }
    }
    half
}

/// `Re sum_{u, v < W/2+1} Y[u, v] exp(+i theta)` for one plane.
pub(crate) fn synthesize_plane(spec: &[Complex64], h: usize, w: usize) -> Vec<f64> {
    let wf = half_width(w);
    let row_fft = plan(w, FftDirection::Inverse);
    let col_fft = plan(h, FftDirection::Inverse);
    let mut half = spec.to_vec();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..wf {
        for (u, c) in col.iter_mut().enumerate() {
            *c = half[u * wf + v];
        }
        col_fft.process(&mut col);
        for (u, c) in col.iter().enumerate() {
            half[u * wf + v] = *c;
        }
    }
    let mut out = vec![0.0; h * w];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        row.fill(Complex64::new(0.0, 0.0));
        row[..wf].copy_from_slice(&half[y * wf..(y + 1) * wf]);
        row_fft.process(&mut row);
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re;
        }
    }
    out
}

impl Tensor {
    /// Weighted half-spectrum FFT, `[N, C, H, W] -> [N, 2C, H, W/2 + 1]`.
    pub fn rfft_stack(&self, weights: Rc<Vec<f64>>) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let wf = half_width(w);
        assert_eq!(weights.len(), wf, "one weight per frequency column");
        let mut out = vec![0.0; n * 2 * c * h * wf];
        for (i, plane) in self.data().chunks(h * w).enumerate() {
            let spec = analyze_plane(plane, h, w);
            let (re, rest) = out[2 * i * h * wf..(2 * i + 2) * h * wf].split_at_mut(h * wf);
            for (k, z) in spec.iter().enumerate() {
                let a = weights[k % wf];
                re[k] = a * z.re;
                rest[k] = a * z.im;
            }
        }
        Tensor::from_op(vec![n, 2 * c, h, wf], out, vec![self.clone()], AnalysisOp { weights })
    }

    /// Weighted half-spectrum synthesis, `[N, 2C, H, W/2 + 1] -> [N, C, H, W]`.
    pub fn irfft_stack(&self, weights: Rc<Vec<f64>>, width: usize) -> Tensor {
        let (n, c2, h, wf) = self.dims4();
        assert_eq!(c2 % 2, 0, "spectrum needs paired real/imaginary channels");
        assert_eq!(wf, half_width(width), "frequency columns do not match width {width}");
        assert_eq!(weights.len(), wf);
        let c = c2 / 2;
        let mut out = Vec::with_capacity(n * c * h * width);
        let mut spec = vec![Complex64::new(0.0, 0.0); h * wf];
        for pair in self.data().chunks(2 * h * wf) {
            let (re, im) = pair.split_at(h * wf);
            for (k, z) in spec.iter_mut().enumerate() {
                let s = weights[k % wf];
                *z = Complex64::new(s * re[k], s * im[k]);
            }
            out.extend(synthesize_plane(&spec, h, width));
        }
        Tensor::from_op(vec![n, c, h, width], out, vec![self.clone()], SynthesisOp { weights })
    }
}

struct AnalysisOp {
    weights: Rc<Vec<f64>>,
}
impl Backward for AnalysisOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let w = inputs[0].dims4().3;
        vec![Some(g.irfft_stack(self.weights.clone(), w))]
    }
}

struct SynthesisOp {
    weights: Rc<Vec<f64>>,
}
impl Backward for SynthesisOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.rfft_stack(self.weights.clone()))]
    }
}
