//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is written in terms of other differentiable tensor
//! operations. Calling [`grad`] with `create_graph = true` therefore yields
//! gradients that can themselves be differentiated, which the R1 penalty
//! needs (gradient of an input-gradient norm with respect to parameters).
//!
//! Tensors are immutable and reference counted. Image tensors use the
//! `[batch, channels, height, width]` layout.

mod conv;
mod spectral;

pub use conv::ConvGeometry;
pub use spectral::{half_width, inverse_weights};
pub(crate) use spectral::{analyze_plane, synthesize_plane};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether newly created tensors record the operations that produced them.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

/// Runs `f` without recording a graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

pub(crate) trait Backward {
    /// Gradient for each input; `None` for inputs that do not require one.
    fn backward(&self, inputs: &[Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    inputs: Vec<Tensor>,
    op: Box<dyn Backward>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Tensor::leaf(shape.to_vec(), Rc::new(data), false)
    }

    fn leaf(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner { id: next_id(), shape, data, requires_grad, node: None }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        op: impl Backward + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let track = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let node = track.then(|| Node { inputs, op: Box::new(op) });
        Tensor(Rc::new(Inner { id: next_id(), shape, data: Rc::new(data), requires_grad: track, node }))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[], vec![value])
    }

    /// A trainable leaf sharing this tensor's data.
    pub fn requires_grad_leaf(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// A constant sharing this tensor's data; gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match *self.shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("expected a rank-4 tensor, got shape {s:?}"),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    fn constant_like(&self, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(), data)
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_data(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let data = self.zip_data(other, |a, b| a + b);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], AddOp)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = self.zip_data(other, |a, b| a - b);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], SubOp)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let data = self.zip_data(other, |a, b| a * b);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], MulOp)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|v| v * s), vec![self.clone()], ScaleOp(s))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|v| v + s), vec![self.clone()], PassOp)
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self.map(|v| if v > 0.0 { v } else { slope * v });
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], LeakyReluOp(slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.map(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], SigmoidOp)
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(f64::ln), vec![self.clone()], LnOp)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(|v| v.powf(p)), vec![self.clone()], PowOp(p))
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(f64::abs), vec![self.clone()], AbsOp)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.map(|v| v.clamp(lo, hi));
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], ClampOp(lo, hi))
    }

    // ---- reductions and broadcasts ------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], SumAllOp)
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Tensor {
        let v = self.item();
        Tensor::from_op(shape.to_vec(), vec![v; numel(shape)], vec![self.clone()], ExpandScalarOp)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape changes element count");
        Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], ReshapeOp)
    }

    /// Per-channel sums of an `[N, C, H, W]` tensor, shape `[C]`.
    pub fn sum_channels(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let start = (b * c + ch) * plane;
                *o += self.data()[start..start + plane].iter().sum::<f64>();
            }
        }
        Tensor::from_op(vec![c], out, vec![self.clone()], SumChannelsOp)
    }

    /// Broadcasts a `[C]` vector over an `[N, C, H, W]` shape.
    pub fn broadcast_channels(&self, shape: &[usize]) -> Tensor {
        let [n, c, h, w] = *shape else { panic!("broadcast_channels needs a rank-4 shape") };
        assert_eq!(self.shape(), &[c]);
        let mut out = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &v in self.data() {
                out.extend(std::iter::repeat_n(v, h * w));
            }
        }
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], BroadcastChannelsOp)
    }

    /// `x * scale[c] + shift[c]` for an `[N, C, H, W]` tensor.
    pub fn channel_affine(&self, scale: &Tensor, shift: Option<&Tensor>) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert_eq!(scale.shape(), &[c]);
        let plane = h * w;
        let mut out = self.to_vec();
        for b in 0..n {
            for ch in 0..c {
                let s = scale.data()[ch];
                let t = shift.map_or(0.0, |t| t.data()[ch]);
                let start = (b * c + ch) * plane;
                for v in &mut out[start..start + plane] {
                    *v = *v * s + t;
                }
            }
        }
        let mut inputs = vec![self.clone(), scale.clone()];
        if let Some(t) = shift {
            assert_eq!(t.shape(), &[c]);
            inputs.push(t.clone());
        }
        Tensor::from_op(self.shape().to_vec(), out, inputs, ChannelAffineOp)
    }

    /// Per-sample sums of a tensor whose first axis is the batch, shape `[N]`.
    pub fn sum_per_sample(&self) -> Tensor {
        let n = self.shape()[0];
        let per = self.numel() / n.max(1);
        let out = self.data().chunks(per.max(1)).map(|c| c.iter().sum()).collect::<Vec<f64>>();
        let out = if per == 0 { vec![0.0; n] } else { out };
        Tensor::from_op(vec![n], out, vec![self.clone()], SumPerSampleOp)
    }

    /// Broadcasts an `[N]` vector over `shape` (first axis `N`).
    pub fn broadcast_samples(&self, shape: &[usize]) -> Tensor {
        let n = shape[0];
        assert_eq!(self.shape(), &[n]);
        let per = numel(shape) / n.max(1);
        let mut out = Vec::with_capacity(numel(shape));
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, per));
        }
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], BroadcastSamplesOp)
    }

    // ---- channel slicing ----------------------------------------------------

    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            out.extend_from_slice(&self.data()[from..from + len * plane]);
        }
        Tensor::from_op(vec![n, len, h, w], out, vec![self.clone()], SliceChannelsOp { start, total: c })
    }

    /// Places this tensor's channels at `start` inside a zero tensor with `total` channels.
    pub fn embed_channels(&self, start: usize, total: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(start + c <= total);
        let plane = h * w;
        let mut out = vec![0.0; n * total * plane];
        for b in 0..n {
            let to = (b * total + start) * plane;
            out[to..to + c * plane].copy_from_slice(&self.data()[b * c * plane..(b + 1) * c * plane]);
        }
        Tensor::from_op(vec![n, total, h, w], out, vec![self.clone()], EmbedChannelsOp { start, len: c })
    }

    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].dims4();
        let total: usize = parts.iter().map(|p| p.dims4().1).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
                out.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let sizes = parts.iter().map(|p| p.dims4().1).collect();
        let inputs = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(vec![n, total, h, w], out, inputs, ConcatChannelsOp { sizes })
    }

    /// Stacks equally shaped `[C, H, W]` samples into a batch.
    pub fn stack(samples: &[Tensor]) -> Tensor {
        assert!(!samples.is_empty());
        let inner = samples[0].shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * numel(&inner));
        for s in samples {
            assert_eq!(s.shape(), inner.as_slice());
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![samples.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }

    /// Copies out sample `index` of a batched tensor (no gradient).
    pub fn sample(&self, index: usize) -> Tensor {
        let per = self.numel() / self.shape()[0];
        Tensor::new(&self.shape()[1..], self.data()[index * per..(index + 1) * per].to_vec())
    }

    // ---- spatial resampling -------------------------------------------------

    /// Reflection padding (mirror without repeating the edge).
    pub fn pad_reflect(&self, pad: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let rows: Vec<usize> = (0..hp).map(|i| reflect_index(i as isize - pad as isize, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|i| reflect_index(i as isize - pad as isize, w)).collect();
        let mut out = Vec::with_capacity(n * c * hp * wp);
        for plane in self.data().chunks(h * w) {
            for &r in &rows {
                out.extend(cols.iter().map(|&cc| plane[r * w + cc]));
            }
        }
        Tensor::from_op(vec![n, c, hp, wp], out, vec![self.clone()], PadReflectOp { pad, h, w })
    }

    /// Adjoint of [`Tensor::pad_reflect`]: folds padded gradients back.
    pub fn pad_reflect_adjoint(&self, pad: usize, h: usize, w: usize) -> Tensor {
        let (n, c, hp, wp) = self.dims4();
        assert_eq!((hp, wp), (h + 2 * pad, w + 2 * pad));
        let rows: Vec<usize> = (0..hp).map(|i| reflect_index(i as isize - pad as isize, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|i| reflect_index(i as isize - pad as isize, w)).collect();
        let mut out = vec![0.0; n * c * h * w];
        for (src, dst) in self.data().chunks(hp * wp).zip(out.chunks_mut(h * w)) {
            for (i, &r) in rows.iter().enumerate() {
                for (j, &cc) in cols.iter().enumerate() {
                    dst[r * w + cc] += src[i * wp + j];
                }
            }
        }
        Tensor::from_op(vec![n, c, h, w], out, vec![self.clone()], PadReflectAdjointOp { pad })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let mut out = Vec::with_capacity(n * c * 4 * h * w);
        for plane in self.data().chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        Tensor::from_op(vec![n, c, 2 * h, 2 * w], out, vec![self.clone()], Upsample2Op)
    }

    /// 2x2 sum pooling; the adjoint of [`Tensor::upsample2`].
    pub fn sum_pool2(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for (src, dst) in self.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..h {
                for x in 0..w {
                    dst[(y / 2) * wo + x / 2] += src[y * w + x];
                }
            }
        }
        Tensor::from_op(vec![n, c, ho, wo], out, vec![self.clone()], SumPool2Op)
    }
}

/// Mirror index into `[0, len)` with period `2 * (len - 1)`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients carry their own graph and can
/// be differentiated again. Tensors that `output` does not depend on get a
/// zero gradient.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output");
    let wrt_ids: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(node) = &t.0.node {
            stack.extend(node.inputs.iter().filter(|i| i.requires_grad()).cloned());
        }
        order.push(t);
    }
    // Inputs are always created before their consumers.
    order.sort_by_key(|t| std::cmp::Reverse(t.id()));

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), Tensor::full(output.shape(), 1.0));
    with_grad_mode(create_graph, || {
        for t in &order {
            let Some(node) = &t.0.node else { continue };
            let g = if wrt_ids.contains(&t.id()) {
                grads.get(&t.id()).cloned()
            } else {
                grads.remove(&t.id())
            };
            let Some(g) = g else { continue };
            let input_grads = node.op.backward(&node.inputs, t, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.shape(), input.shape());
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
    });
    wrt.iter()
        .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn want(inputs: &[Tensor], i: usize) -> bool {
    inputs.get(i).is_some_and(Tensor::requires_grad)
}

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), want(inputs, 1).then(|| g.neg())]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            want(inputs, 0).then(|| g.mul(&inputs[1])),
            want(inputs, 1).then(|| g.mul(&inputs[0])),
        ]
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct PassOp;
impl Backward for PassOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct LeakyReluOp(f64);
impl Backward for LeakyReluOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = &inputs[0];
        let slope = self.0;
        let mask = x.constant_like(x.map(|v| if v > 0.0 { 1.0 } else { slope }));
        vec![Some(g.mul(&mask))]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&out.mul(&out.neg().add_scalar(1.0))))]
    }
}

struct LnOp;
impl Backward for LnOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&inputs[0].powf(-1.0)))]
    }
}

struct PowOp(f64);
impl Backward for PowOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let p = self.0;
        vec![Some(g.mul(&inputs[0].powf(p - 1.0).scale(p)))]
    }
}

struct AbsOp;
impl Backward for AbsOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = &inputs[0];
        let sign = x.constant_like(x.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
        vec![Some(g.mul(&sign))]
    }
}

struct ClampOp(f64, f64);
impl Backward for ClampOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = &inputs[0];
        let (lo, hi) = (self.0, self.1);
        let mask = x.constant_like(x.map(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 }));
        vec![Some(g.mul(&mask))]
    }
}

struct SumAllOp;
impl Backward for SumAllOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.expand_scalar(inputs[0].shape()))]
    }
}

struct ExpandScalarOp;
impl Backward for ExpandScalarOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_all().reshape(inputs[0].shape()))]
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(inputs[0].shape()))]
    }
}

struct SumChannelsOp;
impl Backward for SumChannelsOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_channels(inputs[0].shape()))]
    }
}

struct BroadcastChannelsOp;
impl Backward for BroadcastChannelsOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_channels())]
    }
}

struct ChannelAffineOp;
impl Backward for ChannelAffineOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, scale) = (&inputs[0], &inputs[1]);
        let mut out = vec![
            want(inputs, 0).then(|| g.channel_affine(scale, None)),
            want(inputs, 1).then(|| g.mul(x).sum_channels()),
        ];
        if inputs.len() == 3 {
            out.push(want(inputs, 2).then(|| g.sum_channels()));
        }
        out
    }
}

struct SumPerSampleOp;
impl Backward for SumPerSampleOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_samples(inputs[0].shape()))]
    }
}

struct BroadcastSamplesOp;
impl Backward for BroadcastSamplesOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_per_sample())]
    }
}

struct SliceChannelsOp {
    start: usize,
    total: usize,
}
impl Backward for SliceChannelsOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.embed_channels(self.start, self.total))]
    }
}

struct EmbedChannelsOp {
    start: usize,
    len: usize,
}
impl Backward for EmbedChannelsOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.slice_channels(self.start, self.len))]
    }
}

struct ConcatChannelsOp {
    sizes: Vec<usize>,
}
impl Backward for ConcatChannelsOp {
    fn backward(&self, inputs: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        self.sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let s = start;
                start += len;
                want(inputs, i).then(|| g.slice_channels(s, len))
            })
            .collect()
    }
}

struct PadReflectOp {
    pad: usize,
    h: usize,
    w: usize,
}
impl Backward for PadReflectOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_reflect_adjoint(self.pad, self.h, self.w))]
    }
}

struct PadReflectAdjointOp {
    pad: usize,
}
impl Backward for PadReflectAdjointOp {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_reflect(self.pad))]
    }
}

struct Upsample2Op;
impl Backward for Upsample2Op {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_pool2())]
    }
}

struct SumPool2Op;
impl Backward for SumPool2Op {
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.upsample2())]
    }
}
