//! Named parameter storage and the few layer types the networks are built from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// How a forward pass treats normalization statistics and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Normalize with batch statistics instead of running statistics.
    pub batch_stats: bool,
    /// Fold batch statistics into the running statistics.
    pub update_stats: bool,
    /// Use detached parameters so that no gradient reaches them.
    pub frozen: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { batch_stats: true, update_stats: true, frozen: false };
    pub const EVAL: Mode = Mode { batch_stats: false, update_stats: false, frozen: false };

    pub fn frozen(self) -> Mode {
        Mode { frozen: true, ..self }
    }

    pub fn without_stat_updates(self) -> Mode {
        Mode { update_stats: false, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub data: Vec<f64>,
}

/// Ordered collection of named trainable tensors plus non-trainable buffers.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    buffers: RefCell<Vec<Buffer>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.names.len())
            .field("parameters", &self.param_count())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(Tensor::new(shape, data).requires_grad_leaf());
        ParamId(self.names.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, data: Vec<f64>) -> BufferId {
        let buffers = self.buffers.get_mut();
        assert!(buffers.iter().all(|b| b.name != name), "duplicate buffer name {name}");
        buffers.push(Buffer { name: name.to_string(), data });
        BufferId(buffers.len() - 1)
    }

    /// Live parameter, or a detached copy when `frozen`.
    pub fn get(&self, id: ParamId, frozen: bool) -> Tensor {
        let t = &self.values[id.0];
        if frozen {
            t.detach()
        } else {
            t.clone()
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        let shape = self.values[id.0].shape().to_vec();
        assert_eq!(data.len(), self.values[id.0].numel());
        self.values[id.0] = Tensor::new(&shape, data).requires_grad_leaf();
    }

    pub fn buffer(&self, id: BufferId) -> Vec<f64> {
        self.buffers.borrow()[id.0].data.clone()
    }

    pub fn set_buffer(&self, id: BufferId, data: Vec<f64>) {
        self.buffers.borrow_mut()[id.0].data = data;
    }

    pub fn buffers(&self) -> Vec<Buffer> {
        self.buffers.borrow().clone()
    }

    /// Named view of all state, parameters first, for serialization.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<_> =
            self.names.iter().zip(&self.values).map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec())).collect();
        for b in self.buffers.borrow().iter() {
            out.push((b.name.clone(), vec![b.data.len()], b.data.clone()));
        }
        out
    }

    /// Overwrites all state from `arrays`; names and shapes must match exactly.
    pub fn load_arrays(&mut self, arrays: &HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let expected = self.names.len() + self.buffers.borrow().len();
        if arrays.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", arrays.len())));
        }
        for i in 0..self.names.len() {
            let name = &self.names[i];
            let (shape, data) =
                arrays.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if shape.as_slice() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {shape:?}, expected {:?}",
                    self.values[i].shape()
                )));
            }
            self.values[i] = Tensor::new(shape, data.clone()).requires_grad_leaf();
        }
        for b in self.buffers.get_mut().iter_mut() {
            let (shape, data) =
                arrays.get(&b.name).ok_or_else(|| Error::Checkpoint(format!("missing buffer {}", b.name)))?;
            if shape.as_slice() != [b.data.len()] {
                return Err(Error::Checkpoint(format!("shape mismatch for buffer {}", b.name)));
            }
            b.data.clone_from(data);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the bit patterns of all parameters.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }
}

/// Adds a per-channel bias to an `[N, C, H, W]` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    x.channel_affine(&Tensor::full(bias.shape(), 1.0), Some(bias))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub pad_mode: Padding,
}

impl Conv2d {
    /// Registers a `co x ci x k x k` convolution with uniform fan-in init.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        ci: usize,
        co: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_mode: Padding,
        bias: bool,
    ) -> Conv2d {
        let bound = 1.0 / ((ci * kernel * kernel) as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[co, ci, kernel, kernel], init.uniform(co * ci * kernel * kernel, bound));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[co], init.uniform(co, bound)));
        Conv2d { weight, bias, stride, padding, dilation: 1, pad_mode }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
        let w = store.get(self.weight, mode.frozen);
        let y = match self.pad_mode {
            Padding::Reflect if self.padding > 0 => {
                x.pad_reflect(self.padding).conv2d(&w, ConvGeometry::new(self.stride, 0, self.dilation))
            }
            _ => x.conv2d(&w, ConvGeometry::new(self.stride, self.padding, self.dilation)),
        };
        match self.bias {
            Some(b) => add_channel_bias(&y, &store.get(b, mode.frozen)),
            None => y,
        }
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.tensors()[self.weight.0].shape()[0]
    }
}

/// Per-channel normalization over batch and space with a learned affine.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: store.add(&format!("{name}.beta"), &[channels], vec![0.0; channels]),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), vec![0.0; channels]),
            running_var: store.add_buffer(&format!("{name}.running_var"), vec![1.0; channels]),
            channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let gamma = store.get(self.gamma, mode.frozen);
        let beta = store.get(self.beta, mode.frozen);
        let count = (n * h * w) as f64;
        if mode.batch_stats && count > 1.0 {
            let mean = x.sum_channels().scale(1.0 / count);
            let centered = x.sub(&mean.broadcast_channels(x.shape()));
            let var = centered.square().sum_channels().scale(1.0 / count);
            if mode.update_stats {
                let unbiased = count / (count - 1.0);
                let update = |id: BufferId, batch: &[f64], factor: f64| {
                    let old = store.buffer(id);
                    let new = old
                        .iter()
                        .zip(batch)
                        .map(|(o, b)| (1.0 - Self::MOMENTUM) * o + Self::MOMENTUM * b * factor)
                        .collect();
                    store.set_buffer(id, new);
                };
                update(self.running_mean, mean.data(), 1.0);
                update(self.running_var, var.data(), unbiased);
            }
            let inv = var.add_scalar(Self::EPS).powf(-0.5);
            centered.channel_affine(&inv.mul(&gamma), Some(&beta))
        } else {
            let mean = store.buffer(self.running_mean);
            let inv: Vec<f64> = store.buffer(self.running_var).iter().map(|v| 1.0 / (v + Self::EPS).sqrt()).collect();
            let scale = gamma.mul(&Tensor::new(&[c], inv.clone()));
            let shift_const = Tensor::new(&[c], mean.iter().zip(&inv).map(|(m, i)| -m * i).collect());
            let shift = beta.add(&gamma.mul(&shift_const));
            x.channel_affine(&scale, Some(&shift))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    #[test]
    fn batch_norm_normalizes_and_tracks_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 30.0]);
        let y = bn.forward(&store, &x, Mode::TRAIN);
        let c0: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| y.data()[i]).collect();
        let mean = c0.iter().sum::<f64>() / 4.0;
        let var = c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        // running mean of channel 0 is 0.1 * 4
        assert!((store.buffer(bn.running_mean)[0] - 0.4).abs() < 1e-12);
        let unbiased = [1.0, 3.0, 5.0, 7.0].iter().map(|v: &f64| (v - 4.0).powi(2)).sum::<f64>() / 3.0;
        assert!((store.buffer(bn.running_var)[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.set_buffer(bn.running_mean, vec![2.0]);
        store.set_buffer(bn.running_var, vec![4.0 - BatchNorm::EPS]);
        let y = bn.forward(&store, &Tensor::new(&[1, 1, 1, 2], vec![2.0, 6.0]), Mode::EVAL);
        assert!((y.data()[0]).abs() < 1e-12 && (y.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let conv = Conv2d::new(&mut store, &mut init, "c", 1, 1, 3, 1, 1, Padding::Reflect, true);
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect());
        let w = store.get(conv.weight, false);
        let live = grad(&conv.forward(&store, &x, Mode::EVAL).sum_all(), &[&w], false);
        assert!(live[0].data().iter().any(|&v| v != 0.0));
        let frozen = grad(&conv.forward(&store, &x, Mode::EVAL.frozen()).sum_all(), &[&w], false);
        assert!(frozen[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hash_tracks_values_and_round_trips() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], vec![1.0, 2.0]);
        store.add_buffer("b", vec![3.0]);
        let h = store.hash();
        let arrays = store.named_arrays().into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut copy = store.clone();
        copy.set(a, vec![0.0, 0.0]);
        assert_ne!(copy.hash(), h);
        copy.load_arrays(&arrays).unwrap();
        assert_eq!(copy.hash(), h);
        let mut bad: HashMap<_, _> = arrays.clone();
        bad.insert("a".into(), (vec![3], vec![0.0; 3]));
        assert!(copy.load_arrays(&bad).is_err());
    }
}
