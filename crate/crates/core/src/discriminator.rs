//! Patch discriminator: a stack of 4x4 convolutions producing one raw logit
//! per overlapping image patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Mode, ParamStore, Padding};
use crate::raster::ImageTensor;
use crate::tensor::{ConvGeometry, Tensor};

const KERNEL: usize = 4;
const PADDING: usize = 1;
const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages.
    pub n_layers: usize,
    /// Widths double per stage up to `base_width * max_mult`.
    pub max_mult: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { in_channels: 3, base_width: 64, n_layers: 4, max_mult: 8 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.max_mult == 0 {
            return Err(Error::Discriminator("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width * (1usize << stage.min(20)).min(self.max_mult)
    }

    /// Stride of every conv, feature stages first, head last.
    pub fn strides(&self) -> Vec<usize> {
        (0..=self.n_layers).map(|i| if i < self.n_layers { 2 } else { 1 }).chain([1]).collect()
    }

    /// Spatial size of the logit map for an input side of `size`.
    pub fn output_len(&self, size: usize) -> Option<usize> {
        self.strides()
            .into_iter()
            .try_fold(size, |s, stride| ConvGeometry::new(stride, PADDING, 1).out_len(s, KERNEL).filter(|&o| o > 0))
    }

    /// Smallest input side that yields at least one logit.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.output_len(s).is_some()).expect("some size fits")
    }

    /// Distance in input pixels between neighbouring logit cells.
    pub fn total_stride(&self) -> usize {
        self.strides().iter().product()
    }

    /// Side of the input patch seen by one logit cell.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for s in self.strides() {
            rf += (KERNEL - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Input offset (possibly negative) of the first row or column seen by
    /// logit cell 0.
    pub fn field_offset(&self) -> isize {
        let (mut offset, mut jump) = (0isize, 1isize);
        for s in self.strides() {
            offset -= PADDING as isize * jump;
            jump *= s as isize;
        }
        offset
    }
}

/// Logit map plus the activation of every feature stage, shallow to deep.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Raw (pre-sigmoid) logits, `[N, 1, h', w']`.
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

pub fn init_discriminator(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let strides = config.strides();
    let mut ci = config.in_channels;
    let mut stages = Vec::new();
    for (i, &stride) in strides[..=config.n_layers].iter().enumerate() {
        let co = config.width(i);
        stages.push(Conv2d::new(&mut store, &mut init, &format!("stage{i}"), ci, co, KERNEL, stride, PADDING, Padding::Zero, true));
        ci = co;
    }
    let head = Conv2d::new(&mut store, &mut init, "head", ci, 1, KERNEL, 1, PADDING, Padding::Zero, true);
    Ok(Discriminator { config, params: store, stages, head })
}

impl Discriminator {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<DiscriminatorOutput> {
        let &[_, c, h, w] = x.shape() else {
            return Err(Error::Discriminator(format!("expected an [N, C, H, W] input, got {:?}", x.shape())));
        };
        if c != self.config.in_channels {
            return Err(Error::Discriminator(format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        let min = self.config.min_input_size();
        if h < min || w < min {
            return Err(Error::Discriminator(format!("input {h}x{w} is below the minimum size {min}")));
        }
        let mut features = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&self.params, &h, mode).leaky_relu(SLOPE);
            features.push(h.clone());
        }
        let logits = self.head.forward(&self.params, &h, mode);
        Ok(DiscriminatorOutput { logits, features })
    }

    /// Single image, `[C, H, W]`, without a graph.
    pub fn score(&self, img: &ImageTensor) -> Result<DiscriminatorOutput> {
        let x = img.to_tensor().reshape(&[1, img.channels(), img.height(), img.width()]);
        crate::tensor::no_grad(|| self.forward(&x, Mode::EVAL))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, h: usize, w: usize, salt: usize) -> Vec<f64> {
        (0..c * h * w).map(|i| ((i * 2654435761usize + salt) % 997) as f64 / 997.0).collect()
    }

    #[test]
    fn geometry_of_default_and_three_layer_stacks() {
        let d = DiscriminatorConfig::default();
        assert_eq!(d.output_len(512), Some(30));
        assert_eq!(d.receptive_field(), 142);
        assert_eq!(d.total_stride(), 16);
        let three = DiscriminatorConfig { n_layers: 3, ..d };
        assert_eq!(three.receptive_field(), 70);
        assert!(d.min_input_size() > 1 && d.output_len(d.min_input_size() - 1).is_none());
    }

    #[test]
    fn patch_logits_and_feature_count() {
        let cfg = DiscriminatorConfig { base_width: 4, ..DiscriminatorConfig::default() };
        let d = init_discriminator(cfg, 1).unwrap();
        let out = d.forward(&Tensor::new(&[1, 3, 64, 64], image(3, 64, 64, 0)), Mode::EVAL).unwrap();
        assert_eq!(out.features.len(), cfg.n_layers + 1);
        let side = cfg.output_len(64).unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, side, side]);
        assert!(side > 1 && side < 64);
        let small = cfg.min_input_size() - 1;
        assert!(d.forward(&Tensor::zeros(&[1, 3, small, small]), Mode::EVAL).is_err());
    }

    #[test]
    fn perturbing_a_patch_only_moves_covering_cells() {
        let cfg = DiscriminatorConfig { base_width: 4, n_layers: 3, ..DiscriminatorConfig::default() };
        let d = init_discriminator(cfg, 2).unwrap();
        let size = 96;
        let base = image(3, size, size, 1);
        let mut changed = base.clone();
        let (py, px) = (40usize, 60usize);
        for c in 0..3 {
            for y in py..py + 3 {
                for x in px..px + 3 {
                    changed[(c * size + y) * size + x] += 0.7;
                }
            }
        }
        let run = |v: Vec<f64>| d.forward(&Tensor::new(&[1, 3, size, size], v), Mode::EVAL).unwrap().logits;
        let (a, b) = (run(base), run(changed));
        let side = a.shape()[3];
        let (rf, stride, off) = (cfg.receptive_field() as isize, cfg.total_stride() as isize, cfg.field_offset());
        let covers = |cell: usize, p: usize| {
            let start = cell as isize * stride + off;
            let (lo, hi) = (p as isize, p as isize + 2);
            start <= hi && lo < start + rf
        };
        for i in 0..a.shape()[2] {
            for j in 0..side {
                let differs = a.data()[i * side + j] != b.data()[i * side + j];
                assert_eq!(differs, covers(i, py) && covers(j, px), "cell ({i}, {j})");
            }
        }
    }

    #[test]
    fn shifting_by_the_total_stride_shifts_logits() {
        let cfg = DiscriminatorConfig { base_width: 4, n_layers: 3, ..DiscriminatorConfig::default() };
        let d = init_discriminator(cfg, 3).unwrap();
        let (h, w, shift) = (96, 128, cfg.total_stride());
        let big = image(3, h, w + shift, 5);
        let window = |x0: usize| {
            let mut v = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    let row = (c * h + y) * (w + shift);
                    v.extend_from_slice(&big[row + x0..row + x0 + w]);
                }
            }
            d.forward(&Tensor::new(&[1, 3, h, w], v), Mode::EVAL).unwrap().logits
        };
        let (a, b) = (window(0), window(shift));
        let (rows, cols) = (a.shape()[2], a.shape()[3]);
        // cells whose field stays clear of the padded borders
        let margin = (cfg.receptive_field() / cfg.total_stride()) + 1;
        for i in margin..rows - margin {
            for j in margin..cols - margin - 1 {
                assert!((b.data()[i * cols + j] - a.data()[i * cols + j + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layer_stack_accepts_tiny_inputs() {
        let cfg = DiscriminatorConfig { in_channels: 2, base_width: 2, n_layers: 0, max_mult: 1 };
        let d = init_discriminator(cfg, 4).unwrap();
        let out = d.forward(&Tensor::new(&[1, 2, 4, 4], image(2, 4, 4, 0)), Mode::EVAL).unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.features.len(), 1);
    }
}
