//! Six-channel to three-channel ResNet-style generator with FFC residual
//! blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffc::FfcResidualBlock;
use crate::nn::{BatchNorm, Conv2d, Init, Mode, ParamStore, Padding};
use crate::raster::ImageTensor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Widths double per downsampling block up to this cap.
    pub max_width: usize,
    pub n_down: usize,
    pub n_residual: usize,
    pub n_up: usize,
    pub global_ratio: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 6,
            out_channels: 3,
            base_width: 64,
            max_width: 256,
            n_down: 3,
            n_residual: 9,
            n_up: 3,
            global_ratio: 0.75,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_down != self.n_up {
            return Err(Error::Generator(format!("n_down ({}) must equal n_up ({})", self.n_down, self.n_up)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Generator("channel counts must be positive".into()));
        }
        if self.max_width < self.base_width {
            return Err(Error::Generator("max_width must be at least base_width".into()));
        }
        if !(0.0..=1.0).contains(&self.global_ratio) {
            return Err(Error::Generator(format!("global_ratio {} outside [0, 1]", self.global_ratio)));
        }
        Ok(())
    }

    /// Width after `level` downsampling blocks.
    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level.min(20)).min(self.max_width)
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.n_down
    }
}

#[derive(Clone, Debug)]
struct ConvNormAct {
    conv: Conv2d,
    norm: BatchNorm,
}

impl ConvNormAct {
    fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
        self.norm.forward(store, &self.conv.forward(store, x, mode), mode).relu()
    }
}

/// Generator parameters and layer layout.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    stem: ConvNormAct,
    down: Vec<ConvNormAct>,
    residual: Vec<FfcResidualBlock>,
    up: Vec<ConvNormAct>,
    head: Conv2d,
}

/// Deterministic initialization for `seed`.
pub fn init_generator(config: GeneratorConfig, seed: u64) -> Result<Generator> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = |store: &mut ParamStore, init: &mut Init, name: &str, ci, co, k, stride| ConvNormAct {
        conv: Conv2d::new(store, init, &format!("{name}.conv"), ci, co, k, stride, k / 2, Padding::Reflect, false),
        norm: BatchNorm::new(store, &format!("{name}.norm"), co),
    };
    let stem = block(&mut store, &mut init, "stem", config.in_channels, config.base_width, 7, 1);
    let down = (0..config.n_down)
        .map(|i| block(&mut store, &mut init, &format!("down{i}"), config.width(i), config.width(i + 1), 3, 2))
        .collect();
    let mid = config.width(config.n_down);
    let residual = (0..config.n_residual)
        .map(|i| FfcResidualBlock::new(&mut store, &mut init, &format!("res{i}"), mid, config.global_ratio))
        .collect::<Result<_>>()
        .map_err(|e| Error::Generator(e.to_string()))?;
    let up = (0..config.n_up)
        .map(|i| {
            let level = config.n_up - i;
            block(&mut store, &mut init, &format!("up{i}"), config.width(level), config.width(level - 1), 3, 1)
        })
        .collect();
    let head = Conv2d::new(&mut store, &mut init, "head", config.base_width, config.out_channels, 7, 1, 3, Padding::Reflect, true);
    Ok(Generator { config, params: store, stem, down, residual, up, head })
}

impl Generator {
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Checks a batched `[N, C, H, W]` input shape.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Generator(format!("expected an [N, C, H, W] input, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::Generator(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        let d = self.config.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Generator(format!("dims must be divisible by {d}, got {h}x{w}")));
        }
        // reflect padding needs at least two pixels at the coarsest level
        if h / d < 2 || w / d < 2 || h.min(w) < 4 {
            return Err(Error::Generator(format!("input {h}x{w} is too small")));
        }
        Ok(())
    }

    /// Batched forward pass, `[N, in, H, W] -> [N, out, H, W]` in `[0, 1]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let store = &self.params;
        let mut h = self.stem.forward(store, x, mode);
        for d in &self.down {
            h = d.forward(store, &h, mode);
        }
        let (local, global) = self.residual.first().map_or((h.dims4().1, 0), |b| b.first.cfg.split(h.dims4().1));
        let mut xl = (local > 0).then(|| h.slice_channels(0, local));
        let mut xg = (global > 0).then(|| h.slice_channels(local, global));
        for block in &self.residual {
            (xl, xg) = block.forward(store, xl.as_ref(), xg.as_ref(), mode).map_err(|e| Error::Generator(e.to_string()))?;
        }
        h = match (xl, xg) {
            (Some(l), Some(g)) => Tensor::concat_channels(&[&l, &g]),
            (Some(t), None) | (None, Some(t)) => t,
            (None, None) => unreachable!("residual input has channels"),
        };
        for u in &self.up {
            h = u.forward(store, &h.upsample2(), mode);
        }
        let out = self.head.forward(store, &h, mode).sigmoid();
        if !out.all_finite() {
            return Err(Error::Generator("non-finite generator output".into()));
        }
        Ok(out)
    }

    /// Single-image inference, `[6, H, W] -> [3, H, W]`, without a graph.
    pub fn generate(&self, x6: &ImageTensor) -> Result<ImageTensor> {
        let x = x6.to_tensor();
        let x = x.reshape(&[1, x6.channels(), x6.height(), x6.width()]);
        let y = crate::tensor::no_grad(|| self.forward(&x, Mode::EVAL))?;
        ImageTensor::from_tensor(&y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { base_width: 4, max_width: 8, n_residual: 2, ..GeneratorConfig::default() }
    }

    fn input(h: usize, w: usize, salt: usize) -> Tensor {
        let data = (0..6 * h * w).map(|i| ((i * 7919 + salt) % 101) as f64 / 100.0).collect();
        Tensor::new(&[1, 6, h, w], data)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_generator(tiny(), 3).unwrap();
        let b = init_generator(tiny(), 3).unwrap();
        let c = init_generator(tiny(), 4).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        assert_ne!(a.params.hash(), c.params.hash());
        assert!(a.param_count() > 0);
        assert!(a.params.tensors().iter().all(Tensor::all_finite));
    }

    #[test]
    fn shapes_and_range_at_several_sizes() {
        let g = init_generator(tiny(), 1).unwrap();
        for (h, w) in [(16, 16), (24, 40), (32, 16)] {
            let y = g.forward(&input(h, w, 1), Mode::TRAIN).unwrap();
            assert_eq!(y.shape(), &[1, 3, h, w]);
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let err = g.forward(&input(20, 16, 1), Mode::TRAIN).unwrap_err();
        assert!(err.to_string().contains("dims must be divisible by 8"));
    }

    #[test]
    fn gradients_reach_every_parameter_tensor() {
        let g = init_generator(tiny(), 2).unwrap();
        let x = Tensor::stack(&[input(16, 16, 1), input(16, 16, 2)].map(|t| t.reshape(&[6, 16, 16])));
        let y = g.forward(&x, Mode::TRAIN).unwrap();
        let params: Vec<&Tensor> = g.params.tensors().iter().collect();
        let grads = grad(&y.mean_all(), &params, false);
        let live = grads.iter().filter(|t| t.data().iter().any(|&v| v != 0.0)).count();
        assert!(live as f64 >= 0.99 * grads.len() as f64, "{live} of {}", grads.len());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // batch-norm curvature needs a small step; at 1e-3 the truncation
        // error exceeds the tolerance on a tenth of the coordinates
        const EPS: f64 = 1e-5;
        let cfg = GeneratorConfig { base_width: 4, max_width: 8, n_down: 1, n_residual: 1, n_up: 1, ..GeneratorConfig::default() };
        let g = init_generator(cfg, 21).unwrap();
        let x = Tensor::stack(&[input(8, 8, 1), input(8, 8, 2)].map(|t| t.reshape(&[6, 8, 8])));
        let probe = Tensor::new(&[2, 3, 8, 8], (0..384).map(|i| ((i * 37) % 17) as f64 / 17.0).collect());
        let mode = Mode::TRAIN.without_stat_updates();
        let loss = |g: &Generator| g.forward(&x, mode).unwrap().mul(&probe).sum_all();
        let params: Vec<&Tensor> = g.params.tensors().iter().collect();
        let grads = grad(&loss(&g), &params, false);
        let (mut agree, mut total) = (0, 0);
        for (pi, id) in g.params.ids().enumerate() {
            let values = g.params.get(id, true).to_vec();
            for k in 0..values.len() {
                let at = |d: f64| {
                    let mut h = g.clone();
                    let mut v = values.clone();
                    v[k] += d;
                    h.params.set(id, v);
                    crate::tensor::no_grad(|| loss(&h).item())
                };
                let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
                let analytic = grads[pi].data()[k];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                agree += usize::from((analytic - numeric).abs() <= 1e-3 * scale);
                total += 1;
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree} of {total}");
    }

    #[test]
    fn one_pixel_reaches_beyond_local_receptive_field() {
        let cfg = GeneratorConfig { global_ratio: 0.5, ..tiny() };
        let g = init_generator(cfg, 5).unwrap();
        // local field: 7x7 stem, three stride-2 3x3, 2x2 3x3 residual convs at
        // 1/8 scale, three 3x3 after upsampling, 7x7 head; 64 px is far beyond
        // what reaches corner to corner without the spectral path
        let (h, w) = (64, 64);
        let base = input(h, w, 3);
        let mut poked = base.to_vec();
        poked[0] += 0.5;
        let a = g.forward(&base, Mode::EVAL).unwrap();
        let b = g.forward(&Tensor::new(&[1, 6, h, w], poked), Mode::EVAL).unwrap();
        let far = (h - 1) * w + (w - 1);
        assert!((a.data()[far] - b.data()[far]).abs() > 0.0);

        let local_only = init_generator(GeneratorConfig { global_ratio: 0.0, ..tiny() }, 5).unwrap();
        let mut poked = base.to_vec();
        poked[0] += 0.5;
        let a = local_only.forward(&base, Mode::EVAL).unwrap();
        let b = local_only.forward(&Tensor::new(&[1, 6, h, w], poked), Mode::EVAL).unwrap();
        assert_eq!(a.data()[far], b.data()[far]);
    }

    #[test]
    fn generate_maps_image_tensors() {
        let g = init_generator(tiny(), 1).unwrap();
        let x = ImageTensor::filled(6, 16, 24, 0.5);
        assert_eq!(g.generate(&x).unwrap().dims(), (16, 24));
    }
}
