//! Channel-wise real 2-D FFT, the spectral transform and the Fast Fourier
//! Convolution block.

use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Init, Mode, ParamStore, Padding};
use crate::tensor::{analyze_plane, half_width, inverse_weights, synthesize_plane, Tensor};

/// Half spectrum of a real `[C, H, W]` signal, stored as `[C, H, W/2 + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTensor {
    pub channels: usize,
    pub height: usize,
    /// Number of stored frequency columns.
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl SpectrumTensor {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.bins]
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.bins + v]
    }
}

fn rank3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] | [1, c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Ffc(format!("expected a non-empty [C, H, W] tensor, got {:?}", x.shape()))),
    }
}

/// Unnormalized per-channel 2-D DFT with half-spectrum storage.
pub fn real_fft2d(x: &Tensor) -> Result<SpectrumTensor> {
    let (c, h, w) = rank3(x)?;
    let data = x.data().chunks(h * w).flat_map(|plane| analyze_plane(plane, h, w)).collect();
    Ok(SpectrumTensor { channels: c, height: h, bins: half_width(w), data })
}

/// Inverse of [`real_fft2d`] for an output of size `h x w`.
pub fn inverse_real_fft2d(spec: &SpectrumTensor, (h, w): (usize, usize)) -> Result<Tensor> {
    if spec.height != h || spec.bins != half_width(w) {
        return Err(Error::Ffc(format!("spectrum {:?} does not match output size {h}x{w}", spec.shape())));
    }
    let weights = inverse_weights(h, w);
    let mut out = Vec::with_capacity(spec.channels * h * w);
    for plane in spec.data.chunks(h * spec.bins) {
        let scaled: Vec<Complex64> = plane.iter().enumerate().map(|(k, z)| z * weights[k % spec.bins]).collect();
        out.extend(synthesize_plane(&scaled, h, w));
    }
    Ok(Tensor::new(&[spec.channels, h, w], out))
}

/// Orthonormal analysis and matching synthesis column weights.
fn ortho_weights(h: usize, w: usize) -> (Rc<Vec<f64>>, Rc<Vec<f64>>) {
    let root = ((h * w) as f64).sqrt();
    let analysis = vec![1.0 / root; half_width(w)];
    let synthesis = inverse_weights(h, w).into_iter().map(|v| v * root).collect();
    (Rc::new(analysis), Rc::new(synthesis))
}

/// Radial frequency in `[0, 1]` of every half-spectrum bin, broadcast to
/// `shape = [N, C, H, W/2 + 1]`.
fn radial_frequency(shape: &[usize], w: usize) -> Tensor {
    let [n, c, h, wf] = *shape else { unreachable!() };
    let plane: Vec<f64> = (0..h)
        .flat_map(|u| {
            let fu = u.min(h - u) as f64 / h as f64;
            (0..wf).map(move |v| {
                let fv = v as f64 / w as f64;
                ((fu * fu + fv * fv) / 0.5).sqrt()
            })
        })
        .collect();
    let mut data = Vec::with_capacity(n * c * h * wf);
    for _ in 0..n * c {
        data.extend_from_slice(&plane);
    }
    Tensor::new(shape, data)
}

/// Global branch: 1x1 conv, FFT, frequency-domain 1x1 conv with
/// normalization and ReLU, inverse FFT, 1x1 conv.
///
/// Real and imaginary parts are stacked as channels. The frequency-domain
/// conv also sees every stacked channel scaled by its radial frequency, so
/// it can treat frequencies differently while staying linear in the input.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub conv_in: Conv2d,
    pub freq_conv: Conv2d,
    pub freq_norm: Option<BatchNorm>,
    pub activation: bool,
    pub conv_out: Conv2d,
    pub channels_in: usize,
    pub hidden: usize,
    pub channels_out: usize,
}

impl SpectralTransform {
    /// Hidden width is half of `channels_out`.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels_in: usize, channels_out: usize) -> Result<Self> {
        if channels_in == 0 || channels_out < 2 || channels_out % 2 != 0 {
            return Err(Error::Ffc(format!(
                "spectral transform needs an even output width of at least 2, got {channels_in}->{channels_out}"
            )));
        }
        let hidden = channels_out / 2;
        let conv = |store: &mut ParamStore, init: &mut Init, n: &str, ci, co| {
            Conv2d::new(store, init, &format!("{name}.{n}"), ci, co, 1, 1, 0, Padding::Zero, false)
        };
        Ok(SpectralTransform {
            conv_in: conv(store, init, "conv_in", channels_in, hidden),
            freq_conv: conv(store, init, "freq_conv", 4 * hidden, 2 * hidden),
            freq_norm: Some(BatchNorm::new(store, &format!("{name}.freq_norm"), 2 * hidden)),
            activation: true,
            conv_out: conv(store, init, "conv_out", hidden, channels_out),
            channels_in,
            hidden,
            channels_out,
        })
    }

    /// Identity convolutions and no normalization or activation, which makes
    /// the transform an FFT round trip.
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> SpectralTransform {
        let eye = |rows: usize, cols: usize| {
            let mut d = vec![0.0; rows * cols];
            for i in 0..rows.min(cols) {
                d[i * cols + i] = 1.0;
            }
            d
        };
        let mut conv = |n: &str, ci: usize, co: usize| Conv2d {
            weight: store.add(&format!("{name}.{n}.weight"), &[co, ci, 1, 1], eye(co, ci)),
            bias: None,
            stride: 1,
            padding: 0,
            dilation: 1,
            pad_mode: Padding::Zero,
        };
        SpectralTransform {
            conv_in: conv("conv_in", channels, channels),
            freq_conv: conv("freq_conv", 4 * channels, 2 * channels),
            freq_norm: None,
            activation: false,
            conv_out: conv("conv_out", channels, channels),
            channels_in: channels,
            hidden: channels,
            channels_out: channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        if c != self.channels_in {
            return Err(Error::Ffc(format!("spectral transform expects {} channels, got {c}", self.channels_in)));
        }
        let (analysis, synthesis) = ortho_weights(h, w);
        let y = self.conv_in.forward(store, x, mode);
        let spec = y.rfft_stack(analysis);
        let modulated = spec.mul(&radial_frequency(spec.shape(), w));
        let spec = Tensor::concat_channels(&[&spec, &modulated]);
        let mut spec = self.freq_conv.forward(store, &spec, mode);
        if let Some(bn) = &self.freq_norm {
            spec = bn.forward(store, &spec, mode);
        }
        if self.activation {
            spec = spec.relu();
        }
        let out = self.conv_out.forward(store, &spec.irfft_stack(synthesis, w), mode);
        if !out.all_finite() {
            return Err(Error::Ffc("non-finite activations in spectral transform".into()));
        }
        Ok(out)
    }
}

/// Channel counts and split of one FFC block.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FFCConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Fraction of channels routed through the global (spectral) branch.
    pub global_ratio: f64,
    pub kernel_size: usize,
}

impl FFCConfig {
    pub fn new(channels_in: usize, channels_out: usize, global_ratio: f64) -> FFCConfig {
        FFCConfig { channels_in, channels_out, global_ratio, kernel_size: 3 }
    }

    /// `(local, global)` channel counts for a total of `channels`.
    pub fn split(&self, channels: usize) -> (usize, usize) {
        let global = (self.global_ratio * channels as f64).round() as usize;
        (channels - global, global)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.global_ratio) {
            return Err(Error::Ffc(format!("global_ratio {} outside [0, 1]", self.global_ratio)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Ffc(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Ffc("FFC block needs at least one channel on each side".into()));
        }
        Ok(())
    }
}

/// Four-path block: local->local, global->local and local->global are
/// spatial convolutions; global->global is the spectral transform.
#[derive(Clone, Debug)]
pub struct FfcBlock {
    pub cfg: FFCConfig,
    pub local_to_local: Option<Conv2d>,
    pub global_to_local: Option<Conv2d>,
    pub local_to_global: Option<Conv2d>,
    pub global_to_global: Option<SpectralTransform>,
    pub norm_local: Option<BatchNorm>,
    pub norm_global: Option<BatchNorm>,
}

/// Local and global activations; either may be absent at degenerate ratios.
pub type Branches = (Option<Tensor>, Option<Tensor>);

impl FfcBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: FFCConfig) -> Result<FfcBlock> {
        cfg.validate()?;
        let (in_l, in_g) = cfg.split(cfg.channels_in);
        let (out_l, out_g) = cfg.split(cfg.channels_out);
        let k = cfg.kernel_size;
        let mut conv = |store: &mut ParamStore, n: &str, ci: usize, co: usize| {
            (ci > 0 && co > 0).then(|| {
                Conv2d::new(store, init, &format!("{name}.{n}"), ci, co, k, 1, k / 2, Padding::Reflect, false)
            })
        };
        let local_to_local = conv(store, "l2l", in_l, out_l);
        let global_to_local = conv(store, "g2l", in_g, out_l);
        let local_to_global = conv(store, "l2g", in_l, out_g);
        let global_to_global = if in_g > 0 && out_g > 0 {
            Some(SpectralTransform::new(store, init, &format!("{name}.g2g"), in_g, out_g)?)
        } else {
            None
        };
        Ok(FfcBlock {
            cfg,
            local_to_local,
            global_to_local,
            local_to_global,
            global_to_global,
            norm_local: (out_l > 0).then(|| BatchNorm::new(store, &format!("{name}.norm_l"), out_l)),
            norm_global: (out_g > 0).then(|| BatchNorm::new(store, &format!("{name}.norm_g"), out_g)),
        })
    }

    fn check_inputs(&self, xl: Option<&Tensor>, xg: Option<&Tensor>) -> Result<()> {
        let (in_l, in_g) = self.cfg.split(self.cfg.channels_in);
        let got = |x: Option<&Tensor>| x.map_or(0, |t| t.dims4().1);
        if got(xl) != in_l || got(xg) != in_g {
            return Err(Error::Ffc(format!(
                "channel split mismatch: block expects local {in_l} + global {in_g}, got {} + {}",
                got(xl),
                got(xg)
            )));
        }
        if let (Some(a), Some(b)) = (xl, xg) {
            let (an, _, ah, aw) = a.dims4();
            let (bn, _, bh, bw) = b.dims4();
            if (an, ah, aw) != (bn, bh, bw) {
                return Err(Error::Ffc("local and global branches differ in batch or spatial size".into()));
            }
        }
        Ok(())
    }

    /// Branch sums before normalization and activation.
    pub fn preactivation(&self, store: &ParamStore, xl: Option<&Tensor>, xg: Option<&Tensor>, mode: Mode) -> Result<Branches> {
        self.check_inputs(xl, xg)?;
        let sum = |a: Option<Tensor>, b: Option<Tensor>| match (a, b) {
            (Some(a), Some(b)) => Some(a.add(&b)),
            (a, b) => a.or(b),
        };
        let apply = |conv: &Option<Conv2d>, x: Option<&Tensor>| match (conv, x) {
            (Some(c), Some(x)) => Some(c.forward(store, x, mode)),
            _ => None,
        };
        let yl = sum(apply(&self.local_to_local, xl), apply(&self.global_to_local, xg));
        let gg = match (&self.global_to_global, xg) {
            (Some(st), Some(x)) => Some(st.forward(store, x, mode)?),
            _ => None,
        };
        let yg = sum(apply(&self.local_to_global, xl), gg);
        Ok((yl, yg))
    }

    pub fn forward(&self, store: &ParamStore, xl: Option<&Tensor>, xg: Option<&Tensor>, mode: Mode) -> Result<Branches> {
        let (yl, yg) = self.preactivation(store, xl, xg, mode)?;
        let finish = |y: Option<Tensor>, norm: &Option<BatchNorm>| {
            y.map(|y| match norm {
                Some(bn) => bn.forward(store, &y, mode).relu(),
                None => y.relu(),
            })
        };
        Ok((finish(yl, &self.norm_local), finish(yg, &self.norm_global)))
    }
}

/// Two FFC blocks with an identity skip on both branches.
#[derive(Clone, Debug)]
pub struct FfcResidualBlock {
    pub first: FfcBlock,
    pub second: FfcBlock,
}

impl FfcResidualBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, global_ratio: f64) -> Result<Self> {
        let cfg = FFCConfig::new(channels, channels, global_ratio);
        Ok(FfcResidualBlock {
            first: FfcBlock::new(store, init, &format!("{name}.0"), cfg)?,
            second: FfcBlock::new(store, init, &format!("{name}.1"), cfg)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, xl: Option<&Tensor>, xg: Option<&Tensor>, mode: Mode) -> Result<Branches> {
        let (al, ag) = self.first.forward(store, xl, xg, mode)?;
        let (bl, bg) = self.second.forward(store, al.as_ref(), ag.as_ref(), mode)?;
        let skip = |y: Option<Tensor>, x: Option<&Tensor>| match (y, x) {
            (Some(y), Some(x)) => Some(y.add(x)),
            (y, _) => y,
        };
        Ok((skip(bl, xl), skip(bg, xg)))
    }
}
