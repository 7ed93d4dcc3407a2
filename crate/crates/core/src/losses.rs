//! Training objectives: high-receptive-field perceptual loss, adversarial
//! losses with stop-gradient routing, R1 penalty, discriminator feature
//! matching and the weighted total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{grad, ConvGeometry, Tensor};

/// Lower clamp for probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial weight.
    pub kappa: f64,
    /// Perceptual weight.
    pub alpha: f64,
    /// Feature-matching weight.
    pub beta: f64,
    /// R1 weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { kappa: 10.0, alpha: 30.0, beta: 100.0, gamma: 0.001 }
    }
}

impl LossWeights {
    pub fn new(kappa: f64, alpha: f64, beta: f64, gamma: f64) -> Result<LossWeights> {
        let w = LossWeights { kappa, alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kappa, self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Loss(format!("loss weights must be finite and non-negative, got {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Loss("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen network whose feature maps define the perceptual loss.
pub trait FeatureExtractor {
    fn id(&self) -> &str;

    /// Feature maps of `[N, C, H, W]` images, shallow to deep.
    fn features(&self, x: &Tensor) -> Vec<Tensor>;

    /// Fingerprint of the extractor's weights.
    fn fingerprint(&self) -> String;
}

/// Single "layer" equal to the input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityBackbone;

impl FeatureExtractor for IdentityBackbone {
    fn id(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        vec![x.clone()]
    }

    fn fingerprint(&self) -> String {
        "identity".into()
    }
}

/// Fixed random stack of dilated 3x3 convolutions with ReLU.
///
/// Dilation and stride grow quickly so that deep features see large parts of
/// the canvas. Weights are constants and never receive gradients.
#[derive(Clone, Debug)]
pub struct DilatedPyramid {
    layers: Vec<(Tensor, Tensor, ConvGeometry)>,
}

impl DilatedPyramid {
    /// `(out_channels, stride, dilation)` per layer.
    pub const DEFAULT_LAYERS: [(usize, usize, usize); 3] = [(8, 2, 1), (16, 1, 2), (32, 2, 4)];

    pub fn new(seed: u64, in_channels: usize) -> DilatedPyramid {
        DilatedPyramid::with_layers(seed, in_channels, &Self::DEFAULT_LAYERS)
    }

    pub fn with_layers(seed: u64, in_channels: usize, spec: &[(usize, usize, usize)]) -> DilatedPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ci = in_channels;
        let layers = spec
            .iter()
            .map(|&(co, stride, dilation)| {
                let fan_in = ci * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = (0..co * fan_in).map(|_| rng.random_range(-bound..=bound)).collect();
                let b = (0..co).map(|_| rng.random_range(-0.1..=0.1)).collect();
                let layer = (Tensor::new(&[co, ci, 3, 3], w), Tensor::new(&[co], b), ConvGeometry::new(stride, dilation, dilation));
                ci = co;
                layer
            })
            .collect();
        DilatedPyramid { layers }
    }
}

impl FeatureExtractor for DilatedPyramid {
    fn id(&self) -> &str {
        "dilated-pyramid"
    }

    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        self.layers
            .iter()
            .map(|(w, b, geom)| {
                h = crate::nn::add_channel_bias(&h.conv2d(w, *geom), b).relu();
                h.clone()
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (w, b, _) in &self.layers {
            for v in w.data().iter().chain(b.data()) {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Mean over layers of the mean squared feature difference.
pub fn hrf_perceptual_loss(x: &Tensor, xhat: &Tensor, backbone: &dyn FeatureExtractor) -> Result<Tensor> {
    if x.shape() != xhat.shape() {
        return Err(Error::Loss(format!("perceptual loss shape mismatch: {:?} vs {:?}", x.shape(), xhat.shape())));
    }
    let (fx, fy) = (backbone.features(x), backbone.features(xhat));
    if fx.is_empty() {
        return Err(Error::Loss(format!("backbone {} returned no features", backbone.id())));
    }
    let per_layer: Vec<Tensor> = fx.iter().zip(&fy).map(|(a, b)| a.sub(b).square().mean_all()).collect();
    Ok(mean_of(&per_layer))
}

fn mean_of(values: &[Tensor]) -> Tensor {
    let mut total = values[0].clone();
    for v in &values[1..] {
        total = total.add(v);
    }
    total.scale(1.0 / values.len() as f64)
}

fn mean_log_sigmoid(logits: &Tensor, negate: bool) -> Tensor {
    let p = if negate { logits.neg().sigmoid() } else { logits.sigmoid() };
    p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln().mean_all()
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))` on raw logits.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    mean_log_sigmoid(real_logits, false).add(&mean_log_sigmoid(fake_logits, true)).neg()
}

/// Non-saturating `-mean(log D(fake))` on raw logits.
pub fn generator_loss(fake_logits: &Tensor) -> Tensor {
    mean_log_sigmoid(fake_logits, false).neg()
}

/// `(L_D, L_G)` from raw logits.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> (Tensor, Tensor) {
    (discriminator_loss(real_logits, fake_logits), generator_loss(fake_logits))
}

/// `L_D + L_G`. The stop-gradients are realized by how the two terms are
/// built: `L_D` must see a generator output detached from the generator's
/// parameters and `L_G` a discriminator with frozen parameters, as
/// [`routed_adversarial`] does.
pub fn compose_adversarial(l_d: &Tensor, l_g: &Tensor) -> Tensor {
    l_d.add(l_g)
}

/// Adversarial terms built with stop-gradient routing.
#[derive(Clone, Debug)]
pub struct RoutedAdversarial {
    /// Depends on the discriminator parameters only.
    pub l_d: Tensor,
    /// Depends on the generator parameters only.
    pub l_g: Tensor,
    pub l_adv: Tensor,
    /// Discriminator features of the real images, as constants.
    pub real_features: Vec<Tensor>,
    /// Discriminator features of the generated images, frozen discriminator.
    pub fake_features: Vec<Tensor>,
}

/// Runs the discriminator on `real` and `fake` with the routing that makes
/// `L_Adv` send `L_D` gradients only to the discriminator and `L_G`
/// gradients only to the generator.
pub fn routed_adversarial(disc: &Discriminator, real: &Tensor, fake: &Tensor, mode: Mode) -> Result<RoutedAdversarial> {
    let real_out = disc.forward(real, mode)?;
    let fake_detached = disc.forward(&fake.detach(), mode)?;
    let fake_frozen = disc.forward(fake, mode.frozen())?;
    let l_d = discriminator_loss(&real_out.logits, &fake_detached.logits);
    let l_g = generator_loss(&fake_frozen.logits);
    Ok(RoutedAdversarial {
        l_adv: compose_adversarial(&l_d, &l_g),
        l_d,
        l_g,
        real_features: real_out.features.iter().map(Tensor::detach).collect(),
        fake_features: fake_frozen.features,
    })
}

/// Mean over the batch of `|d score / d x|^2`, where a sample's score is
/// the mean of its logit map.
///
/// The returned tensor carries a graph, so it can be differentiated with
/// respect to the parameters used by `score`.
pub fn r1_penalty(real: &Tensor, score: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let x = real.detach().requires_grad_leaf();
    let logits = score(&x)?;
    let n = logits.shape()[0];
    let cells = logits.numel() / n;
    let total = logits.sum_per_sample().scale(1.0 / cells as f64).sum_all();
    let g = grad(&total, &[&x], true).remove(0);
    Ok(g.square().sum_all().scale(1.0 / n as f64))
}

/// Mean over layers of the mean absolute feature difference. Real features
/// are treated as constants.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Loss(format!("feature lists differ in length: {} vs {}", real.len(), fake.len())));
    }
    let mut per_layer = Vec::with_capacity(real.len());
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.shape() != f.shape() {
            return Err(Error::Loss(format!("feature {i} shape mismatch: {:?} vs {:?}", r.shape(), f.shape())));
        }
        per_layer.push(f.sub(&r.detach()).abs().mean_all());
    }
    Ok(mean_of(&per_layer))
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_d: f64,
    pub l_g: f64,
    pub l_adv: f64,
    pub l_hrfpl: f64,
    pub l_discpl: f64,
    pub r1: f64,
}

/// `kappa * L_Adv + alpha * L_HRFPL + beta * L_DiscPL + gamma * R1`.
pub fn final_loss(l_adv: f64, l_hrfpl: f64, l_discpl: f64, r1: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_Adv", l_adv), ("L_HRFPL", l_hrfpl), ("L_DiscPL", l_discpl), ("R1", r1)] {
        if !v.is_finite() {
            return Err(Error::Loss(format!("non-finite loss component {name} = {v}")));
        }
    }
    Ok(w.kappa * l_adv + w.alpha * l_hrfpl + w.beta * l_discpl + w.gamma * r1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{init_discriminator, DiscriminatorConfig};
    use std::f64::consts::LN_2;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    struct TwoLayers;
    impl FeatureExtractor for TwoLayers {
        fn id(&self) -> &str {
            "two"
        }
        fn features(&self, x: &Tensor) -> Vec<Tensor> {
            vec![x.clone(), x.square().scale(2.0)]
        }
        fn fingerprint(&self) -> String {
            String::new()
        }
    }

    #[test]
    fn perceptual_loss_examples() {
        let x = random(&[1, 3, 8, 8], 1);
        assert_eq!(hrf_perceptual_loss(&x, &x, &DilatedPyramid::new(0, 3)).unwrap().item(), 0.0);
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        let b = Tensor::new(&[3], vec![1.0, 0.0, 3.0]);
        assert!((hrf_perceptual_loss(&a, &b, &IdentityBackbone).unwrap().item() - 4.0 / 3.0).abs() < 1e-12);

        let y = random(&[1, 3, 8, 8], 2);
        let (xs, ys) = (x.data(), y.data());
        let n = xs.len() as f64;
        let l1: f64 = xs.iter().zip(ys).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let l2: f64 = xs.iter().zip(ys).map(|(a, b)| (2.0 * a * a - 2.0 * b * b).powi(2)).sum::<f64>() / n;
        let got = hrf_perceptual_loss(&x, &y, &TwoLayers).unwrap().item();
        assert!((got - (l1 + l2) / 2.0).abs() < 1e-12);
        assert!(hrf_perceptual_loss(&x, &random(&[1, 3, 8, 4], 3), &IdentityBackbone).is_err());
    }

    #[test]
    fn adversarial_values() {
        let zeros = Tensor::zeros(&[2, 1, 3, 3]);
        let (l_d, l_g) = adversarial_losses(&zeros, &zeros);
        assert!((l_d.item() - 2.0 * LN_2).abs() < 1e-12);
        assert!((l_g.item() - LN_2).abs() < 1e-12);

        let (l_d, _) = adversarial_losses(&Tensor::full(&[1], 1e6), &Tensor::full(&[1], -1e6));
        assert!(l_d.item() < 1e-6 && l_d.item().is_finite());
        let (l_d, l_g) = adversarial_losses(&Tensor::full(&[1], -1e6), &Tensor::full(&[1], 1e6));
        assert!(l_d.item().is_finite() && l_g.item() >= 0.0);

        let real = [-2.0, 0.3, 1.5, 4.0];
        let fake = [0.7, -1.1, 2.2, -0.4];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let oracle_d = -real.iter().map(|&r| sig(r).ln()).sum::<f64>() / 4.0 - fake.iter().map(|&f| (1.0 - sig(f)).ln()).sum::<f64>() / 4.0;
        let oracle_g = -fake.iter().map(|&f| sig(f).ln()).sum::<f64>() / 4.0;
        let (l_d, l_g) = adversarial_losses(&Tensor::new(&[4], real.to_vec()), &Tensor::new(&[4], fake.to_vec()));
        assert!((l_d.item() - oracle_d).abs() < 1e-12 && (l_g.item() - oracle_g).abs() < 1e-12);
    }

    #[test]
    fn r1_examples() {
        let x = random(&[2, 3, 4, 4], 4);
        assert_eq!(r1_penalty(&x, |t| Ok(t.scale(0.0).add_scalar(3.0))).unwrap().item(), 0.0);
        let w = random(&[1, 3, 4, 4], 5);
        let wb = Tensor::stack(&[w.reshape(&[3, 4, 4]), w.reshape(&[3, 4, 4])]);
        let r1 = r1_penalty(&x, |t| Ok(t.mul(&wb).sum_per_sample().reshape(&[2, 1, 1, 1]))).unwrap();
        let norm: f64 = w.data().iter().map(|v| v * v).sum();
        assert!((r1.item() - norm).abs() < 1e-12);
    }

    #[test]
    fn r1_matches_finite_differences() {
        let cfg = DiscriminatorConfig { in_channels: 2, base_width: 2, n_layers: 0, max_mult: 1 };
        let d = init_discriminator(cfg, 9).unwrap();
        let x = random(&[1, 2, 4, 4], 6);
        let score = |t: &Tensor| -> f64 { d.forward(t, Mode::EVAL).unwrap().logits.mean_all().item() };
        let mut oracle = 0.0;
        for k in 0..x.numel() {
            let shifted = |e: f64| {
                let mut v = x.to_vec();
                v[k] += e;
                score(&Tensor::new(x.shape(), v))
            };
            oracle += ((shifted(1e-3) - shifted(-1e-3)) / 2e-3).powi(2);
        }
        let r1 = r1_penalty(&x, |t| Ok(d.forward(t, Mode::EVAL)?.logits)).unwrap().item();
        assert!((r1 - oracle).abs() <= 1e-3 * oracle.abs(), "{r1} vs {oracle}");
    }

    #[test]
    fn feature_matching_examples() {
        let f = vec![random(&[1, 2, 3, 3], 1), random(&[1, 4, 2, 2], 2)];
        assert_eq!(feature_matching_loss(&f, &f).unwrap().item(), 0.0);
        let l = feature_matching_loss(&[Tensor::new(&[2], vec![1.0, 3.0])], &[Tensor::new(&[2], vec![0.0, 1.0])]).unwrap();
        assert!((l.item() - 1.5).abs() < 1e-12);
        assert!(feature_matching_loss(&f[..1], &f).is_err());
        assert!(feature_matching_loss(&f, &[f[1].clone(), f[0].clone()]).is_err());
    }

    #[test]
    fn feature_matching_ignores_real_feature_gradients() {
        let p = Tensor::new(&[2], vec![0.5, -0.5]).requires_grad_leaf();
        let real = vec![p.scale(2.0)];
        let fake = vec![Tensor::new(&[2], vec![3.0, 3.0])];
        let g = grad(&feature_matching_loss(&real, &fake).unwrap(), &[&p], false);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_loss_examples() {
        let w = LossWeights::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(final_loss(2.0, 3.0, 5.0, 7.0, &w).unwrap(), 17.0);
        let only_adv = LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(final_loss(2.0, 3.0, 5.0, 7.0, &only_adv).unwrap(), 2.0);
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 1.0).is_err());
        let err = final_loss(1.0, f64::NAN, 0.0, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("L_HRFPL"));
    }

    #[test]
    fn routing_separates_generator_and_discriminator_gradients() {
        let cfg = DiscriminatorConfig { base_width: 2, n_layers: 1, ..DiscriminatorConfig::default() };
        let d = init_discriminator(cfg, 1).unwrap();
        let theta = random(&[1, 3, 8, 8], 7).requires_grad_leaf();
        let fake = theta.scale(0.8).add_scalar(0.1);
        let real = random(&[1, 3, 8, 8], 8);
        let r = routed_adversarial(&d, &real, &fake, Mode::EVAL).unwrap();
        let eps: Vec<&Tensor> = d.params.tensors().iter().collect();
        let adv_eps = grad(&r.l_adv, &eps, false);
        let d_eps = grad(&r.l_d, &eps, false);
        for (a, b) in adv_eps.iter().zip(&d_eps) {
            assert_eq!(a.data(), b.data());
        }
        let adv_theta = grad(&r.l_adv, &[&theta], false);
        let g_theta = grad(&r.l_g, &[&theta], false);
        assert_eq!(adv_theta[0].data(), g_theta[0].data());
        assert!(g_theta[0].data().iter().any(|&v| v != 0.0));
        assert!((r.l_adv.item() - (r.l_d.item() + r.l_g.item())).abs() < 1e-15);
    }
}
