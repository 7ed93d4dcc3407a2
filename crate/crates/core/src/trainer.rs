//! Alternating generator/discriminator optimization over synthesized pairs,
//! with checkpointing, resumption and a tab-separated loss log.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{mix_seed, sample_aug_params_with, sample_seed, synthesize_pair, AugConfig, DatasetIndex, ObjectAnnotation, PairedSample};
use crate::discriminator::{init_discriminator, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{init_generator, Generator, GeneratorConfig};
use crate::losses::{
    discriminator_loss, feature_matching_loss, final_loss, generator_loss, hrf_perceptual_loss, r1_penalty,
    DilatedPyramid, FeatureExtractor, LossComponents, LossWeights,
};
use crate::mask::ShiftJitter;
use crate::nn::Mode;
use crate::optim::Adam;
use crate::raster::{ImageTensor, Rect};
use crate::tensor::{grad, no_grad, Tensor};

/// Canvas area the losses are computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossRegion {
    /// Whole padded canvas; the generator must also reproduce the padding.
    Full,
    /// Generator output is zeroed outside the ground-truth valid region.
    Valid,
}

impl fmt::Display for LossRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossRegion::Full => "full",
            LossRegion::Valid => "valid",
        })
    }
}

impl FromStr for LossRegion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(LossRegion::Full),
            "valid" => Ok(LossRegion::Valid),
            _ => Err(format!("expected 'full' or 'valid', got '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset_root: String,
    pub provider: String,
    pub checkpoint_dir: String,
    /// Loss log path; empty means `<checkpoint_dir>/losses.tsv`.
    pub log_file: String,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub canvas: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub backbone_seed: u64,
    pub loss_region: LossRegion,
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_crop_area: f64,
    pub jitter_probability: f64,
    pub jitter_max_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Decoded samples kept in memory.
    pub sample_cache: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_root: "data".into(),
            provider: "files".into(),
            checkpoint_dir: "checkpoints".into(),
            log_file: String::new(),
            lr_generator: 1e-3,
            lr_discriminator: 1e-4,
            batch_size: 6,
            epochs: 40,
            canvas: 512,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 1000,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            backbone_seed: 0,
            loss_region: LossRegion::Full,
            min_scale: 0.5,
            max_scale: 1.0,
            min_crop_area: 0.6,
            jitter_probability: 0.0,
            jitter_max_fraction: 0.1,
            grad_clip: 0.0,
            sample_cache: 64,
        }
    }
}

/// One documented configuration key.
pub struct ConfigKey {
    pub key: &'static str,
    pub help: &'static str,
    pub get: fn(&TrainConfig) -> String,
    pub set: fn(&mut TrainConfig, &str) -> Result<()>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("invalid value '{value}' for {key}: {e}")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ , $help:literal;)*) => {
        &[$(ConfigKey {
            key: $key,
            help: $help,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse($key, v)?;
                Ok(())
            },
        },)*]
    };
}

/// Every key accepted in config files and as `train` flags.
pub const CONFIG_KEYS: &[ConfigKey] = config_keys! {
    "dataset_root" => dataset_root, "dataset directory (images/, bounding_boxes.txt, segmentations/)";
    "provider" => provider, "annotation provider: files or a registered plug-in";
    "checkpoint_dir" => checkpoint_dir, "directory for checkpoints and the loss log";
    "log_file" => log_file, "loss log path (default <checkpoint_dir>/losses.tsv)";
    "lr_generator" => lr_generator, "generator Adam learning rate";
    "lr_discriminator" => lr_discriminator, "discriminator Adam learning rate";
    "batch_size" => batch_size, "samples per step";
    "epochs" => epochs, "passes over the dataset";
    "canvas" => canvas, "side of the square training canvas";
    "seed" => seed, "seed for initialization, shuffling and augmentation";
    "kappa" => weights.kappa, "adversarial loss weight";
    "alpha" => weights.alpha, "perceptual loss weight";
    "beta" => weights.beta, "discriminator feature-matching weight";
    "gamma" => weights.gamma, "R1 penalty weight";
    "checkpoint_every" => checkpoint_every, "steps between checkpoints (0: final only)";
    "generator_base_width" => generator.base_width, "generator stem width";
    "generator_max_width" => generator.max_width, "generator width cap (residual width)";
    "generator_n_down" => generator.n_down, "generator downsampling blocks";
    "generator_n_residual" => generator.n_residual, "generator FFC residual blocks";
    "generator_n_up" => generator.n_up, "generator upsampling blocks";
    "global_ratio" => generator.global_ratio, "fraction of residual channels on the spectral branch";
    "discriminator_base_width" => discriminator.base_width, "discriminator first-stage width";
    "discriminator_n_layers" => discriminator.n_layers, "discriminator stride-2 stages";
    "backbone_seed" => backbone_seed, "seed of the frozen perceptual backbone";
    "loss_region" => loss_region, "full: whole canvas, valid: ignore padding";
    "min_scale" => min_scale, "smallest per-axis resize factor";
    "max_scale" => max_scale, "largest per-axis resize factor";
    "min_crop_area" => min_crop_area, "smallest crop area relative to the resized image";
    "jitter_probability" => jitter_probability, "probability of shifting the mask placement";
    "jitter_max_fraction" => jitter_max_fraction, "largest placement shift as a fraction of the canvas";
    "grad_clip" => grad_clip, "global gradient-norm clip (0: off)";
    "sample_cache" => sample_cache, "decoded samples kept in memory";
};

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = CONFIG_KEYS
            .iter()
            .find(|k| k.key == key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        (k.set)(self, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        CONFIG_KEYS.iter().find(|k| k.key == key).map(|k| (k.get)(self))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(Error::io("cli", path))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{} = {}\n", k.key, (k.get)(self))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return bad(format!("scale range [{}, {}] must lie in (0, 1]", self.min_scale, self.max_scale));
        }
        if !(0.0..=1.0).contains(&self.min_crop_area) || !(0.0..=1.0).contains(&self.jitter_probability) {
            return bad("min_crop_area and jitter_probability must lie in [0, 1]".into());
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative".into());
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let d = self.generator.divisor();
        if self.canvas % d != 0 || self.canvas / d < 2 {
            return bad(format!("canvas {} must be a multiple of {d} and at least {}", self.canvas, 2 * d));
        }
        if self.canvas < self.discriminator.min_input_size() {
            return bad(format!("canvas {} is below the discriminator minimum", self.canvas));
        }
        Ok(())
    }

    pub fn aug(&self) -> AugConfig {
        AugConfig {
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            min_crop_area: self.min_crop_area,
            jitter: ShiftJitter { probability: self.jitter_probability, max_fraction: self.jitter_max_fraction },
        }
    }

    pub fn log_path(&self) -> PathBuf {
        if self.log_file.is_empty() {
            Path::new(&self.checkpoint_dir).join("losses.tsv")
        } else {
            PathBuf::from(&self.log_file)
        }
    }

    pub fn backbone(&self) -> DilatedPyramid {
        DilatedPyramid::new(self.backbone_seed, 3)
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    pub config: TrainConfig,
    /// Completed optimization steps.
    pub step: u64,
    pub epoch: u64,
}

pub fn init_train_state(config: TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let generator = init_generator(config.generator, mix_seed(&[config.seed, 1]))?;
    let discriminator = init_discriminator(config.discriminator, mix_seed(&[config.seed, 2]))?;
    Ok(TrainState {
        opt_generator: Adam::new(&generator.params, config.lr_generator),
        opt_discriminator: Adam::new(&discriminator.params, config.lr_discriminator),
        generator,
        discriminator,
        config,
        step: 0,
        epoch: 0,
    })
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossComponents,
    pub l_final: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "step\tepoch\tL_D\tL_G\tL_Adv\tL_HRFPL\tL_DiscPL\tR1\tL_final";

    pub fn tsv(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, l.l_d, l.l_g, l.l_adv, l.l_hrfpl, l.l_discpl, l.r1, self.l_final
        )
    }
}

/// A batch stacked into tensors.
#[derive(Clone, Debug)]
pub struct BatchTensors {
    pub input: Tensor,
    pub target: Tensor,
    /// 1 inside each ground-truth valid region, for [`LossRegion::Valid`].
    pub region: Option<Tensor>,
}

pub fn batch_tensors(batch: &[PairedSample], region: LossRegion) -> Result<BatchTensors> {
    let first = batch.first().ok_or_else(|| Error::Trainer("empty batch".into()))?;
    let canvas = first.ground_truth.height();
    if batch.iter().any(|p| p.ground_truth.dims() != (canvas, canvas) || p.model_input.dims() != (canvas, canvas)) {
        return Err(Error::Trainer("batch mixes canvas sizes".into()));
    }
    let stack = |f: &dyn Fn(&PairedSample) -> &ImageTensor| {
        Tensor::stack(&batch.iter().map(|p| f(p).to_tensor()).collect::<Vec<_>>())
    };
    let region = (region == LossRegion::Valid).then(|| {
        let masks: Vec<Tensor> = batch
            .iter()
            .map(|p| ImageTensor::from_fn(3, canvas, canvas, |_, y, x| f64::from(u8::from(p.gt_valid.contains_point(x, y)))).to_tensor())
            .collect();
        Tensor::stack(&masks)
    });
    Ok(BatchTensors { input: stack(&|p| &p.model_input), target: stack(&|p| &p.ground_truth), region })
}

fn restrict(x: &Tensor, region: &Option<Tensor>) -> Tensor {
    match region {
        Some(m) => x.mul(m),
        None => x.clone(),
    }
}

fn clip(grads: Vec<Tensor>, max_norm: f64) -> Vec<Tensor> {
    if max_norm <= 0.0 {
        return grads;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm {
        grads
    } else {
        grads.iter().map(|g| g.scale(max_norm / norm)).collect()
    }
}

fn finite(name: &str, value: f64, step: u64, batch_len: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Trainer(format!(
            "non-finite {name} = {value} at step {step}; offending batch positions 0..{batch_len}"
        )))
    }
}

/// Discriminator update driven by `kappa * L_D + gamma * R1`. Returns
/// `(L_D, R1)`.
pub fn discriminator_update(state: &mut TrainState, batch: &BatchTensors) -> Result<(f64, f64)> {
    let w = state.config.weights;
    let n = batch.input.shape()[0];
    let fake = no_grad(|| state.generator.forward(&batch.input, Mode::TRAIN.without_stat_updates()))?;
    let fake = restrict(&fake, &batch.region);
    let disc = &state.discriminator;
    let real_out = disc.forward(&batch.target, Mode::TRAIN)?;
    let fake_out = disc.forward(&fake, Mode::TRAIN)?;
    let l_d = discriminator_loss(&real_out.logits, &fake_out.logits);
    let r1 = r1_penalty(&batch.target, |x| Ok(disc.forward(x, Mode::TRAIN)?.logits))?;
    let (l_d_value, r1_value) = (finite("L_D", l_d.item(), state.step, n)?, finite("R1", r1.item(), state.step, n)?);
    let loss = l_d.scale(w.kappa).add(&r1.scale(w.gamma));
    let params: Vec<&Tensor> = disc.params.tensors().iter().collect();
    let grads = clip(grad(&loss, &params, false), state.config.grad_clip);
    state.opt_discriminator.step(&mut state.discriminator.params, &grads);
    Ok((l_d_value, r1_value))
}

/// Generator update driven by `kappa * L_G + alpha * L_HRFPL + beta *
/// L_DiscPL` with a frozen discriminator. Returns `(L_G, L_HRFPL, L_DiscPL)`.
pub fn generator_update(state: &mut TrainState, batch: &BatchTensors, backbone: &dyn FeatureExtractor) -> Result<(f64, f64, f64)> {
    let w = state.config.weights;
    let n = batch.input.shape()[0];
    let fake = restrict(&state.generator.forward(&batch.input, Mode::TRAIN)?, &batch.region);
    let disc = &state.discriminator;
    let fake_out = disc.forward(&fake, Mode::TRAIN.frozen())?;
    let real_features = no_grad(|| disc.forward(&batch.target, Mode::TRAIN.frozen()))?.features;
    let l_g = generator_loss(&fake_out.logits);
    let l_hrfpl = hrf_perceptual_loss(&batch.target, &fake, backbone)?;
    let l_discpl = feature_matching_loss(&real_features, &fake_out.features)?;
    let values = (
        finite("L_G", l_g.item(), state.step, n)?,
        finite("L_HRFPL", l_hrfpl.item(), state.step, n)?,
        finite("L_DiscPL", l_discpl.item(), state.step, n)?,
    );
    let loss = l_g.scale(w.kappa).add(&l_hrfpl.scale(w.alpha)).add(&l_discpl.scale(w.beta));
    let params: Vec<&Tensor> = state.generator.params.tensors().iter().collect();
    let grads = clip(grad(&loss, &params, false), state.config.grad_clip);
    state.opt_generator.step(&mut state.generator.params, &grads);
    Ok(values)
}

/// One discriminator update followed by one generator update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[PairedSample], backbone: &dyn FeatureExtractor) -> Result<StepMetrics> {
    let tensors = batch_tensors(batch, state.config.loss_region)?;
    let (l_d, r1) = discriminator_update(state, &tensors)?;
    let (l_g, l_hrfpl, l_discpl) = generator_update(state, &tensors, backbone)?;
    let l_adv = l_d + l_g;
    let losses = LossComponents { l_d, l_g, l_adv, l_hrfpl, l_discpl, r1 };
    let l_final = final_loss(l_adv, l_hrfpl, l_discpl, r1, &state.config.weights)?;
    let metrics = StepMetrics { step: state.step, epoch: state.epoch, losses, l_final };
    state.step += 1;
    Ok(metrics)
}

/// Sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0x6f72_6465_72])));
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Decoded dataset samples kept between steps.
#[derive(Default)]
pub struct SampleCache {
    limit: usize,
    entries: HashMap<usize, (ImageTensor, ObjectAnnotation)>,
}

impl SampleCache {
    pub fn new(limit: usize) -> SampleCache {
        SampleCache { limit, entries: HashMap::new() }
    }

    fn get(&mut self, index: &DatasetIndex, i: usize) -> Result<(ImageTensor, ObjectAnnotation)> {
        if let Some(hit) = self.entries.get(&i) {
            return Ok(hit.clone());
        }
        let sample = index.load_sample(i)?;
        if self.entries.len() < self.limit {
            self.entries.insert(i, sample.clone());
        }
        Ok(sample)
    }
}

/// Pair for dataset entry `i` in `epoch`, seeded by `(seed, epoch, i)`.
pub fn training_pair(index: &DatasetIndex, cache: &mut SampleCache, i: usize, epoch: u64, cfg: &TrainConfig) -> Result<PairedSample> {
    let (image, ann) = cache.get(index, i)?;
    let params = sample_aug_params_with(sample_seed(cfg.seed, epoch, i as u64), image.dims(), ann.bbox, &cfg.aug(), cfg.canvas);
    synthesize_pair(&image, &ann, &params, cfg.canvas)
}

fn preflight(dir: &Path) -> Result<()> {
    let unwritable = |e: std::io::Error| Error::Trainer(format!("checkpoint directory {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(unwritable)?;
    let probe = dir.join(format!(".write-test-{}", std::process::id()));
    fs::write(&probe, vec![0u8; 4096]).map_err(unwritable)?;
    fs::remove_file(&probe).map_err(unwritable)
}

/// Opens the loss log, keeping only records of steps before `step`.
fn open_log(path: &Path, step: u64) -> Result<fs::File> {
    let io = Error::io("trainer", path);
    let mut kept = vec![StepMetrics::TSV_HEADER.to_string()];
    if step > 0 && path.exists() {
        let file = fs::File::open(path).map_err(Error::io("trainer", path))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(Error::io("trainer", path))?;
            let Some(first) = line.split('\t').next() else { continue };
            if first.parse::<u64>().is_ok_and(|s| s < step) {
                kept.push(line);
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io("trainer", parent))?;
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(Error::io("trainer", path))?;
    fs::OpenOptions::new().append(true).open(path).map_err(io)
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Trains from `state` until all epochs are done or `max_steps` total steps
/// have completed. Returns the last checkpoint written.
pub fn run_training(index: &DatasetIndex, mut state: TrainState, max_steps: Option<u64>) -> Result<(PathBuf, TrainState)> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::Dataset("dataset index is empty".into()));
    }
    if index.canvas != cfg.canvas {
        return Err(Error::Trainer(format!("index canvas {} differs from config canvas {}", index.canvas, cfg.canvas)));
    }
    let dir = PathBuf::from(&cfg.checkpoint_dir);
    preflight(&dir)?;
    let mut log = open_log(&cfg.log_path(), state.step)?;
    let backbone = cfg.backbone();
    let mut cache = SampleCache::new(cfg.sample_cache);

    let n = index.len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let stop = max_steps.map_or(total, |m| m.min(total));
    let mut last = None;
    while state.step < stop {
        let epoch = state.step / per_epoch;
        state.epoch = epoch;
        let b = (state.step % per_epoch) as usize;
        let order = epoch_order(cfg.seed, epoch, n);
        let ids = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
        let batch = ids.iter().map(|&i| training_pair(index, &mut cache, i, epoch, &cfg)).collect::<Result<Vec<_>>>()?;
        let metrics = train_step(&mut state, &batch, &backbone).map_err(|e| match e {
            Error::Trainer(m) => Error::Trainer(format!("{m} (dataset entries {ids:?})")),
            other => other,
        })?;
        state.epoch = state.step / per_epoch;
        writeln!(log, "{}", metrics.tsv()).map_err(Error::io("trainer", cfg.log_path()))?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(&dir, state.step);
            save_checkpoint(&state, &path)?;
            last = Some(path);
        }
    }
    let path = if state.step >= total { dir.join("final.ckpt") } else { checkpoint_path(&dir, state.step) };
    if last.as_ref() != Some(&path) {
        save_checkpoint(&state, &path)?;
    }
    Ok((path, state))
}

/// Fresh training run; returns the final checkpoint path.
pub fn train(index: &DatasetIndex, cfg: &TrainConfig) -> Result<PathBuf> {
    let state = init_train_state(cfg.clone())?;
    Ok(run_training(index, state, None)?.0)
}

/// Continues from a full checkpoint.
pub fn resume(index: &DatasetIndex, checkpoint: &Path, max_steps: Option<u64>) -> Result<(PathBuf, TrainState)> {
    let state = load_checkpoint(checkpoint)?.into_train_state()?;
    run_training(index, state, max_steps)
}

/// Mean absolute error between generator outputs and ground truths over
/// `pairs`, evaluated with running statistics.
pub fn mean_l1(generator: &Generator, pairs: &[PairedSample]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = generator.generate(&p.model_input)?;
        total += out.data().iter().zip(p.ground_truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.data().len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Valid-region rectangle of a pair's ground truth.
pub fn valid_region(pair: &PairedSample) -> Rect {
    pair.gt_valid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AugParams;
    use crate::losses::IdentityBackbone;
    use crate::raster::BinaryMask;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig { canvas: 32, batch_size: 2, ..TrainConfig::default() };
        cfg.generator.base_width = 2;
        cfg.generator.max_width = 8;
        cfg.generator.n_residual = 1;
        cfg.discriminator.base_width = 2;
        cfg.discriminator.n_layers = 2;
        cfg
    }

    fn pairs(n: usize, canvas: usize) -> Vec<PairedSample> {
        (0..n)
            .map(|i| {
                let img = ImageTensor::from_fn(3, 20, 24, |c, y, x| ((c + i) * 7 + y * 3 + x) as f64 % 17.0 / 17.0);
                let seg = BinaryMask::from_rect(20, 24, Rect::new(5, 4, 8, 9));
                let ann = ObjectAnnotation::new(Rect::new(5, 4, 8, 9), seg).unwrap();
                let params = crate::dataset::sample_aug_params(i as u64, img.dims(), ann.bbox);
                synthesize_pair(&img, &ann, &params, canvas).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nbatch_size = 3\nkappa=2.5\nloss_region = valid\n").unwrap();
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.weights.kappa, 2.5);
        assert_eq!(cfg.loss_region, LossRegion::Valid);
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.clone().apply_text("nope = 1").is_err());
        assert!(cfg.clone().apply_text("batch_size = x").is_err());
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lr_generator, cfg.lr_discriminator), (1e-3, 1e-4));
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.canvas), (6, 40, 512));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let mut state = init_train_state(tiny_config()).unwrap();
        let batch = batch_tensors(&pairs(2, 32), LossRegion::Full).unwrap();
        let (g0, d0) = (state.generator.params.hash(), state.discriminator.params.hash());
        discriminator_update(&mut state, &batch).unwrap();
        assert_eq!(state.generator.params.hash(), g0);
        let d1 = state.discriminator.params.hash();
        assert_ne!(d1, d0);
        generator_update(&mut state, &batch, &IdentityBackbone).unwrap();
        assert_eq!(state.discriminator.params.hash(), d1);
        assert_ne!(state.generator.params.hash(), g0);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut state = init_train_state(tiny_config()).unwrap();
            let data = pairs(2, 32);
            (0..2).map(|_| train_step(&mut state, &data, &IdentityBackbone).unwrap().tsv()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adversarial_only_generator_moves_downhill() {
        // single-parameter toy: output = sigmoid(p), frozen linear critic
        let p = Tensor::new(&[1], vec![0.2]).requires_grad_leaf();
        let logits = p.sigmoid().scale(3.0);
        let g = grad(&generator_loss(&logits), &[&p], false)[0].item();
        let mut store = crate::nn::ParamStore::new();
        let id = store.add("p", &[1], vec![0.2]);
        Adam::new(&store, 0.01).step(&mut store, &[Tensor::new(&[1], vec![g])]);
        let moved = store.get(id, true).item() - 0.2;
        assert!(moved * g < 0.0);
    }

    #[test]
    fn valid_region_zeroes_padding_in_losses() {
        let data = pairs(2, 32);
        let b = batch_tensors(&data, LossRegion::Valid).unwrap();
        let m = b.region.unwrap();
        let expected: f64 = data.iter().map(|p| 3.0 * p.gt_valid.area() as f64).sum();
        assert_eq!(m.data().iter().sum::<f64>(), expected);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 10));
        assert_ne!(a, epoch_order(1, 1, 10));
        assert_eq!(steps_per_epoch(6, 6), 1);
        assert_eq!(steps_per_epoch(7, 6), 2);
    }

    #[test]
    fn identity_pairs_feed_the_step() {
        let img = ImageTensor::filled(3, 16, 16, 0.3);
        let ann = ObjectAnnotation::from_bbox(16, 16, Rect::new(4, 4, 4, 4)).unwrap();
        let pair = synthesize_pair(&img, &ann, &AugParams::identity((16, 16)), 32).unwrap();
        let mut state = init_train_state(tiny_config()).unwrap();
        let m = train_step(&mut state, &[pair], &IdentityBackbone).unwrap();
        assert_eq!(m.step, 0);
        assert_eq!(state.step, 1);
        assert!(m.l_final.is_finite());
    }
}
