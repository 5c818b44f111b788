//! Multi-rate training: one rate index per batch, Adam on every parameter
//! including the gain matrices, and a fixed-rate baseline mode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::gain::GainMode;
use crate::image::Image;
use crate::model::{CodecConfig, Model, Relaxation, Variant, B_MSE};
use crate::optim::Adam;
use crate::quant::uniform_noise;
use crate::tensor::Tensor;

/// Training hyper-parameters, read from a TOML file.
///
/// ```toml
/// lagrange = [0.05, 0.03, 0.007, 0.003, 0.001, 0.0003]
/// epochs = 12
/// batch_size = 8
/// learning_rate = 1e-4
/// halve_lr_at_epoch = 6
/// patch_size = 32
/// seed = 0
/// # dataset = "images/"   # directory of PPM/PNG files; omitted = procedural corpus
/// baseline = false
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Lagrange set `B`, largest first. Baseline mode needs exactly one value.
    pub lagrange: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate halves from this epoch on (0-based); `None` keeps it.
    /// A config file that omits the key gets `None`, not the default of 6,
    /// so that writing and re-reading a config is lossless.
    #[serde(default)]
    pub halve_lr_at_epoch: Option<usize>,
    pub patch_size: usize,
    pub seed: u64,
    /// Image directory; the procedural corpus is used when absent.
    pub dataset: Option<PathBuf>,
    /// Train a single fixed β without gain units.
    pub baseline: bool,
    pub steps_per_epoch: usize,
    /// Learning-rate multiplier for the gain parameters.
    pub gain_lr_scale: f64,
    /// Upper bound on the global gradient L2 norm per step; `None` disables
    /// clipping. Omitted in a config file means `None`.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    pub variant: Variant,
    pub channels: usize,
    pub hidden: usize,
    pub hyper_channels: usize,
    pub gain_mode: GainMode,
    /// Held-out patches evaluated at the end of every epoch.
    pub eval_patches: usize,
    /// Fault-injection hook: poison the loss at this step to exercise the
    /// divergence path.
    pub inject_nan_at_step: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let toy = CodecConfig::toy(Variant::Cvr);
        Self {
            lagrange: B_MSE.to_vec(),
            epochs: 12,
            batch_size: 8,
            learning_rate: 1e-4,
            halve_lr_at_epoch: Some(6),
            patch_size: 32,
            seed: 0,
            dataset: None,
            baseline: false,
            steps_per_epoch: 200,
            gain_lr_scale: 1.0,
            clip_grad_norm: None,
            variant: toy.variant,
            channels: toy.channels,
            hidden: toy.hidden,
            hyper_channels: toy.hyper_channels,
            gain_mode: toy.gain_mode,
            eval_patches: 16,
            inject_nan_at_step: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0 && c.is_finite())) {
            return bad("clip_grad_norm must be positive");
        }
        if !(self.gain_lr_scale >= 0.0 && self.gain_lr_scale.is_finite()) {
            return bad("gain_lr_scale must be non-negative");
        }
        if self.baseline && self.lagrange.len() != 1 {
            return bad("baseline mode trains exactly one Lagrange multiplier");
        }
        let stride = self.codec().total_stride();
        if self.patch_size == 0 || self.patch_size % stride != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {stride}",
                self.patch_size
            )));
        }
        self.codec().validate()
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            variant: self.variant,
            channels: self.channels,
            hidden: self.hidden,
            hyper_channels: self.hyper_channels,
            lagrange: self.lagrange.clone(),
            gains: !self.baseline,
            gain_mode: self.gain_mode,
            ..CodecConfig::toy(self.variant)
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.halve_lr_at_epoch {
            Some(e) if epoch >= e => self.learning_rate * 0.5,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub s: usize,
    pub bits: f64,
    /// Mean squared error on the 8-bit scale.
    pub distortion: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub s: usize,
    pub bpp: f64,
    pub distortion: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Held-out evaluation after each epoch; epoch 0 is the initialization.
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,s,bits,distortion,loss\n");
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.s, r.bits, r.distortion, r.loss);
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("epoch,s,bpp,distortion,loss\n");
        for r in &self.evals {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.s, r.bpp, r.distortion, r.loss);
        }
        out
    }

    /// Evaluation records of the last evaluated epoch, ordered by `s`.
    pub fn final_eval(&self) -> Vec<EvalRecord> {
        let last = self.evals.iter().map(|r| r.epoch).max();
        self.evals.iter().filter(|r| Some(r.epoch) == last).copied().collect()
    }

    /// Mean held-out loss over all rates at `epoch`.
    pub fn eval_loss(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.evals.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// The loss went non-finite; `model` holds the parameters from before
    /// the offending step.
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged {
        step: usize,
        model: Box<Model>,
        log: TrainLog,
    },
}

/// Uniform rate index in `[0, n)`.
pub fn sample_rate_index(rng: &mut impl Rng, n: usize) -> usize {
    assert!(n >= 1, "need at least one rate");
    rng.gen_range(0..n)
}

/// `count` uniformly placed `patch×patch` crops as `1×3×p×p` tensors in
/// `[0, 1]`. Images smaller than the patch are skipped with a warning.
pub fn extract_patches(images: &[Image], patch: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    let usable: Vec<&Image> = images
        .iter()
        .filter(|img| {
            let ok = img.width() >= patch && img.height() >= patch;
            if !ok {
                log::warn!("skipping {}×{} image smaller than patch {patch}", img.width(), img.height());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no image is at least {patch}×{patch}")));
    }
    Ok((0..count)
        .map(|_| {
            let img = usable[rng.gen_range(0..usable.len())];
            let x0 = rng.gen_range(0..=img.width() - patch);
            let y0 = rng.gen_range(0..=img.height() - patch);
            crop_patch(img, x0, y0, patch)
        })
        .collect())
}

fn crop_patch(img: &Image, x0: usize, y0: usize, p: usize) -> Tensor {
    Tensor::from_fn(&[1, 3, p, p], |i| {
        let c = i / (p * p);
        let (y, x) = ((i / p) % p, i % p);
        img.pixel(x0 + x, y0 + y, c) as f64 / 255.0
    })
}

/// Concatenates `1×C×H×W` tensors along the batch axis.
pub fn batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("batch", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), c, h, w], data)
}

/// Seeded textures: a few octaves of smoothly interpolated lattice noise per
/// channel, mixed with a random linear gradient and a colour tint.
pub fn procedural_corpus(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874_7572_6573);
    (0..count).map(|_| procedural_image(size, &mut rng)).collect()
}

fn procedural_image(size: usize, rng: &mut impl Rng) -> Image {
    const OCTAVES: usize = 4;
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut layers = Vec::new();
    for _ in 0..3 {
        let mut octaves = Vec::new();
        for o in 0..OCTAVES {
            let cells = 2usize << o;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
            octaves.push((cells, lattice));
        }
        layers.push(octaves);
    }
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let (gx, gy) = (angle.cos(), angle.sin());
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..1.0)).collect();
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..0.3)).collect();
    let noise_weight = rng.gen_range(0.4..0.8);
    Image::from_fn(size, size, |x, y, c| {
        let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
        let mut n = 0.0;
        let mut amp = 0.5;
        for (cells, lattice) in &layers[c] {
            let (fx, fy) = (u * *cells as f64, v * *cells as f64);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            n += amp * (top * (1.0 - ty) + bottom * ty);
            amp *= 0.5;
        }
        let grad = 0.5 + 0.5 * ((u - 0.5) * gx + (v - 0.5) * gy);
        let value = base[c] + tint[c] * (noise_weight * n / 0.9375 + (1.0 - noise_weight) * grad);
        (value.clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// Every `.ppm` (and, with the `png` feature, `.png`) file of a directory,
/// in file-name order.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                e.eq_ignore_ascii_case("ppm") || (cfg!(feature = "png") && e.eq_ignore_ascii_case("png"))
            })
        })
        .collect();
    paths.sort();
    paths.iter().map(Image::load).collect()
}

/// Mean estimated bpp, distortion, and loss of `model` on `eval` at rate `s`,
/// with hard rounding.
pub fn evaluate_patches(model: &Model, eval: &Tensor, s: usize) -> Result<EvalRecord> {
    let (bpp, distortion) = model.evaluate(eval, s)?;
    let beta = model.config().lagrange[s];
    Ok(EvalRecord {
        epoch: 0,
        s,
        bpp,
        distortion,
        loss: bpp + beta * distortion,
    })
}

fn eval_all(model: &Model, eval: &Tensor, epoch: usize, log: &mut TrainLog) -> Result<()> {
    for s in 0..model.vectors() {
        let r = evaluate_patches(model, eval, s)?;
        log.evals.push(EvalRecord { epoch, ..r });
    }
    Ok(())
}

/// Trains a fresh model on `images` (the procedural corpus when `None` and
/// no dataset path is configured).
pub fn train(config: &TrainConfig, images: Option<&[Image]>) -> std::result::Result<Trained, TrainError> {
    config.validate()?;
    let owned;
    let images = match images {
        Some(i) => i,
        None => {
            owned = match &config.dataset {
                Some(dir) => load_image_dir(dir)?,
                None => procedural_corpus(200, 64, config.seed),
            };
            &owned
        }
    };
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()).into());
    }
    let model = Model::new(config.codec(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let eval_images = procedural_corpus(config.eval_patches.max(1), 64, config.seed ^ 0xe7a1);
    let eval = batch(&extract_patches(&eval_images, config.patch_size, config.eval_patches.max(1), &mut rng)?)?;
    train_model(model, config, images, &eval, &mut rng)
}

/// Continues training `model` under `config`, evaluating on `eval`.
pub fn train_model(
    mut model: Model,
    config: &TrainConfig,
    images: &[Image],
    eval: &Tensor,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Trained, TrainError> {
    let mut log = TrainLog::default();
    eval_all(&model, eval, 0, &mut log)?;
    let gain_ids = model.gain_param_ids();
    let n = model.vectors();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let adam = Adam::with_lr(config.lr_at(epoch));
        for _ in 0..config.steps_per_epoch {
            let patches = extract_patches(images, config.patch_size, config.batch_size, rng)?;
            let x = batch(&patches)?;
            let s = sample_rate_index(rng, n);
            let mut tape = Tape::new();
            let bound = model.store().bind(&mut tape);
            let xv = tape.constant(x);
            let mut noise = |_, len| uniform_noise(len, rng);
            let f = model.forward(&mut tape, &bound, xv, s, &mut Relaxation::Noise(&mut noise))?;
            let mut loss = tape.value(f.loss).item();
            if config.inject_nan_at_step == Some(step) {
                loss = f64::NAN;
            }
            if !loss.is_finite() {
                log::error!("non-finite loss at step {step} (s = {s}); returning last good parameters");
                return Err(TrainError::Diverged {
                    step,
                    model: Box::new(model),
                    log,
                });
            }
            let grads = tape.backward(f.loss);
            let store = model.store_mut();
            store.accumulate(&grads, &bound);
            if let Some(max) = config.clip_grad_norm {
                store.clip_grad_norm(max);
            }
            adam.step_scaled(store, |id| {
                if gain_ids.contains(&id) {
                    config.gain_lr_scale
                } else {
                    1.0
                }
            })?;
            log.steps.push(StepRecord {
                step,
                s,
                bits: f.bits,
                distortion: f.distortion,
                loss,
            });
            step += 1;
        }
        eval_all(&model, eval, epoch + 1, &mut log)?;
        if let Some(l) = log.eval_loss(epoch + 1) {
            log::info!("epoch {}: held-out loss {l:.4}", epoch + 1);
        }
    }
    Ok(Trained { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            lagrange: vec![0.05, 0.001],
            epochs: 1,
            batch_size: 2,
            steps_per_epoch: 3,
            patch_size: 16,
            channels: 4,
            hidden: 4,
            hyper_channels: 3,
            eval_patches: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.halve_lr_at_epoch, c.epochs), (8, 1e-4, Some(6), 12));
        assert_eq!(c.lr_at(5), 1e-4);
        assert_eq!(c.lr_at(6), 5e-5);
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let c = TrainConfig::from_toml("epochs = 3\nbaseline = true\nlagrange = [0.007]\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.baseline && !c.codec().gains);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("baseline = true").is_err());
        assert!(TrainConfig::from_toml("patch_size = 20").is_err());
    }

    #[test]
    fn single_rate_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_rate_index(&mut rng, 1) == 0));
    }

    #[test]
    fn patches_stay_in_bounds() {
        // Red holds the column and green the row, so the top-left pixel of a
        // patch reveals its offset.
        let img = Image::from_fn(64, 64, |x, y, c| [x, y, 0][c] as u8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_max = (0, 0);
        for p in extract_patches(&[img], 32, 400, &mut rng).unwrap() {
            let x0 = (p.data()[0] * 255.0).round() as usize;
            let y0 = (p.data()[32 * 32] * 255.0).round() as usize;
            assert!(x0 <= 32 && y0 <= 32);
            seen_max = (seen_max.0.max(x0), seen_max.1.max(y0));
        }
        assert_eq!(seen_max, (32, 32));
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = Image::from_fn(40, 40, |_, _, c| [10, 20, 30][c]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in extract_patches(&[img], 16, 10, &mut rng).unwrap() {
            for c in 0..3 {
                let plane = &p.data()[c * 256..(c + 1) * 256];
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn seeded_patch_sequence_repeats() {
        let imgs = procedural_corpus(4, 64, 1);
        let a = extract_patches(&imgs, 32, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = extract_patches(&imgs, 32, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_images_are_skipped() {
        let small = Image::from_fn(8, 8, |_, _, _| 0);
        let big = Image::from_fn(32, 32, |_, _, _| 255);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = extract_patches(&[small.clone(), big], 16, 5, &mut rng).unwrap();
        assert!(ps.iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
        assert!(extract_patches(&[small], 16, 1, &mut rng).is_err());
    }

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(procedural_corpus(3, 32, 4), procedural_corpus(3, 32, 4));
        assert_ne!(procedural_corpus(1, 32, 4), procedural_corpus(1, 32, 5));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let t = train(&cfg, None).unwrap();
        assert_eq!(t.model.store(), Model::new(cfg.codec(), cfg.seed).unwrap().store());
        assert!(t.log.steps.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let a = train(&tiny(), None).unwrap();
        let b = train(&tiny(), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.log.steps.len(), 3);
        assert!(a.log.steps.iter().all(|r| r.s < 2));
    }

    #[test]
    fn injected_nan_aborts_with_last_good_model() {
        let cfg = TrainConfig {
            inject_nan_at_step: Some(2),
            ..tiny()
        };
        match train(&cfg, None) {
            Err(TrainError::Diverged { step, model, log }) => {
                assert_eq!(step, 2);
                assert_eq!(log.steps.len(), 2);
                let clean = TrainConfig { steps_per_epoch: 2, ..tiny() };
                let t = train(&clean, None).unwrap();
                assert_eq!(model.store(), t.model.store());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
