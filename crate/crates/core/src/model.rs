//! The CVR and HCVR codecs: networks, gain units, entropy models, and the
//! encode/decode paths that turn images into `GVC1` bitstreams and back.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::coder::{Bitstream, Header, RangeDecoder, RangeEncoder};
use crate::entropy::factorized::FactorizedCdf;
use crate::entropy::gaussian::{ScaleTable, SCALE_FLOOR};
use crate::entropy::tables::{clamp_symbol, FreqTable};
use crate::entropy::{FactorizedModel, GaussianConditional};
use crate::error::{Error, Result};
use crate::gain::{GainMode, GainParams, GainUnitPair, RateSelector};
use crate::image::{crop, pad_to_multiple, Image};
use crate::nn::{Bound, LayerSpec, ParamStore, Stack};
use crate::quant::{DitherStream, Quantizer, QuantizerMode};
use crate::tensor::Tensor;

/// Lagrange multipliers for MSE-optimized models, largest first.
pub const B_MSE: [f64; 6] = [0.05, 0.03, 0.007, 0.003, 0.001, 0.0003];
/// Lagrange multipliers for MS-SSIM-optimized models, largest first.
pub const B_MSSSIM: [f64; 6] = [0.07, 0.03, 0.007, 0.003, 0.001, 0.0006];

/// Distortion is mean squared error measured on the 8-bit pixel scale.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Factorized prior on the gained latent.
    Cvr,
    /// Hyperprior: a factorized prior on the gained hyper latent and a
    /// conditional Gaussian on the gained latent.
    Hcvr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub variant: Variant,
    /// Latent channels `c`.
    pub channels: usize,
    /// Width of the intermediate transform layers.
    pub hidden: usize,
    /// Hyper-latent channels `c_hp` (HCVR only).
    pub hyper_channels: usize,
    /// Lagrange set `B`; its length is the number of gain vectors `n`.
    pub lagrange: Vec<f64>,
    /// When false the gain units are left out entirely (the base model).
    pub gains: bool,
    pub gain_mode: GainMode,
    /// Default quantizer at inference.
    pub quantizer: QuantizerMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::toy(Variant::Cvr)
    }
}

impl CodecConfig {
    /// The desk-scale architecture with `B_mse`.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            channels: 32,
            hidden: 32,
            hyper_channels: 16,
            lagrange: B_MSE.to_vec(),
            gains: true,
            gain_mode: GainMode::Hard,
            quantizer: QuantizerMode::Round,
        }
    }

    /// A single-rate model without gain units, trained at `beta`.
    pub fn fixed_rate(variant: Variant, beta: f64) -> Self {
        Self {
            lagrange: vec![beta],
            gains: false,
            ..Self::toy(variant)
        }
    }

    pub fn vectors(&self) -> usize {
        self.lagrange.len()
    }

    /// The hyper gain pair shares the selector, so it has as many columns.
    pub fn hyper_vectors(&self) -> usize {
        match self.variant {
            Variant::Cvr => 0,
            Variant::Hcvr => self.vectors(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.lagrange.is_empty() {
            return Err(Error::Config("empty Lagrange set".into()));
        }
        if self.lagrange.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config("Lagrange multipliers must be finite and non-negative".into()));
        }
        if self.lagrange.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("Lagrange set must be strictly decreasing".into()));
        }
        if let GainMode::Soft { penalty } = self.gain_mode {
            if !(penalty.is_finite() && penalty >= 0.0) {
                return Err(Error::Config(format!("bad product penalty {penalty}")));
            }
        }
        if self.quantizer == QuantizerMode::Noise {
            return Err(Error::NoiseAtInference);
        }
        Ok(())
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let (h, c) = (self.hidden, self.channels);
        vec![
            LayerSpec::conv(3, h, 5, 2),
            LayerSpec::gdn(h),
            LayerSpec::conv(h, h, 5, 2),
            LayerSpec::gdn(h),
            LayerSpec::conv(h, c, 5, 2),
        ]
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let (h, c) = (self.hidden, self.channels);
        vec![
            LayerSpec::deconv(c, h, 5, 2),
            LayerSpec::igdn(h),
            LayerSpec::deconv(h, h, 5, 2),
            LayerSpec::igdn(h),
            LayerSpec::deconv(h, 3, 5, 2),
        ]
    }

    pub fn hyper_encoder_specs(&self) -> Vec<LayerSpec> {
        let (c, hp) = (self.channels, self.hyper_channels);
        vec![LayerSpec::conv(c, hp, 3, 1), LayerSpec::relu(hp), LayerSpec::conv(hp, hp, 5, 2)]
    }

    pub fn hyper_decoder_specs(&self) -> Vec<LayerSpec> {
        let (c, hp) = (self.channels, self.hyper_channels);
        vec![LayerSpec::deconv(hp, hp, 5, 2), LayerSpec::relu(hp), LayerSpec::conv(hp, 2 * c, 3, 1)]
    }

    /// Input extents must be multiples of this.
    pub fn total_stride(&self) -> usize {
        match self.variant {
            Variant::Cvr => 8,
            Variant::Hcvr => 16,
        }
    }
}

/// Parameters and FLOPs added by the gain units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overhead {
    pub params: usize,
    pub flops: usize,
    /// `params / base_params · 100`, when a base count is known.
    pub params_percent: Option<f64>,
    pub flops_percent: Option<f64>,
}

/// `c·n·2` parameters and `c·h·w·2` multiplications for one gain pair
/// over an `h×w` latent.
pub fn gain_overhead(c: usize, n: usize, h: usize, w: usize) -> (usize, usize) {
    (c * n * 2, c * h * w * 2)
}

impl Overhead {
    /// Percentages are filled in for whichever base counts are known.
    pub fn new(params: usize, flops: usize, base_params: Option<usize>, base_flops: Option<usize>) -> Self {
        Self {
            params,
            flops,
            params_percent: base_params.map(|p| 100.0 * params as f64 / p as f64),
            flops_percent: base_flops.map(|f| 100.0 * flops as f64 / f as f64),
        }
    }

    /// Gain-unit overhead of `config` for an `height×width` input.
    pub fn of(
        config: &CodecConfig,
        height: usize,
        width: usize,
        base_params: Option<usize>,
        base_flops: Option<usize>,
    ) -> Self {
        let c = config.channels;
        let (h, w) = (height / 8, width / 8);
        let (mut p, mut f) = gain_overhead(c, config.vectors(), h, w);
        if config.variant == Variant::Hcvr {
            let (hp, fp) = gain_overhead(config.hyper_channels, config.hyper_vectors(), h / 2, w / 2);
            p += hp;
            f += fp;
        }
        Self::new(p, f, base_params, base_flops)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hyper {
    encoder: Stack,
    decoder: Stack,
    gain: Option<GainParams>,
}

/// How latents are quantized on the training path.
pub enum Relaxation<'a> {
    /// Additive noise; the callback returns `len` samples for the latent
    /// (`DitherStream::Latent`) or hyper latent.
    Noise(&'a mut dyn FnMut(DitherStream, usize) -> Vec<f64>),
    /// Hard rounding, for evaluation.
    Round,
}

/// Differentiable quantities from one training forward pass.
pub struct Forward {
    pub loss: Var,
    /// Total estimated bits over the batch.
    pub bits: f64,
    /// Bits per input pixel.
    pub bpp: f64,
    /// Mean squared error on the 8-bit scale.
    pub distortion: f64,
    pub reconstruction: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub bitstream: Bitstream,
    /// Payload bits over original pixels.
    pub bpp: f64,
    /// Ideal code length under the integer coding tables, in bits.
    pub estimated_bits: f64,
    /// Encoder-side quantized latent `ŷ` (gained domain).
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub image: Image,
    /// Decoder-side `ŷ`, comparable with [`EncodedImage::latent`].
    pub latent: Vec<f64>,
}

#[derive(Debug)]
pub struct Model {
    config: CodecConfig,
    store: ParamStore,
    encoder: Stack,
    decoder: Stack,
    /// Factorized prior of whichever latent is coded without side
    /// information: `y` in CVR, `z` in HCVR.
    prior: FactorizedModel,
    gain: Option<GainParams>,
    hyper: Option<Hyper>,
    gaussian: GaussianConditional,
    checksum: OnceLock<[u8; 8]>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            prior: self.prior.clone(),
            gain: self.gain.clone(),
            hyper: self.hyper.clone(),
            gaussian: self.gaussian.clone(),
            checksum: OnceLock::new(),
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl Model {
    /// Fresh model. Network parameters are drawn from `seed`; gain vectors
    /// start at 1 and consume no randomness, so a CVR model and its
    /// gain-free base built from the same seed share every other weight.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.lagrange.iter_mut().for_each(|b| *b = f32_round(*b));
        if let GainMode::Soft { penalty } = &mut config.gain_mode {
            *penalty = f32_round(*penalty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Stack::build("enc", &config.encoder_specs(), &mut store, &mut rng)?;
        let decoder = Stack::build("dec", &config.decoder_specs(), &mut store, &mut rng)?;
        let mut hyper = match config.variant {
            Variant::Cvr => None,
            Variant::Hcvr => Some(Hyper {
                encoder: Stack::build("henc", &config.hyper_encoder_specs(), &mut store, &mut rng)?,
                decoder: Stack::build("hdec", &config.hyper_decoder_specs(), &mut store, &mut rng)?,
                gain: None,
            }),
        };
        let prior_channels = match config.variant {
            Variant::Cvr => config.channels,
            Variant::Hcvr => config.hyper_channels,
        };
        let prior = FactorizedModel::build("prior", prior_channels, &mut store, &mut rng);
        let n = config.vectors();
        let gain = config
            .gains
            .then(|| GainParams::build("gain", config.channels, n, config.gain_mode, &mut store));
        if let Some(h) = &mut hyper {
            h.gain = config
                .gains
                .then(|| GainParams::build("hyper_gain", config.hyper_channels, n, config.gain_mode, &mut store));
        }
        store.round_to_f32();
        let scales = ScaleTable::default().levels().iter().map(|&v| f32_round(v)).collect();
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            prior,
            gain,
            hyper,
            gaussian: GaussianConditional::new(ScaleTable::from_levels(scales)?),
            checksum: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameters; invalidates the cached checksum.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.checksum = OnceLock::new();
        &mut self.store
    }

    pub fn vectors(&self) -> usize {
        self.config.vectors()
    }

    /// Identifiers of the gain-unit parameters (for learning-rate scaling).
    pub fn gain_param_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = Vec::new();
        if let Some(g) = &self.gain {
            ids.extend(g.param_ids());
        }
        if let Some(g) = self.hyper.as_ref().and_then(|h| h.gain.as_ref()) {
            ids.extend(g.param_ids());
        }
        ids
    }

    /// The latent gain pair as positive matrices, if the model has gains.
    pub fn gain_pair(&self) -> Result<Option<GainUnitPair>> {
        self.gain
            .as_ref()
            .map(|g| g.pair(&self.store, &self.config.lagrange))
            .transpose()
    }

    pub fn hyper_gain_pair(&self) -> Result<Option<GainUnitPair>> {
        self.hyper
            .as_ref()
            .and_then(|h| h.gain.as_ref())
            .map(|g| g.pair(&self.store, &self.config.lagrange))
            .transpose()
    }

    /// Parameter count without gain units.
    pub fn base_param_count(&self) -> usize {
        let gains: usize = self
            .gain_param_ids()
            .iter()
            .map(|&id| self.store.tensor(id).len())
            .sum();
        self.store.num_scalars() - gains
    }

    /// Multiplications of the transforms for an `h×w` input.
    pub fn base_flops(&self, h: usize, w: usize) -> usize {
        let (enc, (lh, lw)) = self.encoder.mults(h, w);
        let (dec, _) = self.decoder.mults(lh, lw);
        let hyper = self.hyper.as_ref().map_or(0, |hy| {
            let (he, (zh, zw)) = hy.encoder.mults(lh, lw);
            he + hy.decoder.mults(zh, zw).0
        });
        enc + dec + hyper
    }

    // ----- checkpoint -------------------------------------------------

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cfg = &self.config;
        let mut ck = Checkpoint::new();
        let variant = match cfg.variant {
            Variant::Cvr => 0.0,
            Variant::Hcvr => 1.0,
        };
        ck.insert_scalar("meta.variant", variant);
        ck.insert_scalar("meta.channels", cfg.channels as f64);
        ck.insert_scalar("meta.hidden", cfg.hidden as f64);
        ck.insert_scalar("meta.hyper_channels", cfg.hyper_channels as f64);
        ck.insert("meta.lagrange", &Tensor::new(&[cfg.vectors()], cfg.lagrange.clone())?);
        ck.insert_scalar("meta.gains", cfg.gains as u8 as f64);
        let (mode, penalty) = match cfg.gain_mode {
            GainMode::Hard => (0.0, 0.0),
            GainMode::Soft { penalty } => (1.0, penalty),
        };
        ck.insert_scalar("meta.gain_mode", mode);
        ck.insert_scalar("meta.gain_penalty", penalty);
        ck.insert_scalar("meta.quantizer", cfg.quantizer.code() as f64);
        ck.insert(
            "meta.scale_table",
            &Tensor::new(&[self.gaussian.scales.levels().len()], self.gaussian.scales.levels().to_vec())?,
        );
        for p in self.store.iter() {
            ck.insert(p.name.clone(), &p.tensor);
        }
        let (c, n) = (cfg.channels, cfg.vectors());
        if let Some(pair) = self.gain_pair()? {
            ck.insert("gain.M", &Tensor::new(&[c, n], pair.gain_matrix().to_vec())?);
            ck.insert("gain.Minv", &Tensor::new(&[c, n], pair.inverse_matrix().to_vec())?);
        }
        if let Some(pair) = self.hyper_gain_pair()? {
            let hp = cfg.hyper_channels;
            ck.insert("hyper_gain.M", &Tensor::new(&[hp, n], pair.gain_matrix().to_vec())?);
            ck.insert("hyper_gain.Minv", &Tensor::new(&[hp, n], pair.inverse_matrix().to_vec())?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let count = |name: &str| -> Result<usize> {
            let v = ck.scalar(name)?;
            if v < 1.0 || v.fract() != 0.0 || v > 1e6 {
                return Err(Error::Checkpoint(format!("`{name}` = {v} is not a positive count")));
            }
            Ok(v as usize)
        };
        let variant = match ck.scalar("meta.variant")? {
            v if v == 0.0 => Variant::Cvr,
            v if v == 1.0 => Variant::Hcvr,
            v => return Err(Error::Checkpoint(format!("unknown variant {v}"))),
        };
        let gain_mode = match ck.scalar("meta.gain_mode")? {
            v if v == 0.0 => GainMode::Hard,
            v if v == 1.0 => GainMode::Soft {
                penalty: ck.scalar("meta.gain_penalty")?,
            },
            v => return Err(Error::Checkpoint(format!("unknown gain mode {v}"))),
        };
        let quantizer = QuantizerMode::from_code(ck.scalar("meta.quantizer")? as u8)
            .ok_or_else(|| Error::Checkpoint("unknown quantizer".into()))?;
        let config = CodecConfig {
            variant,
            channels: count("meta.channels")?,
            hidden: count("meta.hidden")?,
            hyper_channels: count("meta.hyper_channels")?,
            lagrange: ck.require("meta.lagrange")?.data().to_vec(),
            gains: ck.scalar("meta.gains")? != 0.0,
            gain_mode,
            quantizer,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        for p in model.store.iter_mut() {
            let t = ck.require(&p.name)?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: expected shape {:?}, found {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("`{}` has non-finite values", p.name)));
            }
            p.tensor = t.clone();
        }
        let levels = ck.require("meta.scale_table")?.data().to_vec();
        model.gaussian = GaussianConditional::new(
            ScaleTable::from_levels(levels).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// First 8 bytes of SHA-256 over this model's checkpoint bytes.
    pub fn checksum(&self) -> [u8; 8] {
        *self.checksum.get_or_init(|| {
            self.to_checkpoint()
                .expect("a constructed model always serializes")
                .checksum()
        })
    }

    // ----- training path ----------------------------------------------

    /// Rate-distortion loss for a batch `x` (`N,3,H,W` in `[0,1]`, extents
    /// multiples of the total stride) at rate index `s`:
    /// `bits / pixels + β_s · D (+ soft product penalty)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        s: usize,
        relax: &mut Relaxation<'_>,
    ) -> Result<Forward> {
        let n = self.vectors();
        if s >= n {
            return Err(Error::Index { index: s, len: n });
        }
        let (batch, _, h, w) = tape.value(x).dims4()?;
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape("forward", format!("{h}×{w} not a multiple of {stride}")));
        }
        let y = self.encoder.forward(tape, bound, x)?;
        let (y_bar, inv) = match &self.gain {
            Some(g) => {
                let (m, mi) = g.vectors_at(tape, bound, s)?;
                (tape.channel_scale(y, m)?, Some(mi))
            }
            None => (y, None),
        };
        let quantize = |tape: &mut Tape, v: Var, stream, relax: &mut Relaxation<'_>| -> Result<Var> {
            match relax {
                Relaxation::Noise(noise) => {
                    let u = noise(stream, tape.value(v).len());
                    tape.add_const(v, &u)
                }
                Relaxation::Round => {
                    let r: Vec<f64> = tape.value(v).data().iter().map(|a| a.round()).collect();
                    Ok(tape.constant(Tensor::new(tape.shape(v), r)?))
                }
            }
        };
        let y_hat;
        let bits_var = match &self.hyper {
            None => {
                y_hat = quantize(tape, y_bar, DitherStream::Latent, relax)?;
                self.prior.bits(tape, bound, y_hat)?
            }
            Some(hy) => {
                let a = tape.abs(y_bar);
                let z = hy.encoder.forward(tape, bound, a)?;
                let (z_bar, z_inv) = match &hy.gain {
                    Some(g) => {
                        let (m, mi) = g.vectors_at(tape, bound, s)?;
                        (tape.channel_scale(z, m)?, Some(mi))
                    }
                    None => (z, None),
                };
                let z_hat = quantize(tape, z_bar, DitherStream::Hyper, relax)?;
                let z_bits = self.prior.bits(tape, bound, z_hat)?;
                let z_prime = match z_inv {
                    Some(mi) => tape.channel_scale(z_hat, mi)?,
                    None => z_hat,
                };
                let params = hy.decoder.forward(tape, bound, z_prime)?;
                let c = self.config.channels;
                let mu = tape.slice_channels(params, 0, c)?;
                let raw = tape.slice_channels(params, c, c)?;
                let sigma = tape.softplus(raw);
                y_hat = quantize(tape, y_bar, DitherStream::Latent, relax)?;
                let y_bits = self.gaussian.bits(tape, y_hat, mu, sigma)?;
                tape.add(z_bits, y_bits)?
            }
        };
        let y_prime = match inv {
            Some(mi) => tape.channel_scale(y_hat, mi)?,
            None => y_hat,
        };
        let x_hat = self.decoder.forward(tape, bound, y_prime)?;
        let mse = tape.mse(x_hat, x)?;
        let pixels = (batch * h * w) as f64;
        let bits = tape.value(bits_var).item();
        let distortion = tape.value(mse).item() * DISTORTION_SCALE;
        let rate = tape.scale(bits_var, 1.0 / pixels);
        let beta = self.config.lagrange[s];
        let d = tape.scale(mse, beta * DISTORTION_SCALE);
        let mut loss = tape.add(rate, d)?;
        for g in self.gain.iter().chain(self.hyper.iter().filter_map(|h| h.gain.as_ref())) {
            if let Some(p) = g.penalty(tape, bound)? {
                loss = tape.add(loss, p)?;
            }
        }
        Ok(Forward {
            loss,
            bits,
            bpp: bits / pixels,
            distortion,
            reconstruction: x_hat,
        })
    }

    /// Estimated bpp and 8-bit-scale MSE with hard rounding, no gradients.
    pub fn evaluate(&self, x: &Tensor, s: usize) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &bound, xv, s, &mut Relaxation::Round)?;
        Ok((f.bpp, f.distortion))
    }

    // ----- coding path ------------------------------------------------

    /// Gain and inverse-gain vectors actually applied at `sel`, for the
    /// latent and (HCVR) the hyper latent. Ones when the model has no gains.
    fn coding_gains(&self, sel: RateSelector) -> Result<[(Vec<f64>, Vec<f64>); 2]> {
        let ones = |c: usize| (vec![1.0; c], vec![1.0; c]);
        let n = self.vectors();
        if !self.config.gains && (sel.s != 0 || sel.l != 0.0) && !(n >= 2 && sel.s + 1 < n) {
            return Err(Error::Index { index: sel.s, len: n });
        }
        let latent = match self.gain_pair()? {
            Some(p) => p.coding_vectors(sel)?,
            None => ones(self.config.channels),
        };
        let hyper = match self.hyper_gain_pair()? {
            Some(p) => p.coding_vectors(sel)?,
            None => ones(self.config.hyper_channels),
        };
        Ok([latent, hyper])
    }

    fn run(&self, stack: &Stack, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(input);
        let y = stack.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// `μ` and floored `σ` of the latent from the dequantized hyper latent.
    fn hyper_params(&self, hy: &Hyper, z_hat: &Tensor, z_inv: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let z_prime = scale_channels(z_hat, z_inv)?;
        let p = self.run(&hy.decoder, z_prime)?;
        let (_, c2, h, w) = p.dims4()?;
        let plane = h * w;
        let c = c2 / 2;
        let mu = p.data()[..c * plane].to_vec();
        let sigma = p.data()[c * plane..].iter().map(|&r| softplus(r).max(SCALE_FLOOR)).collect();
        Ok((mu, sigma))
    }

    pub fn encode_image(&self, image: &Image, sel: RateSelector, quantizer: Quantizer) -> Result<EncodedImage> {
        if quantizer.mode == QuantizerMode::Noise {
            return Err(Error::NoiseAtInference);
        }
        let sel = sel.snapped();
        let [(m, _), (mh, mh_inv)] = self.coding_gains(sel)?;
        let x = pad_to_multiple(&image.to_tensor(), self.config.total_stride())?;
        let y = self.run(&self.encoder, x)?;
        let y_bar = scale_channels(&y, &m)?;
        let (_, c, h, w) = y_bar.dims4()?;
        let plane = h * w;
        let symbols: Vec<i32> = quantizer
            .symbols(y_bar.data(), DitherStream::Latent)?
            .into_iter()
            .map(clamp_symbol)
            .collect();
        let latent = quantizer.reconstruct(&symbols, DitherStream::Latent);
        let cdf = self.prior.cdf(&self.store);
        let mut estimated = 0.0;
        let mut payloads = Vec::new();
        match &self.hyper {
            None => {
                let mut enc = RangeEncoder::new();
                let tables = LatentTables::new(&cdf, quantizer, DitherStream::Latent);
                for (i, &k) in symbols.iter().enumerate() {
                    let t = tables.get(i / plane % c, i);
                    estimated += t.cost(k);
                    t.encode(&mut enc, k);
                }
                payloads.push(enc.finish());
            }
            Some(hy) => {
                let abs = y_bar.map(f64::abs);
                let z = self.run(&hy.encoder, abs)?;
                let z_bar = scale_channels(&z, &mh)?;
                let (_, zc, zh, zw) = z_bar.dims4()?;
                let z_symbols: Vec<i32> = quantizer
                    .symbols(z_bar.data(), DitherStream::Hyper)?
                    .into_iter()
                    .map(clamp_symbol)
                    .collect();
                let z_hat = Tensor::new(&[1, zc, zh, zw], quantizer.reconstruct(&z_symbols, DitherStream::Hyper))?;
                let mut hyper_enc = RangeEncoder::new();
                let tables = LatentTables::new(&cdf, quantizer, DitherStream::Hyper);
                for (i, &k) in z_symbols.iter().enumerate() {
                    let t = tables.get(i / (zh * zw) % zc, i);
                    estimated += t.cost(k);
                    t.encode(&mut hyper_enc, k);
                }
                let (mu, sigma) = self.hyper_params(hy, &z_hat, &mh_inv)?;
                let mut enc = RangeEncoder::new();
                for (i, &k) in symbols.iter().enumerate() {
                    let t = self
                        .gaussian
                        .table(mu[i], sigma[i], quantizer.offset(DitherStream::Latent, i));
                    estimated += t.cost(k);
                    t.encode(&mut enc, k);
                }
                payloads.push(enc.finish());
                payloads.push(hyper_enc.finish());
            }
        }
        let bitstream = Bitstream {
            header: Header {
                checksum: self.checksum(),
                selector: sel,
                quantizer: quantizer.mode,
                dither_seed: quantizer.dither_seed,
                width: image.width() as u32,
                height: image.height() as u32,
            },
            payloads,
        };
        let payload_bits: usize = bitstream.payloads.iter().map(|p| 8 * p.len()).sum();
        Ok(EncodedImage {
            bpp: payload_bits as f64 / (image.width() * image.height()) as f64,
            estimated_bits: estimated,
            bitstream,
            latent,
        })
    }

    pub fn decode(&self, bitstream: &Bitstream) -> Result<Decoded> {
        bitstream.verify_checksum(self.checksum())?;
        self.decode_with_selector(bitstream, bitstream.header.selector)
    }

    /// Decodes with an explicit selector in place of the header's, which is
    /// only useful to measure the effect of a mismatched rate.
    pub fn decode_with_selector(&self, bitstream: &Bitstream, sel: RateSelector) -> Result<Decoded> {
        let hdr = &bitstream.header;
        let (width, height) = (hdr.width as usize, hdr.height as usize);
        if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
            return Err(Error::Corrupt(format!("image size {width}×{height}")));
        }
        let expected = if self.hyper.is_some() { 2 } else { 1 };
        if bitstream.payloads.len() != expected {
            return Err(Error::Corrupt(format!(
                "{} payloads, model expects {expected}",
                bitstream.payloads.len()
            )));
        }
        let quantizer = Quantizer::new(hdr.quantizer, hdr.dither_seed);
        let [(_, m_inv), (_, mh_inv)] = self.coding_gains(sel.snapped())?;
        let stride = self.config.total_stride();
        let (h, w) = (height.div_ceil(stride) * stride / 8, width.div_ceil(stride) * stride / 8);
        let c = self.config.channels;
        let plane = h * w;
        let cdf = self.prior.cdf(&self.store);
        let mut symbols = Vec::with_capacity(c * plane);
        match &self.hyper {
            None => {
                let mut dec = RangeDecoder::new(&bitstream.payloads[0])?;
                let tables = LatentTables::new(&cdf, quantizer, DitherStream::Latent);
                for i in 0..c * plane {
                    symbols.push(tables.get(i / plane % c, i).decode(&mut dec)?);
                }
                finish(&dec, &bitstream.payloads[0])?;
            }
            Some(hy) => {
                let (zc, zh, zw) = (self.config.hyper_channels, h / 2, w / 2);
                let mut hdec = RangeDecoder::new(&bitstream.payloads[1])?;
                let tables = LatentTables::new(&cdf, quantizer, DitherStream::Hyper);
                let mut z_symbols = Vec::with_capacity(zc * zh * zw);
                for i in 0..zc * zh * zw {
                    z_symbols.push(tables.get(i / (zh * zw) % zc, i).decode(&mut hdec)?);
                }
                finish(&hdec, &bitstream.payloads[1])?;
                let z_hat = Tensor::new(&[1, zc, zh, zw], quantizer.reconstruct(&z_symbols, DitherStream::Hyper))?;
                let (mu, sigma) = self.hyper_params(hy, &z_hat, &mh_inv)?;
                let mut dec = RangeDecoder::new(&bitstream.payloads[0])?;
                for i in 0..c * plane {
                    let t = self
                        .gaussian
                        .table(mu[i], sigma[i], quantizer.offset(DitherStream::Latent, i));
                    symbols.push(t.decode(&mut dec)?);
                }
                finish(&dec, &bitstream.payloads[0])?;
            }
        }
        let latent = quantizer.reconstruct(&symbols, DitherStream::Latent);
        let image = self.synthesize(&latent, &m_inv, height, width)?;
        Ok(Decoded { image, latent })
    }

    /// Runs the synthesis side on a dequantized latent `ŷ` (gained domain,
    /// `c × ⌈H/stride⌉·stride/8 × ⌈W/stride⌉·stride/8` values).
    pub fn reconstruct(&self, latent: &[f64], sel: RateSelector, width: usize, height: usize) -> Result<Image> {
        let [(_, m_inv), _] = self.coding_gains(sel.snapped())?;
        self.synthesize(latent, &m_inv, height, width)
    }

    fn synthesize(&self, latent: &[f64], m_inv: &[f64], height: usize, width: usize) -> Result<Image> {
        let stride = self.config.total_stride();
        let (h, w) = (height.div_ceil(stride) * stride / 8, width.div_ceil(stride) * stride / 8);
        let y_hat = Tensor::new(&[1, self.config.channels, h, w], latent.to_vec())?;
        let x_hat = self.run(&self.decoder, scale_channels(&y_hat, m_inv)?)?;
        Image::from_tensor(&crop(&x_hat, height, width)?)
    }
}

fn finish(dec: &RangeDecoder<'_>, payload: &[u8]) -> Result<()> {
    if dec.position() != payload.len() {
        return Err(Error::Corrupt(format!(
            "{} unused payload bytes",
            payload.len() - dec.position()
        )));
    }
    Ok(())
}

/// Per-channel tables, specialized per element when dithering shifts the
/// bins.
struct LatentTables<'a> {
    cdf: &'a FactorizedCdf,
    base: Vec<FreqTable>,
    quantizer: Quantizer,
    stream: DitherStream,
}

enum TableRef<'a> {
    Shared(&'a FreqTable),
    Owned(FreqTable),
}

impl std::ops::Deref for TableRef<'_> {
    type Target = FreqTable;
    fn deref(&self) -> &FreqTable {
        match self {
            TableRef::Shared(t) => t,
            TableRef::Owned(t) => t,
        }
    }
}

impl<'a> LatentTables<'a> {
    fn new(cdf: &'a FactorizedCdf, quantizer: Quantizer, stream: DitherStream) -> Self {
        Self {
            cdf,
            base: cdf.tables(),
            quantizer,
            stream,
        }
    }

    fn get(&self, channel: usize, index: usize) -> TableRef<'_> {
        match self.quantizer.mode {
            QuantizerMode::Universal => {
                let d = self.quantizer.offset(self.stream, index);
                TableRef::Owned(self.cdf.offset_table(channel, d, &self.base[channel]))
            }
            _ => TableRef::Shared(&self.base[channel]),
        }
    }
}

fn scale_channels(t: &Tensor, m: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    if m.len() != c {
        return Err(Error::shape("gain", format!("{c} channels, {} gains", m.len())));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(t.shape(), |i| t.data()[i] * m[i / plane % c]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> CodecConfig {
        CodecConfig {
            channels: 4,
            hidden: 4,
            hyper_channels: 3,
            lagrange: vec![0.05, 0.007, 0.001],
            ..CodecConfig::toy(variant)
        }
    }

    fn test_image(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y, c| ((x * 9 + y * 5 + c * 70) % 256) as u8)
    }

    #[test]
    fn overhead_arithmetic() {
        assert_eq!(gain_overhead(192, 6, 16, 16), (2304, 98304));
        let o = Overhead::new(2304, 98304, Some(5_120_000), None);
        assert!((o.params_percent.unwrap() - 0.045).abs() < 5e-4);
        let cfg = CodecConfig::toy(Variant::Hcvr);
        let o = Overhead::of(&cfg, 64, 64, None, None);
        assert_eq!(o.params, 32 * 6 * 2 + 16 * 6 * 2);
        assert_eq!(o.flops, 32 * 8 * 8 * 2 + 16 * 4 * 4 * 2);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::Cvr);
        c.lagrange = vec![0.01, 0.05];
        assert!(c.validate().is_err());
        c.lagrange = vec![];
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::Cvr);
        c.quantizer = QuantizerMode::Noise;
        assert!(matches!(c.validate(), Err(Error::NoiseAtInference)));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        for v in [Variant::Cvr, Variant::Hcvr] {
            let m = Model::new(tiny(v), 3).unwrap();
            let ck = m.to_checkpoint().unwrap();
            assert!(ck.get("gain.M").is_some() && ck.get("gain.Minv").is_some());
            assert_eq!(ck.get("hyper_gain.M").is_some(), v == Variant::Hcvr);
            let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
            assert_eq!(back.store(), m.store());
            assert_eq!(back.config(), m.config());
            assert_eq!(back.checksum(), m.checksum());
        }
    }

    #[test]
    fn codec_roundtrip_each_variant_and_quantizer() {
        let img = test_image(21, 13);
        for v in [Variant::Cvr, Variant::Hcvr] {
            let m = Model::new(tiny(v), 4).unwrap();
            for mode in [QuantizerMode::Round, QuantizerMode::Universal] {
                let sel = RateSelector::new(1, 0.3, false).unwrap();
                let enc = m.encode_image(&img, sel, Quantizer::new(mode, 77)).unwrap();
                let bytes = enc.bitstream.pack().unwrap();
                let dec = m.decode(&Bitstream::unpack(&bytes).unwrap()).unwrap();
                assert_eq!(dec.latent, enc.latent, "{v:?} {mode:?}");
                assert_eq!((dec.image.width(), dec.image.height()), (21, 13));
                let again = m.decode(&enc.bitstream).unwrap();
                assert_eq!(again, dec);
                let payload_bits = enc.bpp * 21.0 * 13.0;
                let slack = 32.0 * enc.bitstream.payloads.len() as f64;
                assert!(payload_bits <= enc.estimated_bits * 1.005 + slack, "{payload_bits} vs {}", enc.estimated_bits);
            }
        }
    }

    #[test]
    fn wrong_model_is_a_checksum_error() {
        let img = test_image(8, 8);
        let a = Model::new(tiny(Variant::Cvr), 1).unwrap();
        let b = Model::new(tiny(Variant::Cvr), 2).unwrap();
        let enc = a.encode_image(&img, RateSelector { s: 0, l: 0.0 }, Quantizer::new(QuantizerMode::Round, 0)).unwrap();
        assert!(matches!(b.decode(&enc.bitstream), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let img = test_image(16, 16);
        let m = Model::new(tiny(Variant::Hcvr), 5).unwrap();
        let mut enc = m.encode_image(&img, RateSelector { s: 2 - 1, l: 1.0 }, Quantizer::new(QuantizerMode::Round, 0)).unwrap();
        let p = &mut enc.bitstream.payloads[0];
        p.truncate(p.len() - 1);
        assert!(m.decode(&enc.bitstream).is_err());
    }

    #[test]
    fn identity_gains_match_base_model() {
        let cvr = Model::new(tiny(Variant::Cvr), 9).unwrap();
        let base = Model::new(
            CodecConfig {
                gains: false,
                ..tiny(Variant::Cvr)
            },
            9,
        )
        .unwrap();
        let x = test_image(16, 8).to_tensor();
        for s in 0..3 {
            assert_eq!(cvr.evaluate(&x, s).unwrap(), base.evaluate(&x, s).unwrap());
        }
    }

    #[test]
    fn zero_beta_leaves_only_rate() {
        let m = Model::new(
            CodecConfig {
                lagrange: vec![0.0],
                ..tiny(Variant::Cvr)
            },
            1,
        )
        .unwrap();
        let mut tape = Tape::new();
        let b = m.store().bind(&mut tape);
        let x = tape.constant(test_image(8, 8).to_tensor());
        let f = m.forward(&mut tape, &b, x, 0, &mut Relaxation::Round).unwrap();
        assert_eq!(tape.value(f.loss).item(), f.bpp);
    }

    #[test]
    fn rate_index_out_of_range() {
        let m = Model::new(tiny(Variant::Cvr), 1).unwrap();
        let x = test_image(8, 8).to_tensor();
        assert!(matches!(m.evaluate(&x, 3), Err(Error::Index { index: 3, len: 3 })));
    }
}
