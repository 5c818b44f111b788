//! Scalar quantizers: hard rounding, the additive-noise training proxy, and
//! universal (subtractive-dither) quantization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerMode {
    #[default]
    Round,
    Noise,
    Universal,
}

impl QuantizerMode {
    pub fn code(self) -> u8 {
        match self {
            QuantizerMode::Round => 0,
            QuantizerMode::Noise => 1,
            QuantizerMode::Universal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QuantizerMode::Round),
            1 => Some(QuantizerMode::Noise),
            2 => Some(QuantizerMode::Universal),
            _ => None,
        }
    }
}

impl std::str::FromStr for QuantizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round" => Ok(QuantizerMode::Round),
            "noise" => Ok(QuantizerMode::Noise),
            "universal" => Ok(QuantizerMode::Universal),
            other => Err(Error::InvalidArgument(format!("unknown quantizer `{other}`"))),
        }
    }
}

/// Which latent a dither sequence belongs to, so the main and hyper latents
/// never share dither values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DitherStream {
    Latent,
    Hyper,
}

impl DitherStream {
    fn tag(self) -> u64 {
        match self {
            DitherStream::Latent => 0x6c61_7465_6e74,
            DitherStream::Hyper => 0x6879_7065_72,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dither value in `[-0.5, 0.5)` for one element, a pure function of
/// `(seed, stream, index)`.
pub fn dither(seed: u64, stream: DitherStream, index: usize) -> f64 {
    let key = mix64(seed ^ mix64(stream.tag()));
    let bits = mix64(key.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64) - 0.5
}

/// Nearest integer, ties away from zero.
pub fn round(x: f64) -> f64 {
    x.round()
}

/// iid `U(-0.5, 0.5)` noise for the training relaxation.
pub fn uniform_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// `round(x + d) − d` with an explicit dither source.
pub fn universal_with(x: &[f64], dither: impl Fn(usize) -> f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = dither(i);
            round(v + d) - d
        })
        .collect()
}

/// Quantizer configuration as carried by a codec and its bitstreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantizer {
    pub mode: QuantizerMode,
    pub dither_seed: u64,
}

impl Quantizer {
    pub fn new(mode: QuantizerMode, dither_seed: u64) -> Self {
        Self { mode, dither_seed }
    }

    /// Inference-time quantization; noise mode is rejected.
    pub fn quantize(&self, x: &[f64], stream: DitherStream) -> Result<Vec<f64>> {
        match self.mode {
            QuantizerMode::Round => Ok(x.iter().map(|&v| round(v)).collect()),
            QuantizerMode::Noise => Err(Error::NoiseAtInference),
            QuantizerMode::Universal => Ok(universal_with(x, |i| dither(self.dither_seed, stream, i))),
        }
    }

    /// Training-time quantization (any mode).
    pub fn quantize_train(&self, x: &[f64], stream: DitherStream, rng: &mut impl Rng) -> Vec<f64> {
        match self.mode {
            QuantizerMode::Noise => x.iter().zip(uniform_noise(x.len(), rng)).map(|(a, u)| a + u).collect(),
            _ => self.quantize(x, stream).expect("non-noise modes are total"),
        }
    }

    /// Integer symbols to entropy-code: `round(x + d)` (d = 0 for rounding).
    pub fn symbols(&self, x: &[f64], stream: DitherStream) -> Result<Vec<i32>> {
        match self.mode {
            QuantizerMode::Noise => Err(Error::NoiseAtInference),
            _ => Ok(x
                .iter()
                .enumerate()
                .map(|(i, &v)| round(v + self.offset(stream, i)) as i32)
                .collect()),
        }
    }

    /// Dequantized values `k − d` from coded symbols.
    pub fn reconstruct(&self, symbols: &[i32], stream: DitherStream) -> Vec<f64> {
        symbols
            .iter()
            .enumerate()
            .map(|(i, &k)| k as f64 - self.offset(stream, i))
            .collect()
    }

    /// Dither subtracted from element `i` (0 outside universal mode).
    pub fn offset(&self, stream: DitherStream, i: usize) -> f64 {
        match self.mode {
            QuantizerMode::Universal => dither(self.dither_seed, stream, i),
            _ => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_convention() {
        assert_eq!(round(1.4), 1.0);
        assert_eq!(round(-0.5), -1.0);
        assert_eq!(round(0.5), 1.0);
        assert_eq!(round(2.5), 3.0);
    }

    #[test]
    fn zero_dither_is_rounding() {
        let x = [-2.5, -0.49, 0.0, 0.5, 1.7, 3.2];
        let q = Quantizer::new(QuantizerMode::Round, 0);
        assert_eq!(universal_with(&x, |_| 0.0), q.quantize(&x, DitherStream::Latent).unwrap());
    }

    #[test]
    fn noise_rejected_at_inference() {
        let q = Quantizer::new(QuantizerMode::Noise, 0);
        assert!(matches!(q.quantize(&[1.0], DitherStream::Latent), Err(Error::NoiseAtInference)));
        assert!(q.symbols(&[1.0], DitherStream::Latent).is_err());
    }

    #[test]
    fn noise_moments_match_unit_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q = Quantizer::new(QuantizerMode::Noise, 0);
        let n = 1_000_000;
        let x: Vec<f64> = (0..n).map(|i| (i % 17) as f64 * 0.3 - 2.0).collect();
        let y = q.quantize_train(&x, DitherStream::Latent, &mut rng);
        let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.001, "variance {var}");
    }

    #[test]
    fn dither_is_reproducible_and_stream_separated() {
        let a: Vec<f64> = (0..100).map(|i| dither(7, DitherStream::Latent, i)).collect();
        let b: Vec<f64> = (0..100).map(|i| dither(7, DitherStream::Latent, i)).collect();
        let c: Vec<f64> = (0..100).map(|i| dither(7, DitherStream::Hyper, i)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|d| (-0.5..0.5).contains(d)));
    }

    #[test]
    fn symbols_reconstruct_to_quantized_values() {
        let q = Quantizer::new(QuantizerMode::Universal, 1234);
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.77).sin() * 9.0).collect();
        let k = q.symbols(&x, DitherStream::Hyper).unwrap();
        assert_eq!(q.reconstruct(&k, DitherStream::Hyper), q.quantize(&x, DitherStream::Hyper).unwrap());
    }

    proptest! {
        #[test]
        fn universal_error_is_bounded(seed in any::<u64>(), xs in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let q = Quantizer::new(QuantizerMode::Universal, seed);
            let y = q.quantize(&xs, DitherStream::Latent).unwrap();
            for (a, b) in y.iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 0.5 + 1e-12);
            }
        }
    }
}
