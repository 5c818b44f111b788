//! Entropy models: a learned per-channel factorized prior and a conditional
//! Gaussian, both giving differentiable bit estimates and integer coding
//! tables.

pub mod factorized;
pub mod gaussian;
pub mod tables;

pub use factorized::FactorizedModel;
pub use gaussian::{GaussianConditional, ScaleTable};
pub use tables::FreqTable;

/// Smallest likelihood charged per element (2^-30).
pub const LIKELIHOOD_FLOOR: f64 = 9.313_225_746_154_785e-10;

/// Probability mass of one quantization bin.
pub trait Likelihood {
    fn channels(&self) -> usize;
    /// `P(value − 0.5 < Y ≤ value + 0.5)` for channel `channel`.
    fn likelihood(&self, channel: usize, value: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateReport {
    pub bits: f64,
    /// Elements whose likelihood was clamped to the floor.
    pub floored: usize,
}

/// `−log2(max(p, floor))`, reporting whether the floor was hit.
pub fn bits_of(p: f64) -> (f64, bool) {
    if p > LIKELIHOOD_FLOOR {
        (-p.log2(), false)
    } else {
        (-LIKELIHOOD_FLOOR.log2(), true)
    }
}

/// Total bits of an `N,C,H,W` tensor of (quantized) values under a
/// per-channel model.
pub fn rate_with(model: &impl Likelihood, values: &crate::Tensor) -> crate::Result<RateReport> {
    let (n, c, h, w) = values.dims4()?;
    if c != model.channels() {
        return Err(crate::Error::shape(
            "rate",
            format!("model has {} channels, tensor has {c}", model.channels()),
        ));
    }
    let plane = h * w;
    let mut report = RateReport::default();
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for &v in &values.data()[o..o + plane] {
                let (bits, floored) = bits_of(model.likelihood(ch, v));
                report.bits += bits;
                report.floored += floored as usize;
            }
        }
    }
    if report.floored > 0 {
        log::debug!("rate: {} elements hit the likelihood floor", report.floored);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    struct Uniform3;

    impl Likelihood for Uniform3 {
        fn channels(&self) -> usize {
            1
        }
        fn likelihood(&self, _: usize, value: f64) -> f64 {
            if (-1.0..=1.0).contains(&value) {
                1.0 / 3.0
            } else {
                0.0
            }
        }
    }

    #[test]
    fn uniform_three_symbols() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 3) as f64 - 1.0);
        let r = rate_with(&Uniform3, &x).unwrap();
        assert!((r.bits - 9.0 * 3f64.log2()).abs() < 1e-9);
        assert!((r.bits - 14.265).abs() < 1e-3);
        assert_eq!(r.floored, 0);
    }

    #[test]
    fn out_of_support_hits_floor() {
        let x = Tensor::full(&[1, 1, 1, 2], 5.0);
        let r = rate_with(&Uniform3, &x).unwrap();
        assert_eq!(r.floored, 2);
        assert!((r.bits - 60.0).abs() < 1e-9);
    }
}
