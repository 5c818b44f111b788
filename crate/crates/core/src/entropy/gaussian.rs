//! Conditional Gaussian entropy model used for the hyperprior path.
//!
//! Each element has its own mean and scale. The mass of a unit bin centred
//! on `v` is evaluated on the left tail, using `|v − μ|`, where the normal
//! cumulative keeps full relative precision.

use super::{bits_of, tables::FreqTable, LIKELIHOOD_FLOOR};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCALE_FLOOR: f64 = 0.01;
pub const SCALE_MAX: f64 = 256.0;
pub const SCALE_LEVELS: usize = 128;
/// Half-width of a coding window in units of σ.
const TAIL_SIGMAS: f64 = 7.0;

/// Standard normal cumulative.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * (0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2)
}

/// `P(v − ½ < Y ≤ v + ½)` for `Y ~ N(μ, σ²)`, given `a = |v − μ|`.
pub fn gaussian_mass(a: f64, sigma: f64) -> f64 {
    phi_cdf((0.5 - a) / sigma) - phi_cdf((-0.5 - a) / sigma)
}

/// Log-spaced scales from the floor to `SCALE_MAX`, used to quantize σ
/// before building coding tables so both sides pick identical tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTable {
    levels: Vec<f64>,
}

impl Default for ScaleTable {
    fn default() -> Self {
        Self::new(SCALE_FLOOR, SCALE_MAX, SCALE_LEVELS)
    }
}

impl ScaleTable {
    pub fn new(min: f64, max: f64, levels: usize) -> Self {
        assert!(levels >= 2 && min > 0.0 && max > min);
        let step = (max.ln() - min.ln()) / (levels - 1) as f64;
        let levels = (0..levels)
            .map(|i| ((min.ln() + step * i as f64).exp() * 1e9).round() / 1e9)
            .collect();
        Self { levels }
    }

    /// Uses explicit levels, which must be positive and strictly increasing.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 || levels[0] <= 0.0 || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("scale levels must be positive and increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Index of the smallest level ≥ `sigma` (the last level if none).
    pub fn index(&self, sigma: f64) -> usize {
        self.levels.partition_point(|&l| l < sigma).min(self.levels.len() - 1)
    }

    pub fn quantize(&self, sigma: f64) -> f64 {
        self.levels[self.index(sigma)]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianConditional {
    pub scales: ScaleTable,
}

impl GaussianConditional {
    pub fn new(scales: ScaleTable) -> Self {
        Self { scales }
    }

    /// Total bits of `y` given per-element `mu` and `sigma` (σ floored at
    /// 0.01; no gradient flows through the floor).
    pub fn bits(&self, tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        bits_op(tape, y, mu, sigma)
    }

    /// Bits of concrete values, with the number of floored elements.
    pub fn rate(&self, y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<(f64, usize)> {
        if y.len() != mu.len() || y.len() != sigma.len() {
            return Err(Error::shape("gaussian rate", format!("{} / {} / {}", y.len(), mu.len(), sigma.len())));
        }
        let mut total = 0.0;
        let mut floored = 0;
        for i in 0..y.len() {
            let (b, f) = bits_of(gaussian_mass((y[i] - mu[i]).abs(), sigma[i].max(SCALE_FLOOR)));
            total += b;
            floored += f as usize;
        }
        Ok((total, floored))
    }

    /// Coding table for one element: symbol `k` stands for the value
    /// `k − offset` (offset is the dither, 0 when rounding).
    pub fn table(&self, mu: f64, sigma: f64, offset: f64) -> FreqTable {
        let sq = self.scales.quantize(sigma.max(SCALE_FLOOR));
        let centre = (mu + offset).round() as i64;
        let radius = (TAIL_SIGMAS * sq).ceil() as i64 + 1;
        let lo = (centre - radius).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        let hi = (centre + radius).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        FreqTable::from_likelihood(lo, hi, |k| gaussian_mass((k as f64 - offset - mu).abs(), sq))
    }
}

fn bits_op(tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    for (name, v) in [("mean", mu), ("scale", sigma)] {
        if tape.shape(v) != tape.shape(y) {
            return Err(Error::shape(
                "gaussian rate",
                format!("{name} shape {:?} vs latent {:?}", tape.shape(v), tape.shape(y)),
            ));
        }
    }
    let (ys, ms, ss) = (tape.value(y).data(), tape.value(mu).data(), tape.value(sigma).data());
    let mut total = 0.0;
    let mut floored = 0usize;
    for i in 0..ys.len() {
        let (b, f) = bits_of(gaussian_mass((ys[i] - ms[i]).abs(), ss[i].max(SCALE_FLOOR)));
        total += b;
        floored += f as usize;
    }
    if floored > 0 {
        log::debug!("gaussian rate: {floored} elements at the likelihood floor");
    }
    Ok(tape.custom(
        &[y, mu, sigma],
        Tensor::scalar(total),
        Box::new(move |g, vals, grads| {
            let g = g[0];
            let (ys, ms, ss) = (vals[y.0].data(), vals[mu.0].data(), vals[sigma.0].data());
            let n = ys.len();
            let (mut gy, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let d = ys[i] - ms[i];
                let a = d.abs();
                let s = ss[i].max(SCALE_FLOOR);
                let (u1, u2) = ((0.5 - a) / s, (-0.5 - a) / s);
                let mass = phi_cdf(u1) - phi_cdf(u2);
                if mass <= LIKELIHOOD_FLOOR {
                    continue;
                }
                let d_mass = -g / (mass * std::f64::consts::LN_2);
                let (p1, p2) = (phi_pdf(u1), phi_pdf(u2));
                let d_a = (p2 - p1) / s;
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gy[i] = d_mass * d_a * sign;
                gm[i] = -gy[i];
                if ss[i] > SCALE_FLOOR {
                    gs[i] = d_mass * -(p1 * u1 - p2 * u2) / s;
                }
            }
            grads.add_vec(y, gy);
            grads.add_vec(mu, gm);
            grads.add_vec(sigma, gs);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;
    use crate::entropy::tables::TOTAL;

    /// Composite Simpson integral of the normal density over a bin.
    fn mass_by_quadrature(v: f64, mu: f64, sigma: f64) -> f64 {
        let n = 2000;
        let (a, b) = (v - 0.5, v + 0.5);
        let h = (b - a) / n as f64;
        let pdf = |x: f64| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn bits(y: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
        GaussianConditional::default().rate(y, mu, sigma).unwrap().0
    }

    #[test]
    fn unit_gaussian_at_zero() {
        let oracle = -mass_by_quadrature(0.0, 0.0, 1.0).log2();
        let b = bits(&[0.0], &[0.0], &[1.0]);
        assert!((b - oracle).abs() < 1e-9, "{b} vs {oracle}");
        // −log2(0.382925) evaluates to 1.38487, so the commonly quoted
        // 1.3852 only holds to about three decimals.
        assert!((b - 1.3852).abs() < 1e-3);
    }

    #[test]
    fn quadrature_agreement_off_centre() {
        for &(v, mu, s) in &[(3.0, 0.4, 2.5), (-7.0, -1.0, 4.0), (0.0, 0.3, 0.2)] {
            let oracle = -mass_by_quadrature(v, mu, s).log2();
            assert!((bits(&[v], &[mu], &[s]) - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn concentrated_gaussian_costs_nothing() {
        assert!(bits(&[0.0], &[0.0], &[0.0]) < 1e-12);
        assert!(bits(&[0.0], &[0.0], &[1e-6]) < 1e-12);
    }

    #[test]
    fn even_symmetry() {
        for &s in &[0.3, 1.0, 5.0] {
            assert_eq!(bits(&[3.0], &[0.0], &[s]), bits(&[-3.0], &[0.0], &[s]));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let y = Tensor::from_fn(&[7], |i| [0.0, 1.3, -2.2, 0.4, 5.0, -0.7, 2.0][i]);
        let mu = Tensor::from_fn(&[7], |i| [0.1, 0.2, -1.0, 0.4, 2.0, 0.3, -0.5][i]);
        let sigma = Tensor::from_fn(&[7], |i| [1.0, 0.6, 2.0, 0.3, 1.5, 3.0, 0.8][i]);
        let err = check(&[y, mu, sigma], 1e-6, |t, v| bits_op(t, v[0], v[1], v[2]).unwrap());
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn scale_table_is_log_spaced_and_conservative() {
        let t = ScaleTable::default();
        assert_eq!(t.levels().len(), SCALE_LEVELS);
        assert_eq!(t.levels()[0], SCALE_FLOOR);
        assert!((t.levels()[SCALE_LEVELS - 1] - SCALE_MAX).abs() < 1e-9);
        for &s in &[0.01, 0.05, 1.0, 3.3, 100.0] {
            assert!(t.quantize(s) >= s);
            assert!(t.quantize(s) / s < (SCALE_MAX / SCALE_FLOOR).powf(1.0 / 127.0) + 1e-9);
        }
        assert_eq!(t.quantize(1e6), t.levels()[SCALE_LEVELS - 1]);
    }

    #[test]
    fn coding_tables_are_valid_pmfs() {
        let gc = GaussianConditional::default();
        for &(mu, s, d) in &[(0.0, 1.0, 0.0), (3.7, 0.02, 0.0), (-20.0, 40.0, 0.3), (300.0, 1.0, -0.2)] {
            let t = gc.table(mu, s, d);
            assert_eq!(t.freqs().iter().sum::<u32>(), TOTAL);
            assert!(t.freqs().iter().all(|&f| f > 0));
            let mass: f64 = (-255..=255).map(|v| t.probability(v)).sum();
            assert!(mass <= 1.0 + 1e-6);
        }
    }
}
