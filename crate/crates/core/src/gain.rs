//! Channel-wise gain units and their continuous interpolation.
//!
//! A gain matrix `M` (c×n) holds one positive gain vector per rate index `s`;
//! the inverse-gain matrix `M'` holds the matching rescaling vectors. Picking
//! column `s` of both gives one operating point. For any `l ∈ [0, 1]`,
//!
//! ```text
//! m_v  = m_{s+1}^l  · m_s^(1-l)
//! m'_v = m'_{s+1}^l · m'_s^(1-l)
//! ```
//!
//! lands between the neighbouring points. When every column pair has the
//! same elementwise product `C`, the interpolated pair keeps that product.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Steps of the interpolation coefficient carried in a bitstream.
pub const L_STEPS: f64 = 1024.0;
/// Interpolated gains are rounded to this absolute grid before use.
pub const GAIN_GRID: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct GainUnitPair {
    channels: usize,
    vectors: usize,
    /// Row-major `channels × vectors`.
    gain: Vec<f64>,
    inverse: Vec<f64>,
    lagrange: Vec<f64>,
}

impl GainUnitPair {
    pub fn new(channels: usize, gain: Vec<f64>, inverse: Vec<f64>, lagrange: Vec<f64>) -> Result<Self> {
        let vectors = lagrange.len();
        if vectors == 0 || channels == 0 {
            return Err(Error::InvalidArgument("empty gain matrix".into()));
        }
        for (name, m) in [("gain", &gain), ("inverse gain", &inverse)] {
            if m.len() != channels * vectors {
                return Err(Error::shape(
                    "gain matrix",
                    format!("{name} has {} entries, expected {channels}×{vectors}", m.len()),
                ));
            }
            if let Some(v) = m.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::Domain(format!("{name} entry {v} is not a positive real")));
            }
        }
        if lagrange.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "Lagrange set must be strictly decreasing, got {lagrange:?}"
            )));
        }
        Ok(Self {
            channels,
            vectors,
            gain,
            inverse,
            lagrange,
        })
    }

    /// All-ones matrices: the codec behaves exactly as without gain units.
    pub fn identity(channels: usize, lagrange: Vec<f64>) -> Result<Self> {
        let n = lagrange.len();
        Self::new(channels, vec![1.0; channels * n], vec![1.0; channels * n], lagrange)
    }

    /// Builds `M' = C / M` so every column pair has elementwise product `C`.
    pub fn with_product(channels: usize, gain: Vec<f64>, product: &[f64], lagrange: Vec<f64>) -> Result<Self> {
        let n = lagrange.len();
        if product.len() != channels || gain.len() != channels * n {
            return Err(Error::shape("with_product", "product/gain length"));
        }
        let inverse = gain
            .iter()
            .enumerate()
            .map(|(k, g)| product[k / n] / g)
            .collect();
        Self::new(channels, gain, inverse, lagrange)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vectors(&self) -> usize {
        self.vectors
    }

    pub fn lagrange(&self) -> &[f64] {
        &self.lagrange
    }

    pub fn gain_matrix(&self) -> &[f64] {
        &self.gain
    }

    pub fn inverse_matrix(&self) -> &[f64] {
        &self.inverse
    }

    fn col(m: &[f64], rows: usize, cols: usize, s: usize) -> Vec<f64> {
        (0..rows).map(|i| m[i * cols + s]).collect()
    }

    /// Stored gain and inverse-gain vectors for rate index `s`.
    pub fn column(&self, s: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if s >= self.vectors {
            return Err(Error::Index {
                index: s,
                len: self.vectors,
            });
        }
        Ok((
            Self::col(&self.gain, self.channels, self.vectors, s),
            Self::col(&self.inverse, self.channels, self.vectors, s),
        ))
    }

    /// Geometric interpolation between columns `s` (l=0) and `s+1` (l=1).
    pub fn interpolate(&self, sel: RateSelector) -> Result<(Vec<f64>, Vec<f64>)> {
        if sel.s + 1 >= self.vectors {
            return Err(Error::Index {
                index: sel.s + 1,
                len: self.vectors,
            });
        }
        let (mt, mt_inv) = self.column(sel.s)?;
        let (mr, mr_inv) = self.column(sel.s + 1)?;
        let l = sel.l;
        if l == 0.0 {
            return Ok((mt, mt_inv));
        }
        if l == 1.0 {
            return Ok((mr, mr_inv));
        }
        // t·(r/t)^l equals r^l·t^(1−l) but rounds once fewer, so geometric
        // means of exact powers (2 and 8 → 4) come out exact.
        let blend = |r: &[f64], t: &[f64]| -> Vec<f64> {
            r.iter()
                .zip(t)
                .map(|(&r, &t)| t * libm::pow(r / t, l))
                .collect()
        };
        Ok((blend(&mr, &mt), blend(&mr_inv, &mt_inv)))
    }

    /// The vectors the codec actually applies: `l` snapped to 1/1024 steps,
    /// interpolated, then rounded to the 1e-9 grid. Encoder and decoder both
    /// go through here.
    pub fn coding_vectors(&self, sel: RateSelector) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.vectors == 1 {
            if sel.s != 0 || sel.l != 0.0 {
                return Err(Error::Index { index: sel.s, len: 1 });
            }
            return self.column(0).map(|(m, mi)| (snap_vec(m), snap_vec(mi)));
        }
        let (m, mi) = self.interpolate(sel.snapped())?;
        Ok((snap_vec(m), snap_vec(mi)))
    }

    /// Per channel, the largest relative deviation of `α_s·δ_s` from its
    /// median over `s`. Zero when the product constraint holds exactly.
    pub fn product_constancy_report(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|i| {
                let mut prods: Vec<f64> = (0..self.vectors)
                    .map(|s| self.gain[i * self.vectors + s] * self.inverse[i * self.vectors + s])
                    .collect();
                let raw = prods.clone();
                prods.sort_by(f64::total_cmp);
                let k = prods.len();
                let median = if k % 2 == 1 {
                    prods[k / 2]
                } else {
                    0.5 * (prods[k / 2 - 1] + prods[k / 2])
                };
                raw.iter()
                    .map(|p| (p - median).abs() / median)
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

fn snap_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| (x * GAIN_GRID).round() / GAIN_GRID).collect()
}

/// Interval index `s` plus interpolation coefficient `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSelector {
    pub s: usize,
    pub l: f64,
}

impl RateSelector {
    pub fn new(s: usize, l: f64, extrapolate: bool) -> Result<Self> {
        if !l.is_finite() || (!extrapolate && !(0.0..=1.0).contains(&l)) {
            return Err(Error::InvalidArgument(format!(
                "interpolation coefficient {l} outside [0, 1]"
            )));
        }
        Ok(Self { s, l })
    }

    /// Maps a global rate knob `q ∈ [0, n−1]` to `(floor q, frac q)`, with
    /// `q = n−1` landing on `(n−2, 1)`. With `extrapolate`, `q` outside that
    /// range extends the first or last interval.
    pub fn from_q(q: f64, vectors: usize, extrapolate: bool) -> Result<Self> {
        if vectors == 0 || !q.is_finite() {
            return Err(Error::InvalidArgument(format!("rate knob {q}")));
        }
        let top = (vectors - 1) as f64;
        if !extrapolate && !(0.0..=top).contains(&q) {
            return Err(Error::InvalidArgument(format!(
                "rate knob {q} outside [0, {top}]"
            )));
        }
        if vectors == 1 {
            return Ok(Self { s: 0, l: 0.0 });
        }
        let s = (q.floor().max(0.0) as usize).min(vectors - 2);
        Ok(Self { s, l: q - s as f64 })
    }

    /// Position on the global knob.
    pub fn q(&self) -> f64 {
        self.s as f64 + self.l
    }

    /// `l` rounded to the 1/1024 grid used in bitstreams.
    pub fn snapped(&self) -> Self {
        Self {
            s: self.s,
            l: (self.l * L_STEPS).round() / L_STEPS,
        }
    }
}

/// `ȳ_(i) = y_(i) · α_(i)` for every channel.
pub fn gain(tape: &mut Tape, y: Var, m: Var) -> Result<Var> {
    tape.channel_scale(y, m)
}

/// `y'_(i) = ŷ_(i) · δ_(i)` for every channel.
pub fn inverse_gain(tape: &mut Tape, y_hat: Var, m_inv: Var) -> Result<Var> {
    tape.channel_scale(y_hat, m_inv)
}

/// How the inverse-gain matrix relates to the gain matrix during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GainMode {
    /// `M' = C / M` with a learnable per-channel `C`; the product is exact.
    Hard,
    /// Independent `M'`, with `penalty · Σ_i Var_s(α_s(i)·δ_s(i))` added to the loss.
    Soft { penalty: f64 },
}

impl Default for GainMode {
    fn default() -> Self {
        GainMode::Hard
    }
}

/// Trainable log-domain gain parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GainParams {
    pub mode: GainMode,
    channels: usize,
    vectors: usize,
    log_gain: ParamId,
    /// `log C` (length c) in hard mode, `log M'` (c×n) in soft mode.
    log_other: ParamId,
}

impl GainParams {
    /// All columns start at 1 (log 0).
    pub fn build(prefix: &str, channels: usize, vectors: usize, mode: GainMode, store: &mut ParamStore) -> Self {
        let log_gain = store.add(format!("{prefix}.logM"), Tensor::zeros(&[channels, vectors]));
        let log_other = match mode {
            GainMode::Hard => store.add(format!("{prefix}.logC"), Tensor::zeros(&[channels])),
            GainMode::Soft { .. } => {
                store.add(format!("{prefix}.logMinv"), Tensor::zeros(&[channels, vectors]))
            }
        };
        Self {
            mode,
            channels,
            vectors,
            log_gain,
            log_other,
        }
    }

    /// Re-attaches to parameters already present in a store.
    pub fn attach(prefix: &str, channels: usize, vectors: usize, mode: GainMode, store: &ParamStore) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let log_gain = find(format!("{prefix}.logM"))?;
        let log_other = match mode {
            GainMode::Hard => find(format!("{prefix}.logC"))?,
            GainMode::Soft { .. } => find(format!("{prefix}.logMinv"))?,
        };
        Ok(Self {
            mode,
            channels,
            vectors,
            log_gain,
            log_other,
        })
    }

    pub fn vectors(&self) -> usize {
        self.vectors
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.log_gain, self.log_other]
    }

    /// Differentiable `(m_s, m'_s)`.
    pub fn vectors_at(&self, tape: &mut Tape, bound: &Bound, s: usize) -> Result<(Var, Var)> {
        if s >= self.vectors {
            return Err(Error::Index {
                index: s,
                len: self.vectors,
            });
        }
        let log_m = tape.column(bound.var(self.log_gain), s)?;
        let m = tape.exp(log_m);
        let log_inv = match self.mode {
            GainMode::Hard => tape.sub(bound.var(self.log_other), log_m)?,
            GainMode::Soft { .. } => tape.column(bound.var(self.log_other), s)?,
        };
        let m_inv = tape.exp(log_inv);
        Ok((m, m_inv))
    }

    /// Soft-mode product penalty; `None` in hard mode.
    pub fn penalty(&self, tape: &mut Tape, bound: &Bound) -> Result<Option<Var>> {
        let GainMode::Soft { penalty } = self.mode else {
            return Ok(None);
        };
        let log_prod = tape.add(bound.var(self.log_gain), bound.var(self.log_other))?;
        let prod = tape.exp(log_prod);
        let var = tape.row_variance_sum(prod)?;
        Ok(Some(tape.scale(var, penalty)))
    }

    /// Materialized positive matrices.
    pub fn pair(&self, store: &ParamStore, lagrange: &[f64]) -> Result<GainUnitPair> {
        let (c, n) = (self.channels, self.vectors);
        let log_m = store.tensor(self.log_gain).data();
        let gain: Vec<f64> = log_m.iter().map(|v| v.exp()).collect();
        let other = store.tensor(self.log_other).data();
        let inverse = match self.mode {
            GainMode::Hard => (0..c * n).map(|k| (other[k / n] - log_m[k]).exp()).collect(),
            GainMode::Soft { .. } => other.iter().map(|v| v.exp()).collect(),
        };
        GainUnitPair::new(c, gain, inverse, lagrange.to_vec())
    }
}
