//! Integer frequency tables for the range coder.
//!
//! A table covers a contiguous window `[lo, hi]` of the coding alphabet
//! `[-255, 255]` plus one escape symbol. Values outside the window are coded
//! as the escape followed by a flat 9-bit literal. Frequencies sum to
//! `2^PRECISION` and every entry is at least 1.

use crate::coder::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
pub const SYMBOL_MIN: i32 = -255;
pub const SYMBOL_MAX: i32 = 255;
/// Symbols whose probability falls below this are left to the escape path.
const WINDOW_THRESHOLD: f64 = 1.0 / (1u64 << 18) as f64;
const LITERAL_BITS: u32 = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    lo: i32,
    /// One entry per window symbol, escape last.
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

/// Clamps a value into the coding alphabet.
pub fn clamp_symbol(v: i32) -> i32 {
    v.clamp(SYMBOL_MIN, SYMBOL_MAX)
}

impl FreqTable {
    /// Quantizes `pmf` over `[lo, lo + pmf.len())` plus `escape_mass`.
    pub fn from_pmf(lo: i32, pmf: &[f64], escape_mass: f64) -> Self {
        assert!(!pmf.is_empty() && pmf.len() < TOTAL as usize / 2);
        let mut freqs: Vec<i64> = pmf
            .iter()
            .chain(std::iter::once(&escape_mass))
            .map(|&p| ((p.max(0.0) * TOTAL as f64).round() as i64).max(1))
            .collect();
        let mut diff = TOTAL as i64 - freqs.iter().sum::<i64>();
        while diff != 0 {
            let (imax, &fmax) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            let delta = if diff > 0 { diff } else { diff.max(1 - fmax) };
            freqs[imax] += delta;
            diff -= delta;
        }
        let freqs: Vec<u32> = freqs.into_iter().map(|f| f as u32).collect();
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0);
        for f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        Self { lo, freqs, cum }
    }

    /// Builds a table from a bin-probability function, searching
    /// `[search_lo, search_hi]` (clamped to the alphabet) for the window.
    pub fn from_likelihood(search_lo: i32, search_hi: i32, p: impl Fn(i32) -> f64) -> Self {
        let a = clamp_symbol(search_lo.min(search_hi));
        let b = clamp_symbol(search_hi.max(search_lo));
        let probs: Vec<f64> = (a..=b).map(&p).collect();
        let first = probs.iter().position(|&q| q >= WINDOW_THRESHOLD);
        let last = probs.iter().rposition(|&q| q >= WINDOW_THRESHOLD);
        let (i0, i1) = match (first, last) {
            (Some(i0), Some(i1)) => (i0, i1),
            _ => {
                let m = probs
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                (m, m)
            }
        };
        let window = &probs[i0..=i1];
        let escape = (1.0 - window.iter().sum::<f64>()).max(0.0);
        Self::from_pmf(a + i0 as i32, window, escape)
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.freqs.len() as i32 - 2
    }

    pub fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Coded probability of `v` (including the literal cost for escapes).
    pub fn probability(&self, v: i32) -> f64 {
        let v = clamp_symbol(v);
        if (self.lo..=self.hi()).contains(&v) {
            self.freqs[(v - self.lo) as usize] as f64 / TOTAL as f64
        } else {
            self.freqs[self.escape_index()] as f64 / TOTAL as f64 / (1u32 << LITERAL_BITS) as f64
        }
    }

    /// Ideal code length of `v` in bits under this table.
    pub fn cost(&self, v: i32) -> f64 {
        -self.probability(v).log2()
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i32) {
        let v = clamp_symbol(v);
        if (self.lo..=self.hi()).contains(&v) {
            let i = (v - self.lo) as usize;
            enc.encode(self.cum[i], self.freqs[i], PRECISION);
        } else {
            let e = self.escape_index();
            enc.encode(self.cum[e], self.freqs[e], PRECISION);
            enc.encode((v - SYMBOL_MIN) as u32, 1, LITERAL_BITS);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i32> {
        let target = dec.peek(PRECISION)?;
        // Last index whose cumulative start is <= target.
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        dec.consume(self.cum[i], self.freqs[i])?;
        if i < self.escape_index() {
            return Ok(self.lo + i as i32);
        }
        let lit = dec.peek(LITERAL_BITS)?;
        dec.consume(lit, 1)?;
        let v = SYMBOL_MIN + lit as i32;
        if v > SYMBOL_MAX {
            return Err(Error::Corrupt(format!("escape literal {lit} out of range")));
        }
        Ok(v)
    }
}
