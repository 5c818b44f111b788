//! 32-bit carry-less range coder (Subbotin style).
//!
//! Symbols are coded against cumulative frequencies whose total is a power
//! of two, at most `2^16`. Renormalization emits the top byte whenever it
//! is settled, or forcibly shrinks the range when it underflows `2^16`
//! while straddling a byte boundary, so no carry ever propagates into bytes
//! already written. The flush writes all four bytes of `low`, which means the
//! decoder consumes exactly the bytes the encoder produced and any truncation
//! surfaces as an error.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;
pub const MAX_PRECISION: u32 = 16;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^precision`.
    pub fn encode(&mut self, cum: u32, freq: u32, precision: u32) {
        debug_assert!(precision <= MAX_PRECISION);
        debug_assert!(freq > 0 && cum + freq <= 1 << precision);
        self.range >>= precision;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative-frequency target of the next symbol. Must be followed by
    /// exactly one [`RangeDecoder::consume`] with the same precision's table.
    pub fn peek(&mut self, precision: u32) -> Result<u32> {
        self.range >>= precision;
        if self.range == 0 {
            return Err(Error::Corrupt("range underflow".into()));
        }
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= 1 << precision {
            return Err(Error::Corrupt(format!("cumulative target {v} out of range")));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        if freq == 0 {
            return Err(Error::Corrupt("zero-frequency symbol".into()));
        }
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Per-symbol cumulative-frequency lookup with a power-of-two total.
pub trait PmfProvider {
    fn precision(&self, index: usize) -> u32;
    /// `(cum, freq)` of `symbol` at stream position `index`.
    fn interval(&self, index: usize, symbol: usize) -> (u32, u32);
    /// Symbol whose interval contains `target`.
    fn lookup(&self, index: usize, target: u32) -> usize;
}

/// Integer symbols plus the model that codes them.
pub struct SymbolStream<'a, P: PmfProvider> {
    pub symbols: &'a [usize],
    pub pmf: &'a P,
}

pub fn encode_stream<P: PmfProvider>(stream: &SymbolStream<'_, P>) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in stream.symbols.iter().enumerate() {
        let (cum, freq) = stream.pmf.interval(i, s);
        enc.encode(cum, freq, stream.pmf.precision(i));
    }
    enc.finish()
}

pub fn decode_stream<P: PmfProvider>(bytes: &[u8], count: usize, pmf: &P) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let target = dec.peek(pmf.precision(i))?;
        let s = pmf.lookup(i, target);
        let (cum, freq) = pmf.interval(i, s);
        dec.consume(cum, freq)?;
        out.push(s);
    }
    if dec.position() != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {count} symbols",
            bytes.len() - dec.position()
        )));
    }
    Ok(out)
}

/// Cumulative tables, one per stream position (or shared).
#[derive(Debug, Clone)]
pub struct CumulativeTables {
    precision: u32,
    /// `cum[t]` has one more entry than the table's alphabet.
    tables: Vec<Vec<u32>>,
    /// Table index used at each stream position.
    assignment: Vec<usize>,
}

impl CumulativeTables {
    /// `freqs` must each sum to `2^precision` with every entry ≥ 1.
    pub fn new(precision: u32, freqs: &[Vec<u32>], assignment: Vec<usize>) -> Result<Self> {
        if precision > MAX_PRECISION {
            return Err(Error::InvalidArgument(format!("precision {precision} > {MAX_PRECISION}")));
        }
        let mut tables = Vec::with_capacity(freqs.len());
        for f in freqs {
            if f.iter().any(|&x| x == 0) || f.iter().map(|&x| x as u64).sum::<u64>() != 1 << precision {
                return Err(Error::InvalidArgument("frequency table must be positive and sum to 2^precision".into()));
            }
            let mut cum = vec![0u32];
            for &x in f {
                cum.push(cum.last().unwrap() + x);
            }
            tables.push(cum);
        }
        if assignment.iter().any(|&a| a >= tables.len()) {
            return Err(Error::InvalidArgument("table assignment out of range".into()));
        }
        Ok(Self {
            precision,
            tables,
            assignment,
        })
    }

    /// Ideal code length of `symbols` in bits.
    pub fn ideal_bits(&self, symbols: &[usize]) -> f64 {
        symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (_, f) = self.interval(i, s);
                self.precision as f64 - (f as f64).log2()
            })
            .sum()
    }
}

impl PmfProvider for CumulativeTables {
    fn precision(&self, _: usize) -> u32 {
        self.precision
    }

    fn interval(&self, index: usize, symbol: usize) -> (u32, u32) {
        let cum = &self.tables[self.assignment[index]];
        (cum[symbol], cum[symbol + 1] - cum[symbol])
    }

    fn lookup(&self, index: usize, target: u32) -> usize {
        let cum = &self.tables[self.assignment[index]];
        cum.partition_point(|&c| c <= target) - 1
    }
}
