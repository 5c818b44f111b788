//! The `GVC1` container.
//!
//! Byte layout, little-endian throughout:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `GVC1` |
//! | 4 | 2 | format version (`1`) |
//! | 6 | 8 | model checksum: first 8 bytes of SHA-256 over the checkpoint file |
//! | 14 | 1 | rate index `s` |
//! | 15 | 4 | interpolation coefficient `l` as `f32`, a multiple of 1/1024 |
//! | 19 | 1 | quantizer: 0 round, 2 universal |
//! | 20 | 1 | flags: bit 0 set when `l` lies outside `[0, 1]` (extrapolation) |
//! | 21 | 8 | dither seed |
//! | 29 | 4 | image width |
//! | 33 | 4 | image height |
//! | 37 | 1 | payload count `k` |
//! | 38 | 4·k | payload lengths |
//! | … | … | payloads, concatenated: latent first, then hyper latent if present |
//!
//! The total size must equal the header plus the declared payload lengths.

use crate::error::{Error, Result};
use crate::gain::{RateSelector, L_STEPS};
use crate::quant::QuantizerMode;

pub const MAGIC: [u8; 4] = *b"GVC1";
pub const VERSION: u16 = 1;
const FIXED_LEN: usize = 38;
const FLAG_EXTRAPOLATED: u8 = 1;
const MAX_PAYLOADS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub checksum: [u8; 8],
    pub selector: RateSelector,
    pub quantizer: QuantizerMode,
    pub dither_seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub payloads: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn pack(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let s = u8::try_from(h.selector.s)
            .map_err(|_| Error::InvalidArgument(format!("rate index {} does not fit a byte", h.selector.s)))?;
        let l = h.selector.snapped().l;
        if !l.is_finite() {
            return Err(Error::InvalidArgument("non-finite interpolation coefficient".into()));
        }
        if h.quantizer == QuantizerMode::Noise {
            return Err(Error::NoiseAtInference);
        }
        if self.payloads.len() > MAX_PAYLOADS {
            return Err(Error::InvalidArgument(format!("{} payloads", self.payloads.len())));
        }
        let flags = if (0.0..=1.0).contains(&l) { 0 } else { FLAG_EXTRAPOLATED };
        let mut out = Vec::with_capacity(FIXED_LEN + self.payloads.iter().map(|p| p.len() + 4).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.checksum);
        out.push(s);
        out.extend_from_slice(&(l as f32).to_le_bytes());
        out.push(h.quantizer.code());
        out.push(flags);
        out.extend_from_slice(&h.dither_seed.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(self.payloads.len() as u8);
        for p in &self.payloads {
            let len = u32::try_from(p.len()).map_err(|_| Error::InvalidArgument("payload too large".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
        }
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { expected: "GVC1" });
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let checksum: [u8; 8] = r.array()?;
        let s = r.take(1)?[0] as usize;
        let l = f32::from_le_bytes(r.array()?) as f64;
        let quantizer = match QuantizerMode::from_code(r.take(1)?[0]) {
            Some(q @ (QuantizerMode::Round | QuantizerMode::Universal)) => q,
            _ => return Err(Error::Corrupt("invalid quantizer mode".into())),
        };
        let flags = r.take(1)?[0];
        if flags & !FLAG_EXTRAPOLATED != 0 {
            return Err(Error::Corrupt(format!("unknown flags {flags:#04x}")));
        }
        let extrapolated = flags & FLAG_EXTRAPOLATED != 0;
        if !l.is_finite() || (l * L_STEPS).fract() != 0.0 || extrapolated == (0.0..=1.0).contains(&l) {
            return Err(Error::Corrupt(format!("invalid interpolation coefficient {l}")));
        }
        let selector = RateSelector::new(s, l, extrapolated)?;
        let dither_seed = u64::from_le_bytes(r.array()?);
        let width = u32::from_le_bytes(r.array()?);
        let height = u32::from_le_bytes(r.array()?);
        let count = r.take(1)?[0] as usize;
        if count > MAX_PAYLOADS {
            return Err(Error::Corrupt(format!("{count} payloads")));
        }
        let mut lens = Vec::with_capacity(count);
        for _ in 0..count {
            lens.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let declared: usize = lens.iter().sum();
        if bytes.len() - r.pos != declared {
            return Err(if bytes.len() - r.pos < declared {
                Error::Truncated
            } else {
                Error::Corrupt("trailing bytes after payloads".into())
            });
        }
        let payloads = lens.iter().map(|&n| r.take(n).map(<[u8]>::to_vec)).collect::<Result<_>>()?;
        Ok(Self {
            header: Header {
                checksum,
                selector,
                quantizer,
                dither_seed,
                width,
                height,
            },
            payloads,
        })
    }

    /// Errors unless the stream was produced with the model whose checksum
    /// is `expected`.
    pub fn verify_checksum(&self, expected: [u8; 8]) -> Result<()> {
        if self.header.checksum != expected {
            return Err(Error::ChecksumMismatch {
                expected: hex(&expected),
                found: hex(&self.header.checksum),
            });
        }
        Ok(())
    }

    pub fn len_bytes(&self) -> usize {
        FIXED_LEN + self.payloads.iter().map(|p| p.len() + 4).sum::<usize>()
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(s: usize, l: f64, payloads: Vec<Vec<u8>>) -> Bitstream {
        Bitstream {
            header: Header {
                checksum: [1, 2, 3, 4, 5, 6, 7, 8],
                selector: RateSelector { s, l },
                quantizer: QuantizerMode::Universal,
                dither_seed: 0xdead_beef_0123_4567,
                width: 64,
                height: 48,
            },
            payloads,
        }
    }

    #[test]
    fn minimal_roundtrip() {
        let b = sample(0, 0.0, vec![]);
        let bytes = b.pack().unwrap();
        assert_eq!(bytes.len(), FIXED_LEN);
        assert_eq!(Bitstream::unpack(&bytes).unwrap(), b);
    }

    #[test]
    fn fields_roundtrip() {
        let b = sample(3, 0.25, vec![vec![9; 17], vec![4; 3]]);
        let bytes = b.pack().unwrap();
        assert_eq!(bytes.len(), b.len_bytes());
        let u = Bitstream::unpack(&bytes).unwrap();
        assert_eq!(u, b);
        assert_eq!((u.header.selector.s, u.header.selector.l), (3, 0.25));
        assert_eq!((u.header.width, u.header.height), (64, 48));
    }

    #[test]
    fn l_is_snapped_when_packed() {
        let b = sample(1, 0.3, vec![]);
        let u = Bitstream::unpack(&b.pack().unwrap()).unwrap();
        assert_eq!(u.header.selector.l, (0.3f64 * 1024.0).round() / 1024.0);
    }

    #[test]
    fn extrapolated_selector_is_flagged() {
        let b = sample(4, 1.5, vec![]);
        let bytes = b.pack().unwrap();
        assert_eq!(bytes[20], FLAG_EXTRAPOLATED);
        assert_eq!(Bitstream::unpack(&bytes).unwrap().header.selector.l, 1.5);
        let mut bad = bytes.clone();
        bad[20] = 0;
        assert!(matches!(Bitstream::unpack(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample(1, 0.5, vec![vec![1, 2, 3]]).pack().unwrap();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Bitstream::unpack(&m), Err(Error::BadMagic { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Bitstream::unpack(&v), Err(Error::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(Bitstream::unpack(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        let b = Bitstream::unpack(&bytes).unwrap();
        assert!(b.verify_checksum([1, 2, 3, 4, 5, 6, 7, 8]).is_ok());
        assert!(matches!(b.verify_checksum([0; 8]), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn noise_mode_cannot_be_packed() {
        let mut b = sample(0, 0.0, vec![]);
        b.header.quantizer = QuantizerMode::Noise;
        assert!(b.pack().is_err());
    }

    proptest! {
        #[test]
        fn fuzz_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            if let Ok(b) = Bitstream::unpack(&bytes) {
                prop_assert_eq!(b.pack().unwrap(), bytes);
            }
        }

        #[test]
        fn fuzz_mutated_headers(pos in 0usize..60, val in any::<u8>()) {
            let mut bytes = sample(2, 0.75, vec![vec![7; 10], vec![8; 5]]).pack().unwrap();
            let p = pos % bytes.len();
            bytes[p] = val;
            if let Ok(b) = Bitstream::unpack(&bytes) {
                prop_assert_eq!(b.pack().unwrap(), bytes);
            }
        }

        #[test]
        fn any_header_roundtrips(s in 0usize..256, k in 0u32..=1024, seed in any::<u64>(), w in any::<u32>(), h in any::<u32>()) {
            let mut b = sample(s, k as f64 / 1024.0, vec![vec![1, 2]]);
            b.header.dither_seed = seed;
            b.header.width = w;
            b.header.height = h;
            prop_assert_eq!(Bitstream::unpack(&b.pack().unwrap()).unwrap(), b);
        }
    }
}
