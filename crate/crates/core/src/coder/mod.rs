//! Lossless range coding and the bitstream container.

pub mod bitstream;
pub mod range;

pub use bitstream::{Bitstream, Header};
pub use range::{decode_stream, encode_stream, CumulativeTables, PmfProvider, RangeDecoder, RangeEncoder, SymbolStream};
