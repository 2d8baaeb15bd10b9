//! Token stream wire format and rate/fidelity metrics.
//!
//! Layout (`.itk`):
//!
//! | bytes            | field                                             |
//! |------------------|---------------------------------------------------|
//! | 4                | magic `ITK1`                                      |
//! | 1                | version (1)                                       |
//! | 2                | `n_max`, u16 little-endian                        |
//! | 2                | `n_x`, u16 little-endian                          |
//! | 1                | FSQ dimension count `k`                           |
//! | k                | FSQ levels, one byte each                         |
//! | ceil(n_max / 8)  | keep-mask, position 0 = LSB of the first byte     |
//! | ceil(n_x·w / 8)  | indices, `w = ceil(log2 codebook)` bits each, MSB-first, zero padded |

use serde::{Deserialize, Serialize};

use crate::compressor::TokenMask;
use crate::error::{invalid, Result, StreamError};
use crate::fsq::{FsqConfig, TokenCode};
use crate::router::MASK_BPP16;

pub const STREAM_MAGIC: [u8; 4] = *b"ITK1";
pub const STREAM_VERSION: u8 = 1;

/// A decoded token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub config: FsqConfig,
    pub mask: TokenMask,
    pub codes: Vec<TokenCode>,
}

impl TokenStream {
    pub fn n_x(&self) -> usize {
        self.codes.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize(&self.codes, &self.mask, &self.config)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        deserialize(bytes)
    }

    pub fn indices(&self) -> Result<Vec<u64>> {
        self.codes
            .iter()
            .map(|c| self.config.index_encode(c))
            .collect()
    }
}

/// Exact byte length of a stream.
pub fn stream_len(n_max: usize, n_x: usize, config: &FsqConfig) -> usize {
    10 + config.dim() + n_max.div_ceil(8) + (n_x * config.index_bits() as usize).div_ceil(8)
}

struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new(buf: Vec<u8>) -> Self {
        Self {
            buf,
            acc: 0,
            filled: 0,
        }
    }

    /// Appends the low `width` bits of `value`, most significant first.
    fn write(&mut self, value: u64, width: u32) {
        for shift in (0..width).rev() {
            self.acc = (self.acc << 1) | (value >> shift & 1);
            self.filled += 1;
            if self.filled == 8 {
                self.buf.push(self.acc as u8);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.buf.push((self.acc << (8 - self.filled)) as u8);
        }
        self.buf
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn read(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for _ in 0..width {
            let bit = self.bytes[self.pos / 8] >> (7 - self.pos % 8) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        v
    }
}

pub fn serialize(codes: &[TokenCode], mask: &TokenMask, config: &FsqConfig) -> Result<Vec<u8>> {
    let n_max = mask.n_max();
    if codes.len() != mask.popcount() {
        return invalid(format!(
            "{} codes for a mask keeping {}",
            codes.len(),
            mask.popcount()
        ));
    }
    if n_max > u16::MAX as usize || n_max == 0 {
        return invalid(format!("n_max {n_max} does not fit the stream header"));
    }
    if config.dim() > u8::MAX as usize {
        return invalid("too many FSQ dimensions for the stream header");
    }
    let mut buf = Vec::with_capacity(stream_len(n_max, codes.len(), config));
    buf.extend_from_slice(&STREAM_MAGIC);
    buf.push(STREAM_VERSION);
    buf.extend_from_slice(&(n_max as u16).to_le_bytes());
    buf.extend_from_slice(&(codes.len() as u16).to_le_bytes());
    buf.push(config.dim() as u8);
    buf.extend_from_slice(config.levels());
    buf.extend_from_slice(&mask.to_bytes());

    let width = config.index_bits();
    let mut w = BitWriter::new(buf);
    for c in codes {
        w.write(config.index_encode(c)?, width);
    }
    Ok(w.finish())
}

fn need(bytes: &[u8], expected: usize) -> Result<(), StreamError> {
    if bytes.len() < expected {
        return Err(StreamError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn deserialize(bytes: &[u8]) -> Result<TokenStream> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != STREAM_MAGIC {
        return Err(StreamError::BadMagic {
            found: magic,
            expected: STREAM_MAGIC,
        }
        .into());
    }
    need(bytes, 9)?;
    if bytes[4] != STREAM_VERSION {
        return Err(StreamError::BadVersion(bytes[4]).into());
    }
    let n_max = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let n_x = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    need(bytes, 10)?;
    let dim = bytes[9] as usize;
    need(bytes, 10 + dim)?;
    let config = FsqConfig::new(bytes[10..10 + dim].to_vec())
        .map_err(|e| StreamError::Header(e.to_string()))?;
    if n_max == 0 || n_x > n_max {
        return Err(StreamError::Header(format!("n_x {n_x} with n_max {n_max}")).into());
    }
    let expected = stream_len(n_max, n_x, &config);
    need(bytes, expected)?;
    if bytes.len() > expected {
        return Err(StreamError::TrailingBytes {
            expected,
            actual: bytes.len(),
        }
        .into());
    }

    let mask_start = 10 + dim;
    let mask_end = mask_start + n_max.div_ceil(8);
    let mask = TokenMask::from_bytes(&bytes[mask_start..mask_end], n_max)
        .map_err(|e| StreamError::Header(e.to_string()))?;
    if mask.popcount() != n_x {
        return Err(StreamError::PopcountMismatch {
            popcount: mask.popcount(),
            n_x,
        }
        .into());
    }

    let width = config.index_bits();
    let size = config.codebook_size();
    let mut r = BitReader {
        bytes: &bytes[mask_end..],
        pos: 0,
    };
    let mut codes = Vec::with_capacity(n_x);
    for _ in 0..n_x {
        let index = r.read(width);
        if index >= size {
            return Err(StreamError::IndexOutOfRange { index, size }.into());
        }
        codes.push(config.index_decode(index)?);
    }
    let pad = (8 - r.pos % 8) % 8;
    if pad > 0 && r.read(pad as u32) != 0 {
        return Err(StreamError::Header("nonzero payload padding".into()).into());
    }
    Ok(TokenStream {
        config,
        mask,
        codes,
    })
}

/// Bits per 16 pixels under the 256-pixels-per-token normalization:
/// `(n_x / n_max) * bits / 16`, plus `1/16` for the stored mask.
pub fn bpp16(n_x: usize, n_max: usize, bits_per_token: f64, include_mask: bool) -> Result<f64> {
    if n_max == 0 || n_x > n_max {
        return invalid(format!("need n_x ({n_x}) <= n_max ({n_max}) and n_max > 0"));
    }
    if !(bits_per_token.is_finite() && bits_per_token > 0.0) {
        return invalid(format!(
            "bits per token must be positive, got {bits_per_token}"
        ));
    }
    let payload = n_x as f64 / n_max as f64 * bits_per_token / 16.0;
    Ok(if include_mask {
        payload + MASK_BPP16
    } else {
        payload
    })
}

pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return invalid(format!("length mismatch: {} vs {}", x.len(), x_hat.len()));
    }
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// `10 log10(max_val^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(x: &[f64], x_hat: &[f64], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return invalid(format!("max_val must be positive, got {max_val}"));
    }
    Ok(psnr_from_mse(mse(x, x_hat)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}
