//! Finite scalar quantization on the `[-1, 1]` grid.
//!
//! Each latent dimension `i` is snapped to one of `L_i` equally spaced values
//! `v(c) = 2c / (L_i - 1) - 1`. The codebook is the implicit product grid; a code
//! is addressed by its mixed-radix index with the first dimension most significant.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    levels: Vec<u8>,
}

/// Per-dimension digits of one quantized token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenCode {
    pub digits: Vec<u8>,
}

impl FsqConfig {
    pub fn new(levels: Vec<u8>) -> Result<Self> {
        if levels.is_empty() {
            return invalid("FSQ needs at least one dimension");
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            return invalid(format!("every FSQ level must be at least 2, got {l}"));
        }
        Ok(Self { levels })
    }

    /// Six dimensions with levels `[8, 8, 8, 5, 5, 5]`: 64000 codes.
    pub fn default_video() -> Self {
        Self {
            levels: vec![8, 8, 8, 5, 5, 5],
        }
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }

    /// `log2(codebook_size)`, the information content of one token.
    pub fn exact_bits(&self) -> f64 {
        (self.codebook_size() as f64).log2()
    }

    /// `ceil(log2(codebook_size))`, the width of one serialized index.
    pub fn index_bits(&self) -> u32 {
        let size = self.codebook_size();
        u64::BITS - (size - 1).leading_zeros()
    }

    /// Grid value of digit `c` in a dimension with `levels` values.
    pub fn grid_value(levels: u8, c: u8) -> f64 {
        2.0 * c as f64 / (levels - 1) as f64 - 1.0
    }

    pub fn quantize(&self, latent: &[f64]) -> Result<TokenCode> {
        if latent.len() != self.dim() {
            return invalid(format!(
                "latent has {} components, config has {}",
                latent.len(),
                self.dim()
            ));
        }
        let digits = latent
            .iter()
            .zip(&self.levels)
            .map(|(&v, &l)| quantize_scalar(v, l))
            .collect();
        Ok(TokenCode { digits })
    }

    pub fn dequantize(&self, code: &TokenCode) -> Result<Vec<f64>> {
        self.check_code(code)?;
        Ok(code
            .digits
            .iter()
            .zip(&self.levels)
            .map(|(&c, &l)| Self::grid_value(l, c))
            .collect())
    }

    pub fn index_encode(&self, code: &TokenCode) -> Result<u64> {
        self.check_code(code)?;
        Ok(code
            .digits
            .iter()
            .zip(&self.levels)
            .fold(0u64, |acc, (&d, &l)| acc * l as u64 + d as u64))
    }

    pub fn index_decode(&self, index: u64) -> Result<TokenCode> {
        let size = self.codebook_size();
        if index >= size {
            return invalid(format!(
                "index {index} out of range for codebook size {size}"
            ));
        }
        let mut digits = vec![0u8; self.dim()];
        let mut rest = index;
        for (d, &l) in digits.iter_mut().zip(&self.levels).rev() {
            *d = (rest % l as u64) as u8;
            rest /= l as u64;
        }
        Ok(TokenCode { digits })
    }

    fn check_code(&self, code: &TokenCode) -> Result<()> {
        if code.digits.len() != self.dim() {
            return invalid(format!(
                "code has {} digits, config has {}",
                code.digits.len(),
                self.dim()
            ));
        }
        if let Some((i, (d, l))) = code
            .digits
            .iter()
            .zip(&self.levels)
            .enumerate()
            .find(|(_, (d, l))| d >= l)
        {
            return invalid(format!("digit {i} is {d}, must be below {l}"));
        }
        Ok(())
    }
}

/// Clamp to `[-1, 1]`, then round to the nearest grid digit; exact ties go up.
pub fn quantize_scalar(v: f64, levels: u8) -> u8 {
    let top = (levels - 1) as f64;
    let t = (v.clamp(-1.0, 1.0) + 1.0) * top / 2.0;
    (t + 0.5).floor().clamp(0.0, top) as u8
}

/// Straight-through derivative of quantize-then-dequantize: 1 strictly inside
/// the clamp range, 0 where clamping is active.
pub fn straight_through_grad(v: f64) -> f64 {
    if v > -1.0 && v < 1.0 {
        1.0
    } else {
        0.0
    }
}
