use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PATCH: usize = 4;
pub const TOKENS: usize = 16;
pub const LATENT: usize = 6;
pub const HIDDEN: usize = 32;
/// Per-token MLP input: latent plus the mask bit.
pub const MLP_IN: usize = LATENT + 1;
/// Decompressor MLP input: latent, left context, right context, mask bit.
pub const DCP_IN: usize = 3 * LATENT + 1;

/// Slope of the initial spreading logits in token distance.
pub const LOCALITY: f64 = 2.0;

/// Tensor shapes, stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub patch: usize,
    pub tokens: usize,
    pub latent: usize,
    pub hidden: usize,
}

impl Shapes {
    pub const TOY: Shapes = Shapes {
        patch: PATCH,
        tokens: TOKENS,
        latent: LATENT,
        hidden: HIDDEN,
    };
}

/// All trainable weights. Matrices are row-major `out x in`.
///
/// The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub cmp_w1: Vec<f64>,
    pub cmp_b1: Vec<f64>,
    pub cmp_w2: Vec<f64>,
    pub cmp_b2: Vec<f64>,
    pub cmp_mix: Vec<f64>,
    pub dcp_mix: Vec<f64>,
    pub dcp_w1: Vec<f64>,
    pub dcp_b1: Vec<f64>,
    pub dcp_w2: Vec<f64>,
    pub dcp_b2: Vec<f64>,
    pub fill: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

pub const PARAM_NAMES: [&str; 15] = [
    "enc_w", "enc_b", "cmp_w1", "cmp_b1", "cmp_w2", "cmp_b2", "cmp_mix", "dcp_mix", "dcp_w1",
    "dcp_b1", "dcp_w2", "dcp_b2", "fill", "dec_w", "dec_b",
];

const SIZES: [usize; 15] = [
    LATENT * PATCH,
    LATENT,
    HIDDEN * MLP_IN,
    HIDDEN,
    LATENT * HIDDEN,
    LATENT,
    TOKENS * TOKENS,
    TOKENS * TOKENS,
    HIDDEN * DCP_IN,
    HIDDEN,
    LATENT * HIDDEN,
    LATENT,
    LATENT,
    PATCH * LATENT,
    PATCH,
];

impl ModelParams {
    pub fn zeros() -> Self {
        let z = |i: usize| vec![0.0; SIZES[i]];
        ModelParams {
            enc_w: z(0),
            enc_b: z(1),
            cmp_w1: z(2),
            cmp_b1: z(3),
            cmp_w2: z(4),
            cmp_b2: z(5),
            cmp_mix: z(6),
            dcp_mix: z(7),
            dcp_w1: z(8),
            dcp_b1: z(9),
            dcp_w2: z(10),
            dcp_b2: z(11),
            fill: z(12),
            dec_w: z(13),
            dec_b: z(14),
        }
    }

    /// Fan-in uniform init for the encoder, decoder and first MLP layers. The
    /// second MLP layers and the absorb matrix start at zero; the spreading
    /// logits start at `-LOCALITY * |t - s|`. With every token kept the
    /// compressor and decompressor are then exact identities.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        let mut fan_in = |v: &mut Vec<f64>, fan: usize| {
            let bound = 1.0 / (fan as f64).sqrt();
            v.iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        };
        fan_in(&mut p.enc_w, PATCH);
        fan_in(&mut p.cmp_w1, MLP_IN);
        fan_in(&mut p.dcp_w1, DCP_IN);
        fan_in(&mut p.dec_w, LATENT);
        for t in 0..TOKENS {
            for s in 0..TOKENS {
                p.dcp_mix[t * TOKENS + s] = -LOCALITY * t.abs_diff(s) as f64;
            }
        }
        p
    }

    pub fn fields(&self) -> [&Vec<f64>; 15] {
        [
            &self.enc_w,
            &self.enc_b,
            &self.cmp_w1,
            &self.cmp_b1,
            &self.cmp_w2,
            &self.cmp_b2,
            &self.cmp_mix,
            &self.dcp_mix,
            &self.dcp_w1,
            &self.dcp_b1,
            &self.dcp_w2,
            &self.dcp_b2,
            &self.fill,
            &self.dec_w,
            &self.dec_b,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 15] {
        [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.cmp_w1,
            &mut self.cmp_b1,
            &mut self.cmp_w2,
            &mut self.cmp_b2,
            &mut self.cmp_mix,
            &mut self.dcp_mix,
            &mut self.dcp_w1,
            &mut self.dcp_b1,
            &mut self.dcp_w2,
            &mut self.dcp_b2,
            &mut self.fill,
            &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    pub fn len() -> usize {
        SIZES.iter().sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.fields()
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::len() {
            return invalid(format!(
                "expected {} parameters, got {}",
                Self::len(),
                flat.len()
            ));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        let mut p = Self::zeros();
        let mut offset = 0;
        for f in p.fields_mut() {
            let n = f.len();
            f.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.fields_mut().into_iter().zip(other.fields()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields()
            .iter()
            .all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// Content hash used to detect traces from other parameter values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for f in self.fields() {
            for v in f {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }
}
