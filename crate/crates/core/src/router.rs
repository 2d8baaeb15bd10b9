//! ELBO-proxy token-length selection.
//!
//! A sample's token count is proportional to its negative ELBO, here the total
//! squared reconstruction error of the full-length pass:
//! `N_x = clamp(round(beta * nll_x / E[nll]), n_min, n_max)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
/// The mask costs one bit per token position, i.e. 1/16 BPP16 at 16-bit tokens.
pub const MASK_BPP16: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub beta: f64,
    pub ema_nll: Option<f64>,
    pub ema_decay: f64,
    pub n_max: usize,
    pub n_min: usize,
    pub flex_betas: Vec<f64>,
}

impl RouterState {
    /// State with `n_min = ceil(n_max / 16)` and no flex set.
    pub fn new(beta: f64, n_max: usize) -> Result<Self> {
        let state = Self {
            beta,
            ema_nll: None,
            ema_decay: DEFAULT_EMA_DECAY,
            n_max,
            n_min: n_max.div_ceil(16),
            flex_betas: Vec::new(),
        };
        state.validate()?;
        Ok(state)
    }

    /// Flex set `{0.25, 0.5, 0.75, 1} * n_max`.
    pub fn with_default_flex(mut self) -> Self {
        let n = self.n_max as f64;
        self.flex_betas = vec![0.25 * n, 0.5 * n, 0.75 * n, n];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "need 1 <= n_min ({}) <= n_max ({})",
                self.n_min, self.n_max
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.flex_betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config("flex betas must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if let Some(e) = self.ema_nll {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!(
                    "ema must be positive once set, got {e}"
                )));
            }
        }
        Ok(())
    }

    pub fn update_ema(&mut self, nll: f64) -> Result<()> {
        if !(nll.is_finite() && nll > 0.0) {
            return invalid(format!("nll must be positive and finite, got {nll}"));
        }
        self.ema_nll = Some(match self.ema_nll {
            None => nll,
            Some(e) => self.ema_decay * e + (1.0 - self.ema_decay) * nll,
        });
        Ok(())
    }

    /// Routes with the state's own beta and EMA.
    pub fn route(&self, nll_x: f64) -> Result<usize> {
        self.route_with(self.beta, nll_x)
    }

    pub fn route_with(&self, beta: f64, nll_x: f64) -> Result<usize> {
        let mean = self
            .ema_nll
            .ok_or(Error::State("EMA of the reconstruction error is unset"))?;
        self.route_normalized(beta, nll_x, mean)
    }

    /// Routes against an explicit normalizer, e.g. the mean over an evaluation set.
    pub fn route_normalized(&self, beta: f64, nll_x: f64, mean_nll: f64) -> Result<usize> {
        if !(nll_x.is_finite() && nll_x >= 0.0) {
            return invalid(format!("nll must be nonnegative and finite, got {nll_x}"));
        }
        if !(mean_nll.is_finite() && mean_nll > 0.0) {
            return invalid(format!("normalizer must be positive, got {mean_nll}"));
        }
        // f64::round rounds half away from zero.
        let n = (beta * nll_x / mean_nll).round();
        Ok((n.max(0.0) as usize).clamp(self.n_min, self.n_max))
    }

    /// Draws beta uniformly from the flex set, then routes.
    pub fn route_flex(&self, nll_x: f64, rng_seed: u64) -> Result<usize> {
        let beta = self.sample_flex_beta(&mut ChaCha8Rng::seed_from_u64(rng_seed))?;
        self.route_with(beta, nll_x)
    }

    pub fn sample_flex_beta<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        if self.flex_betas.is_empty() {
            return Err(Error::Config(
                "flex routing needs a nonempty beta set".into(),
            ));
        }
        Ok(self.flex_betas[rng.random_range(0..self.flex_betas.len())])
    }
}

/// `beta = n_max * (bpp16 - 1/16) * 16 / bits_per_token`.
pub fn beta_from_bpp16(bpp16: f64, n_max: usize, bits_per_token: f64) -> Result<f64> {
    if !(bpp16.is_finite() && bpp16 > MASK_BPP16) {
        return Err(Error::BudgetTooSmall { bpp16 });
    }
    if !(bits_per_token.is_finite() && bits_per_token > 0.0) {
        return invalid(format!(
            "bits per token must be positive, got {bits_per_token}"
        ));
    }
    Ok(n_max as f64 * (bpp16 - MASK_BPP16) * (16.0 / bits_per_token))
}

/// Outcome of the threshold-search baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub n_x: usize,
    /// Decoder evaluations spent probing candidate lengths.
    pub probes: usize,
    /// Decoder evaluations beyond the one a fixed-length tokenizer performs; the
    /// decode of the selected length doubles as that standard pass, so this is
    /// `probes - 1`, or `probes` when the fallback `n_max` had to be decoded.
    pub extra_nfes: usize,
    /// False when even `n_max` did not meet the target (per the clamped probe curve).
    pub reachable: bool,
    /// Probe results that rose with a longer length and were clamped down.
    pub monotonicity_violations: usize,
}

/// Binary search for the smallest length meeting `target_loss`.
///
/// Candidates are the multiples of `granularity` in `[n_min, n_max]`, with `n_max`
/// always included and taken as the fallback. For `K` candidates the search
/// issues `floor(log2(K))` or `ceil(log2(K))` probes, exactly `log2(K)` when `K`
/// is a power of two; `n_max` itself is never probed.
pub fn route_by_search<F>(
    target_loss: f64,
    mut probe: F,
    n_min: usize,
    n_max: usize,
    granularity: usize,
) -> Result<SearchOutcome>
where
    F: FnMut(usize) -> f64,
{
    if n_min < 1 || n_min > n_max || granularity < 1 {
        return Err(Error::Config(format!(
            "bad search range n_min={n_min} n_max={n_max} granularity={granularity}"
        )));
    }
    let mut candidates: Vec<usize> = (n_min.div_ceil(granularity)..=n_max / granularity)
        .map(|k| k * granularity)
        .filter(|&n| n >= n_min && n < n_max)
        .collect();
    candidates.push(n_max);

    // Probed (length, clamped loss) pairs; the clamp enforces a nonincreasing curve.
    let mut seen: Vec<(usize, f64)> = Vec::new();
    let mut violations = 0;
    let mut eval = |n: usize, seen: &mut Vec<(usize, f64)>| {
        let raw = probe(n);
        let mut value = raw;
        for &(m, v) in seen.iter() {
            if m < n {
                value = value.min(v);
            } else if m > n {
                value = value.max(v);
            }
        }
        if value != raw {
            violations += 1;
        }
        seen.push((n, value));
        value
    };

    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if eval(candidates[mid], &mut seen) <= target_loss {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let probes = seen.len();
    let n_x = candidates[lo];
    let reachable = match seen.iter().find(|(n, _)| *n == n_x) {
        Some(&(_, v)) => v <= target_loss,
        // Fallback to n_max without a probe; the standard decode settles it.
        None => {
            let v = eval(n_x, &mut seen);
            v <= target_loss
        }
    };
    Ok(SearchOutcome {
        n_x,
        probes,
        extra_nfes: seen.len() - 1,
        reachable,
        monotonicity_violations: violations,
    })
}
