//! Finite sources and the synthetic variable-complexity signal generator.
//!
//! A [`DiscreteSource`] is the theory-side data distribution: every item is a
//! "video" that a perfect tokenizer must reconstruct. [`ToySignal`] is the
//! training-side stand-in: a short piecewise-constant sequence whose number of
//! segments controls how much information it carries.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of samples in a [`ToySignal`].
pub const SIGNAL_LEN: usize = 64;
/// Largest number of constant segments a signal may have.
pub const MAX_SEGMENTS: usize = 8;
/// Default additive noise level of generated signals.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
/// Largest `M` accepted by [`geometric_source`]; `2^-(2^M - 1)` underflows past it.
pub const MAX_GEOMETRIC_M: u32 = 10;

const SUM_TOLERANCE: f64 = 1e-9;

/// A finite probability distribution over item indices `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSource {
    probs: Vec<f64>,
    /// `probs[i] == 2^-dyadic[i]` exactly, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dyadic: Option<Vec<u32>>,
}

impl DiscreteSource {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return invalid(format!(
                "a source needs at least 2 items, got {}",
                probs.len()
            ));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return invalid(format!(
                "probability {i} must be strictly positive, got {p}"
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self {
            probs,
            dyadic: None,
        })
    }

    /// Normalizes nonnegative weights into a source.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return invalid("weights must have a positive finite sum");
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    /// Random source with Dirichlet(1, ..., 1) probabilities.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Self> {
        let weights: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = Exp1.sample(rng);
                e + 1e-12
            })
            .collect();
        Self::from_weights(&weights)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, item: usize) -> f64 {
        self.probs[item]
    }

    /// Exact exponents `k` with `p = 2^-k`, for dyadic sources built by [`geometric_source`].
    pub fn dyadic_exponents(&self) -> Option<&[u32]> {
        self.dyadic.as_deref()
    }

    /// `-log_base p(item)`.
    pub fn surprisal(&self, item: usize, base: usize) -> f64 {
        match &self.dyadic {
            Some(k) if base == 2 => k[item] as f64,
            Some(k) => k[item] as f64 / (base as f64).log2(),
            None => -self.probs[item].ln() / (base as f64).ln(),
        }
    }
}

impl FromStr for DiscreteSource {
    type Err = Error;

    /// Parses `"0.5,0.25,0.25"` or `"geometric:M"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(m) = s.strip_prefix("geometric:") {
            let m: u32 = m
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad geometric order {m:?}")))?;
            return geometric_source(m);
        }
        let probs = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("bad probability {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs)
    }
}

/// Shannon entropy of `src` in base-`base` code symbols.
pub fn entropy(src: &DiscreteSource, base: usize) -> Result<f64> {
    if base < 2 {
        return invalid(format!("entropy base must be at least 2, got {base}"));
    }
    Ok((0..src.len())
        .map(|i| src.prob(i) * src.surprisal(i, base))
        .sum())
}

/// The dyadic source `p(j) = 2^-j` for `j = 1..2^M - 1`, with the last item duplicated.
pub fn geometric_source(m: u32) -> Result<DiscreteSource> {
    if m == 0 || m > MAX_GEOMETRIC_M {
        return invalid(format!(
            "geometric order must be in 1..={MAX_GEOMETRIC_M}, got {m}"
        ));
    }
    let n = 1usize << m;
    let mut exps: Vec<u32> = (1..n as u32).collect();
    exps.push((n - 1) as u32);
    let probs = exps.iter().map(|&k| 2f64.powi(-(k as i32))).collect();
    let mut src = DiscreteSource::new(probs)?;
    src.dyadic = Some(exps);
    Ok(src)
}

/// A length-64 piecewise-constant signal in `[-1, 1]` plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySignal {
    pub seed: u64,
    pub segment_count: usize,
    pub values: Vec<f64>,
}

impl ToySignal {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != SIGNAL_LEN {
            return invalid(format!(
                "signal length {} != {SIGNAL_LEN}",
                self.values.len()
            ));
        }
        if !(1..=MAX_SEGMENTS).contains(&self.segment_count) {
            return invalid(format!(
                "segment_count {} outside 1..={MAX_SEGMENTS}",
                self.segment_count
            ));
        }
        if self.values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return invalid("signal values must lie in [-1, 1]");
        }
        Ok(())
    }

    pub fn total_variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }
}

/// Draws a signal with a uniformly random segment count in `1..=8`.
pub fn sample_signal(seed: u64, noise_sigma: f64) -> ToySignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = rng.random_range(1..=MAX_SEGMENTS);
    build_signal(&mut rng, seed, segments, noise_sigma)
}

/// Like [`sample_signal`] with the segment count fixed by the caller.
pub fn sample_signal_with_segments(
    seed: u64,
    segment_count: usize,
    noise_sigma: f64,
) -> Result<ToySignal> {
    if !(1..=MAX_SEGMENTS).contains(&segment_count) {
        return invalid(format!(
            "segment_count {segment_count} outside 1..={MAX_SEGMENTS}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the stream aligned with `sample_signal`.
    let _: usize = rng.random_range(1..=MAX_SEGMENTS);
    Ok(build_signal(&mut rng, seed, segment_count, noise_sigma))
}

fn build_signal(rng: &mut ChaCha8Rng, seed: u64, segments: usize, noise_sigma: f64) -> ToySignal {
    let mut cuts: Vec<usize> = index::sample(rng, SIGNAL_LEN - 1, segments - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    cuts.push(SIGNAL_LEN);

    let mut values = Vec::with_capacity(SIGNAL_LEN);
    let mut start = 0;
    for &end in &cuts {
        let level: f64 = rng.random_range(-1.0..=1.0);
        values.extend(std::iter::repeat_n(level, end - start));
        start = end;
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in &mut values {
            *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
        }
    }
    ToySignal {
        seed,
        segment_count: segments,
        values,
    }
}

/// Signals for seeds `first_seed..first_seed + count`.
pub fn sample_dataset(first_seed: u64, count: usize, noise_sigma: f64) -> Vec<ToySignal> {
    (0..count as u64)
        .map(|i| sample_signal(first_seed + i, noise_sigma))
        .collect()
}

pub fn write_jsonl<W: Write>(mut w: W, signals: &[ToySignal]) -> Result<()> {
    for s in signals {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ToySignal>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ToySignal = serde_json::from_str(&line)?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Neumaier-compensated sum of individually computed terms, sorted by magnitude.
    fn entropy_oracle(p: &[f64], base: usize) -> f64 {
        let mut terms: Vec<f64> = p
            .iter()
            .map(|&q| -q * q.ln() / (base as f64).ln())
            .collect();
        terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in terms {
            let s = sum + t;
            if sum.abs() >= t.abs() {
                comp += (sum - s) + t;
            } else {
                comp += (t - s) + sum;
            }
            sum = s;
        }
        sum + comp
    }

    #[test]
    fn entropy_examples() {
        let src: DiscreteSource = "0.5,0.25,0.125,0.125".parse().unwrap();
        assert_eq!(entropy(&src, 2).unwrap(), 1.75);
        let u = DiscreteSource::uniform(4).unwrap();
        assert!((entropy(&u, 2).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let src = DiscreteSource::random(&mut rng, 8).unwrap();
            let h = entropy(&src, 3).unwrap();
            assert!((h - entropy_oracle(src.probs(), 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_rejects_bad_base() {
        let u = DiscreteSource::uniform(2).unwrap();
        assert!(entropy(&u, 1).is_err());
    }

    #[test]
    fn source_validation() {
        assert!(DiscreteSource::new(vec![1.0]).is_err());
        assert!(DiscreteSource::new(vec![0.5, 0.5, 0.0]).is_err());
        assert!(DiscreteSource::new(vec![0.5, 0.4]).is_err());
        assert!("0.5,abc".parse::<DiscreteSource>().is_err());
    }

    #[test]
    fn geometric_examples() {
        assert_eq!(geometric_source(1).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(
            geometric_source(2).unwrap().probs(),
            &[0.5, 0.25, 0.125, 0.125]
        );
        assert!(geometric_source(0).is_err());
        assert!(geometric_source(MAX_GEOMETRIC_M + 1).is_err());
        let g: DiscreteSource = "geometric:3".parse().unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.prob(7), g.prob(6));
    }

    #[test]
    fn geometric_entropy_approaches_two() {
        // Closed form of the series: H = 2 - 2^-(2^M - 2).
        let mut prev = 0.0;
        for m in 2..=6u32 {
            let n = 1i32 << m;
            let closed = 2.0 - 2f64.powi(-(n - 2));
            let h = entropy(&geometric_source(m).unwrap(), 2).unwrap();
            assert!((h - closed).abs() < 1e-15, "M={m}: {h} vs {closed}");
            assert!(h <= 2.0 && h >= prev);
            if m <= 5 {
                // 2 - 2^-62 is not representable in f64; below that it is.
                assert!(h < 2.0 && h > prev);
            }
            prev = h;
        }
    }

    #[test]
    fn geometric_sums_to_one() {
        for m in 1..=MAX_GEOMETRIC_M {
            let g = geometric_source(m).unwrap();
            let mut sorted = g.probs().to_vec();
            sorted.sort_by(f64::total_cmp);
            let total: f64 = sorted.iter().sum();
            assert!((total - 1.0).abs() <= 1e-15, "M={m}: {total}");
        }
    }

    #[test]
    fn single_segment_is_constant() {
        let s = sample_signal_with_segments(3, 1, 0.0).unwrap();
        assert_eq!(s.total_variation(), 0.0);
        s.validate().unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_signal(42, 0.01), sample_signal(42, 0.01));
        assert_ne!(sample_signal(42, 0.01), sample_signal(43, 0.01));
    }

    #[test]
    fn segment_structure() {
        for seed in 0..200 {
            let s = sample_signal(seed, 0.0);
            s.validate().unwrap();
            let changes = s.values.windows(2).filter(|w| w[0] != w[1]).count();
            assert_eq!(changes + 1, s.segment_count);
        }
    }

    #[test]
    fn total_variation_increases_with_segments() {
        let mut prev = -1.0;
        for k in 1..=MAX_SEGMENTS {
            let mean = (0..10_000u64)
                .map(|seed| {
                    sample_signal_with_segments(seed, k, DEFAULT_NOISE_SIGMA)
                        .unwrap()
                        .total_variation()
                })
                .sum::<f64>()
                / 10_000.0;
            assert!(mean > prev, "k={k}: {mean} <= {prev}");
            prev = mean;
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let data = sample_dataset(5, 4, 0.01);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), data);
    }

    proptest! {
        #[test]
        fn entropy_permutation_invariant(ws in prop::collection::vec(0.01f64..1.0, 2..16), rot in 0usize..16) {
            let src = DiscreteSource::from_weights(&ws).unwrap();
            let mut rotated = src.probs().to_vec();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            let other = DiscreteSource::new(rotated).unwrap();
            prop_assert!((entropy(&src, 2).unwrap() - entropy(&other, 2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn entropy_decreases_with_base(ws in prop::collection::vec(0.01f64..1.0, 2..16)) {
            let src = DiscreteSource::from_weights(&ws).unwrap();
            let h2 = entropy(&src, 2).unwrap();
            let h3 = entropy(&src, 3).unwrap();
            let h5 = entropy(&src, 5).unwrap();
            prop_assert!(h2 > h3 && h3 > h5);
            prop_assert!(h2 <= (src.len() as f64).log2() + 1e-12);
        }
    }
}
