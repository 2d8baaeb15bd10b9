//! Deterministic inputs shared by the benchmarks in `benches/`.

use adatok_core::model::TOKENS;
use adatok_core::{DiscreteSource, FsqConfig, TokenCode, TokenMask};

/// Zipf-like source over `n` items.
pub fn zipf_source(n: usize) -> DiscreteSource {
    let weights: Vec<f64> = (1..=n).map(|k| 1.0 / k as f64).collect();
    DiscreteSource::from_weights(&weights).expect("positive weights")
}

/// A half-full toy stream: every other position kept, codes cycling through the codebook.
pub fn half_stream() -> (Vec<TokenCode>, TokenMask, FsqConfig) {
    let cfg = FsqConfig::default_video();
    let mask = TokenMask::new((0..TOKENS).map(|i| i % 2 == 0).collect());
    let codes = (0..mask.popcount() as u64)
        .map(|i| {
            cfg.index_decode(i * 7919 % cfg.codebook_size())
                .expect("in range")
        })
        .collect();
    (codes, mask, cfg)
}
