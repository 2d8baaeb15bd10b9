//! Likelihood-based token selection.
//!
//! Per-token scores are element-wise squared errors of the full-length pass summed
//! over each token's patch. The keep-mask retains the `N_x` tokens with the highest
//! error (lowest likelihood); the best-reconstructed tokens carry the least
//! information and are dropped first.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Keep-mask over `n_max` token positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMask {
    kept: Vec<bool>,
}

impl TokenMask {
    pub fn new(kept: Vec<bool>) -> Self {
        Self { kept }
    }

    pub fn full(n_max: usize) -> Self {
        Self {
            kept: vec![true; n_max],
        }
    }

    pub fn from_positions(n_max: usize, positions: &[usize]) -> Result<Self> {
        let mut kept = vec![false; n_max];
        for &p in positions {
            if p >= n_max {
                return invalid(format!("position {p} out of range for {n_max} tokens"));
            }
            kept[p] = true;
        }
        Ok(Self { kept })
    }

    pub fn n_max(&self) -> usize {
        self.kept.len()
    }

    pub fn popcount(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_kept(&self, pos: usize) -> bool {
        self.kept[pos]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
    }

    /// `ceil(n_max / 8)` bytes; position 0 is the least significant bit of byte 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.kept.len().div_ceil(8)];
        for (i, _) in self.kept.iter().enumerate().filter(|(_, &k)| k) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], n_max: usize) -> Result<Self> {
        if bytes.len() != n_max.div_ceil(8) {
            return invalid(format!(
                "mask needs {} bytes for {n_max} tokens, got {}",
                n_max.div_ceil(8),
                bytes.len()
            ));
        }
        if !n_max.is_multiple_of(8) && bytes[n_max / 8] >> (n_max % 8) != 0 {
            return invalid("mask padding bits must be zero");
        }
        Ok(Self {
            kept: (0..n_max)
                .map(|i| bytes[i / 8] >> (i % 8) & 1 == 1)
                .collect(),
        })
    }
}

/// Sums element errors into the token each element maps to.
pub fn per_token_scores(
    per_element_sq_errors: &[f64],
    patch_map: &[usize],
    n_tokens: usize,
) -> Result<Vec<f64>> {
    if per_element_sq_errors.len() != patch_map.len() {
        return invalid(format!(
            "{} errors but {} patch map entries",
            per_element_sq_errors.len(),
            patch_map.len()
        ));
    }
    let mut scores = vec![0.0; n_tokens];
    let mut hit = vec![false; n_tokens];
    for (e, &t) in per_element_sq_errors.iter().zip(patch_map) {
        if t >= n_tokens {
            return invalid(format!(
                "element mapped to token {t}, only {n_tokens} tokens"
            ));
        }
        scores[t] += e;
        hit[t] = true;
    }
    if let Some(t) = hit.iter().position(|h| !h) {
        return invalid(format!("token {t} has no elements mapped to it"));
    }
    Ok(scores)
}

/// Contiguous patches: element `e` belongs to token `e / patch`.
pub fn contiguous_patch_map(n_elements: usize, patch: usize) -> Vec<usize> {
    (0..n_elements).map(|e| e / patch).collect()
}

/// Keeps the `n_x` highest-scoring positions; ties keep the lower index.
pub fn build_mask(scores: &[f64], n_x: usize) -> Result<TokenMask> {
    if n_x < 1 || n_x > scores.len() {
        return invalid(format!("n_x {n_x} outside 1..={}", scores.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    TokenMask::from_positions(scores.len(), &order[..n_x])
}

/// Rows with `kept = 1`, in order.
pub fn gather(latents: &[Vec<f64>], mask: &TokenMask) -> Result<Vec<Vec<f64>>> {
    if latents.len() != mask.n_max() {
        return invalid(format!(
            "{} rows for a mask over {} tokens",
            latents.len(),
            mask.n_max()
        ));
    }
    Ok(mask.kept_positions().map(|i| latents[i].clone()).collect())
}

/// Places compressed rows at kept positions and `fill` everywhere else.
pub fn scatter(compressed: &[Vec<f64>], mask: &TokenMask, fill: &[f64]) -> Result<Vec<Vec<f64>>> {
    if compressed.len() != mask.popcount() {
        return invalid(format!(
            "{} rows for a mask keeping {}",
            compressed.len(),
            mask.popcount()
        ));
    }
    let mut rows = compressed.iter();
    Ok(mask
        .as_slice()
        .iter()
        .map(|&k| {
            if k {
                rows.next().expect("counted").clone()
            } else {
                fill.to_vec()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let map = contiguous_patch_map(8, 2);
        assert_eq!(per_token_scores(&[0.0; 8], &map, 4).unwrap(), vec![0.0; 4]);
        let errs = [0.0, 0.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(
            per_token_scores(&errs, &map, 4).unwrap(),
            vec![0.0, 0.75, 0.0, 0.0]
        );
        assert!(per_token_scores(&errs, &map, 3).is_err());
        assert!(per_token_scores(&errs, &map, 5).is_err());
        assert!(per_token_scores(&errs[..7], &map, 4).is_err());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(
            build_mask(&[1.0, 5.0, 3.0, 2.0], 4).unwrap(),
            TokenMask::full(4)
        );
        let m = build_mask(&[1.0, 5.0, 3.0, 2.0], 2).unwrap();
        assert_eq!(m.kept_positions().collect::<Vec<_>>(), vec![1, 2]);
        let m = build_mask(&[1.0; 4], 2).unwrap();
        assert_eq!(m.kept_positions().collect::<Vec<_>>(), vec![0, 1]);
        assert!(build_mask(&[1.0; 4], 0).is_err());
        assert!(build_mask(&[1.0; 4], 5).is_err());
    }

    #[test]
    fn mask_bytes() {
        let m = TokenMask::from_positions(8, &[0]).unwrap();
        assert_eq!(m.to_bytes(), vec![0x01]);
        assert_eq!(TokenMask::full(8).to_bytes(), vec![0xFF]);
        let m = TokenMask::from_positions(16, &[1, 9, 15]).unwrap();
        assert_eq!(m.to_bytes(), vec![0x02, 0x82]);
        assert_eq!(TokenMask::from_bytes(&m.to_bytes(), 16).unwrap(), m);
        assert!(TokenMask::from_bytes(&[0xFF], 4).is_err());
        assert_eq!(TokenMask::full(12).to_bytes().len() * 8, 16);
    }

    #[test]
    fn gather_scatter_examples() {
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, -(i as f64)]).collect();
        let full = TokenMask::full(4);
        assert_eq!(gather(&x, &full).unwrap(), x);
        assert_eq!(scatter(&x, &full, &[9.0, 9.0]).unwrap(), x);
        let one = TokenMask::from_positions(4, &[2]).unwrap();
        assert_eq!(gather(&x, &one).unwrap(), vec![x[2].clone()]);
        let s = scatter(&[vec![1.0, 1.0]], &one, &[0.0, 0.0]).unwrap();
        assert_eq!(
            s,
            vec![
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 0.0]
            ]
        );
        assert!(gather(&x[..3], &one).is_err());
        assert!(scatter(&x, &one, &[0.0, 0.0]).is_err());
    }

    fn sort_oracle(scores: &[f64], n_x: usize) -> Vec<usize> {
        // Stable sort by descending score keeps lower indices first among ties.
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut kept = idx[..n_x].to_vec();
        kept.sort();
        kept
    }

    proptest! {
        #[test]
        fn mask_is_top_n(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 3.5]), 1..24), frac in 0.0f64..1.0) {
            let n_x = 1 + ((scores.len() - 1) as f64 * frac) as usize;
            let m = build_mask(&scores, n_x).unwrap();
            prop_assert_eq!(m.popcount(), n_x);
            prop_assert_eq!(m.kept_positions().collect::<Vec<_>>(), sort_oracle(&scores, n_x));
            prop_assert_eq!(m.to_bytes().len(), scores.len().div_ceil(8));
            prop_assert_eq!(TokenMask::from_bytes(&m.to_bytes(), scores.len()).unwrap(), m);
        }

        #[test]
        fn scores_sum_to_total(errs in prop::collection::vec(0.0f64..1.0, 64)) {
            let scores = per_token_scores(&errs, &contiguous_patch_map(64, 4), 16).unwrap();
            let total: f64 = errs.iter().sum();
            prop_assert!((scores.iter().sum::<f64>() - total).abs() < 1e-12);
        }

        #[test]
        fn gather_inverts_scatter(bits in prop::collection::vec(any::<bool>(), 1..20), seed in 0u64..1000) {
            let mask = TokenMask::new(bits);
            let rows: Vec<Vec<f64>> = (0..mask.popcount()).map(|i| vec![(seed + i as u64) as f64, 0.5]).collect();
            let full = scatter(&rows, &mask, &[-7.0, -7.0]).unwrap();
            prop_assert_eq!(gather(&full, &mask).unwrap(), rows);
        }
    }
}
