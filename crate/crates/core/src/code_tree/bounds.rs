//! Numerical checks of the source-coding results on code trees.

use serde::{Deserialize, Serialize};

use super::search::{search_optimal_tree, Objective, SearchMode, MAX_EXHAUSTIVE_ITEMS};
use super::{expected_length, huffman};
use crate::error::{invalid, Error, Result};
use crate::source::{entropy, geometric_source, DiscreteSource, MAX_GEOMETRIC_M};

/// Largest geometric order whose source is small enough for exhaustive search.
pub const MAX_EXHAUSTIVE_M: u32 = MAX_EXHAUSTIVE_ITEMS.ilog2();

/// One row of the uniform-router gap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub m: u32,
    pub entropy: f64,
    pub huffman_length: f64,
    /// Expected depth of the uniform-loss minimizer.
    pub expected_depth: f64,
    pub ratio: f64,
    /// True when the minimizer came from local search rather than enumeration.
    pub heuristic: bool,
}

/// Expected depth of the uniform-loss-optimal tree on `geometric_source(M)`, relative
/// to the source entropy, for `M = 1..=m_max`.
pub fn theorem2_gap(m_max: u32) -> Result<Vec<GapRow>> {
    if m_max == 0 || m_max > MAX_GEOMETRIC_M {
        return invalid(format!(
            "m_max must be in 1..={MAX_GEOMETRIC_M}, got {m_max}"
        ));
    }
    (1..=m_max)
        .map(|m| {
            let src = geometric_source(m)?;
            let heuristic = m > MAX_EXHAUSTIVE_M;
            let mode = if heuristic {
                SearchMode::Lift
            } else {
                SearchMode::Exhaustive
            };
            let tree = search_optimal_tree(&src, Objective::UniformLoss, mode)?;
            let h = entropy(&src, 2)?;
            let depth = expected_length(&tree, &src)?;
            Ok(GapRow {
                m,
                entropy: h,
                huffman_length: expected_length(&huffman(&src, 2)?, &src)?,
                expected_depth: depth,
                ratio: depth / h,
                heuristic,
            })
        })
        .collect()
}

/// Both sides of the near-optimality bound for the ELBO router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    /// `E[beta * s(x) / E[s]]` with surrogate NLL `s(x) = -log_C p(x) + gap(x)`.
    pub lhs: f64,
    /// `H_C + beta - E[-log_C p(x)]`.
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
    /// `E[s]`, the smallest admissible beta.
    pub min_beta: f64,
    pub entropy: f64,
    /// `E[s]`: the token count a loss minimizer needs, which the bound dominates.
    pub surrogate_length: f64,
    /// `rhs - surrogate_length`.
    pub surrogate_margin: f64,
}

const BOUND_TOL: f64 = 1e-9;

/// Evaluates the ELBO-router bound with every logarithm in base `base`.
pub fn check_theorem3_bound(
    src: &DiscreteSource,
    base: usize,
    beta: f64,
    gaps: &[f64],
) -> Result<Theorem3Report> {
    if gaps.len() != src.len() {
        return invalid(format!("{} gaps for {} items", gaps.len(), src.len()));
    }
    if gaps.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return invalid("ELBO gaps must be finite and nonnegative");
    }
    let h = entropy(src, base)?;
    let surrogate: Vec<f64> = (0..src.len())
        .map(|i| src.surprisal(i, base) + gaps[i])
        .collect();
    let mean_s: f64 = src.probs().iter().zip(&surrogate).map(|(p, s)| p * s).sum();
    if !beta.is_finite() || beta < mean_s - BOUND_TOL {
        return Err(Error::BetaTooSmall {
            beta,
            min_beta: mean_s,
        });
    }
    let lhs: f64 = src
        .probs()
        .iter()
        .zip(&surrogate)
        .map(|(p, s)| p * beta * s / mean_s)
        .sum();
    let nll: f64 = (0..src.len())
        .map(|i| src.prob(i) * src.surprisal(i, base))
        .sum();
    let rhs = h + beta - nll;
    Ok(Theorem3Report {
        lhs,
        rhs,
        margin: rhs - lhs,
        pass: lhs <= rhs + BOUND_TOL,
        min_beta: mean_s,
        entropy: h,
        surrogate_length: mean_s,
        surrogate_margin: rhs - mean_s,
    })
}
