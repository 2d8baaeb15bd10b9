use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{bpp16, psnr_from_mse};
use crate::error::{invalid, Result};
use crate::model::{AdaptiveTokenizer, FullOutput, Model, TOKENS};
use crate::router::{beta_from_bpp16, route_by_search, RouterState};
use crate::source::ToySignal;
use crate::stats::spearman;

/// Nominal bits per token used for budgets, as for a 2^16 codebook.
pub const NOMINAL_BITS: f64 = 16.0;
/// Peak-to-peak range of the signals.
pub const PSNR_MAX: f64 = 2.0;

/// One row of an evaluation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `elbo`, `search` or `fixed`.
    pub router: String,
    /// BPP16 target, search threshold, or fixed length.
    pub target: f64,
    pub beta: f64,
    pub mean_n_x: f64,
    pub bpp16: f64,
    /// BPP16 with `log2(codebook)` bits per token instead of 16.
    pub bpp16_exact: f64,
    pub mse: f64,
    pub psnr: f64,
    pub spearman: f64,
    pub clamp_fraction: f64,
    pub decoder_nfes: f64,
    /// Decoder evaluations beyond the single pass of a fixed-length tokenizer.
    pub extra_decoder_nfes: f64,
    pub search_probes: f64,
    #[serde(skip)]
    pub n_x: Vec<usize>,
    #[serde(skip)]
    pub sample_mse: Vec<f64>,
}

const CSV_HEADER: &str = "router,target,beta,mean_n_x,bpp16,bpp16_exact,mse,psnr,spearman,clamp_fraction,decoder_nfes,extra_decoder_nfes,search_probes";

pub fn write_eval_csv<W: Write>(mut w: W, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.router,
            r.target,
            r.beta,
            r.mean_n_x,
            r.bpp16,
            r.bpp16_exact,
            r.mse,
            r.psnr,
            r.spearman,
            r.clamp_fraction,
            r.decoder_nfes,
            r.extra_decoder_nfes,
            r.search_probes
        )?;
    }
    Ok(())
}

fn check_set(set: &[ToySignal]) -> Result<()> {
    if set.is_empty() {
        return invalid("evaluation set is empty");
    }
    set.iter().try_for_each(|s| s.validate())
}

/// Mean full-length error over the set, the inference-time normalizer.
pub fn mean_full_nll(model: &Model, set: &[ToySignal]) -> Result<f64> {
    check_set(set)?;
    let nlls = set
        .par_iter()
        .map(|s| Ok(model.forward_full(&s.values)?.nll_proxy))
        .collect::<Result<Vec<f64>>>()?;
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

struct Sample {
    n_x: usize,
    mse: f64,
    clamped: bool,
    probes: usize,
}

fn summarize(
    model: &Model,
    set: &[ToySignal],
    router: &str,
    target: f64,
    beta: f64,
    samples: Vec<Sample>,
    decoder: u64,
) -> Result<EvalRow> {
    let count = samples.len() as f64;
    let n_x: Vec<usize> = samples.iter().map(|s| s.n_x).collect();
    let sample_mse: Vec<f64> = samples.iter().map(|s| s.mse).collect();
    let mean_n_x = n_x.iter().sum::<usize>() as f64 / count;
    let mse = sample_mse.iter().sum::<f64>() / count;
    let mut rate = 0.0;
    let mut rate_exact = 0.0;
    for &n in &n_x {
        rate += bpp16(n, TOKENS, NOMINAL_BITS, true)?;
        rate_exact += bpp16(n, TOKENS, model.fsq.exact_bits(), true)?;
    }
    let segments: Vec<f64> = set.iter().map(|s| s.segment_count as f64).collect();
    let lengths: Vec<f64> = n_x.iter().map(|&n| n as f64).collect();
    let decoder_nfes = decoder as f64 / count;
    Ok(EvalRow {
        router: router.to_string(),
        target,
        beta,
        mean_n_x,
        bpp16: rate / count,
        bpp16_exact: rate_exact / count,
        mse,
        psnr: psnr_from_mse(mse, PSNR_MAX),
        spearman: spearman(&segments, &lengths),
        clamp_fraction: samples.iter().filter(|s| s.clamped).count() as f64 / count,
        decoder_nfes,
        extra_decoder_nfes: decoder_nfes - 1.0,
        search_probes: samples.iter().map(|s| s.probes as f64).sum::<f64>() / count,
        n_x,
        sample_mse,
    })
}

fn adaptive_mse(model: &Model, full: &FullOutput, n: usize) -> Result<f64> {
    let mask = AdaptiveTokenizer::mask_for(full, n)?;
    Ok(model.forward_adaptive_reusing(&full.trace, &mask)?.loss)
}

/// ELBO router at a fixed beta, normalized by `mean_nll`.
pub fn evaluate_beta(
    model: &Model,
    router: &RouterState,
    set: &[ToySignal],
    beta: f64,
    mean_nll: f64,
    target: f64,
) -> Result<EvalRow> {
    check_set(set)?;
    let before = model.nfe.snapshot().decoder;
    let samples = set
        .par_iter()
        .map(|s| {
            let full = model.forward_full(&s.values)?;
            let n_x = router.route_normalized(beta, full.nll_proxy, mean_nll)?;
            let raw = (beta * full.nll_proxy / mean_nll).round();
            let clamped = raw < router.n_min as f64 || raw > router.n_max as f64;
            Ok(Sample {
                n_x,
                mse: adaptive_mse(model, &full, n_x)?,
                clamped,
                probes: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = model.nfe.snapshot().decoder - before;
    summarize(model, set, "elbo", target, beta, samples, decoder)
}

/// One row per BPP16 target, routing against the set's mean full-length error.
pub fn evaluate(
    model: &Model,
    router: &RouterState,
    set: &[ToySignal],
    bpp16_targets: &[f64],
) -> Result<Vec<EvalRow>> {
    check_set(set)?;
    let betas = bpp16_targets
        .iter()
        .map(|&t| beta_from_bpp16(t, TOKENS, NOMINAL_BITS))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_full_nll(model, set)?;
    bpp16_targets
        .iter()
        .zip(betas)
        .map(|(&t, beta)| evaluate_beta(model, router, set, beta, mean, t))
        .collect()
}

/// Every sample at the same length `n`.
pub fn evaluate_fixed(model: &Model, set: &[ToySignal], n: usize) -> Result<EvalRow> {
    check_set(set)?;
    if !(1..=TOKENS).contains(&n) {
        return invalid(format!("length {n} outside 1..={TOKENS}"));
    }
    let before = model.nfe.snapshot().decoder;
    let samples = set
        .par_iter()
        .map(|s| {
            let full = model.forward_full(&s.values)?;
            Ok(Sample {
                n_x: n,
                mse: adaptive_mse(model, &full, n)?,
                clamped: false,
                probes: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = model.nfe.snapshot().decoder - before;
    summarize(model, set, "fixed", n as f64, n as f64, samples, decoder)
}

/// Threshold baseline: per sample, the shortest length whose adaptive MSE is at
/// most `threshold`, found by binary search over `n_min..=n_max`.
pub fn evaluate_search(
    model: &Model,
    router: &RouterState,
    set: &[ToySignal],
    threshold: f64,
) -> Result<EvalRow> {
    check_set(set)?;
    let before = model.nfe.snapshot().decoder;
    let samples = set
        .par_iter()
        .map(|s| {
            let full = model.forward_full(&s.values)?;
            let mut cache: Vec<Option<f64>> = vec![None; TOKENS + 1];
            let mut failure = None;
            let mut probe = |n: usize| -> f64 {
                if let Some(v) = cache[n] {
                    return v;
                }
                match adaptive_mse(model, &full, n) {
                    Ok(v) => {
                        cache[n] = Some(v);
                        v
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::INFINITY
                    }
                }
            };
            let outcome = route_by_search(threshold, &mut probe, router.n_min, router.n_max, 1)?;
            let mse = probe(outcome.n_x);
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(Sample {
                n_x: outcome.n_x,
                mse,
                clamped: !outcome.reachable,
                probes: outcome.probes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = model.nfe.snapshot().decoder - before;
    summarize(model, set, "search", threshold, f64::NAN, samples, decoder)
}

/// Adaptive MSE of every sample at every grid length.
pub fn loss_curves(model: &Model, set: &[ToySignal], grid: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_set(set)?;
    set.par_iter()
        .map(|s| {
            let full = model.forward_full(&s.values)?;
            grid.iter()
                .map(|&n| adaptive_mse(model, &full, n))
                .collect()
        })
        .collect()
}

/// Largest beta whose realized mean length on `set` does not exceed `target_mean`.
pub fn calibrate_beta(
    model: &Model,
    router: &RouterState,
    set: &[ToySignal],
    target_mean: f64,
) -> Result<f64> {
    check_set(set)?;
    if !(target_mean >= router.n_min as f64 && target_mean <= router.n_max as f64) {
        return invalid(format!(
            "target mean {target_mean} outside [{}, {}]",
            router.n_min, router.n_max
        ));
    }
    let nlls = set
        .par_iter()
        .map(|s| Ok(model.forward_full(&s.values)?.nll_proxy))
        .collect::<Result<Vec<f64>>>()?;
    let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
    let realized = |beta: f64| -> Result<f64> {
        let mut total = 0usize;
        for &v in &nlls {
            total += router.route_normalized(beta, v, mean)?;
        }
        Ok(total as f64 / nlls.len() as f64)
    };
    let (mut lo, mut hi) = (0.0, 4.0 * router.n_max as f64);
    if realized(hi)? <= target_mean {
        return Ok(hi);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if realized(mid)? <= target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
