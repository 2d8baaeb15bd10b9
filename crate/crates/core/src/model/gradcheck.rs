use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelParams, QuantMode, TOKENS};
use crate::compressor::TokenMask;
use crate::error::Result;
use crate::fsq::FsqConfig;
use crate::source::{sample_signal, DEFAULT_NOISE_SIGMA};

/// Which parameters are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    All,
    /// The affine decoder alone; the loss is quadratic in it.
    DecoderAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Bottleneck inputs closer than this to a clamp edge freeze every parameter that moves them.
    pub exclusion: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub subset: ParamSubset,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            exclusion: 1e-3,
            floor: 1e-6,
            subset: ParamSubset::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub median_rel_err: f64,
    pub compared: usize,
    pub skipped: usize,
    /// Flat index and seed of the worst component.
    pub worst: Option<(usize, u64)>,
}

struct Eval {
    loss: f64,
    pre_quant: Vec<f64>,
    clamped: Vec<bool>,
}

/// Random network, signal and mask for one seed. Every weight is shifted by
/// `params_scale * U(-1, 1)` so the zero-initialized branches are live.
fn fixture(params_scale: f64, seed: u64) -> (Model, Vec<f64>, TokenMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params = ModelParams::init(seed);
    for f in params.fields_mut() {
        f.iter_mut()
            .for_each(|w| *w += params_scale * rng.random_range(-1.0..1.0));
    }
    let model = Model {
        params,
        fsq: FsqConfig::default_video(),
        quant: QuantMode::Surrogate,
        nfe: Default::default(),
    };
    let signal = sample_signal(seed, DEFAULT_NOISE_SIGMA).values;
    let n_x = rng.random_range(1..=TOKENS);
    let kept: Vec<usize> = index::sample(&mut rng, TOKENS, n_x).into_vec();
    let mask = TokenMask::from_positions(TOKENS, &kept).expect("positions in range");
    (model, signal, mask)
}

/// Combined objective: adaptive MSE plus full-length MSE.
fn evaluate(
    model: &Model,
    signal: &[f64],
    mask: &TokenMask,
    want_grads: bool,
) -> Result<(Eval, Option<ModelParams>)> {
    let full = model.forward_full(signal)?;
    let adaptive = model.forward_adaptive_reusing(&full.trace, mask)?;
    let loss = adaptive.loss + full.nll_proxy / signal.len() as f64;
    let mut pre_quant = Vec::new();
    let mut clamped = Vec::new();
    for tr in [&full.trace, &adaptive.trace] {
        let c = tr.pre_quant();
        for t in tr.mask().kept_positions() {
            pre_quant.extend(&c[t]);
        }
        clamped.extend(tr.clamp_pattern());
    }
    let grads = if want_grads {
        let mut g = model.backward(&full.trace, 1.0)?;
        model.backward_into(&adaptive.trace, 1.0, &mut g)?;
        Some(g)
    } else {
        None
    };
    Ok((
        Eval {
            loss,
            pre_quant,
            clamped,
        },
        grads,
    ))
}

fn subset_range(subset: ParamSubset) -> std::ops::Range<usize> {
    match subset {
        ParamSubset::All => 0..ModelParams::len(),
        ParamSubset::DecoderAffine => {
            let n = ModelParams::len();
            let p = ModelParams::zeros();
            n - p.dec_w.len() - p.dec_b.len()..n
        }
    }
}

/// Worst relative error between analytic and central-difference gradients
/// on the clamp-surrogate network, over the given seeds.
pub fn grad_check(params_scale: f64, seeds: &[u64]) -> Result<GradCheckReport> {
    grad_check_with(params_scale, seeds, GradCheckOptions::default())
}

pub fn grad_check_with(
    params_scale: f64,
    seeds: &[u64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        median_rel_err: 0.0,
        compared: 0,
        skipped: 0,
        worst: None,
    };
    let mut errs = Vec::new();
    for &seed in seeds {
        let (mut model, signal, mask) = fixture(params_scale, seed);
        let (base, grads) = evaluate(&model, &signal, &mask, true)?;
        let analytic = grads.expect("gradients requested").to_flat();
        let near: Vec<bool> = base
            .pre_quant
            .iter()
            .map(|v| (v.abs() - 1.0).abs() < opts.exclusion)
            .collect();
        let theta = model.params.to_flat();
        for k in subset_range(opts.subset) {
            let mut probe = |delta: f64| -> Result<Eval> {
                let mut t = theta.clone();
                t[k] += delta;
                model.params = ModelParams::from_flat(&t)?;
                Ok(evaluate(&model, &signal, &mask, false)?.0)
            };
            let plus = probe(opts.step)?;
            let minus = probe(-opts.step)?;
            let crosses = [&plus, &minus].iter().any(|e| {
                e.clamped != base.clamped
                    || e.pre_quant
                        .iter()
                        .zip(&base.pre_quant)
                        .zip(&near)
                        .any(|((a, b), &n)| n && a != b)
            });
            if crosses {
                report.skipped += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * opts.step);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.floor);
            errs.push(rel);
            report.compared += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, seed));
            }
        }
        model.params = ModelParams::from_flat(&theta)?;
    }
    if !errs.is_empty() {
        report.mean_rel_err = errs.iter().sum::<f64>() / errs.len() as f64;
        errs.sort_by(f64::total_cmp);
        report.median_rel_err = errs[errs.len() / 2];
    }
    Ok(report)
}
