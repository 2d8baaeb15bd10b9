//! Two-phase training of the toy tokenizer and evaluation sweeps.
//!
//! Phase 1 (the first quarter of the steps by default) trains with every token
//! kept. Phase 2 switches on the router: each sample's full-length error sets
//! its token count, the highest-error tokens are kept, and the adaptive
//! reconstruction is optimized together with the full-length one.

mod eval;
mod oracle;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eval::{
    calibrate_beta, evaluate, evaluate_beta, evaluate_fixed, evaluate_search, loss_curves,
    mean_full_nll, write_eval_csv, EvalRow, NOMINAL_BITS, PSNR_MAX,
};
pub use oracle::{oracle_allocate, ORACLE_GRID};

use crate::compressor::TokenMask;
use crate::error::{Error, Result};
use crate::model::{AdaptiveTokenizer, Model, ModelParams, QuantMode, PARAM_NAMES, TOKENS};
use crate::router::{RouterState, DEFAULT_EMA_DECAY};
use crate::source::{sample_signal, ToySignal, DEFAULT_NOISE_SIGMA, SIGNAL_LEN};

/// First seed of held-out sets; training streams stay below it.
pub const HELD_OUT_SEED_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    /// `N = round(beta * nll / ema)`.
    FixedBeta,
    /// As `FixedBeta`, with beta drawn per sample from the flex set.
    Flex,
    /// `N ~ U{n_min..n_max}`, ignoring the sample.
    UniformBaseline,
    /// Every token kept throughout.
    FullLength,
}

/// Bottleneck used while training. Evaluation always uses FSQ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainQuant {
    /// FSQ forward, straight-through backward.
    Ste,
    /// Uniform noise of one grid step in place of rounding.
    Dither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub router_mode: RouterMode,
    pub train_quant: TrainQuant,
    pub beta: f64,
    /// Empty means `{0.25, 0.5, 0.75, 1} * n_max`.
    pub flex_betas: Vec<f64>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub phase1_fraction: f64,
    pub ema_decay: f64,
    /// Weight of the full-length reconstruction term.
    pub full_loss_weight: f64,
    pub rms_decay: f64,
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 16,
            lr_start: 5e-2,
            lr_end: 1e-4,
            router_mode: RouterMode::FixedBeta,
            train_quant: TrainQuant::Dither,
            beta: 8.0,
            flex_betas: Vec::new(),
            seed: 0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            phase1_fraction: 0.25,
            ema_decay: DEFAULT_EMA_DECAY,
            full_loss_weight: 1.0,
            rms_decay: 0.99,
            divergence_loss: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_end ({}) <= lr_start ({})",
                self.lr_end, self.lr_start
            ));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return bad(format!(
                "phase1_fraction {} outside [0, 1]",
                self.phase1_fraction
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            ));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad(format!(
                "rms_decay must lie in (0, 1), got {}",
                self.rms_decay
            ));
        }
        if !(self.full_loss_weight >= 0.0 && self.full_loss_weight.is_finite()) {
            return bad("full_loss_weight must be nonnegative".into());
        }
        if !(self.divergence_loss > 0.0) {
            return bad("divergence_loss must be positive".into());
        }
        self.router_state()?;
        Ok(())
    }

    pub fn router_state(&self) -> Result<RouterState> {
        let mut r = RouterState::new(self.beta, TOKENS)?;
        r.ema_decay = self.ema_decay;
        r.flex_betas = self.flex_betas.clone();
        if r.flex_betas.is_empty() {
            r = r.with_default_flex();
        }
        r.validate()?;
        Ok(r)
    }

    /// Cosine decay from `lr_start` to `lr_end` over the run.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_start;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn phase1_steps(&self) -> usize {
        (self.steps as f64 * self.phase1_fraction).round() as usize
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub n_x: f64,
    pub ema: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub router: RouterState,
    pub logs: Vec<LogRow>,
}

/// RMSProp with bias-corrected second moments. Each parameter tensor keeps
/// its own step count, advanced only on steps where it receives a gradient.
#[derive(Debug, Clone)]
pub struct RmsProp {
    decay: f64,
    eps: f64,
    t: Vec<i32>,
    v: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize, decay: f64) -> Self {
        RmsProp {
            decay,
            eps: 1e-8,
            t: vec![0; PARAM_NAMES.len()],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let mut i = 0;
        for (f, (p, g)) in params
            .fields_mut()
            .into_iter()
            .zip(grads.fields())
            .enumerate()
        {
            if g.iter().all(|&d| d == 0.0) {
                i += g.len();
                continue;
            }
            self.t[f] += 1;
            let correction = 1.0 - self.decay.powi(self.t[f]);
            for (w, &d) in p.iter_mut().zip(g) {
                let v = &mut self.v[i];
                *v = self.decay * *v + (1.0 - self.decay) * d * d;
                *w -= lr * d / ((*v / correction).sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Endless synthetic training signals for a run seed.
pub fn synthetic_stream(seed: u64, noise_sigma: f64) -> impl Iterator<Item = ToySignal> {
    let base = (seed % (1 << 20)) << 40;
    (0u64..).map(move |i| sample_signal(base + i, noise_sigma))
}

/// Held-out signals, disjoint from every training stream.
pub fn held_out_set(count: usize, noise_sigma: f64) -> Vec<ToySignal> {
    crate::source::sample_dataset(HELD_OUT_SEED_BASE, count, noise_sigma)
}

/// Worker pool capped by `ITK_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("ITK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct SampleResult {
    loss: f64,
    grads: ModelParams,
}

/// Trains from `init` on `data`. Deterministic for a given config and stream.
pub fn train<I>(config: &TrainConfig, init: ModelParams, data: I) -> Result<TrainOutput>
where
    I: IntoIterator<Item = ToySignal>,
    I::IntoIter: Send,
{
    config.validate()?;
    let pool = thread_pool()?;
    let data = data.into_iter();
    pool.install(move || train_inner(config, init, data))
}

/// [`train`] on the synthetic stream from freshly initialized weights.
pub fn train_synthetic(config: &TrainConfig) -> Result<TrainOutput> {
    train(
        config,
        ModelParams::init(config.seed),
        synthetic_stream(config.seed, config.noise_sigma),
    )
}

fn train_inner(
    config: &TrainConfig,
    init: ModelParams,
    mut data: impl Iterator<Item = ToySignal>,
) -> Result<TrainOutput> {
    let mut model = Model::new(init, crate::fsq::FsqConfig::default_video())?;
    let mut router = config.router_state()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let mut opt = RmsProp::new(ModelParams::len(), config.rms_decay);
    let phase1 = config.phase1_steps();
    let mut logs = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch as f64;

    for step in 0..config.steps {
        let batch: Vec<ToySignal> = data.by_ref().take(config.batch).collect();
        if batch.len() < config.batch {
            return Err(Error::Config(format!("data stream ran out at step {step}")));
        }
        for s in &batch {
            s.validate()?;
        }
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
        let quant = |seed: u64, salt: u64| match config.train_quant {
            TrainQuant::Ste => QuantMode::Fsq,
            TrainQuant::Dither => QuantMode::Dither(seed ^ salt),
        };
        let fulls = batch
            .par_iter()
            .zip(&seeds)
            .map(|(s, &seed)| model.forward_full_with(&s.values, quant(seed, 0)))
            .collect::<Result<Vec<_>>>()?;

        // Sequential: EMA update and routing, one sample at a time.
        let routing = step >= phase1 && config.router_mode != RouterMode::FullLength;
        let mut lengths = Vec::with_capacity(batch.len());
        for f in &fulls {
            router.update_ema(f.nll_proxy.max(f64::MIN_POSITIVE))?;
            let n = if !routing {
                TOKENS
            } else {
                match config.router_mode {
                    RouterMode::FixedBeta => router.route(f.nll_proxy)?,
                    RouterMode::Flex => {
                        let beta = router.sample_flex_beta(&mut rng)?;
                        router.route_with(beta, f.nll_proxy)?
                    }
                    RouterMode::UniformBaseline => rng.random_range(router.n_min..=router.n_max),
                    RouterMode::FullLength => TOKENS,
                }
            };
            lengths.push(n);
        }

        let results = fulls
            .par_iter()
            .zip(&lengths)
            .zip(&seeds)
            .map(|((full, &n), &seed)| -> Result<SampleResult> {
                let full_mse = full.nll_proxy / SIGNAL_LEN as f64;
                if !routing {
                    let grads = model.backward(&full.trace, scale)?;
                    return Ok(SampleResult {
                        loss: full_mse,
                        grads,
                    });
                }
                let mask = if n == TOKENS {
                    TokenMask::full(TOKENS)
                } else {
                    AdaptiveTokenizer::mask_for(full, n)?
                };
                let adaptive =
                    model.forward_adaptive_reusing_with(&full.trace, &mask, quant(seed, 1))?;
                let mut grads = model.backward(&adaptive.trace, scale)?;
                if config.full_loss_weight > 0.0 {
                    model.backward_into(
                        &full.trace,
                        scale * config.full_loss_weight,
                        &mut grads,
                    )?;
                }
                Ok(SampleResult {
                    loss: adaptive.loss + config.full_loss_weight * full_mse,
                    grads,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = ModelParams::zeros();
        let mut loss = 0.0;
        for r in &results {
            grads.axpy(1.0, &r.grads);
            loss += r.loss * scale;
        }
        if !loss.is_finite() || loss > config.divergence_loss || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = config.lr_at(step);
        opt.step(&mut model.params, &grads, lr);
        if !model.params.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        logs.push(LogRow {
            step,
            loss,
            n_x: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
            ema: router.ema_nll.expect("updated above"),
            lr,
        });
    }
    Ok(TrainOutput {
        params: model.params,
        router,
        logs,
    })
}

/// Writes the log as CSV with columns `step,loss,n_x,ema,lr`.
pub fn write_log_csv<W: Write>(mut w: W, logs: &[LogRow]) -> Result<()> {
    writeln!(w, "step,loss,n_x,ema,lr")?;
    for r in logs {
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.n_x, r.ema, r.lr)?;
    }
    Ok(())
}
