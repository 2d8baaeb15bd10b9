//! The toy tokenizer: encoder, mask-conditioned compressor and decompressor,
//! FSQ bottleneck and decoder, with exact manual backpropagation.
//!
//! One signal of 64 samples is cut into 16 patches of 4. Each patch is encoded
//! to a 6-dimensional latent `h = tanh(W x + b)`. The compressor adds a
//! per-token residual MLP over `[h, mask]`, then lets each kept token absorb
//! the dropped ones through a learned 16x16 matrix. Kept tokens are quantized;
//! dropped positions are replaced by a learned fill vector. The decompressor
//! gives every dropped position two context vectors, softmax-weighted averages
//! of the kept latents to its left and to its right (learned 16x16 logits).
//! Their mean is added to the fill, and a per-token residual MLP over
//! `[latent, left, right, mask]` follows. An affine decoder maps each latent
//! back to a patch. Both mixers vanish when every token is kept.

mod checkpoint;
mod gradcheck;
mod params;
mod pipeline;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, ParamSubset};
pub use params::{ModelParams, Shapes, DCP_IN, HIDDEN, LATENT, MLP_IN, PARAM_NAMES, PATCH, TOKENS};
pub use pipeline::{AdaptiveTokenizer, Routed};

use crate::compressor::TokenMask;
use crate::error::{invalid, Error, Result};
use crate::fsq::{quantize_scalar, FsqConfig, TokenCode};
use crate::source::SIGNAL_LEN;

type Tok<const N: usize> = [[f64; N]; TOKENS];

/// How the bottleneck is realized in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    /// Snap to the FSQ grid; gradients pass straight through inside `(-1, 1)`.
    #[default]
    Fsq,
    /// Clamp to `[-1, 1]` only. The backward pass is exact for this network.
    Surrogate,
    /// Clamp, then add uniform noise of one grid step, drawn from the seed.
    Dither(u64),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counts encoder, compressor and decoder evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter {
    encoder: AtomicU64,
    compressor: AtomicU64,
    decoder: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeCounts {
    pub encoder: u64,
    pub compressor: u64,
    pub decoder: u64,
}

impl NfeCounter {
    pub fn snapshot(&self) -> NfeCounts {
        NfeCounts {
            encoder: self.encoder.load(Ordering::Relaxed),
            compressor: self.compressor.load(Ordering::Relaxed),
            decoder: self.decoder.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.encoder.store(0, Ordering::Relaxed);
        self.compressor.store(0, Ordering::Relaxed);
        self.decoder.store(0, Ordering::Relaxed);
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for NfeCounter {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        NfeCounter {
            encoder: AtomicU64::new(s.encoder),
            compressor: AtomicU64::new(s.compressor),
            decoder: AtomicU64::new(s.decoder),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    Full,
    Adaptive,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    fingerprint: u64,
    path: Path,
    x: Tok<PATCH>,
    h: Tok<LATENT>,
    m: [f64; TOKENS],
    s1: Tok<HIDDEN>,
    g: Tok<LATENT>,
    c: Tok<LATENT>,
    hhat: Tok<LATENT>,
    e: Tok<LATENT>,
    ctx: Context,
    s2: Tok<HIDDEN>,
    o: Tok<LATENT>,
    y: Tok<PATCH>,
    mask: TokenMask,
    codes: Vec<TokenCode>,
}

impl ForwardTrace {
    pub fn mask(&self) -> &TokenMask {
        &self.mask
    }

    /// FSQ codes of the kept tokens, in position order.
    pub fn codes(&self) -> &[TokenCode] {
        &self.codes
    }

    pub fn latent(&self) -> Vec<Vec<f64>> {
        self.h.iter().map(|r| r.to_vec()).collect()
    }

    /// Latents entering the bottleneck (after the compressor on the adaptive path).
    pub fn pre_quant(&self) -> Vec<Vec<f64>> {
        self.c.iter().map(|r| r.to_vec()).collect()
    }

    fn recon(&self) -> Vec<f64> {
        self.y.iter().flat_map(|r| r.iter().copied()).collect()
    }

    /// Bottleneck inputs of kept tokens that sit on the clamp, one flag per component.
    pub fn clamp_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for t in self.mask.kept_positions() {
            out.extend(self.c[t].iter().map(|v| v.abs() >= 1.0));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    pub recon: Vec<f64>,
    pub per_element_sq_errors: Vec<f64>,
    /// Sum of the per-element squared errors.
    pub nll_proxy: f64,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutput {
    pub recon: Vec<f64>,
    /// Mean squared error over the signal.
    pub loss: f64,
    pub trace: ForwardTrace,
}

/// Parameters plus the fixed bottleneck configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub fsq: FsqConfig,
    pub quant: QuantMode,
    pub nfe: NfeCounter,
}

fn affine<const I: usize, const O: usize>(w: &[f64], b: &[f64], x: &[f64; I]) -> [f64; O] {
    let mut out = [0.0; O];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * I..(j + 1) * I];
        *o = b[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

/// `dx += W^T dy` and `dW += dy x^T`, `db += dy`.
fn affine_back<const I: usize, const O: usize>(
    w: &[f64],
    x: &[f64; I],
    dy: &[f64; O],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64; I],
) {
    for j in 0..O {
        let d = dy[j];
        if d == 0.0 {
            continue;
        }
        db[j] += d;
        let row = &w[j * I..(j + 1) * I];
        let drow = &mut dw[j * I..(j + 1) * I];
        for i in 0..I {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
}

fn with_mask(v: &[f64; LATENT], m: f64) -> [f64; MLP_IN] {
    let mut u = [0.0; MLP_IN];
    u[..LATENT].copy_from_slice(v);
    u[LATENT] = m;
    u
}

/// Compressor mixer: kept tokens absorb dropped ones,
/// `out_t = in_t + m_t * sum_s mix[t][s] (1 - m_s) in_s`.
fn absorb(mix: &[f64], m: &[f64; TOKENS], input: &Tok<LATENT>) -> Tok<LATENT> {
    let mut out = *input;
    for t in 0..TOKENS {
        if m[t] == 0.0 {
            continue;
        }
        for s in 0..TOKENS {
            let a = mix[t * TOKENS + s] * (1.0 - m[s]);
            if a != 0.0 {
                for k in 0..LATENT {
                    out[t][k] += a * input[s][k];
                }
            }
        }
    }
    out
}

fn absorb_back(
    mix: &[f64],
    m: &[f64; TOKENS],
    input: &Tok<LATENT>,
    d_out: &Tok<LATENT>,
    d_mix: &mut [f64],
) -> Tok<LATENT> {
    let mut d_in = *d_out;
    for t in 0..TOKENS {
        if m[t] == 0.0 {
            continue;
        }
        for s in 0..TOKENS {
            let gate = 1.0 - m[s];
            if gate == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for k in 0..LATENT {
                acc += d_out[t][k] * input[s][k];
            }
            d_mix[t * TOKENS + s] += gate * acc;
            let a = mix[t * TOKENS + s] * gate;
            for k in 0..LATENT {
                d_in[s][k] += a * d_out[t][k];
            }
        }
    }
    d_in
}

/// Softmax of row `t` of the logits over the kept positions on one side of `t`.
fn side_weights(logits: &[f64], m: &[f64; TOKENS], t: usize, right: bool) -> [f64; TOKENS] {
    let row = &logits[t * TOKENS..(t + 1) * TOKENS];
    let range = if right { t + 1..TOKENS } else { 0..t };
    let peak = range
        .clone()
        .filter(|&s| m[s] != 0.0)
        .map(|s| row[s])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; TOKENS];
    if peak == f64::NEG_INFINITY {
        return w;
    }
    let mut z = 0.0;
    for s in range {
        if m[s] != 0.0 {
            w[s] = (row[s] - peak).exp();
            z += w[s];
        }
    }
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// Left and right context of every dropped position; zero rows for kept
/// positions and for empty sides.
#[derive(Debug, Clone, Copy)]
struct Context {
    left: Tok<LATENT>,
    right: Tok<LATENT>,
    sides: [f64; TOKENS],
}

fn gather_context(logits: &[f64], m: &[f64; TOKENS], input: &Tok<LATENT>) -> Context {
    let mut ctx = Context {
        left: [[0.0; LATENT]; TOKENS],
        right: [[0.0; LATENT]; TOKENS],
        sides: [0.0; TOKENS],
    };
    for t in 0..TOKENS {
        if m[t] != 0.0 {
            continue;
        }
        for (right, out) in [(false, &mut ctx.left[t]), (true, &mut ctx.right[t])] {
            let w = side_weights(logits, m, t, right);
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            ctx.sides[t] += 1.0;
            for s in 0..TOKENS {
                if w[s] != 0.0 {
                    for k in 0..LATENT {
                        out[k] += w[s] * input[s][k];
                    }
                }
            }
        }
    }
    ctx
}

fn gather_context_back(
    logits: &[f64],
    m: &[f64; TOKENS],
    input: &Tok<LATENT>,
    d_left: &Tok<LATENT>,
    d_right: &Tok<LATENT>,
    d_logits: &mut [f64],
    d_in: &mut Tok<LATENT>,
) {
    for t in 0..TOKENS {
        if m[t] != 0.0 {
            continue;
        }
        for (right, d_out) in [(false, &d_left[t]), (true, &d_right[t])] {
            let w = side_weights(logits, m, t, right);
            let mut dots = [0.0; TOKENS];
            let mut mean = 0.0;
            for s in 0..TOKENS {
                if w[s] != 0.0 {
                    dots[s] = (0..LATENT).map(|k| d_out[k] * input[s][k]).sum();
                    mean += w[s] * dots[s];
                    for k in 0..LATENT {
                        d_in[s][k] += w[s] * d_out[k];
                    }
                }
            }
            for s in 0..TOKENS {
                if w[s] != 0.0 {
                    d_logits[t * TOKENS + s] += w[s] * (dots[s] - mean);
                }
            }
        }
    }
}

/// Residual MLP block `v + W2 tanh(W1 u + b1) + b2`, where `u` carries `v` and extra features.
fn mlp_block<const I: usize>(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    v: &[f64; LATENT],
    u: &[f64; I],
) -> ([f64; HIDDEN], [f64; LATENT]) {
    let mut s: [f64; HIDDEN] = affine(w1, b1, u);
    s.iter_mut().for_each(|z| *z = z.tanh());
    let r: [f64; LATENT] = affine(w2, b2, &s);
    let mut out = *v;
    out.iter_mut().zip(r).for_each(|(o, r)| *o += r);
    (s, out)
}

struct MlpGrads<'a> {
    w1: &'a mut [f64],
    b1: &'a mut [f64],
    w2: &'a mut [f64],
    b2: &'a mut [f64],
}

/// Returns the gradient with respect to `u`; the residual path is left to the caller.
fn mlp_block_back<const I: usize>(
    w1: &[f64],
    w2: &[f64],
    u: &[f64; I],
    s: &[f64; HIDDEN],
    d_out: &[f64; LATENT],
    grads: MlpGrads<'_>,
) -> [f64; I] {
    let mut ds = [0.0; HIDDEN];
    affine_back(w2, s, d_out, grads.w2, grads.b2, &mut ds);
    let mut dz = [0.0; HIDDEN];
    for k in 0..HIDDEN {
        dz[k] = ds[k] * (1.0 - s[k] * s[k]);
    }
    let mut du = [0.0; I];
    affine_back(w1, u, &dz, grads.w1, grads.b1, &mut du);
    du
}

fn decompressor_input(e: &[f64; LATENT], ctx: &Context, t: usize, m: f64) -> [f64; DCP_IN] {
    let mut u = [0.0; DCP_IN];
    u[..LATENT].copy_from_slice(e);
    u[LATENT..2 * LATENT].copy_from_slice(&ctx.left[t]);
    u[2 * LATENT..3 * LATENT].copy_from_slice(&ctx.right[t]);
    u[3 * LATENT] = m;
    u
}

fn patches(signal: &[f64]) -> Result<Tok<PATCH>> {
    if signal.len() != SIGNAL_LEN {
        return invalid(format!("signal length {} != {SIGNAL_LEN}", signal.len()));
    }
    let mut x = [[0.0; PATCH]; TOKENS];
    for (t, chunk) in signal.chunks_exact(PATCH).enumerate() {
        x[t].copy_from_slice(chunk);
    }
    Ok(x)
}

impl Model {
    pub fn new(params: ModelParams, fsq: FsqConfig) -> Result<Self> {
        if fsq.dim() != LATENT {
            return invalid(format!(
                "FSQ config has {} dimensions, latent has {LATENT}",
                fsq.dim()
            ));
        }
        if !params.is_finite() {
            return invalid("parameters must be finite");
        }
        Ok(Model {
            params,
            fsq,
            quant: QuantMode::Fsq,
            nfe: NfeCounter::default(),
        })
    }

    pub fn init(seed: u64) -> Self {
        Model {
            params: ModelParams::init(seed),
            fsq: FsqConfig::default_video(),
            quant: QuantMode::Fsq,
            nfe: NfeCounter::default(),
        }
    }

    pub fn with_quant(mut self, quant: QuantMode) -> Self {
        self.quant = quant;
        self
    }

    fn encode_patches(&self, x: &Tok<PATCH>) -> Tok<LATENT> {
        let p = &self.params;
        let mut h = [[0.0; LATENT]; TOKENS];
        for (ht, xt) in h.iter_mut().zip(x) {
            *ht = affine(&p.enc_w, &p.enc_b, xt);
            ht.iter_mut().for_each(|v| *v = v.tanh());
        }
        h
    }

    /// Encoder only: a 16x6 latent matrix with components in `(-1, 1)`.
    pub fn encode(&self, signal: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = patches(signal)?;
        NfeCounter::bump(&self.nfe.encoder);
        Ok(self.encode_patches(&x).iter().map(|r| r.to_vec()).collect())
    }

    fn bottleneck(
        &self,
        c: &[f64; LATENT],
        token: usize,
        quant: QuantMode,
    ) -> ([f64; LATENT], TokenCode) {
        let levels = self.fsq.levels();
        let digits: Vec<u8> = c
            .iter()
            .zip(levels)
            .map(|(&v, &l)| quantize_scalar(v, l))
            .collect();
        let mut q = [0.0; LATENT];
        for k in 0..LATENT {
            q[k] = match quant {
                QuantMode::Fsq => FsqConfig::grid_value(levels[k], digits[k]),
                QuantMode::Surrogate => c[k].clamp(-1.0, 1.0),
                QuantMode::Dither(seed) => {
                    let u = (splitmix64(seed ^ (token * LATENT + k) as u64) >> 11) as f64
                        / (1u64 << 53) as f64;
                    c[k].clamp(-1.0, 1.0) + (u - 0.5) * 2.0 / (levels[k] - 1) as f64
                }
            };
        }
        (q, TokenCode { digits })
    }

    fn decode_latents(&self, o: &Tok<LATENT>) -> Tok<PATCH> {
        let p = &self.params;
        let mut y = [[0.0; PATCH]; TOKENS];
        for (yt, ot) in y.iter_mut().zip(o) {
            *yt = affine(&p.dec_w, &p.dec_b, ot);
        }
        y
    }

    fn blank_trace(
        &self,
        path: Path,
        x: Tok<PATCH>,
        h: Tok<LATENT>,
        mask: TokenMask,
    ) -> ForwardTrace {
        ForwardTrace {
            fingerprint: self.params.fingerprint(),
            path,
            x,
            h,
            m: [0.0; TOKENS],
            s1: [[0.0; HIDDEN]; TOKENS],
            g: [[0.0; LATENT]; TOKENS],
            c: [[0.0; LATENT]; TOKENS],
            hhat: [[0.0; LATENT]; TOKENS],
            e: [[0.0; LATENT]; TOKENS],
            ctx: Context {
                left: [[0.0; LATENT]; TOKENS],
                right: [[0.0; LATENT]; TOKENS],
                sides: [0.0; TOKENS],
            },
            s2: [[0.0; HIDDEN]; TOKENS],
            o: [[0.0; LATENT]; TOKENS],
            y: [[0.0; PATCH]; TOKENS],
            mask,
            codes: Vec::new(),
        }
    }

    fn full_from_latent(&self, x: Tok<PATCH>, h: Tok<LATENT>, quant: QuantMode) -> FullOutput {
        let mut tr = self.blank_trace(Path::Full, x, h, TokenMask::full(TOKENS));
        tr.m = [1.0; TOKENS];
        tr.c = h;
        for t in 0..TOKENS {
            let (q, code) = self.bottleneck(&h[t], t, quant);
            tr.hhat[t] = q;
            tr.codes.push(code);
        }
        tr.o = tr.hhat;
        tr.e = tr.hhat;
        tr.y = self.decode_latents(&tr.o);
        NfeCounter::bump(&self.nfe.decoder);
        let recon = tr.recon();
        let per_element_sq_errors: Vec<f64> = recon
            .iter()
            .zip(x.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        let nll_proxy = per_element_sq_errors.iter().sum();
        FullOutput {
            recon,
            per_element_sq_errors,
            nll_proxy,
            trace: tr,
        }
    }

    /// Router pass: encode, quantize every token, decode. No compressor.
    pub fn forward_full(&self, signal: &[f64]) -> Result<FullOutput> {
        self.forward_full_with(signal, self.quant)
    }

    /// [`Model::forward_full`] with an explicit bottleneck mode.
    pub fn forward_full_with(&self, signal: &[f64], quant: QuantMode) -> Result<FullOutput> {
        let x = patches(signal)?;
        NfeCounter::bump(&self.nfe.encoder);
        let h = self.encode_patches(&x);
        Ok(self.full_from_latent(x, h, quant))
    }

    fn compress(&self, h: &Tok<LATENT>, m: &[f64; TOKENS], tr: &mut ForwardTrace) {
        let p = &self.params;
        for t in 0..TOKENS {
            let (s, g) = mlp_block(
                &p.cmp_w1,
                &p.cmp_b1,
                &p.cmp_w2,
                &p.cmp_b2,
                &h[t],
                &with_mask(&h[t], m[t]),
            );
            tr.s1[t] = s;
            tr.g[t] = g;
        }
        tr.c = absorb(&p.cmp_mix, m, &tr.g);
        NfeCounter::bump(&self.nfe.compressor);
    }

    /// Kept-token codes entering the stream, plus the scattered latents.
    fn quantize_kept(&self, tr: &mut ForwardTrace, quant: QuantMode) {
        let p = &self.params;
        tr.codes.clear();
        for t in 0..TOKENS {
            if tr.mask.is_kept(t) {
                let (q, code) = self.bottleneck(&tr.c[t], t, quant);
                tr.hhat[t] = q;
                tr.codes.push(code);
            } else {
                tr.hhat[t].copy_from_slice(&p.fill);
            }
        }
    }

    fn decompress_and_decode(&self, tr: &mut ForwardTrace) {
        let p = &self.params;
        tr.ctx = gather_context(&p.dcp_mix, &tr.m, &tr.hhat);
        for t in 0..TOKENS {
            tr.e[t] = tr.hhat[t];
            if tr.ctx.sides[t] > 0.0 {
                for k in 0..LATENT {
                    tr.e[t][k] += (tr.ctx.left[t][k] + tr.ctx.right[t][k]) / tr.ctx.sides[t];
                }
            }
            let u = decompressor_input(&tr.e[t], &tr.ctx, t, tr.m[t]);
            let (s, o) = mlp_block(&p.dcp_w1, &p.dcp_b1, &p.dcp_w2, &p.dcp_b2, &tr.e[t], &u);
            tr.s2[t] = s;
            tr.o[t] = o;
        }
        tr.y = self.decode_latents(&tr.o);
        NfeCounter::bump(&self.nfe.compressor);
        NfeCounter::bump(&self.nfe.decoder);
    }

    fn adaptive_from_latent(
        &self,
        x: Tok<PATCH>,
        h: Tok<LATENT>,
        mask: &TokenMask,
        quant: QuantMode,
    ) -> Result<AdaptiveOutput> {
        if mask.n_max() != TOKENS {
            return invalid(format!(
                "mask covers {} positions, model has {TOKENS}",
                mask.n_max()
            ));
        }
        if mask.popcount() == 0 {
            return invalid("mask keeps no tokens");
        }
        let mut tr = self.blank_trace(Path::Adaptive, x, h, mask.clone());
        for t in 0..TOKENS {
            tr.m[t] = if mask.is_kept(t) { 1.0 } else { 0.0 };
        }
        let m = tr.m;
        self.compress(&h, &m, &mut tr);
        self.quantize_kept(&mut tr, quant);
        self.decompress_and_decode(&mut tr);
        let recon = tr.recon();
        let loss = recon
            .iter()
            .zip(x.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / SIGNAL_LEN as f64;
        Ok(AdaptiveOutput {
            recon,
            loss,
            trace: tr,
        })
    }

    /// Full adaptive pipeline from the raw signal.
    pub fn forward_adaptive(&self, signal: &[f64], mask: &TokenMask) -> Result<AdaptiveOutput> {
        let x = patches(signal)?;
        NfeCounter::bump(&self.nfe.encoder);
        let h = self.encode_patches(&x);
        self.adaptive_from_latent(x, h, mask, self.quant)
    }

    /// Adaptive pass that reuses the encoder output of a router pass.
    pub fn forward_adaptive_reusing(
        &self,
        full: &ForwardTrace,
        mask: &TokenMask,
    ) -> Result<AdaptiveOutput> {
        self.forward_adaptive_reusing_with(full, mask, self.quant)
    }

    pub fn forward_adaptive_reusing_with(
        &self,
        full: &ForwardTrace,
        mask: &TokenMask,
        quant: QuantMode,
    ) -> Result<AdaptiveOutput> {
        if full.fingerprint != self.params.fingerprint() {
            return Err(Error::StaleTrace);
        }
        self.adaptive_from_latent(full.x, full.h, mask, quant)
    }

    /// Detokenization: codes of kept positions back to a 64-sample signal.
    pub fn decode_tokens(&self, codes: &[TokenCode], mask: &TokenMask) -> Result<Vec<f64>> {
        if mask.n_max() != TOKENS {
            return invalid(format!(
                "mask covers {} positions, model has {TOKENS}",
                mask.n_max()
            ));
        }
        if codes.len() != mask.popcount() {
            return invalid(format!(
                "{} codes for {} kept positions",
                codes.len(),
                mask.popcount()
            ));
        }
        let zero = [[0.0; PATCH]; TOKENS];
        let mut tr = self.blank_trace(Path::Adaptive, zero, [[0.0; LATENT]; TOKENS], mask.clone());
        let mut it = codes.iter();
        for t in 0..TOKENS {
            if mask.is_kept(t) {
                tr.m[t] = 1.0;
                let q = self.fsq.dequantize(it.next().expect("count checked"))?;
                tr.hhat[t].copy_from_slice(&q);
            } else {
                tr.hhat[t].copy_from_slice(&self.params.fill);
            }
        }
        tr.codes = codes.to_vec();
        self.decompress_and_decode(&mut tr);
        Ok(tr.recon())
    }

    /// Gradients of `scale * MSE(recon, signal)` for the pass recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, scale: f64) -> Result<ModelParams> {
        let mut grads = ModelParams::zeros();
        self.backward_into(trace, scale, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating form of [`Model::backward`].
    pub fn backward_into(
        &self,
        tr: &ForwardTrace,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<()> {
        if tr.fingerprint != self.params.fingerprint() {
            return Err(Error::StaleTrace);
        }
        let p = &self.params;
        let coef = 2.0 * scale / SIGNAL_LEN as f64;
        let mut dy = [[0.0; PATCH]; TOKENS];
        for t in 0..TOKENS {
            for i in 0..PATCH {
                dy[t][i] = coef * (tr.y[t][i] - tr.x[t][i]);
            }
        }
        let mut d_o = [[0.0; LATENT]; TOKENS];
        for t in 0..TOKENS {
            affine_back(
                &p.dec_w,
                &tr.o[t],
                &dy[t],
                &mut grads.dec_w,
                &mut grads.dec_b,
                &mut d_o[t],
            );
        }
        let d_hhat = match tr.path {
            Path::Full => d_o,
            Path::Adaptive => {
                let mut d_hhat = [[0.0; LATENT]; TOKENS];
                let mut d_left = [[0.0; LATENT]; TOKENS];
                let mut d_right = [[0.0; LATENT]; TOKENS];
                for t in 0..TOKENS {
                    let g = MlpGrads {
                        w1: &mut grads.dcp_w1,
                        b1: &mut grads.dcp_b1,
                        w2: &mut grads.dcp_w2,
                        b2: &mut grads.dcp_b2,
                    };
                    let u = decompressor_input(&tr.e[t], &tr.ctx, t, tr.m[t]);
                    let du = mlp_block_back(&p.dcp_w1, &p.dcp_w2, &u, &tr.s2[t], &d_o[t], g);
                    let sides = tr.ctx.sides[t];
                    for k in 0..LATENT {
                        let de = d_o[t][k] + du[k];
                        d_hhat[t][k] = de;
                        d_left[t][k] = du[LATENT + k];
                        d_right[t][k] = du[2 * LATENT + k];
                        if sides > 0.0 {
                            d_left[t][k] += de / sides;
                            d_right[t][k] += de / sides;
                        }
                    }
                }
                gather_context_back(
                    &p.dcp_mix,
                    &tr.m,
                    &tr.hhat,
                    &d_left,
                    &d_right,
                    &mut grads.dcp_mix,
                    &mut d_hhat,
                );
                d_hhat
            }
        };
        let mut dc = [[0.0; LATENT]; TOKENS];
        for t in 0..TOKENS {
            if tr.mask.is_kept(t) {
                for k in 0..LATENT {
                    let v = tr.c[t][k];
                    dc[t][k] = if v > -1.0 && v < 1.0 {
                        d_hhat[t][k]
                    } else {
                        0.0
                    };
                }
            } else {
                for k in 0..LATENT {
                    grads.fill[k] += d_hhat[t][k];
                }
            }
        }
        let dh = match tr.path {
            Path::Full => dc,
            Path::Adaptive => {
                let dg = absorb_back(&p.cmp_mix, &tr.m, &tr.g, &dc, &mut grads.cmp_mix);
                let mut dh = [[0.0; LATENT]; TOKENS];
                for t in 0..TOKENS {
                    let g = MlpGrads {
                        w1: &mut grads.cmp_w1,
                        b1: &mut grads.cmp_b1,
                        w2: &mut grads.cmp_w2,
                        b2: &mut grads.cmp_b2,
                    };
                    let du = mlp_block_back(
                        &p.cmp_w1,
                        &p.cmp_w2,
                        &with_mask(&tr.h[t], tr.m[t]),
                        &tr.s1[t],
                        &dg[t],
                        g,
                    );
                    for k in 0..LATENT {
                        dh[t][k] = dg[t][k] + du[k];
                    }
                }
                dh
            }
        };
        for t in 0..TOKENS {
            let mut da = [0.0; LATENT];
            for k in 0..LATENT {
                da[k] = dh[t][k] * (1.0 - tr.h[t][k] * tr.h[t][k]);
            }
            let mut dx = [0.0; PATCH];
            affine_back(
                &p.enc_w,
                &tr.x[t],
                &da,
                &mut grads.enc_w,
                &mut grads.enc_b,
                &mut dx,
            );
        }
        Ok(())
    }
}
