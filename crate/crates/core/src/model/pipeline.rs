use super::{AdaptiveOutput, FullOutput, Model, PATCH, TOKENS};
use crate::codec::TokenStream;
use crate::compressor::{build_mask, contiguous_patch_map, per_token_scores, TokenMask};
use crate::error::{Error, Result};
use crate::router::RouterState;
use crate::source::SIGNAL_LEN;

/// Result of the router pass for one signal.
#[derive(Debug, Clone)]
pub struct Routed {
    pub full: FullOutput,
    pub n_x: usize,
    pub mask: TokenMask,
}

/// Model plus router: the inference path from signal to stream and back.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveTokenizer<'a> {
    pub model: &'a Model,
    pub router: &'a RouterState,
}

impl<'a> AdaptiveTokenizer<'a> {
    pub fn new(model: &'a Model, router: &'a RouterState) -> Self {
        AdaptiveTokenizer { model, router }
    }

    /// Mask of the `n_x` tokens with the largest full-length error.
    pub fn mask_for(full: &FullOutput, n_x: usize) -> Result<TokenMask> {
        let map = contiguous_patch_map(SIGNAL_LEN, PATCH);
        let scores = per_token_scores(&full.per_element_sq_errors, &map, TOKENS)?;
        build_mask(&scores, n_x)
    }

    /// Full-length pass, token count and mask. `mean_nll` overrides the router's EMA.
    pub fn route(&self, signal: &[f64], beta: f64, mean_nll: Option<f64>) -> Result<Routed> {
        let full = self.model.forward_full(signal)?;
        let n_x = match mean_nll {
            Some(m) => self.router.route_normalized(beta, full.nll_proxy, m)?,
            None => self.router.route_with(beta, full.nll_proxy)?,
        };
        let mask = Self::mask_for(&full, n_x)?;
        Ok(Routed { full, n_x, mask })
    }

    pub fn tokenize(
        &self,
        signal: &[f64],
        beta: f64,
        mean_nll: Option<f64>,
    ) -> Result<(TokenStream, AdaptiveOutput)> {
        let routed = self.route(signal, beta, mean_nll)?;
        let out = self
            .model
            .forward_adaptive_reusing(&routed.full.trace, &routed.mask)?;
        let stream = TokenStream {
            config: self.model.fsq.clone(),
            mask: routed.mask,
            codes: out.trace.codes().to_vec(),
        };
        Ok((stream, out))
    }

    pub fn detokenize(&self, stream: &TokenStream) -> Result<Vec<f64>> {
        if stream.config != self.model.fsq {
            return Err(Error::Version(format!(
                "stream FSQ levels {:?} differ from the model's {:?}",
                stream.config.levels(),
                self.model.fsq.levels()
            )));
        }
        if stream.mask.n_max() != TOKENS {
            return Err(Error::Version(format!(
                "stream has n_max {}, model has {TOKENS}",
                stream.mask.n_max()
            )));
        }
        self.model.decode_tokens(&stream.codes, &stream.mask)
    }
}
