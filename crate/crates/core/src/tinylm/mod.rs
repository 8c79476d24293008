//! Minimal deterministic inference: byte tokenizer, reference forward pass,
//! min-p sampling, and an autoregressive decoding loop.

pub mod model;
pub mod sampler;
pub mod tokenizer;

pub use model::{next_token_dist, softmax, Model, NextTokenDist};
pub use sampler::{min_p_filter, sample_min_p};
pub use tokenizer::{decode, encode, TokenId, BOS, EOS, PAD, VOCAB_SIZE};

use crate::tensor_store::{Checkpoint, StoreError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Prompt template applied before scoring or generation; `{prompt}` is the
/// placeholder. Fixture models have no chat template, so one fixed wrapper
/// is used everywhere and can be overridden per call.
pub const DEFAULT_TEMPLATE: &str = "Q: {prompt}\nA: ";

/// Substitute `text` into a template's `{prompt}` placeholder.
pub fn apply_template(template: &str, text: &str) -> String {
    template.replace("{prompt}", text)
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("TokenOutOfRange: id {id} >= vocab {vocab}")]
    TokenOutOfRange { id: u16, vocab: usize },
    #[error("EmptyPrompt: prompt must contain at least one token")]
    EmptyPrompt,
    #[error("InvalidDistribution: {0}")]
    InvalidDistribution(String),
    #[error("InvalidSamplerConfig: {0}")]
    InvalidSamplerConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Decoding configuration: temperature, min-p base, and the stream seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub p_base: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, p_base: f64, seed: u64) -> Result<Self, LmError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(LmError::InvalidSamplerConfig(format!(
                "temperature {temperature} must be positive"
            )));
        }
        if !(p_base > 0.0 && p_base <= 1.0) {
            return Err(LmError::InvalidSamplerConfig(format!(
                "p_base {p_base} must lie in (0, 1]"
            )));
        }
        Ok(SamplerConfig {
            temperature,
            p_base,
            seed,
        })
    }
}

impl Model {
    /// Sample up to `max_new` tokens after the prompt, stopping early on
    /// EOS. The generator stream is owned by this call and derived from
    /// `cfg.seed`, so equal inputs yield equal continuations.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        cfg: &SamplerConfig,
        max_new: usize,
    ) -> Result<Vec<TokenId>, LmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut context = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let dist = self.next_token_dist(&context)?;
            let tok = sample_min_p(&dist, cfg, &mut rng);
            out.push(tok);
            context.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// One-shot generation; decodes the checkpoint on every call.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[TokenId],
    cfg: &SamplerConfig,
    max_new: usize,
) -> Result<Vec<TokenId>, LmError> {
    Model::from_checkpoint(ckpt)?.generate(prompt, cfg, max_new)
}
