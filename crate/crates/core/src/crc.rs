//! Constrained Random Character proxy task.
//!
//! Each prompt asks for one random character from an explicitly stated
//! range, so the valid token set is known exactly. Quality is the
//! probability mass a model places on the valid set at the first generated
//! position; diversity is the entropy of the distribution renormalized over
//! that set. Both are read directly off the next-token distribution, so no
//! sampling is needed to score a model.

use crate::tensor_store::Checkpoint;
use crate::tinylm::{apply_template, encode, LmError, Model, NextTokenDist, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Prompts generated per constraint family.
pub const PROMPTS_PER_FAMILY: usize = 20;

/// Upper bound on any prompt's valid-set entropy, `ln 26`.
pub const MAX_DIVERSITY: f64 = 3.258_096_538_021_482;

#[derive(Debug, Error)]
pub enum CrcError {
    #[error("ZeroValidMass: no probability mass on the valid set")]
    ZeroValidMass,
    #[error("EmptySuite: suite contains no prompts")]
    EmptySuite,
    #[error("SuiteParse: {0}")]
    SuiteParse(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Digit,
    Letter,
}

/// One constrained prompt: the instruction text and the explicit set of
/// single-token answers it admits.
#[derive(Debug, Clone, PartialEq)]
pub struct CrcPrompt {
    pub text: String,
    /// Sorted, distinct single-byte token ids.
    pub valid_tokens: Vec<TokenId>,
    pub family: Family,
}

/// A generated prompt set: `PROMPTS_PER_FAMILY` per family, fully
/// determined by the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CrcSuite {
    pub prompts: Vec<CrcPrompt>,
    pub seed: u64,
}

/// Per-prompt quality/diversity pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub quality: f64,
    pub diversity: f64,
    /// Set when the prompt drew zero valid mass and diversity was pinned to 0.
    pub zero_valid_mass: bool,
}

/// Suite-level score: mean quality and mean diversity over all prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrcScore {
    pub quality: f64,
    pub diversity: f64,
    /// Number of prompts that carried zero valid mass.
    pub zero_mass_prompts: usize,
    pub per_prompt: Vec<PromptScore>,
}

/// Generate the default suite: 20 digit prompts over ranges `[a, b]` with
/// `b - a >= 3`, and 20 letter prompts over consecutive uppercase spans of
/// 4 to 10 letters. Valid-set sizes stay in 4..=10 for both families so
/// entropy differences remain measurable.
pub fn build_suite(seed: u64) -> CrcSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(2 * PROMPTS_PER_FAMILY);
    for _ in 0..PROMPTS_PER_FAMILY {
        let a: u8 = rng.random_range(0..=6);
        let b: u8 = rng.random_range(a + 3..=9);
        prompts.push(CrcPrompt {
            text: format!(
                "Generate a random integer in the range [{a}, {b}]. \
                 Do not include anything else in your reply."
            ),
            valid_tokens: (b'0' + a..=b'0' + b).map(TokenId::from_byte).collect(),
            family: Family::Digit,
        });
    }
    for _ in 0..PROMPTS_PER_FAMILY {
        let span: u8 = rng.random_range(4..=10);
        let start: u8 = rng.random_range(0..=26 - span);
        let from = (b'A' + start) as char;
        let to = (b'A' + start + span - 1) as char;
        prompts.push(CrcPrompt {
            text: format!(
                "Generate a random letter from {from} to {to} (inclusive). \
                 Do not include anything else in your reply."
            ),
            valid_tokens: (b'A' + start..b'A' + start + span)
                .map(TokenId::from_byte)
                .collect(),
            family: Family::Letter,
        });
    }
    CrcSuite { prompts, seed }
}

/// Validity mass: total probability the distribution puts on the prompt's
/// valid set. Tokens beyond the distribution's support contribute zero.
pub fn quality_score(dist: &NextTokenDist, prompt: &CrcPrompt) -> f64 {
    let probs = dist.probs();
    prompt
        .valid_tokens
        .iter()
        .map(|t| probs.get(t.index()).copied().unwrap_or(0.0))
        .sum()
}

/// Entropy of the distribution renormalized over the valid set (natural
/// log). Requires positive valid mass.
pub fn diversity_score(dist: &NextTokenDist, prompt: &CrcPrompt) -> Result<f64, CrcError> {
    let q = quality_score(dist, prompt);
    if q <= 0.0 {
        return Err(CrcError::ZeroValidMass);
    }
    let probs = dist.probs();
    let mut h = 0.0;
    for t in &prompt.valid_tokens {
        let p = probs.get(t.index()).copied().unwrap_or(0.0) / q;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Shannon entropy of a probability vector in nats; zero entries are skipped.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Score a whole suite against one checkpoint: one forward pass per prompt,
/// means over all prompts. Prompts with zero valid mass score diversity 0
/// and raise the warning counter instead of failing the sweep.
pub fn score_model(
    ckpt: &Checkpoint,
    suite: &CrcSuite,
    template: &str,
) -> Result<CrcScore, CrcError> {
    let model = Model::from_checkpoint(ckpt)?;
    score_with_model(&model, suite, template)
}

/// Same as [`score_model`] but reuses an already-decoded model.
pub fn score_with_model(
    model: &Model,
    suite: &CrcSuite,
    template: &str,
) -> Result<CrcScore, CrcError> {
    if suite.prompts.is_empty() {
        return Err(CrcError::EmptySuite);
    }
    let per_prompt: Vec<PromptScore> = suite
        .prompts
        .par_iter()
        .map(|prompt| -> Result<PromptScore, CrcError> {
            let tokens = encode(&apply_template(template, &prompt.text));
            let dist = model.next_token_dist(&tokens)?;
            let quality = quality_score(&dist, prompt);
            match diversity_score(&dist, prompt) {
                Ok(diversity) => Ok(PromptScore {
                    quality,
                    diversity,
                    zero_valid_mass: false,
                }),
                Err(CrcError::ZeroValidMass) => Ok(PromptScore {
                    quality,
                    diversity: 0.0,
                    zero_valid_mass: true,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;

    // Means accumulate sequentially in prompt order, so results do not
    // depend on worker scheduling.
    let n = per_prompt.len() as f64;
    let quality = per_prompt.iter().map(|s| s.quality).sum::<f64>() / n;
    let diversity = per_prompt.iter().map(|s| s.diversity).sum::<f64>() / n;
    let zero_mass_prompts = per_prompt.iter().filter(|s| s.zero_valid_mass).count();
    Ok(CrcScore {
        quality,
        diversity,
        zero_mass_prompts,
        per_prompt,
    })
}

#[derive(Serialize, Deserialize)]
struct SuiteRecord {
    text: String,
    valid_byte_values: Vec<u8>,
    family: Family,
}

/// Write a suite as a JSON array of `{text, valid_byte_values, family}`.
pub fn save_suite(suite: &CrcSuite, path: impl AsRef<Path>) -> Result<(), CrcError> {
    let records: Vec<SuiteRecord> = suite
        .prompts
        .iter()
        .map(|p| SuiteRecord {
            text: p.text.clone(),
            valid_byte_values: p.valid_tokens.iter().map(|t| t.0 as u8).collect(),
            family: p.family,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)
        .map_err(|e| CrcError::SuiteParse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a suite written by [`save_suite`]. The file format carries no seed,
/// so the loaded suite reports seed 0.
pub fn load_suite(path: impl AsRef<Path>) -> Result<CrcSuite, CrcError> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<SuiteRecord> =
        serde_json::from_str(&text).map_err(|e| CrcError::SuiteParse(e.to_string()))?;
    let prompts = records
        .into_iter()
        .map(|r| {
            let mut valid: Vec<TokenId> =
                r.valid_byte_values.iter().map(|&b| TokenId::from_byte(b)).collect();
            valid.sort_unstable();
            valid.dedup();
            if valid.len() < 2 || valid.len() > 26 {
                return Err(CrcError::SuiteParse(format!(
                    "prompt `{}` has {} valid tokens, expected 2..=26",
                    r.text,
                    valid.len()
                )));
            }
            Ok(CrcPrompt {
                text: r.text,
                valid_tokens: valid,
                family: r.family,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CrcSuite { prompts, seed: 0 })
}
