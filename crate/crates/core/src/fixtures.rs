//! Seeded synthetic fixtures: checkpoint pairs with known, controllable
//! differences, and QA logs with known label distributions.
//!
//! Real pre/post checkpoint pairs are produced by post-training, which is
//! out of reach at desk scale. These generators substitute controlled
//! perturbations whose consequences are exactly checkable: a `replace`
//! fixture re-draws whole blocks inside a target interval, a `sharpen`
//! fixture scales the residual write-out matrices there.

use crate::metrics::{Generation, QARecord};
use crate::surgery::Interval;
use crate::tensor_store::{f32_to_bytes, Checkpoint, ModelArch, StoreError};
use crate::tinylm::VOCAB_SIZE;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("InvalidFixtureSpec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureMode {
    /// Re-draw every block tensor inside the target interval.
    Replace,
    /// Scale `attn.wo` and `ffn.w_down` inside the target interval by gamma.
    Sharpen,
}

impl std::str::FromStr for FixtureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "replace" => Ok(FixtureMode::Replace),
            "sharpen" => Ok(FixtureMode::Sharpen),
            other => Err(format!("expected `replace` or `sharpen`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub arch: ModelArch,
    pub mode: FixtureMode,
    pub target: Interval,
    /// Scale factor for sharpen mode; must be >= 1. Ignored by replace.
    pub gamma: f64,
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        self.arch.validate()?;
        self.target
            .validate(self.arch.n_layers)
            .map_err(|e| FixtureError::InvalidSpec(e.to_string()))?;
        if self.gamma < 1.0 {
            return Err(FixtureError::InvalidSpec(format!(
                "gamma {} must be >= 1",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Small but well-formed architecture for a given depth and width: head_dim
/// 16 when the width allows it, grouped KV at half the head count, FFN at
/// twice the width, byte-tokenizer vocabulary, untied head.
pub fn default_arch(n_layers: usize, d_model: usize) -> ModelArch {
    let n_heads = if d_model % 16 == 0 { d_model / 16 } else { 1 };
    let n_kv_heads = if n_heads % 2 == 0 { n_heads / 2 } else { n_heads };
    ModelArch {
        n_layers,
        d_model,
        n_heads,
        n_kv_heads,
        d_ff: 2 * d_model,
        vocab_size: VOCAB_SIZE,
        rope_theta: 10_000.0,
        norm_eps: 1e-5,
        head_dim: d_model / n_heads,
        tied_embeddings: false,
    }
}

fn draw_tensor<R: Rng>(rng: &mut R, name: &str, len: usize) -> Vec<f32> {
    if name.ends_with("norm.weight") {
        vec![1.0; len]
    } else {
        (0..len)
            .map(|_| (0.02 * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    }
}

/// One seeded checkpoint: weights drawn from a normal distribution scaled
/// by 0.02, norm gains initialized to 1.
pub fn gen_checkpoint(seed: u64, arch: &ModelArch) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint::pack(arch.clone(), |name, shape| {
        draw_tensor(&mut rng, name, shape.iter().product())
    })
    .expect("arch validated by pack")
}

/// Seeded pre/post pair. `pre` is a fresh draw; `post` equals `pre` outside
/// the target interval and is perturbed inside it according to the mode.
/// Norm gains stay at 1 in both modes, so every perturbation is confined to
/// projection matrices.
pub fn gen_pair(spec: &FixtureSpec) -> Result<(Checkpoint, Checkpoint), FixtureError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pre = Checkpoint::pack(spec.arch.clone(), |name, shape| {
        draw_tensor(&mut rng, name, shape.iter().product())
    })?;

    let mut post = pre.clone();
    for k in spec.target.start..=spec.target.end {
        match spec.mode {
            FixtureMode::Replace => {
                for name in crate::tensor_store::layer_tensor_names(k) {
                    if name.ends_with("norm.weight") {
                        continue; // re-drawing a norm gain reproduces the constant 1
                    }
                    let len = post.tensor_f32(&name)?.len();
                    let fresh = draw_tensor(&mut rng, &name, len);
                    post.replace_tensor_bytes(&name, &f32_to_bytes(&fresh))?;
                }
            }
            FixtureMode::Sharpen => {
                for name in [
                    format!("layers.{k}.attn.wo.weight"),
                    format!("layers.{k}.ffn.w_down.weight"),
                ] {
                    let scaled: Vec<f32> = post
                        .tensor_f32(&name)?
                        .into_iter()
                        .map(|v| (v as f64 * spec.gamma) as f32)
                        .collect();
                    post.replace_tensor_bytes(&name, &f32_to_bytes(&scaled))?;
                }
            }
        }
    }
    Ok((pre, post))
}

/// Synthetic QA log with the uniform label multinomial over
/// `reference_size` reference answers: every generation maps to a uniformly
/// drawn canonical label. Prompt ids are `p0, p1, ...`; labels `a0, a1, ...`.
pub fn gen_qa_log(
    seed: u64,
    prompts: usize,
    reference_size: usize,
    samples: usize,
) -> Vec<QARecord> {
    let weights = vec![1.0; reference_size];
    gen_qa_log_with_dist(seed, prompts, &weights, 0.0, samples)
}

/// QA log generator with an explicit label multinomial. `weights` are
/// unnormalized masses over the reference labels; `none_weight` is the mass
/// of unmappable generations (canonical = None). Used to build degenerate
/// or skewed logs whose expected metrics are known in closed form.
pub fn gen_qa_log_with_dist(
    seed: u64,
    prompts: usize,
    weights: &[f64],
    none_weight: f64,
    samples: usize,
) -> Vec<QARecord> {
    assert!(!weights.is_empty(), "need at least one label weight");
    let total: f64 = weights.iter().sum::<f64>() + none_weight;
    assert!(total > 0.0, "weights must have positive mass");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..prompts)
        .map(|p| {
            let generations = (0..samples)
                .map(|g| {
                    let u: f64 = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut label = None;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            label = Some(format!("a{i}"));
                            break;
                        }
                    }
                    match label {
                        Some(l) => Generation {
                            text: format!("answer {l}"),
                            canonical: Some(l),
                        },
                        None => Generation {
                            text: format!("unmapped {g}"),
                            canonical: None,
                        },
                    }
                })
                .collect();
            QARecord {
                prompt_id: format!("p{p}"),
                generations,
            }
        })
        .collect()
}
