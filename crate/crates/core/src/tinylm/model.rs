//! Deterministic forward pass for checkpoints: pre-norm RMSNorm, causal
//! multi-head attention with RoPE and grouped KV heads, SwiGLU feed-forward,
//! final norm, output projection.
//!
//! All arithmetic runs in f64 with a fixed evaluation order, so a given
//! checkpoint and prompt always produce bitwise-identical logits. There is
//! no KV cache; prompts at desk scale are short enough for full recompute.

use super::tokenizer::TokenId;
use super::LmError;
use crate::tensor_store::{Checkpoint, ModelArch};

struct LayerWeights {
    attn_norm: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ffn_norm: Vec<f64>,
    w_gate: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

/// A checkpoint decoded to f64 weights, ready for repeated forward passes.
pub struct Model {
    arch: ModelArch,
    embed: Vec<f64>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    head: Vec<f64>,
}

/// Next-token probability vector; entries are non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    probs: Vec<f64>,
}

impl NextTokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, LmError> {
        if probs.is_empty() {
            return Err(LmError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(LmError::InvalidDistribution(
                "negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LmError::InvalidDistribution(format!(
                "sums to {sum}, expected 1"
            )));
        }
        Ok(NextTokenDist { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, LmError> {
        let arch = ckpt.arch().clone();
        let to64 = |name: &str| -> Result<Vec<f64>, LmError> {
            Ok(ckpt
                .tensor_f32(name)?
                .into_iter()
                .map(|v| v as f64)
                .collect())
        };

        let mut layers = Vec::with_capacity(arch.n_layers);
        for k in 0..arch.n_layers {
            layers.push(LayerWeights {
                attn_norm: to64(&format!("layers.{k}.attn_norm.weight"))?,
                wq: to64(&format!("layers.{k}.attn.wq.weight"))?,
                wk: to64(&format!("layers.{k}.attn.wk.weight"))?,
                wv: to64(&format!("layers.{k}.attn.wv.weight"))?,
                wo: to64(&format!("layers.{k}.attn.wo.weight"))?,
                ffn_norm: to64(&format!("layers.{k}.ffn_norm.weight"))?,
                w_gate: to64(&format!("layers.{k}.ffn.w_gate.weight"))?,
                w_up: to64(&format!("layers.{k}.ffn.w_up.weight"))?,
                w_down: to64(&format!("layers.{k}.ffn.w_down.weight"))?,
            });
        }
        let embed = to64("embed.weight")?;
        let head = if arch.tied_embeddings {
            embed.clone()
        } else {
            to64("lm_head.weight")?
        };
        Ok(Model {
            embed,
            layers,
            final_norm: to64("final_norm.weight")?,
            head,
            arch,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        for t in tokens {
            if t.index() >= self.arch.vocab_size {
                return Err(LmError::TokenOutOfRange {
                    id: t.0,
                    vocab: self.arch.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Hidden states after the final transformer block, one per position.
    fn hidden_states(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, LmError> {
        self.check_tokens(tokens)?;
        let arch = &self.arch;
        let d = arch.d_model;
        let hd = arch.head_dim;
        let n_heads = arch.n_heads;
        let n_kv = arch.n_kv_heads;
        let group = n_heads / n_kv;
        let q_dim = n_heads * hd;
        let kv_dim = n_kv * hd;
        let len = tokens.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut hidden: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| self.embed[t.index() * d..(t.index() + 1) * d].to_vec())
            .collect();

        for layer in &self.layers {
            // Attention sublayer.
            let mut q = Vec::with_capacity(len);
            let mut k = Vec::with_capacity(len);
            let mut v = Vec::with_capacity(len);
            for (pos, h) in hidden.iter().enumerate() {
                let normed = rmsnorm(h, &layer.attn_norm, arch.norm_eps);
                let mut qi = matvec(&normed, &layer.wq, q_dim);
                let mut ki = matvec(&normed, &layer.wk, kv_dim);
                let vi = matvec(&normed, &layer.wv, kv_dim);
                rope(&mut qi, pos, hd, arch.rope_theta);
                rope(&mut ki, pos, hd, arch.rope_theta);
                q.push(qi);
                k.push(ki);
                v.push(vi);
            }

            for t in 0..len {
                let mut mixed = vec![0.0; q_dim];
                for qh in 0..n_heads {
                    let kvh = qh / group;
                    let qv = &q[t][qh * hd..(qh + 1) * hd];
                    let mut scores: Vec<f64> = (0..=t)
                        .map(|u| dot(qv, &k[u][kvh * hd..(kvh + 1) * hd]) * scale)
                        .collect();
                    softmax_in_place(&mut scores);
                    let out = &mut mixed[qh * hd..(qh + 1) * hd];
                    for (u, &s) in scores.iter().enumerate() {
                        let vu = &v[u][kvh * hd..(kvh + 1) * hd];
                        for (acc, &x) in out.iter_mut().zip(vu) {
                            *acc += s * x;
                        }
                    }
                }
                let proj = matvec(&mixed, &layer.wo, d);
                for (h, p) in hidden[t].iter_mut().zip(&proj) {
                    *h += p;
                }
            }

            // SwiGLU feed-forward sublayer.
            for h in hidden.iter_mut() {
                let normed = rmsnorm(h, &layer.ffn_norm, arch.norm_eps);
                let gate = matvec(&normed, &layer.w_gate, arch.d_ff);
                let up = matvec(&normed, &layer.w_up, arch.d_ff);
                let act: Vec<f64> = gate
                    .iter()
                    .zip(&up)
                    .map(|(&g, &u)| silu(g) * u)
                    .collect();
                let down = matvec(&act, &layer.w_down, d);
                for (hx, dx) in h.iter_mut().zip(&down) {
                    *hx += dx;
                }
            }
        }
        Ok(hidden)
    }

    /// Final-norm output at the last position (the vector the head sees).
    pub fn last_hidden(&self, tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let hidden = self.hidden_states(tokens)?;
        Ok(rmsnorm(
            hidden.last().expect("non-empty prompt"),
            &self.final_norm,
            self.arch.norm_eps,
        ))
    }

    /// Logits at the last position.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let f = self.last_hidden(tokens)?;
        Ok(self.project(&f))
    }

    /// Logits at every position; used for causality checks.
    pub fn logits_all(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, LmError> {
        let hidden = self.hidden_states(tokens)?;
        Ok(hidden
            .iter()
            .map(|h| self.project(&rmsnorm(h, &self.final_norm, self.arch.norm_eps)))
            .collect())
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        let d = self.arch.d_model;
        (0..self.arch.vocab_size)
            .map(|vtok| dot(&self.head[vtok * d..(vtok + 1) * d], f))
            .collect()
    }

    /// Softmax of the last position's logits at temperature 1.
    pub fn next_token_dist(&self, tokens: &[TokenId]) -> Result<NextTokenDist, LmError> {
        NextTokenDist::new(softmax(&self.logits(tokens)?))
    }
}

/// One-shot distribution query; decodes the checkpoint on every call.
/// Callers scoring many prompts should build a [`Model`] once instead.
pub fn next_token_dist(ckpt: &Checkpoint, tokens: &[TokenId]) -> Result<NextTokenDist, LmError> {
    Model::from_checkpoint(ckpt)?.next_token_dist(tokens)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    probs
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in z.iter_mut() {
        *x /= sum;
    }
}

fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * r * g).collect()
}

/// `y[o] = sum_i x[i] * w[i * out_dim + o]` for a row-major `[in, out]` weight.
fn matvec(x: &[f64], w: &[f64], out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (acc, &wv) in y.iter_mut().zip(row) {
            *acc += xi * wv;
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotate consecutive pairs of each head slice by `pos * theta^(-2t/head_dim)`.
fn rope(x: &mut [f64], pos: usize, head_dim: usize, theta: f64) {
    for head in x.chunks_exact_mut(head_dim) {
        for t in 0..head_dim / 2 {
            let freq = theta.powf(-2.0 * t as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            let (sin, cos) = angle.sin_cos();
            let a = head[2 * t];
            let b = head[2 * t + 1];
            head[2 * t] = a * cos - b * sin;
            head[2 * t + 1] = a * sin + b * cos;
        }
    }
}
