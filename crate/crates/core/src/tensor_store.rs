//! Layered-checkpoint storage: a `manifest.json` + `weights.bin` pair.
//!
//! The manifest declares the architecture and a tensor index; the blob is
//! the concatenation of all tensors as little-endian f32, row-major. The
//! loader validates the complete tensor set against the naming grammar
//! before a [`Checkpoint`] is handed out, so downstream code never sees a
//! partially valid checkpoint.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Bytes per stored element; the format is f32-only.
pub const BYTES_PER_ELEM: usize = 4;

/// Name of the JSON index file inside a checkpoint directory.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Name of the raw tensor blob inside a checkpoint directory.
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("ManifestParse: {0}")]
    ManifestParse(String),
    #[error("TensorSetMismatch: {0}")]
    TensorSetMismatch(String),
    #[error("ShapeMismatch: tensor `{name}` has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("BlobTruncated: manifest spans {expected} bytes, blob holds {actual}")]
    BlobTruncated { expected: usize, actual: usize },
    #[error("IoFailure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Architecture descriptor shared by a pre/post checkpoint pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub head_dim: usize,
    pub tied_embeddings: bool,
}

impl ModelArch {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |msg: String| Err(StoreError::ManifestParse(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.head_dim == 0
        {
            return bad("arch: all dimensions must be >= 1".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "arch: n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "arch: d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("arch: head_dim {} must be even", self.head_dim));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("arch: norm_eps {} must be > 0", self.norm_eps));
        }
        if !(self.rope_theta > 0.0) {
            return bad(format!("arch: rope_theta {} must be > 0", self.rope_theta));
        }
        Ok(())
    }
}

/// Declared tensor set for an architecture: `(name, shape)` in canonical
/// blob order (embedding, layers 0..N-1, final norm, optional head).
pub fn tensor_grammar(arch: &ModelArch) -> Vec<(String, Vec<usize>)> {
    let d = arch.d_model;
    let q_dim = arch.n_heads * arch.head_dim;
    let kv_dim = arch.n_kv_heads * arch.head_dim;
    let mut out = Vec::with_capacity(2 + 9 * arch.n_layers + 1);
    out.push(("embed.weight".to_string(), vec![arch.vocab_size, d]));
    for k in 0..arch.n_layers {
        out.push((format!("layers.{k}.attn_norm.weight"), vec![d]));
        out.push((format!("layers.{k}.attn.wq.weight"), vec![d, q_dim]));
        out.push((format!("layers.{k}.attn.wk.weight"), vec![d, kv_dim]));
        out.push((format!("layers.{k}.attn.wv.weight"), vec![d, kv_dim]));
        out.push((format!("layers.{k}.attn.wo.weight"), vec![q_dim, d]));
        out.push((format!("layers.{k}.ffn_norm.weight"), vec![d]));
        out.push((format!("layers.{k}.ffn.w_gate.weight"), vec![d, arch.d_ff]));
        out.push((format!("layers.{k}.ffn.w_up.weight"), vec![d, arch.d_ff]));
        out.push((format!("layers.{k}.ffn.w_down.weight"), vec![arch.d_ff, d]));
    }
    out.push(("final_norm.weight".to_string(), vec![d]));
    if !arch.tied_embeddings {
        out.push(("lm_head.weight".to_string(), vec![arch.vocab_size, d]));
    }
    out
}

/// Tensor names belonging to transformer block `k`.
pub fn layer_tensor_names(k: usize) -> Vec<String> {
    vec![
        format!("layers.{k}.attn_norm.weight"),
        format!("layers.{k}.attn.wq.weight"),
        format!("layers.{k}.attn.wk.weight"),
        format!("layers.{k}.attn.wv.weight"),
        format!("layers.{k}.attn.wo.weight"),
        format!("layers.{k}.ffn_norm.weight"),
        format!("layers.{k}.ffn.w_gate.weight"),
        format!("layers.{k}.ffn.w_up.weight"),
        format!("layers.{k}.ffn.w_down.weight"),
    ]
}

/// Location of one tensor inside the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: ModelArch,
    dtype: String,
    tensors: Vec<ManifestTensor>,
}

/// A validated model: architecture, tensor index, and the raw blob.
///
/// Checkpoints are immutable apart from [`Checkpoint::replace_tensor_bytes`],
/// which preserves every structural invariant. Construction always runs the
/// full validation, so holding a `Checkpoint` is proof the invariants hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    arch: ModelArch,
    tensors: BTreeMap<String, TensorRecord>,
    blob: Vec<u8>,
}

impl Checkpoint {
    /// Build a checkpoint from an ordered tensor index and blob, validating
    /// every invariant (grammar set, shapes, record layout, blob span).
    pub fn from_records(
        arch: ModelArch,
        records: Vec<(String, TensorRecord)>,
        blob: Vec<u8>,
    ) -> Result<Self, StoreError> {
        arch.validate()?;

        let mut tensors = BTreeMap::new();
        for (name, rec) in records {
            if tensors.insert(name.clone(), rec).is_some() {
                return Err(StoreError::ManifestParse(format!(
                    "duplicate tensor `{name}`"
                )));
            }
        }

        // Exactly the grammar's tensor set, with the declared shapes.
        let grammar = tensor_grammar(&arch);
        for (name, shape) in &grammar {
            match tensors.get(name) {
                None => {
                    return Err(StoreError::TensorSetMismatch(format!(
                        "missing tensor `{name}`"
                    )))
                }
                Some(rec) if &rec.shape != shape => {
                    return Err(StoreError::ShapeMismatch {
                        name: name.clone(),
                        got: rec.shape.clone(),
                        want: shape.clone(),
                    });
                }
                Some(rec) => {
                    let elems: usize = rec.shape.iter().product();
                    if rec.length != BYTES_PER_ELEM * elems {
                        return Err(StoreError::ManifestParse(format!(
                            "tensor `{name}` declares {} bytes for {} elements",
                            rec.length, elems
                        )));
                    }
                }
            }
        }
        if tensors.len() != grammar.len() {
            let known: std::collections::BTreeSet<&str> =
                grammar.iter().map(|(n, _)| n.as_str()).collect();
            let extras: Vec<&str> = tensors
                .keys()
                .map(String::as_str)
                .filter(|n| !known.contains(n))
                .collect();
            return Err(StoreError::TensorSetMismatch(format!(
                "unexpected tensors: {extras:?}"
            )));
        }

        // Records must tile the blob without overlap.
        let mut spans: Vec<(usize, usize, &str)> = tensors
            .iter()
            .map(|(n, r)| (r.offset, r.length, n.as_str()))
            .collect();
        spans.sort_unstable();
        let mut end = 0usize;
        for (offset, length, name) in spans {
            if offset < end {
                return Err(StoreError::ManifestParse(format!(
                    "tensor `{name}` at offset {offset} overlaps the previous record"
                )));
            }
            end = offset
                .checked_add(length)
                .ok_or_else(|| StoreError::ManifestParse("record span overflows".into()))?;
        }
        if blob.len() < end {
            return Err(StoreError::BlobTruncated {
                expected: end,
                actual: blob.len(),
            });
        }
        if blob.len() > end {
            return Err(StoreError::ManifestParse(format!(
                "blob has {} trailing bytes not covered by the manifest",
                blob.len() - end
            )));
        }

        Ok(Checkpoint {
            arch,
            tensors,
            blob,
        })
    }

    /// Build a checkpoint by filling every grammar tensor in canonical order.
    pub fn pack<F>(arch: ModelArch, mut fill: F) -> Result<Self, StoreError>
    where
        F: FnMut(&str, &[usize]) -> Vec<f32>,
    {
        arch.validate()?;
        let grammar = tensor_grammar(&arch);
        let mut records = Vec::with_capacity(grammar.len());
        let mut blob = Vec::new();
        for (name, shape) in grammar {
            let data = fill(&name, &shape);
            let elems: usize = shape.iter().product();
            assert_eq!(
                data.len(),
                elems,
                "fill for `{name}` produced {} elements, shape wants {elems}",
                data.len()
            );
            let offset = blob.len();
            blob.extend(f32_to_bytes(&data));
            records.push((
                name,
                TensorRecord {
                    shape,
                    offset,
                    length: BYTES_PER_ELEM * elems,
                },
            ));
        }
        Self::from_records(arch, records, blob)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.tensors.iter().map(|(n, r)| (n.as_str(), r))
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    /// Raw little-endian bytes of one tensor.
    pub fn tensor_bytes(&self, name: &str) -> Result<&[u8], StoreError> {
        let rec = self.tensors.get(name).ok_or_else(|| {
            StoreError::TensorSetMismatch(format!("unknown tensor `{name}`"))
        })?;
        Ok(&self.blob[rec.offset..rec.offset + rec.length])
    }

    /// Decoded f32 elements of one tensor.
    pub fn tensor_f32(&self, name: &str) -> Result<Vec<f32>, StoreError> {
        Ok(bytes_to_f32(self.tensor_bytes(name)?))
    }

    /// Overwrite one tensor in place. The replacement must have the exact
    /// byte length of the existing record, so shapes cannot drift.
    pub fn replace_tensor_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let rec = self.tensors.get(name).ok_or_else(|| {
            StoreError::TensorSetMismatch(format!("unknown tensor `{name}`"))
        })?;
        if bytes.len() != rec.length {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                got: vec![bytes.len() / BYTES_PER_ELEM],
                want: rec.shape.clone(),
            });
        }
        self.blob[rec.offset..rec.offset + rec.length].copy_from_slice(bytes);
        Ok(())
    }
}

/// True iff the two checkpoints share an architecture and an identical
/// tensor name/shape set, i.e. surgery between them is well-defined.
pub fn compatible(a: &Checkpoint, b: &Checkpoint) -> bool {
    if a.arch != b.arch {
        return false;
    }
    if a.tensors.len() != b.tensors.len() {
        return false;
    }
    a.tensors
        .iter()
        .all(|(name, rec)| b.tensors.get(name).is_some_and(|o| o.shape == rec.shape))
}

/// Read and fully validate a checkpoint directory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, StoreError> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    if !manifest_path.is_file() {
        return Err(StoreError::MissingFile(manifest_path.display().to_string()));
    }
    if !weights_path.is_file() {
        return Err(StoreError::MissingFile(weights_path.display().to_string()));
    }

    let manifest_text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| StoreError::ManifestParse(e.to_string()))?;
    if manifest.dtype != "f32" {
        return Err(StoreError::ManifestParse(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }

    // The manifest array must already be in ascending offset order.
    let mut prev_end = 0usize;
    for t in &manifest.tensors {
        if t.offset < prev_end {
            return Err(StoreError::ManifestParse(format!(
                "tensor `{}` out of order or overlapping at offset {}",
                t.name, t.offset
            )));
        }
        prev_end = t.offset.saturating_add(t.length);
    }

    let blob = fs::read(&weights_path)?;
    let records = manifest
        .tensors
        .into_iter()
        .map(|t| {
            (
                t.name,
                TensorRecord {
                    shape: t.shape,
                    offset: t.offset,
                    length: t.length,
                },
            )
        })
        .collect();
    Checkpoint::from_records(manifest.arch, records, blob)
}

/// Write a checkpoint directory such that [`load_checkpoint`] reproduces it
/// field-for-field, blob bytes included.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = path.as_ref();
    fs::create_dir_all(dir)?;

    // Emit tensors in ascending offset order, as the loader requires.
    let mut tensors: Vec<ManifestTensor> = ckpt
        .tensors
        .iter()
        .map(|(name, rec)| ManifestTensor {
            name: name.clone(),
            shape: rec.shape.clone(),
            offset: rec.offset,
            length: rec.length,
        })
        .collect();
    tensors.sort_by_key(|t| t.offset);
    let manifest = Manifest {
        arch: ckpt.arch.clone(),
        dtype: "f32".to_string(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| StoreError::ManifestParse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(WEIGHTS_FILE), &ckpt.blob)?;
    Ok(())
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
