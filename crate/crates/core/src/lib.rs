//! Layer-restoration surgery and proxy-guided interval search for
//! decoder-only transformer checkpoints.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`tensor_store`] — the two-file checkpoint format (`manifest.json` +
//!   `weights.bin`) that everything else operates on.
//! * [`surgery`] — hybrid construction: restore a contiguous interval of
//!   layers from one checkpoint into another, or average two checkpoints
//!   elementwise (souping).
//! * [`tinylm`] — a deterministic reference forward pass (RMSNorm, RoPE,
//!   grouped-query attention, SwiGLU) with a byte-level tokenizer and a
//!   min-p sampler.
//! * [`crc`] — the constrained-random-character proxy task: prompts with an
//!   explicit valid token set, scored by validity mass (quality) and
//!   renormalized entropy (diversity).
//! * [`search`] — interval and mixing-weight sweeps, Pareto-front
//!   extraction, and constrained selection.
//! * [`metrics`] — downstream generation-log metrics: precision, answer
//!   entropy, coverage, pass@k, embedding dissimilarity.
//! * [`fixtures`] — seeded synthetic checkpoint pairs and QA logs with
//!   controlled differences, for exact end-to-end checks.

pub mod crc;
pub mod fixtures;
pub mod metrics;
pub mod search;
pub mod surgery;
pub mod tensor_store;
pub mod tinylm;

pub use tensor_store::{load_checkpoint, save_checkpoint, Checkpoint, ModelArch};
