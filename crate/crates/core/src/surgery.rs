//! Hybrid checkpoint construction: selective layer restoration and
//! weighted parameter averaging (souping).
//!
//! Restoration swaps a contiguous interval of transformer blocks from one
//! checkpoint into another, byte for byte; everything outside the interval
//! (including embeddings, final norm, and output head) stays with the
//! receiving checkpoint. Souping averages every tensor elementwise.

use crate::tensor_store::{
    bytes_to_f32, compatible, f32_to_bytes, layer_tensor_names, Checkpoint, StoreError,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("IncompatibleCheckpoints: {0}")]
    IncompatibleCheckpoints(String),
    #[error("IntervalOutOfRange: [{start},{end}] invalid for {n_layers} layers")]
    IntervalOutOfRange {
        start: usize,
        end: usize,
        n_layers: usize,
    },
    #[error("LengthOutOfRange: l={l} invalid for {n_layers} layers")]
    LengthOutOfRange { l: usize, n_layers: usize },
    #[error("AlphaOutOfRange: {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A contiguous layer range `[start, end]`, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Interval { start, end }
    }

    /// Number of restored layers, `end - start + 1`.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a valid interval always covers at least one layer
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.start <= layer && layer <= self.end
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), SurgeryError> {
        if self.start > self.end || self.end >= n_layers {
            return Err(SurgeryError::IntervalOutOfRange {
                start: self.start,
                end: self.end,
                n_layers,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

impl FromStr for Interval {
    type Err = String;

    /// Parses `[i,j]` or `i,j`.
    fn from_str(s: &str) -> Result<Self, String> {
        let body = s
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']');
        let (a, b) = body
            .split_once(',')
            .ok_or_else(|| format!("expected `[i,j]`, got `{s}`"))?;
        let start: usize = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
        let end: usize = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
        if start > end {
            return Err(format!("start {start} exceeds end {end}"));
        }
        Ok(Interval { start, end })
    }
}

/// Mixing coefficient for souping, in `[0, 1]`; 1 means all-pre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoupWeight(f64);

impl SoupWeight {
    pub fn new(alpha: f64) -> Result<Self, SurgeryError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SurgeryError::AlphaOutOfRange(alpha));
        }
        Ok(SoupWeight(alpha))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

fn require_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<(), SurgeryError> {
    if !compatible(a, b) {
        return Err(SurgeryError::IncompatibleCheckpoints(
            "architectures or tensor sets differ".into(),
        ));
    }
    Ok(())
}

/// Build the hybrid that takes layers `[iv.start, iv.end]` from `pre` and
/// everything else (other layers, embeddings, norms, head) from `post`.
pub fn restore_interval(
    post: &Checkpoint,
    pre: &Checkpoint,
    iv: Interval,
) -> Result<Checkpoint, SurgeryError> {
    require_compatible(post, pre)?;
    iv.validate(post.arch().n_layers)?;

    let mut out = post.clone();
    for k in iv.start..=iv.end {
        for name in layer_tensor_names(k) {
            let bytes = pre.tensor_bytes(&name)?.to_vec();
            out.replace_tensor_bytes(&name, &bytes)?;
        }
    }
    Ok(out)
}

/// Elementwise convex combination `alpha * pre + (1 - alpha) * post` over
/// every tensor, accumulated in f64 and rounded once to f32.
///
/// The endpoints short-circuit to byte copies so `alpha = 0` reproduces
/// `post` and `alpha = 1` reproduces `pre` bit-for-bit.
pub fn soup(
    pre: &Checkpoint,
    post: &Checkpoint,
    w: SoupWeight,
) -> Result<Checkpoint, SurgeryError> {
    require_compatible(pre, post)?;
    let alpha = w.value();
    if alpha == 0.0 {
        return Ok(post.clone());
    }
    if alpha == 1.0 {
        return Ok(pre.clone());
    }

    let mut out = post.clone();
    let names: Vec<String> = post.records().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let a = bytes_to_f32(pre.tensor_bytes(&name)?);
        let b = bytes_to_f32(post.tensor_bytes(&name)?);
        let mixed: Vec<f32> = a
            .iter()
            .zip(&b)
            .map(|(&p, &q)| (alpha * p as f64 + (1.0 - alpha) * q as f64) as f32)
            .collect();
        out.replace_tensor_bytes(&name, &f32_to_bytes(&mixed))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Early,
    Late,
}

impl FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "early" => Ok(AblationKind::Early),
            "late" => Ok(AblationKind::Late),
            other => Err(format!("expected `early` or `late`, got `{other}`")),
        }
    }
}

/// Control interval of length `l` pinned to the head or tail of the stack:
/// early is `[0, l-1]`, late is `[n_layers-l, n_layers-1]`.
pub fn ablation_interval(
    kind: AblationKind,
    l: usize,
    n_layers: usize,
) -> Result<Interval, SurgeryError> {
    if l == 0 || l > n_layers {
        return Err(SurgeryError::LengthOutOfRange { l, n_layers });
    }
    Ok(match kind {
        AblationKind::Early => Interval::new(0, l - 1),
        AblationKind::Late => Interval::new(n_layers - l, n_layers - 1),
    })
}

/// Layer indices whose block tensors differ bitwise between `a` and `b`.
pub fn diff_layers(a: &Checkpoint, b: &Checkpoint) -> Result<BTreeSet<usize>, SurgeryError> {
    require_compatible(a, b)?;
    let mut out = BTreeSet::new();
    for k in 0..a.arch().n_layers {
        for name in layer_tensor_names(k) {
            if a.tensor_bytes(&name)? != b.tensor_bytes(&name)? {
                out.insert(k);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{default_arch, gen_pair, FixtureMode, FixtureSpec};
    use crate::tensor_store::Checkpoint;

    fn fixture_pair(seed: u64, n_layers: usize, d_model: usize, target: Interval) -> (Checkpoint, Checkpoint) {
        gen_pair(&FixtureSpec {
            seed,
            arch: default_arch(n_layers, d_model),
            mode: FixtureMode::Replace,
            target,
            gamma: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn restore_replaces_exactly_the_interval() {
        // 32-layer pair differing everywhere; restoring [12,17] must flip
        // exactly those layers to pre.
        let (pre, post) = fixture_pair(9, 32, 16, Interval::new(0, 31));
        let hybrid = restore_interval(&post, &pre, Interval::new(12, 17)).unwrap();
        let vs_post: Vec<usize> = diff_layers(&hybrid, &post).unwrap().into_iter().collect();
        assert_eq!(vs_post, vec![12, 13, 14, 15, 16, 17]);
        let vs_pre = diff_layers(&hybrid, &pre).unwrap();
        assert!((12..=17).all(|k| !vs_pre.contains(&k)));
    }

    #[test]
    fn restore_from_self_is_identity() {
        let (_, post) = fixture_pair(3, 4, 32, Interval::new(1, 2));
        let out = restore_interval(&post, &post, Interval::new(0, 3)).unwrap();
        assert_eq!(out, post);
        assert_eq!(out.blob(), post.blob());
    }

    #[test]
    fn single_layer_restore_matches_pre_exactly() {
        let (pre, post) = fixture_pair(4, 8, 32, Interval::new(5, 5));
        let hybrid = restore_interval(&post, &pre, Interval::new(5, 5)).unwrap();
        // Fixture only perturbed layer 5, so the hybrid equals pre everywhere.
        assert_eq!(hybrid, pre);
        for name in layer_tensor_names(5) {
            assert_eq!(
                hybrid.tensor_bytes(&name).unwrap(),
                pre.tensor_bytes(&name).unwrap()
            );
        }
    }

    #[test]
    fn restore_rejects_bad_interval_and_incompatible_pair() {
        let (pre, post) = fixture_pair(5, 4, 32, Interval::new(0, 0));
        assert!(matches!(
            restore_interval(&post, &pre, Interval::new(2, 4)),
            Err(SurgeryError::IntervalOutOfRange { .. })
        ));
        let (other_pre, _) = fixture_pair(5, 6, 32, Interval::new(0, 0));
        assert!(matches!(
            restore_interval(&post, &other_pre, Interval::new(0, 1)),
            Err(SurgeryError::IncompatibleCheckpoints(_))
        ));
    }

    #[test]
    fn soup_endpoints_are_byte_identical() {
        let (pre, post) = fixture_pair(6, 4, 32, Interval::new(0, 3));
        let at_post = soup(&pre, &post, SoupWeight::new(0.0).unwrap()).unwrap();
        assert_eq!(at_post.blob(), post.blob());
        let at_pre = soup(&pre, &post, SoupWeight::new(1.0).unwrap()).unwrap();
        assert_eq!(at_pre.blob(), pre.blob());
    }

    #[test]
    fn soup_midpoint_is_exact_on_constant_tensors() {
        let arch = default_arch(1, 2);
        let pre = Checkpoint::pack(arch.clone(), |_, s| vec![1.0; s.iter().product()]).unwrap();
        let post = Checkpoint::pack(arch, |_, s| vec![3.0; s.iter().product()]).unwrap();
        let mid = soup(&pre, &post, SoupWeight::new(0.5).unwrap()).unwrap();
        for (name, _) in mid.records() {
            for v in mid.tensor_f32(name).unwrap() {
                assert_eq!(v, 2.0);
            }
        }
    }

    #[test]
    fn soup_matches_elementwise_oracle_at_paper_alphas() {
        let (pre, post) = fixture_pair(7, 2, 32, Interval::new(0, 1));
        for &alpha in &[0.85, 0.50, 0.90] {
            let mixed = soup(&pre, &post, SoupWeight::new(alpha).unwrap()).unwrap();
            for (name, _) in mixed.records() {
                let a = pre.tensor_f32(name).unwrap();
                let b = post.tensor_f32(name).unwrap();
                let m = mixed.tensor_f32(name).unwrap();
                for i in 0..m.len() {
                    let want = (alpha * a[i] as f64 + (1.0 - alpha) * b[i] as f64) as f32;
                    assert_eq!(m[i], want);
                }
            }
        }
    }

    #[test]
    fn soup_with_equal_inputs_is_identity() {
        let (_, post) = fixture_pair(8, 2, 32, Interval::new(0, 0));
        for &alpha in &[0.3, 0.5, 0.77] {
            let mixed = soup(&post, &post, SoupWeight::new(alpha).unwrap()).unwrap();
            assert_eq!(mixed.blob(), post.blob());
        }
    }

    #[test]
    fn soup_rejects_out_of_range_alpha() {
        assert!(matches!(
            SoupWeight::new(1.5),
            Err(SurgeryError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            SoupWeight::new(-0.1),
            Err(SurgeryError::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn ablation_intervals_match_definitions() {
        assert_eq!(
            ablation_interval(AblationKind::Early, 6, 32).unwrap(),
            Interval::new(0, 5)
        );
        assert_eq!(
            ablation_interval(AblationKind::Late, 6, 32).unwrap(),
            Interval::new(26, 31)
        );
        // Length 16 placed at the tail of a 28-layer stack.
        assert_eq!(
            ablation_interval(AblationKind::Late, 16, 28).unwrap(),
            Interval::new(12, 27)
        );
        assert!(matches!(
            ablation_interval(AblationKind::Early, 0, 32),
            Err(SurgeryError::LengthOutOfRange { .. })
        ));
        assert!(matches!(
            ablation_interval(AblationKind::Late, 33, 32),
            Err(SurgeryError::LengthOutOfRange { .. })
        ));
    }

    #[test]
    fn diff_layers_tracks_perturbed_set() {
        let (pre, post) = fixture_pair(10, 8, 32, Interval::new(3, 5));
        assert!(diff_layers(&pre, &pre).unwrap().is_empty());
        let diff: Vec<usize> = diff_layers(&pre, &post).unwrap().into_iter().collect();
        assert_eq!(diff, vec![3, 4, 5]);
        let restored = restore_interval(&post, &pre, Interval::new(3, 5)).unwrap();
        assert!(diff_layers(&restored, &pre).unwrap().is_empty());
    }

    #[test]
    fn restore_is_idempotent_and_composes() {
        let (pre, post) = fixture_pair(11, 8, 32, Interval::new(0, 7));
        let iv = Interval::new(2, 4);
        let once = restore_interval(&post, &pre, iv).unwrap();
        let twice = restore_interval(&once, &pre, iv).unwrap();
        assert_eq!(once, twice);

        let left = restore_interval(&post, &pre, Interval::new(1, 3)).unwrap();
        let both = restore_interval(&left, &pre, Interval::new(4, 6)).unwrap();
        let direct = restore_interval(&post, &pre, Interval::new(1, 6)).unwrap();
        assert_eq!(both, direct);
    }

    #[test]
    fn restore_preserves_layout() {
        let (pre, post) = fixture_pair(12, 4, 32, Interval::new(1, 2));
        let hybrid = restore_interval(&post, &pre, Interval::new(1, 1)).unwrap();
        assert_eq!(hybrid.arch(), post.arch());
        assert_eq!(hybrid.blob().len(), post.blob().len());
        let names_post: Vec<&str> = post.records().map(|(n, _)| n).collect();
        let names_hybrid: Vec<&str> = hybrid.records().map(|(n, _)| n).collect();
        assert_eq!(names_post, names_hybrid);
    }

    #[test]
    fn interval_display_round_trips() {
        for iv in [Interval::new(12, 17), Interval::new(12, 27), Interval::new(17, 27)] {
            let s = iv.to_string();
            let parsed: Interval = s.parse().unwrap();
            assert_eq!(parsed, iv);
        }
        assert!("[5,2]".parse::<Interval>().is_err());
        assert_eq!("3,7".parse::<Interval>().unwrap(), Interval::new(3, 7));
    }
}
