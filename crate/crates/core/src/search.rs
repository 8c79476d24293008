//! Interval and mixing-weight sweeps over the proxy task, Pareto-front
//! extraction, and the constrained selection rule.
//!
//! A sweep scores every candidate (all contiguous layer intervals, or a
//! grid of soup weights) plus the unmodified endpoints. Selection maximizes
//! proxy diversity among candidates whose quality stays above a fraction of
//! the post-trained model's quality.

use crate::crc::{score_with_model, CrcError, CrcScore, CrcSuite};
use crate::surgery::{restore_interval, soup, Interval, SoupWeight, SurgeryError};
use crate::tensor_store::{compatible, Checkpoint};
use crate::tinylm::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("NoFeasibleInterval: no candidate reaches quality {q_min}")]
    NoFeasibleInterval { q_min: f64 },
    #[error("IndexOutOfRange: start {index} invalid for {n_layers} layers")]
    IndexOutOfRange { index: usize, n_layers: usize },
    #[error("StepOutOfRange: {0} outside (0, 1]")]
    StepOutOfRange(f64),
    #[error("FractionOutOfRange: {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Crc(#[from] CrcError),
}

/// What a score belongs to: an unmodified endpoint, a restoration interval,
/// or a soup weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subject {
    Post,
    Pre,
    Interval(Interval),
    Soup { alpha: f64 },
}

/// One scored candidate: the search-result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub subject: Subject,
    pub quality: f64,
    pub diversity: f64,
    /// Prompts that carried zero valid mass while scoring this candidate.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub zero_mass_prompts: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl ProxyScore {
    fn from_crc(subject: Subject, score: &CrcScore) -> Self {
        ProxyScore {
            subject,
            quality: score.quality,
            diversity: score.diversity,
            zero_mass_prompts: score.zero_mass_prompts,
        }
    }
}

/// All candidate scores from one sweep plus the unmodified endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub scores: Vec<ProxyScore>,
    pub post_score: ProxyScore,
    pub pre_score: ProxyScore,
    /// Layer count for interval sweeps; absent for soup sweeps.
    pub n_layers: Option<usize>,
}

/// Constrained selection: maximize diversity subject to
/// `quality >= quality_fraction * quality(post)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub quality_fraction: f64,
}

impl SelectionRule {
    pub fn new(quality_fraction: f64) -> Result<Self, SearchError> {
        if !(quality_fraction > 0.0 && quality_fraction <= 1.0) {
            return Err(SearchError::FractionOutOfRange(quality_fraction));
        }
        Ok(SelectionRule { quality_fraction })
    }
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            quality_fraction: 0.9,
        }
    }
}

/// All contiguous intervals `[i, j]` with `0 <= i <= j < n_layers`, in
/// canonical (i, j) order: `n (n + 1) / 2` of them.
pub fn enumerate_intervals(n_layers: usize) -> Vec<Interval> {
    let mut out = Vec::with_capacity(n_layers * (n_layers + 1) / 2);
    for i in 0..n_layers {
        for j in i..n_layers {
            out.push(Interval::new(i, j));
        }
    }
    out
}

/// Score every contiguous restoration interval plus the unmodified
/// endpoints. Candidates are scored independently (in parallel) and
/// assembled in canonical (i, j) order, so reports are byte-stable
/// regardless of worker count.
pub fn sweep_intervals(
    post: &Checkpoint,
    pre: &Checkpoint,
    suite: &CrcSuite,
    template: &str,
) -> Result<Landscape, SearchError> {
    if !compatible(post, pre) {
        return Err(SurgeryError::IncompatibleCheckpoints(
            "architectures or tensor sets differ".into(),
        )
        .into());
    }
    let n_layers = post.arch().n_layers;
    let candidates = enumerate_intervals(n_layers);

    let scores: Vec<ProxyScore> = candidates
        .par_iter()
        .map(|&iv| -> Result<ProxyScore, SearchError> {
            let hybrid = restore_interval(post, pre, iv)?;
            let score = crate::crc::score_model(&hybrid, suite, template)?;
            Ok(ProxyScore::from_crc(Subject::Interval(iv), &score))
        })
        .collect::<Result<_, _>>()?;

    let (post_score, pre_score) = score_endpoints(post, pre, suite, template)?;
    Ok(Landscape {
        scores,
        post_score,
        pre_score,
        n_layers: Some(n_layers),
    })
}

/// Grid of soup weights `0, step, 2*step, ...` with the exact endpoint 1
/// always included.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>, SearchError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(SearchError::StepOutOfRange(step));
    }
    let mut alphas = Vec::new();
    let mut k = 0u32;
    loop {
        let a = k as f64 * step;
        if a >= 1.0 - 1e-12 {
            break;
        }
        alphas.push(a);
        k += 1;
    }
    alphas.push(1.0);
    Ok(alphas)
}

/// Score the soup `alpha * pre + (1 - alpha) * post` over the alpha grid,
/// plus the unmodified endpoints.
pub fn sweep_alpha(
    pre: &Checkpoint,
    post: &Checkpoint,
    suite: &CrcSuite,
    step: f64,
    template: &str,
) -> Result<Landscape, SearchError> {
    if !compatible(post, pre) {
        return Err(SurgeryError::IncompatibleCheckpoints(
            "architectures or tensor sets differ".into(),
        )
        .into());
    }
    let alphas = alpha_grid(step)?;
    let scores: Vec<ProxyScore> = alphas
        .par_iter()
        .map(|&alpha| -> Result<ProxyScore, SearchError> {
            let mixed = soup(pre, post, SoupWeight::new(alpha)?)?;
            let score = crate::crc::score_model(&mixed, suite, template)?;
            Ok(ProxyScore::from_crc(Subject::Soup { alpha }, &score))
        })
        .collect::<Result<_, _>>()?;

    let (post_score, pre_score) = score_endpoints(post, pre, suite, template)?;
    Ok(Landscape {
        scores,
        post_score,
        pre_score,
        n_layers: None,
    })
}

fn score_endpoints(
    post: &Checkpoint,
    pre: &Checkpoint,
    suite: &CrcSuite,
    template: &str,
) -> Result<(ProxyScore, ProxyScore), SearchError> {
    let post_model = Model::from_checkpoint(post).map_err(CrcError::from)?;
    let pre_model = Model::from_checkpoint(pre).map_err(CrcError::from)?;
    let post_score = score_with_model(&post_model, suite, template)?;
    let pre_score = score_with_model(&pre_model, suite, template)?;
    Ok((
        ProxyScore::from_crc(Subject::Post, &post_score),
        ProxyScore::from_crc(Subject::Pre, &pre_score),
    ))
}

/// `a` dominates `b` iff it is at least as good on both axes and strictly
/// better on one.
fn dominates(a: &ProxyScore, b: &ProxyScore) -> bool {
    a.quality >= b.quality
        && a.diversity >= b.diversity
        && (a.quality > b.quality || a.diversity > b.diversity)
}

/// Candidates not dominated by any other candidate, sorted by descending
/// quality (ties by descending diversity, then subject order).
pub fn pareto_front(land: &Landscape) -> Vec<ProxyScore> {
    pareto_front_of(&land.scores)
}

/// Pareto front of an arbitrary score list.
pub fn pareto_front_of(scores: &[ProxyScore]) -> Vec<ProxyScore> {
    let mut front: Vec<ProxyScore> = scores
        .iter()
        .filter(|a| !scores.iter().any(|b| dominates(b, a)))
        .cloned()
        .collect();
    front.sort_by(|a, b| {
        b.quality
            .partial_cmp(&a.quality)
            .unwrap()
            .then(b.diversity.partial_cmp(&a.diversity).unwrap())
            .then_with(|| subject_order(&a.subject).cmp(&subject_order(&b.subject)))
    });
    front
}

fn subject_order(s: &Subject) -> (u8, usize, usize) {
    match s {
        Subject::Post => (0, 0, 0),
        Subject::Pre => (1, 0, 0),
        Subject::Interval(iv) => (2, iv.start, iv.end),
        // Order soups on the grid index scale; alpha is in [0, 1].
        Subject::Soup { alpha } => (3, (alpha * 1e9) as usize, 0),
    }
}

/// Keep only candidates whose quality meets an absolute floor. Used for
/// reporting views of the landscape; selection uses the relative rule.
pub fn filter_quality(scores: &[ProxyScore], q_floor: f64) -> Vec<ProxyScore> {
    scores
        .iter()
        .filter(|s| s.quality >= q_floor)
        .cloned()
        .collect()
}

/// Apply the selection rule to interval candidates: among those with
/// `quality >= quality_fraction * quality(post)`, return the interval with
/// maximal diversity; ties prefer fewer restored layers, then a smaller
/// start index.
pub fn select_interval(land: &Landscape, rule: &SelectionRule) -> Result<Interval, SearchError> {
    match select_subject(land, rule)? {
        Subject::Interval(iv) => Ok(iv),
        _ => unreachable!("interval filter admits only intervals"),
    }
}

/// Selection over whatever candidates the landscape holds. Interval ties
/// break toward fewer restored layers then smaller start; soup ties break
/// toward smaller alpha (the lighter intervention).
pub fn select_subject(land: &Landscape, rule: &SelectionRule) -> Result<Subject, SearchError> {
    let q_min = rule.quality_fraction * land.post_score.quality;
    let mut best: Option<&ProxyScore> = None;
    for cand in &land.scores {
        if !matches!(cand.subject, Subject::Interval(_) | Subject::Soup { .. }) {
            continue;
        }
        if cand.quality < q_min {
            continue;
        }
        best = Some(match best {
            None => cand,
            Some(cur) => {
                if cand.diversity > cur.diversity {
                    cand
                } else if cand.diversity == cur.diversity
                    && tie_break(&cand.subject) < tie_break(&cur.subject)
                {
                    cand
                } else {
                    cur
                }
            }
        });
    }
    best.map(|s| s.subject)
        .ok_or(SearchError::NoFeasibleInterval { q_min })
}

fn tie_break(s: &Subject) -> (usize, usize) {
    match s {
        Subject::Interval(iv) => (iv.len(), iv.start),
        Subject::Soup { alpha } => ((alpha * 1e9) as usize, 0),
        _ => (usize::MAX, usize::MAX),
    }
}

/// Interval candidates starting at layer `i`, ordered by increasing end.
pub fn fixed_start_slice(land: &Landscape, i: usize) -> Result<Vec<ProxyScore>, SearchError> {
    let n_layers = land.n_layers.unwrap_or(0);
    if i >= n_layers {
        return Err(SearchError::IndexOutOfRange { index: i, n_layers });
    }
    let mut slice: Vec<ProxyScore> = land
        .scores
        .iter()
        .filter(|s| matches!(s.subject, Subject::Interval(iv) if iv.start == i))
        .cloned()
        .collect();
    slice.sort_by_key(|s| match s.subject {
        Subject::Interval(iv) => iv.end,
        _ => usize::MAX,
    });
    Ok(slice)
}
