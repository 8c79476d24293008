//! Downstream diversity and quality metrics over generation logs.
//!
//! Inputs arrive pre-canonicalized: each generation either maps to a
//! reference answer label or is marked unmappable, and embedding vectors
//! come precomputed. The metric layer itself never calls a model.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("NoCorrectAnswers: no generation maps to a reference answer")]
    NoCorrectAnswers,
    #[error("ReferenceSmallerThanObserved: {observed} distinct labels > reference size {reference_size}")]
    ReferenceSmallerThanObserved {
        observed: usize,
        reference_size: usize,
    },
    #[error("ZeroVector: vector {0} has zero norm")]
    ZeroVector(usize),
    #[error("DimensionMismatch: vector {index} has dimension {got}, expected {want}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("TooFewVectors: need at least 2, found {0}")]
    TooFewVectors(usize),
    #[error("InvalidPassAtK: {0}")]
    InvalidPassAtK(String),
    #[error("InvalidReferenceSize: must be >= 1")]
    InvalidReferenceSize,
    #[error("LogParse: {0}")]
    LogParse(String),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

/// One generation with its canonical reference label, or `None` when the
/// response could not be mapped to any reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub canonical: Option<String>,
}

/// All generations for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QARecord {
    pub prompt_id: String,
    pub generations: Vec<Generation>,
}

/// Precomputed embedding vectors for one prompt's generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub prompt_id: String,
    pub vectors: Vec<Vec<f64>>,
}

/// Validated pass@k query: `n` samples, `c` of them correct, budget `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassAtKInput {
    n: usize,
    c: usize,
    k: usize,
}

impl PassAtKInput {
    pub fn new(n: usize, c: usize, k: usize) -> Result<Self, MetricsError> {
        if c > n {
            return Err(MetricsError::InvalidPassAtK(format!("c {c} > n {n}")));
        }
        if k == 0 || k > n {
            return Err(MetricsError::InvalidPassAtK(format!(
                "k {k} outside 1..={n}"
            )));
        }
        Ok(PassAtKInput { n, c, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Fraction of generations that map to any reference answer.
/// Callers must pass a non-empty record (the type's invariant); an empty
/// record yields NaN.
pub fn precision(rec: &QARecord) -> f64 {
    let mapped = rec
        .generations
        .iter()
        .filter(|g| g.canonical.is_some())
        .count();
    mapped as f64 / rec.generations.len() as f64
}

/// Entropy (nats) of the empirical distribution over canonical labels among
/// mapped generations. Unmapped generations are excluded here; they count
/// against [`precision`] instead.
pub fn answer_entropy(rec: &QARecord) -> Result<f64, MetricsError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &rec.generations {
        if let Some(label) = &g.canonical {
            *counts.entry(label.as_str()).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(MetricsError::NoCorrectAnswers);
    }
    let mut h = 0.0;
    for &count in counts.values() {
        let p = count as f64 / total as f64;
        h -= p * p.ln();
    }
    Ok(h)
}

/// Fraction of the reference answer set produced at least once.
pub fn coverage_n(rec: &QARecord, reference_size: usize) -> Result<f64, MetricsError> {
    if reference_size == 0 {
        return Err(MetricsError::InvalidReferenceSize);
    }
    let distinct: std::collections::BTreeSet<&str> = rec
        .generations
        .iter()
        .filter_map(|g| g.canonical.as_deref())
        .collect();
    if distinct.len() > reference_size {
        return Err(MetricsError::ReferenceSmallerThanObserved {
            observed: distinct.len(),
            reference_size,
        });
    }
    Ok(distinct.len() as f64 / reference_size as f64)
}

/// Binomial coefficient with the convention `C(a, b) = 0` when `b > a`.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut result = BigUint::one();
    for i in 1..=k {
        result = result * BigUint::from(n - k + i) / BigUint::from(i);
    }
    result
}

/// Exact numerator and denominator of the unbiased pass@k estimator:
/// `(C(n,k) - C(n-c,k), C(n,k))`.
pub fn pass_at_k_parts(inp: &PassAtKInput) -> (BigUint, BigUint) {
    let total = binomial(inp.n, inp.k);
    let all_wrong = binomial(inp.n - inp.c, inp.k);
    (&total - &all_wrong, total)
}

/// Unbiased pass@k estimator `1 - C(n-c, k) / C(n, k)`, combinatorics done
/// exactly and divided once at the end.
pub fn pass_at_k(inp: &PassAtKInput) -> f64 {
    let (num, den) = pass_at_k_parts(inp);
    num.to_f64().expect("finite") / den.to_f64().expect("finite")
}

/// `1 - mean pairwise cosine similarity` over the vectors.
pub fn embedding_diversity(es: &EmbeddingSet) -> Result<f64, MetricsError> {
    let m = es.vectors.len();
    if m < 2 {
        return Err(MetricsError::TooFewVectors(m));
    }
    let dim = es.vectors[0].len();
    let mut norms = Vec::with_capacity(m);
    for (i, v) in es.vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(MetricsError::DimensionMismatch {
                index: i,
                got: v.len(),
                want: dim,
            });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MetricsError::ZeroVector(i));
        }
        norms.push(norm);
    }
    let mut total = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            let dot: f64 = es.vectors[a]
                .iter()
                .zip(&es.vectors[b])
                .map(|(x, y)| x * y)
                .sum();
            total += dot / (norms[a] * norms[b]);
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok(1.0 - total / pairs)
}

/// Arithmetic mean and population standard deviation.
/// Callers must pass a non-empty slice; an empty slice yields NaN.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One line of a QA log file: a prompt with its reference-set size and
/// canonicalized generations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaLogEntry {
    pub prompt_id: String,
    pub reference_size: usize,
    pub generations: Vec<Generation>,
}

impl QaLogEntry {
    pub fn record(&self) -> QARecord {
        QARecord {
            prompt_id: self.prompt_id.clone(),
            generations: self.generations.clone(),
        }
    }
}

/// Read a JSON-lines QA log; every entry must carry at least one generation.
pub fn load_qa_log(path: impl AsRef<Path>) -> Result<Vec<QaLogEntry>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: QaLogEntry = serde_json::from_str(line)
            .map_err(|e| MetricsError::LogParse(format!("line {}: {e}", lineno + 1)))?;
        if entry.generations.is_empty() {
            return Err(MetricsError::LogParse(format!(
                "line {}: prompt `{}` has no generations",
                lineno + 1,
                entry.prompt_id
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Read a JSON-lines embedding file of `{prompt_id, vectors}` entries.
pub fn load_embedding_sets(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSet>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let set: EmbeddingSet = serde_json::from_str(line)
            .map_err(|e| MetricsError::LogParse(format!("line {}: {e}", lineno + 1)))?;
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labels: &[Option<&str>]) -> QARecord {
        QARecord {
            prompt_id: "p".into(),
            generations: labels
                .iter()
                .map(|l| Generation {
                    text: "g".into(),
                    canonical: l.map(String::from),
                })
                .collect(),
        }
    }

    #[test]
    fn precision_counts_mapped_fraction() {
        let mut labels: Vec<Option<&str>> = vec![Some("a"); 9];
        labels.push(None);
        assert!((precision(&record(&labels)) - 0.9).abs() < 1e-15);
        assert_eq!(precision(&record(&[Some("a"), Some("b")])), 1.0);
        assert_eq!(precision(&record(&[None, None])), 0.0);
    }

    #[test]
    fn answer_entropy_hand_cases() {
        assert_eq!(
            answer_entropy(&record(&[Some("a"); 4])).unwrap(),
            0.0
        );
        let h = answer_entropy(&record(&[Some("a"), Some("a"), Some("b"), Some("b")])).unwrap();
        assert!((h - 2.0f64.ln()).abs() < 1e-12);

        // {a x2, b x1, c x1}: direct summation gives 1.5 ln 2.
        let labels = [Some("a"), Some("a"), Some("b"), Some("c")];
        let direct = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        let h = answer_entropy(&record(&labels)).unwrap();
        assert!((h - direct).abs() < 1e-12);
        assert!((h - 1.5 * 2.0f64.ln()).abs() < 1e-12);

        assert!(matches!(
            answer_entropy(&record(&[None])),
            Err(MetricsError::NoCorrectAnswers)
        ));
    }

    #[test]
    fn coverage_counts_distinct_labels() {
        let rec = record(&[Some("a"), Some("b"), Some("b"), Some("c"), None]);
        assert!((coverage_n(&rec, 10).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(coverage_n(&record(&[None, None]), 5).unwrap(), 0.0);
        let full = record(&[Some("a"), Some("b")]);
        assert_eq!(coverage_n(&full, 2).unwrap(), 1.0);
        assert!(matches!(
            coverage_n(&full, 1),
            Err(MetricsError::ReferenceSmallerThanObserved { .. })
        ));
        assert!(matches!(
            coverage_n(&full, 0),
            Err(MetricsError::InvalidReferenceSize)
        ));
    }

    #[test]
    fn pass_at_k_hand_case_and_edges() {
        let inp = PassAtKInput::new(5, 2, 2).unwrap();
        assert_eq!(pass_at_k(&inp), 0.7);

        for k in 1..=6 {
            let inp = PassAtKInput::new(6, 0, k).unwrap();
            assert_eq!(pass_at_k(&inp), 0.0);
        }
        assert_eq!(pass_at_k(&PassAtKInput::new(6, 1, 6).unwrap()), 1.0);
        assert!(PassAtKInput::new(5, 6, 1).is_err());
        assert!(PassAtKInput::new(5, 2, 0).is_err());
        assert!(PassAtKInput::new(5, 2, 6).is_err());
    }

    #[test]
    fn pass_at_k_equals_exhaustive_enumeration() {
        // Brute force over all C(n, k) subsets; the first c samples are the
        // correct ones.
        for n in 1..=8usize {
            for c in 0..=n {
                for k in 1..=n {
                    let mut hits = 0usize;
                    let mut subsets = 0usize;
                    for mask in 0u32..(1 << n) {
                        if mask.count_ones() as usize != k {
                            continue;
                        }
                        subsets += 1;
                        if (mask & ((1 << c) - 1)) != 0 {
                            hits += 1;
                        }
                    }
                    let inp = PassAtKInput::new(n, c, k).unwrap();
                    let (num, den) = pass_at_k_parts(&inp);
                    // Exact rational equality via cross-multiplication.
                    assert_eq!(num * BigUint::from(subsets), den.clone() * BigUint::from(hits));
                    assert_eq!(den, BigUint::from(subsets));
                    assert_eq!(pass_at_k(&inp), hits as f64 / subsets as f64);
                }
            }
        }
    }

    #[test]
    fn pass_at_k_is_monotone_in_k_and_c() {
        for n in 1..=10usize {
            for c in 0..=n {
                let mut prev = 0.0;
                for k in 1..=n {
                    let v = pass_at_k(&PassAtKInput::new(n, c, k).unwrap());
                    assert!(v + 1e-15 >= prev);
                    prev = v;
                }
            }
            for k in 1..=n {
                let mut prev = 0.0;
                for c in 0..=n {
                    let v = pass_at_k(&PassAtKInput::new(n, c, k).unwrap());
                    assert!(v + 1e-15 >= prev);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn embedding_diversity_hand_cases() {
        let two_same = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        assert_eq!(embedding_diversity(&two_same).unwrap(), 0.0);

        let orthogonal = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(embedding_diversity(&orthogonal).unwrap(), 1.0);

        // Pairwise cosines (1, 0, 0): diversity 1 - 1/3.
        let three = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let d = embedding_diversity(&three).unwrap();
        assert!((d - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn embedding_diversity_rejects_malformed_sets() {
        let zero = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        };
        assert!(matches!(
            embedding_diversity(&zero),
            Err(MetricsError::ZeroVector(0))
        ));
        let ragged = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![1.0, 0.0], vec![1.0]],
        };
        assert!(matches!(
            embedding_diversity(&ragged),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        let single = EmbeddingSet {
            prompt_id: "p".into(),
            vectors: vec![vec![1.0]],
        };
        assert!(matches!(
            embedding_diversity(&single),
            Err(MetricsError::TooFewVectors(1))
        ));
    }

    #[test]
    fn embedding_diversity_is_scale_invariant() {
        use proptest::prelude::*;
        proptest!(|(vecs in proptest::collection::vec(
                        proptest::collection::vec(-5.0f64..5.0, 4), 2..8),
                    scales in proptest::collection::vec(0.1f64..10.0, 8))| {
            let nonzero: Vec<Vec<f64>> = vecs
                .into_iter()
                .filter(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6)
                .collect();
            prop_assume!(nonzero.len() >= 2);
            let base = EmbeddingSet { prompt_id: "p".into(), vectors: nonzero.clone() };
            let rescaled = EmbeddingSet {
                prompt_id: "p".into(),
                vectors: nonzero
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.iter().map(|x| x * scales[i % scales.len()]).collect())
                    .collect(),
            };
            let a = embedding_diversity(&base).unwrap();
            let b = embedding_diversity(&rescaled).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
        });
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rec = record(&[Some("a"), Some("b"), Some("a"), None, Some("c")]);
        let mut shuffled = rec.clone();
        shuffled.generations.shuffle(&mut rng);
        assert_eq!(precision(&rec), precision(&shuffled));
        assert_eq!(
            answer_entropy(&rec).unwrap(),
            answer_entropy(&shuffled).unwrap()
        );
        assert_eq!(
            coverage_n(&rec, 5).unwrap(),
            coverage_n(&shuffled, 5).unwrap()
        );
    }

    #[test]
    fn aggregate_mean_and_population_stddev() {
        assert_eq!(aggregate(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (mean, sd) = aggregate(&[0.0, 1.0]);
        assert_eq!((mean, sd), (0.5, 0.5));
        assert_eq!(aggregate(&[7.5]), (7.5, 0.0));
    }

    #[test]
    fn qa_log_round_trips_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let entries = vec![
            QaLogEntry {
                prompt_id: "p0".into(),
                reference_size: 4,
                generations: vec![
                    Generation {
                        text: "yes".into(),
                        canonical: Some("a0".into()),
                    },
                    Generation {
                        text: "??".into(),
                        canonical: None,
                    },
                ],
            },
        ];
        let lines: Vec<String> = entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let loaded = load_qa_log(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].prompt_id, "p0");
        assert_eq!(loaded[0].generations[1].canonical, None);
    }
}
