//! Out-of-sample hashing, Hamming ranking over packed codes, and the three
//! retrieval metrics: mean average precision, precision at n, and the
//! precision/recall curve over Hamming radii.
//!
//! A database item is *relevant* to a query iff they share at least one
//! label — the same rule that defines training similarity. All metrics are
//! macro-averaged over queries, and ranking ties (equal Hamming distance)
//! are broken by ascending database index so every number here is
//! deterministic.
//!
//! Conventions pinned for reproducibility:
//! * empty retrieval sets (PR curve at small radii) count as precision 1;
//! * a query with zero relevant items scores average precision 0 and
//!   recall 1 (its relevant set is vacuously covered).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward, MlpParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::solver::{sign_pm, CodeMatrix};

/// A single k-bit code packed into 64-bit words (bit `j` of word `j / 64`
/// set iff entry `j` is +1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCode {
    k: usize,
    words: Vec<u64>,
}

impl PackedCode {
    /// Pack the signs of a real vector: bit set iff the entry is strictly
    /// positive (sign(0) = -1).
    pub fn from_signs(values: &[f64]) -> Self {
        let k = values.len();
        let mut words = vec![0u64; k.div_ceil(64)];
        for (j, &v) in values.iter().enumerate() {
            if sign_pm(v) > 0.0 {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        PackedCode { k, words }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

/// Hash an unseen input: forward pass through the modality's encoder, then
/// elementwise sign of the outputs.
pub fn hash_query(params: &MlpParams, input: &[f64]) -> PackedCode {
    let x = Matrix::from_vec(1, input.len(), input.to_vec());
    let (out, _) = forward(params, &x);
    PackedCode::from_signs(out.row(0))
}

/// Hamming distance between two equal-length packed codes.
pub fn hamming(a: &PackedCode, b: &PackedCode) -> u32 {
    assert_eq!(a.k, b.k, "codes have different lengths ({} vs {})", a.k, b.k);
    hamming_words(&a.words, &b.words)
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// The database side of retrieval: learned codes plus the label matrix that
/// defines relevance. Immutable once built.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    codes: CodeMatrix,
    labels: Matrix, // n x c, entries 0/1
}

impl RetrievalIndex {
    pub fn new(codes: CodeMatrix, labels: Matrix) -> Self {
        assert_eq!(
            codes.n(),
            labels.rows(),
            "one label row per database code required"
        );
        RetrievalIndex { codes, labels }
    }

    pub fn n(&self) -> usize {
        self.codes.n()
    }

    pub fn k(&self) -> usize {
        self.codes.k()
    }

    pub fn codes(&self) -> &CodeMatrix {
        &self.codes
    }

    fn distances(&self, query: &PackedCode) -> Vec<u32> {
        assert_eq!(query.k, self.k(), "query code length must match index");
        (0..self.n())
            .map(|j| hamming_words(&query.words, self.codes.row_words(j)))
            .collect()
    }

    fn relevant(&self, query_labels: &[f64], j: usize) -> bool {
        assert_eq!(query_labels.len(), self.labels.cols(), "label width mismatch");
        self.labels
            .row(j)
            .iter()
            .zip(query_labels)
            .any(|(&a, &b)| a > 0.0 && b > 0.0)
    }
}

/// Full ranking of the database for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    /// Database indices by ascending Hamming distance, ties by index.
    pub ranked: Vec<usize>,
    /// Distances in ranked order (non-decreasing).
    pub distances: Vec<u32>,
}

pub fn rank(index: &RetrievalIndex, query: &PackedCode) -> QueryResult {
    let dist = index.distances(query);
    let mut order: Vec<(u32, usize)> = dist.iter().copied().zip(0..index.n()).collect();
    order.sort_unstable();
    QueryResult {
        ranked: order.iter().map(|&(_, j)| j).collect(),
        distances: order.iter().map(|&(d, _)| d).collect(),
    }
}

/// Queries for evaluation: one packed code and one label row each.
#[derive(Debug, Clone)]
pub struct QuerySet {
    codes: Vec<PackedCode>,
    labels: Matrix, // q x c
}

impl QuerySet {
    pub fn new(codes: Vec<PackedCode>, labels: Matrix) -> Self {
        assert_eq!(codes.len(), labels.rows(), "one label row per query code");
        assert!(!codes.is_empty(), "query set must not be empty");
        QuerySet { codes, labels }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[PackedCode] {
        &self.codes
    }
}

/// Mean over queries of average precision. AP accumulates precision at the
/// rank of each relevant item, divided by the query's relevant count;
/// queries with zero relevant items contribute 0.
pub fn mean_average_precision(index: &RetrievalIndex, queries: &QuerySet) -> f64 {
    let mut sum = 0.0;
    for (qi, code) in queries.codes.iter().enumerate() {
        let result = rank(index, code);
        let qlabels = queries.labels.row(qi);
        let mut hits = 0u64;
        let mut ap = 0.0;
        for (r, &j) in result.ranked.iter().enumerate() {
            if index.relevant(qlabels, j) {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        if hits > 0 {
            sum += ap / hits as f64;
        }
    }
    sum / queries.len() as f64
}

/// Mean over queries of (relevant items in the top `n_cut`) / `n_cut`.
pub fn precision_at(index: &RetrievalIndex, queries: &QuerySet, n_cut: usize) -> f64 {
    assert!(
        n_cut >= 1 && n_cut <= index.n(),
        "cutoff {n_cut} outside 1..={}",
        index.n()
    );
    let mut sum = 0.0;
    for (qi, code) in queries.codes.iter().enumerate() {
        let result = rank(index, code);
        let qlabels = queries.labels.row(qi);
        let hits = result.ranked[..n_cut]
            .iter()
            .filter(|&&j| index.relevant(qlabels, j))
            .count();
        sum += hits as f64 / n_cut as f64;
    }
    sum / queries.len() as f64
}

/// Precision and recall of radius-bounded lookup, for every radius in
/// `0..=k`, macro-averaged over queries. An empty retrieved set counts as
/// precision 1; a query with no relevant items counts as recall 1.
pub fn pr_curve(index: &RetrievalIndex, queries: &QuerySet) -> Vec<(u32, f64, f64)> {
    let k = index.k();
    let mut precision_sum = vec![0.0; k + 1];
    let mut recall_sum = vec![0.0; k + 1];
    for (qi, code) in queries.codes.iter().enumerate() {
        let dist = index.distances(code);
        let qlabels = queries.labels.row(qi);
        // Histogram distances, overall and for relevant items only.
        let mut all_at = vec![0u64; k + 1];
        let mut rel_at = vec![0u64; k + 1];
        let mut total_rel = 0u64;
        for (j, &d) in dist.iter().enumerate() {
            all_at[d as usize] += 1;
            if index.relevant(qlabels, j) {
                rel_at[d as usize] += 1;
                total_rel += 1;
            }
        }
        let mut retrieved = 0u64;
        let mut rel_retrieved = 0u64;
        for r in 0..=k {
            retrieved += all_at[r];
            rel_retrieved += rel_at[r];
            precision_sum[r] += if retrieved > 0 {
                rel_retrieved as f64 / retrieved as f64
            } else {
                1.0
            };
            recall_sum[r] += if total_rel > 0 {
                rel_retrieved as f64 / total_rel as f64
            } else {
                1.0
            };
        }
    }
    let q = queries.len() as f64;
    (0..=k as u32)
        .map(|r| (r, precision_sum[r as usize] / q, recall_sum[r as usize] / q))
        .collect()
}

/// All three metrics bundled for serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// Precision at each cutoff, keyed by the cutoff (ordered keys keep the
    /// JSON deterministic).
    pub p_at_n: BTreeMap<usize, f64>,
    pub pr_curve: Vec<(u32, f64, f64)>,
}

impl MetricsReport {
    /// Evaluate all metrics; out-of-range cutoffs are skipped.
    pub fn compute(index: &RetrievalIndex, queries: &QuerySet, cutoffs: &[usize]) -> Self {
        let p_at_n = cutoffs
            .iter()
            .filter(|&&n| n >= 1 && n <= index.n())
            .map(|&n| (n, precision_at(index, queries, n)))
            .collect();
        MetricsReport {
            map: mean_average_precision(index, queries),
            p_at_n,
            pr_curve: pr_curve(index, queries),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialization cannot fail")
    }

    /// The PR curve as a three-column CSV (radius, precision, recall).
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("radius,precision,recall\n");
        for &(r, p, rec) in &self.pr_curve {
            out.push_str(&format!("{r},{p},{rec}\n"));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.to_json().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn save_pr_csv(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.pr_curve_csv().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
