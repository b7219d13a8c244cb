//! Instance records, label-derived similarity, and query-set sampling.
//!
//! An instance pairs a dense image feature vector with a sparse text
//! bag-of-words vector and a non-empty label set. Two instances are *similar*
//! (+1) when they share at least one label and *dissimilar* (-1) otherwise.
//! Because most pairs in multi-label corpora are dissimilar, every loss term
//! that compares against similarity applies a class-imbalance weight to the
//! -1 entries: the ratio of +1 to -1 entries over the full n x n similarity
//! implied by the labels.
//!
//! Training does not need the full n x n matrix: each outer iteration samples
//! a query set of m row indices and materializes only those m rows
//! ([`SimilarityView`]). The imbalance weight is still computed from the full
//! matrix (streamed over label pairs, never materialized), not from the
//! sampled rows, so the weighting is stable across iterations.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Fixed-size bit set over `c` label classes, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    classes: usize,
    words: Vec<u64>,
}

impl LabelSet {
    /// Build from the indices of the set bits. Panics on an out-of-range
    /// index; use [`LabelSet::try_from_indices`] for untrusted input.
    pub fn from_indices(classes: usize, indices: &[usize]) -> Self {
        Self::try_from_indices(classes, indices).expect("label index out of range")
    }

    pub fn try_from_indices(classes: usize, indices: &[usize]) -> Result<Self> {
        let mut words = vec![0u64; classes.div_ceil(64)];
        for &i in indices {
            if i >= classes {
                return Err(Error::parse(
                    "label set",
                    format!("label index {i} out of range (c = {classes})"),
                ));
            }
            words[i / 64] |= 1 << (i % 64);
        }
        Ok(LabelSet { classes, words })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn contains(&self, i: usize) -> bool {
        assert!(i < self.classes, "label index {i} out of range");
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Set-bit indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.classes).filter(|&i| self.contains(i)).collect()
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        assert_eq!(
            self.classes, other.classes,
            "label sets over different class counts"
        );
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }
}

/// Similarity of two label sets: +1 when they share at least one label,
/// otherwise -1. Symmetric by construction.
pub fn similarity(a: &LabelSet, b: &LabelSet) -> i8 {
    if a.intersects(b) {
        1
    } else {
        -1
    }
}

/// One database instance: paired image and text features plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    /// Dense image feature vector, length `d_x`.
    pub image_feat: Vec<f64>,
    /// Sparse bag-of-words text vector: (index, count) pairs with strictly
    /// increasing indices below `d_y` and nonnegative values.
    pub text_bow: Vec<(usize, f64)>,
    /// Ground-truth labels; never empty, so every instance is similar to
    /// itself.
    pub labels: LabelSet,
}

/// An ordered collection of instances with shared dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<InstanceRecord>,
    d_x: usize,
    d_y: usize,
    c: usize,
}

impl Dataset {
    /// Validate and assemble. Errors name the first offending record.
    pub fn new(d_x: usize, d_y: usize, c: usize, records: Vec<InstanceRecord>) -> Result<Self> {
        if d_x == 0 || d_y == 0 || c == 0 {
            return Err(Error::parse(
                "dataset header",
                format!("dimensions must be positive (d_x={d_x}, d_y={d_y}, c={c})"),
            ));
        }
        for (idx, rec) in records.iter().enumerate() {
            let ctx = format!("record {idx}");
            if rec.image_feat.len() != d_x {
                return Err(Error::parse(
                    ctx,
                    format!("image vector has {} dims, expected {d_x}", rec.image_feat.len()),
                ));
            }
            if rec.image_feat.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(ctx, "non-finite image feature"));
            }
            let mut prev: Option<usize> = None;
            for &(i, v) in &rec.text_bow {
                if i >= d_y {
                    return Err(Error::parse(
                        ctx,
                        format!("bag-of-words index {i} out of range (d_y = {d_y})"),
                    ));
                }
                if prev.is_some_and(|p| i <= p) {
                    return Err(Error::parse(ctx, "bag-of-words indices not strictly increasing"));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::parse(ctx, format!("bag-of-words value {v} invalid")));
                }
                prev = Some(i);
            }
            if rec.labels.classes() != c {
                return Err(Error::parse(
                    ctx,
                    format!("label set over {} classes, expected {c}", rec.labels.classes()),
                ));
            }
            if rec.labels.is_empty() {
                return Err(Error::parse(ctx, "empty label set"));
            }
        }
        Ok(Dataset { records, d_x, d_y, c })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn labels(&self, i: usize) -> &LabelSet {
        &self.records[i].labels
    }

    /// Dense text vector for one record.
    pub fn text_dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.d_y];
        for &(j, v) in &self.records[i].text_bow {
            row[j] = v;
        }
        row
    }

    /// Stack the image features of `indices` into a dense matrix.
    pub fn image_matrix(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.d_x);
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.records[i].image_feat);
        }
        m
    }

    /// Stack the densified text features of `indices` into a matrix.
    pub fn text_matrix(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.d_y);
        for (r, &i) in indices.iter().enumerate() {
            for &(j, v) in &self.records[i].text_bow {
                m[(r, j)] = v;
            }
        }
        m
    }

    /// Full n x c 0/1 label matrix L.
    pub fn labels_matrix(&self) -> Matrix {
        let mut l = Matrix::zeros(self.n(), self.c);
        for (i, rec) in self.records.iter().enumerate() {
            for j in rec.labels.indices() {
                l[(i, j)] = 1.0;
            }
        }
        l
    }

    /// Label matrix restricted to `indices` (stacked in the given order).
    pub fn labels_matrix_for(&self, indices: &[usize]) -> Matrix {
        let mut l = Matrix::zeros(indices.len(), self.c);
        for (r, &i) in indices.iter().enumerate() {
            for j in self.records[i].labels.indices() {
                l[(r, j)] = 1.0;
            }
        }
        l
    }

    /// Split off the trailing `round(frac * n)` records as a holdout slice.
    /// Record order is preserved in both halves.
    pub fn split_holdout(&self, frac: f64) -> (Dataset, Dataset) {
        assert!(
            (0.0..=1.0).contains(&frac),
            "holdout fraction {frac} outside [0, 1]"
        );
        let n_hold = ((frac * self.n() as f64).round() as usize).min(self.n());
        let split = self.n() - n_hold;
        let train = Dataset {
            records: self.records[..split].to_vec(),
            d_x: self.d_x,
            d_y: self.d_y,
            c: self.c,
        };
        let hold = Dataset {
            records: self.records[split..].to_vec(),
            d_x: self.d_x,
            d_y: self.d_y,
            c: self.c,
        };
        (train, hold)
    }

    /// Class-imbalance weight: (+1 count) / (-1 count) over the full n x n
    /// similarity implied by the labels, diagonal included. Streams over
    /// label pairs; the matrix itself is never built. Returns 1 when no -1
    /// entries exist.
    pub fn imbalance_weight(&self) -> f64 {
        let n = self.n();
        // The diagonal is always +1 (labels are non-empty); off-diagonal
        // pairs are symmetric, so scan i < j once and double.
        let mut pos = n as u64;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.records[i].labels.intersects(&self.records[j].labels) {
                    pos += 2;
                }
            }
        }
        let total = (n as u64) * (n as u64);
        let neg = total - pos;
        if neg == 0 {
            1.0
        } else {
            pos as f64 / neg as f64
        }
    }
}

/// The m sampled similarity rows used by one outer training iteration.
///
/// Row `i` describes query instance `query_index[i]` against every database
/// instance `j`. Entries are signs in {-1, +1}; [`SimilarityView::weight`]
/// returns the imbalance weight for -1 entries and 1 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityView {
    query_index: Vec<usize>,
    values: Vec<i8>, // m x n, row-major
    n: usize,
    neg_weight: f64,
}

impl SimilarityView {
    /// Assemble from raw parts. Checks shapes and that entries are signs,
    /// but deliberately nothing else: tests construct views with synthetic
    /// values (even weight 0) to isolate individual loss terms.
    pub fn from_parts(query_index: Vec<usize>, values: Vec<i8>, n: usize, neg_weight: f64) -> Self {
        assert_eq!(
            values.len(),
            query_index.len() * n,
            "similarity values length mismatch"
        );
        assert!(
            values.iter().all(|&v| v == 1 || v == -1),
            "similarity entries must be -1 or +1"
        );
        assert!(query_index.iter().all(|&i| i < n), "query index out of range");
        assert!(
            neg_weight.is_finite() && neg_weight >= 0.0,
            "imbalance weight must be finite and nonnegative"
        );
        SimilarityView {
            query_index,
            values,
            n,
            neg_weight,
        }
    }

    /// Number of sampled query rows (m).
    pub fn m(&self) -> usize {
        self.query_index.len()
    }

    /// Number of database columns (n).
    pub fn n(&self) -> usize {
        self.n
    }

    /// The sampled database indices, in sample order.
    pub fn query_index(&self) -> &[usize] {
        &self.query_index
    }

    pub fn neg_weight(&self) -> f64 {
        self.neg_weight
    }

    /// Sign of query row `i` against database column `j`.
    #[inline]
    pub fn s(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.m() && j < self.n);
        self.values[i * self.n + j] as f64
    }

    /// Imbalance weight of entry (i, j): `neg_weight` for -1, else 1.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.m() && j < self.n);
        if self.values[i * self.n + j] < 0 {
            self.neg_weight
        } else {
            1.0
        }
    }

    /// Sign between sampled rows: query row `i` against query instance `j`
    /// (i.e. the similarity matrix restricted to the sample on both axes).
    #[inline]
    pub fn s_sampled(&self, i: usize, j: usize) -> f64 {
        self.s(i, self.query_index[j])
    }

    /// Imbalance weight of the sampled-by-sampled entry (i, j).
    #[inline]
    pub fn weight_sampled(&self, i: usize, j: usize) -> f64 {
        self.weight(i, self.query_index[j])
    }
}

/// Sample m distinct query indices uniformly without replacement and build
/// their similarity rows. Deterministic for a fixed seed.
pub fn sample_query_set(dataset: &Dataset, m: usize, rng_seed: u64) -> SimilarityView {
    let n = dataset.n();
    assert!(m >= 1 && m <= n, "query sample size {m} outside 1..={n}");
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let query_index: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
    let mut values = Vec::with_capacity(m * n);
    for &qi in &query_index {
        let ql = dataset.labels(qi);
        for j in 0..n {
            values.push(similarity(ql, dataset.labels(j)));
        }
    }
    SimilarityView {
        query_index,
        values,
        n,
        neg_weight: dataset.imbalance_weight(),
    }
}

// --- JSON-lines serialization ----------------------------------------------
//
// Line 1 is a header object {"d_x", "d_y", "c"}; each following line is one
// record {"img": [...], "bow": [[index, value], ...], "labels": [indices]}.

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    d_x: usize,
    d_y: usize,
    c: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    img: Vec<f64>,
    bow: Vec<(usize, f64)>,
    labels: Vec<usize>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty file"))?;
    let header_line = header_line.map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: HeaderLine = serde_json::from_str(&header_line)
        .map_err(|e| Error::parse(format!("{}: header", path.display()), e.to_string()))?;

    let mut records = Vec::new();
    for (line_no, line) in lines {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        // Records are 0-indexed; line_no counts from the header.
        let rec_idx = records.len();
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| {
            Error::parse(
                format!("{}: record {rec_idx} (line {})", path.display(), line_no + 1),
                e.to_string(),
            )
        })?;
        let labels = LabelSet::try_from_indices(header.c, &parsed.labels)
            .map_err(|e| Error::parse(format!("record {rec_idx}"), e.to_string()))?;
        records.push(InstanceRecord {
            image_feat: parsed.img,
            text_bow: parsed.bow,
            labels,
        });
    }
    Dataset::new(header.d_x, header.d_y, header.c, records)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let header = HeaderLine {
        d_x: dataset.d_x(),
        d_y: dataset.d_y(),
        c: dataset.c(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::parse("header", e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for rec in dataset.records() {
        let line = RecordLine {
            img: rec.image_feat.clone(),
            bow: rec.text_bow.clone(),
            labels: rec.labels.indices(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::parse("record", e.to_string()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
