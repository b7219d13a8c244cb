//! Synthetic multi-label dataset generator: Gaussian image clusters paired
//! with per-cluster topic vocabularies.
//!
//! Each cluster owns one label class, a Gaussian centroid in image-feature
//! space and a disjoint block of the text vocabulary. An instance picks a
//! primary cluster; with probability `mix_prob` it also picks a secondary
//! cluster, taking both labels, the midpoint of both centroids and words
//! from both vocabulary blocks. Cluster sizes are exactly balanced and the
//! final record order is shuffled, so any contiguous holdout slice is
//! cluster-balanced too.
//!
//! The construction makes the retrieval task easy by design — clusters are
//! far apart relative to the noise — so a correct training pipeline reaches
//! high MAP while a broken one does not, and the fraction of similar pairs
//! has a closed-form expectation ([`expected_similar_fraction`]) that the
//! generated data must match.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Dataset, InstanceRecord, LabelSet};

/// Number of word draws forming one text bag-of-words vector.
const WORDS_PER_INSTANCE: usize = 20;

/// Generation parameters. `clusters` doubles as the label-class count.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Standard deviation of the Gaussian noise added to image features.
    pub noise: f64,
    /// Probability that an instance mixes in a second cluster (two labels).
    pub mix_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 3,
            per_cluster: 200,
            d_x: 32,
            d_y: 100,
            noise: 0.3,
            mix_prob: 0.2,
            seed: 0,
        }
    }
}

/// Probability that two independently generated instances share at least
/// one label, as a function of cluster count `c` and mixing probability
/// `p`. Cases: both single-label (share iff same primary), one mixed
/// (the single primary hits either of the two labels), both mixed (the
/// complement of drawing two disjoint 2-subsets of the clusters).
pub fn expected_similar_fraction(c: usize, p: f64) -> f64 {
    assert!(c >= 2, "need at least two clusters");
    let cf = c as f64;
    let single_single = (1.0 - p) * (1.0 - p) / cf;
    let single_double = 4.0 * p * (1.0 - p) / cf;
    let disjoint_double = ((cf - 2.0) * (cf - 3.0).max(0.0)) / (cf * (cf - 1.0));
    let double_double = p * p * (1.0 - disjoint_double);
    single_single + single_double + double_double
}

/// Generate a dataset. Deterministic: the same [`SynthSpec`] (seed
/// included) always yields the same records in the same order.
pub fn generate(spec: &SynthSpec) -> Dataset {
    assert!(spec.clusters >= 2, "need at least two clusters");
    assert!(spec.per_cluster >= 1, "need at least one instance per cluster");
    assert!(
        spec.d_y >= spec.clusters,
        "vocabulary must have at least one word per cluster"
    );
    assert!(
        (0.0..=1.0).contains(&spec.mix_prob),
        "mix probability outside [0, 1]"
    );
    assert!(spec.noise >= 0.0, "noise must be nonnegative");

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let c = spec.clusters;

    // Cluster centroids: i.i.d. standard Gaussian coordinates. In d_x
    // dimensions two centroids sit ~sqrt(2 d_x) apart, far beyond the
    // default noise level.
    let centroids: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..spec.d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    // Disjoint vocabulary blocks: cluster a owns words [a*block, (a+1)*block).
    let block = spec.d_y / c;

    let mut records = Vec::with_capacity(c * spec.per_cluster);
    for primary in 0..c {
        for _ in 0..spec.per_cluster {
            let secondary = if rng.random::<f64>() < spec.mix_prob {
                // Uniform over the other clusters.
                let mut s = rng.random_range(0..c - 1);
                if s >= primary {
                    s += 1;
                }
                Some(s)
            } else {
                None
            };

            let mut image_feat: Vec<f64> = match secondary {
                Some(s) => centroids[primary]
                    .iter()
                    .zip(&centroids[s])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
                None => centroids[primary].clone(),
            };
            for x in &mut image_feat {
                *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }

            // Word draws with multiplicity; mixed instances split the draws
            // evenly between both blocks.
            let mut counts = vec![0u32; spec.d_y];
            let draws_primary = match secondary {
                Some(_) => WORDS_PER_INSTANCE / 2,
                None => WORDS_PER_INSTANCE,
            };
            for d in 0..WORDS_PER_INSTANCE {
                let cluster = if d < draws_primary {
                    primary
                } else {
                    secondary.expect("draws beyond the primary share imply a mix")
                };
                let word = cluster * block + rng.random_range(0..block);
                counts[word] += 1;
            }
            let text_bow: Vec<(usize, f64)> = counts
                .iter()
                .enumerate()
                .filter(|(_, &cnt)| cnt > 0)
                .map(|(w, &cnt)| (w, cnt as f64))
                .collect();

            let labels = match secondary {
                Some(s) => LabelSet::from_indices(c, &[primary.min(s), primary.max(s)]),
                None => LabelSet::from_indices(c, &[primary]),
            };
            records.push(InstanceRecord {
                image_feat,
                text_bow,
                labels,
            });
        }
    }
    records.shuffle(&mut rng);
    Dataset::new(spec.d_x, spec.d_y, c, records).expect("generated records always validate")
}
