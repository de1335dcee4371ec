//! Exact k-nearest-neighbour decisions under cosine distance.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::repr_store::ReprBundle;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("zero-norm representation at {0}")]
    ZeroVector(&'static str),
    #[error("k = {k} but only {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// `1 - cos(a, b)`
    CosineDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
}

impl KnnConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            metric: Metric::CosineDistance,
        }
    }
}

/// Rows scaled to unit norm; errors on a zero row.
fn unit_rows(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>, KnnError> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n == 0.0 {
            return Err(KnnError::ZeroVector(what));
        }
        row /= n;
    }
    Ok(out)
}

fn cosine_distance(unit_a: &[f64], unit_b: &[f64]) -> f64 {
    let dot: f64 = unit_a.iter().zip(unit_b).map(|(x, y)| x * y).sum();
    1.0 - dot.clamp(-1.0, 1.0)
}

/// `(distance, index)` of the `k` nearest candidates, nearest first, lower
/// index first among equal distances.
fn nearest(distances: &[(f64, usize)], k: usize) -> Vec<(f64, usize)> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    sorted.truncate(k);
    sorted
}

/// Majority vote; ties go to the smaller mean distance, then the lower class id.
fn vote(neighbours: &[(f64, usize)], labels: &[usize]) -> usize {
    let n_classes = neighbours
        .iter()
        .map(|&(_, i)| labels[i])
        .max()
        .unwrap_or(0)
        + 1;
    let mut count = vec![0usize; n_classes];
    let mut dist = vec![0.0f64; n_classes];
    for &(d, i) in neighbours {
        count[labels[i]] += 1;
        dist[labels[i]] += d;
    }
    let mut best: Option<usize> = None;
    for c in 0..n_classes {
        if count[c] == 0 {
            continue;
        }
        best = match best {
            None => Some(c),
            Some(b) => {
                let mean_c = dist[c] / count[c] as f64;
                let mean_b = dist[b] / count[b] as f64;
                if count[c] > count[b] || (count[c] == count[b] && mean_c < mean_b) {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.expect("k >= 1")
}

/// Unit-normalised reference set for repeated queries.
#[derive(Debug, Clone)]
pub struct KnnIndex<'a> {
    unit_refs: DMatrix<f64>,
    labels: &'a [usize],
}

impl<'a> KnnIndex<'a> {
    pub fn new(ref_reps: &DMatrix<f64>, ref_labels: &'a [usize]) -> Result<Self, KnnError> {
        if ref_reps.nrows() != ref_labels.len() {
            return Err(KnnError::ShapeMismatch(format!(
                "{} references, {} labels",
                ref_reps.nrows(),
                ref_labels.len()
            )));
        }
        // Row-major copies so each reference is a contiguous slice.
        Ok(Self {
            unit_refs: unit_rows(ref_reps, "reference")?.transpose(),
            labels: ref_labels,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn reference(&self, i: usize) -> &[f64] {
        let d = self.unit_refs.nrows();
        &self.unit_refs.as_slice()[i * d..(i + 1) * d]
    }

    fn distances(&self, query: &[f64]) -> Result<Vec<(f64, usize)>, KnnError> {
        if query.len() != self.unit_refs.nrows() {
            return Err(KnnError::ShapeMismatch(format!(
                "query has {} dims, references {}",
                query.len(),
                self.unit_refs.nrows()
            )));
        }
        let n = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(KnnError::ZeroVector("query"));
        }
        let q: Vec<f64> = query.iter().map(|x| x / n).collect();
        Ok((0..self.len())
            .map(|i| (cosine_distance(&q, self.reference(i)), i))
            .collect())
    }

    pub fn predict(&self, query: &[f64], cfg: KnnConfig) -> Result<usize, KnnError> {
        if cfg.k == 0 {
            return Err(KnnError::ZeroK);
        }
        if cfg.k > self.len() {
            return Err(KnnError::KTooLarge {
                k: cfg.k,
                n: self.len(),
            });
        }
        let d = self.distances(query)?;
        Ok(vote(&nearest(&d, cfg.k), self.labels))
    }
}

pub fn knn_predict(
    query: &[f64],
    ref_reps: &DMatrix<f64>,
    ref_labels: &[usize],
    cfg: KnnConfig,
) -> Result<usize, KnnError> {
    KnnIndex::new(ref_reps, ref_labels)?.predict(query, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnEval {
    pub k: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Classifies every test row against the training rows.
pub fn knn_eval(
    bundle: &ReprBundle,
    reps_train: &DMatrix<f64>,
    reps_test: &DMatrix<f64>,
    cfg: KnnConfig,
) -> Result<KnnEval, KnnError> {
    if reps_test.nrows() != bundle.n_test() {
        return Err(KnnError::ShapeMismatch(format!(
            "{} test rows, bundle has {}",
            reps_test.nrows(),
            bundle.n_test()
        )));
    }
    let index = KnnIndex::new(reps_train, &bundle.train_labels)?;
    let pred = (0..reps_test.nrows())
        .map(|i| {
            let q: Vec<f64> = reps_test.row(i).iter().copied().collect();
            index.predict(&q, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(KnnEval {
        k: cfg.k,
        accuracy: metrics::accuracy(&pred, &bundle.test_labels)?,
        macro_f1: metrics::macro_f1(&pred, &bundle.test_labels, bundle.n_classes)?,
    })
}

/// Mean fraction of each sample's `k` nearest neighbours (itself excluded)
/// that share its label.
pub fn sibling_rate(reps: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<f64, KnnError> {
    let n = labels.len();
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if k >= n {
        return Err(KnnError::KTooLarge {
            k,
            n: n.saturating_sub(1),
        });
    }
    let index = KnnIndex::new(reps, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        let mine = index.reference(i);
        let dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine_distance(mine, index.reference(j)), j))
            .collect();
        let same = nearest(&dists, k)
            .iter()
            .filter(|&&(_, j)| labels[j] == labels[i])
            .count();
        total += same as f64 / k as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn k1_returns_nearest_label() {
        let refs = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.1]);
        let labels = [4, 7, 2];
        assert_eq!(
            knn_predict(&[0.9, 0.2], &refs, &labels, KnnConfig::new(1)).unwrap(),
            4
        );
        assert_eq!(
            knn_predict(&[0.1, 3.0], &refs, &labels, KnnConfig::new(1)).unwrap(),
            7
        );
    }

    #[test]
    fn k_equals_n_is_global_majority() {
        let refs =
            DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 1.0, 0.2, 1.0]);
        let labels = [0, 0, 1, 1, 1];
        assert_eq!(
            knn_predict(&[1.0, 0.0], &refs, &labels, KnnConfig::new(5)).unwrap(),
            1
        );

        // 2 vs 2: the class closer on average wins
        let refs = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 1.0]);
        let labels = [1, 1, 0, 0];
        assert_eq!(
            knn_predict(&[1.0, 0.05], &refs, &labels, KnnConfig::new(4)).unwrap(),
            1
        );
        assert_eq!(
            knn_predict(&[0.05, 1.0], &refs, &labels, KnnConfig::new(4)).unwrap(),
            0
        );
        // fully symmetric: lowest class id
        assert_eq!(
            knn_predict(&[1.0, 1.0], &refs, &[1, 0, 0, 1], KnnConfig::new(4)).unwrap(),
            0
        );
    }

    #[test]
    fn equal_distances_prefer_lower_index() {
        let refs = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 2.0, 1.0, 0.0]);
        assert_eq!(
            knn_predict(&[0.0, 1.0], &refs, &[5, 3, 1], KnnConfig::new(1)).unwrap(),
            5
        );
    }

    #[test]
    fn errors() {
        let refs = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            knn_predict(&[1.0, 0.0], &refs, &[0, 1], KnnConfig::new(3)),
            Err(KnnError::KTooLarge { .. })
        ));
        assert!(matches!(
            knn_predict(&[0.0, 0.0], &refs, &[0, 1], KnnConfig::new(1)),
            Err(KnnError::ZeroVector(_))
        ));
        assert!(matches!(
            knn_predict(&[1.0, 0.0], &refs, &[0, 1], KnnConfig::new(0)),
            Err(KnnError::ZeroK)
        ));
        assert!(matches!(
            sibling_rate(&refs, &[0, 1], 2),
            Err(KnnError::KTooLarge { .. })
        ));
    }

    #[test]
    fn sibling_rate_antipodal_classes() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let (x, l) = if i % 2 == 0 { (1.0, 0) } else { (-1.0, 1) };
            rows.extend_from_slice(&[x, 2.0 * x]);
            labels.push(l);
        }
        let reps = DMatrix::from_row_slice(6, 2, &rows);
        assert_eq!(sibling_rate(&reps, &labels, 2).unwrap(), 1.0);
    }

    #[test]
    fn sibling_rate_random_labels_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reps = gaussian(&mut rng, 2000, 8);
        let labels: Vec<usize> = (0..2000).map(|_| rng.random_range(0..5)).collect();
        let rate = sibling_rate(&reps, &labels, 10).unwrap();
        assert!((rate - 0.2).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn sibling_rate_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let reps = gaussian(&mut rng, 60, 4);
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = sibling_rate(&reps, &labels, 5).unwrap();
        let b = sibling_rate(&(&reps * 37.5), &labels, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_references_with_distinct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let refs = gaussian(&mut rng, 40, 5);
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let perm: Vec<usize> = (0..40).rev().collect();
        let refs_p = DMatrix::from_fn(40, 5, |i, j| refs[(perm[i], j)]);
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for q in 0..20 {
            let query: Vec<f64> = (0..5).map(|j| ((q * 5 + j) as f64).sin()).collect();
            for k in [1, 3, 7] {
                assert_eq!(
                    knn_predict(&query, &refs, &labels, KnnConfig::new(k)).unwrap(),
                    knn_predict(&query, &refs_p, &labels_p, KnnConfig::new(k)).unwrap()
                );
            }
        }
    }
}
