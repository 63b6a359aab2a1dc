//! Latent-space geometry: normalization, exact k-th nearest-neighbor
//! distances, and dataset diagnostics.
//!
//! All neighbor searches are exact brute-force scans with ties broken by
//! `(distance, record position)`, so every operation is deterministic and
//! independent of record order. Distances are Euclidean, computed with one
//! fixed expression so that independent oracles can reproduce values exactly.

use std::borrow::Cow;

use crate::error::{Result, SpadeError};
use crate::store::EmbeddingDataset;

/// Underflow guard: norms below this cannot be normalized meaningfully.
const NORM_MIN: f64 = 1e-300;

/// Distance configuration shared by all geometry operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentConfig {
    /// Project vectors to the unit sphere before measuring distances.
    pub normalize: bool,
    /// Which neighbor rank to report (1 = nearest).
    pub k: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            normalize: true,
            k: 10,
        }
    }
}

/// A leave-one-out same-class neighbor distance for one training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDistanceSample {
    pub position: usize,
    pub class: usize,
    pub z: f64,
}

/// Euclidean distance; the single distance expression used everywhere.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale a vector to unit Euclidean norm.
pub fn normalize(vector: &[f64]) -> Result<Vec<f64>> {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(SpadeError::InvalidParameter(
            "vector norm is not finite".into(),
        ));
    }
    if norm <= NORM_MIN {
        return Err(SpadeError::ZeroVector);
    }
    Ok(vector.iter().map(|v| v / norm).collect())
}

fn effective<'a>(vector: &'a [f64], config: &LatentConfig) -> Result<Cow<'a, [f64]>> {
    if config.normalize {
        Ok(Cow::Owned(normalize(vector)?))
    } else {
        Ok(Cow::Borrowed(vector))
    }
}

/// k-th smallest of `(distance, position)` pairs under the full tie order.
fn kth_smallest(mut dists: Vec<(f64, usize)>, k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= dists.len());
    dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists[k - 1].0
}

/// Leave-one-out distance from a training record to the k-th nearest other
/// member of its own class.
pub fn kth_nn_distance_same_class(
    dataset: &EmbeddingDataset,
    position: usize,
    config: &LatentConfig,
) -> Result<f64> {
    let class = dataset.label(position);
    let members = dataset.class_members(class)?;
    if members.len() <= config.k {
        return Err(SpadeError::InsufficientClassSize {
            class,
            size: members.len(),
            needed: config.k + 1,
        });
    }
    let query = effective(dataset.vector(position), config)?;
    let mut dists = Vec::with_capacity(members.len() - 1);
    for &m in members {
        if m == position {
            continue;
        }
        let other = effective(dataset.vector(m), config)?;
        dists.push((euclidean(&query, &other), m));
    }
    Ok(kth_smallest(dists, config.k))
}

/// Distance from an external query to the k-th nearest member of a class
/// (no self-exclusion).
pub fn kth_nn_distance_to_class(
    query: &[f64],
    dataset: &EmbeddingDataset,
    class: usize,
    config: &LatentConfig,
) -> Result<f64> {
    if query.len() != dataset.dimension() {
        return Err(SpadeError::DimensionMismatch {
            expected: dataset.dimension(),
            actual: query.len(),
        });
    }
    let members = dataset.class_members(class)?;
    if members.len() < config.k {
        return Err(SpadeError::InsufficientClassSize {
            class,
            size: members.len(),
            needed: config.k,
        });
    }
    let query = effective(query, config)?;
    let mut dists = Vec::with_capacity(members.len());
    for &m in members {
        let other = effective(dataset.vector(m), config)?;
        dists.push((euclidean(&query, &other), m));
    }
    Ok(kth_smallest(dists, config.k))
}

/// Distance from an external query to the k-th nearest record of the whole
/// dataset, ignoring labels.
pub fn kth_nn_distance_all(
    query: &[f64],
    dataset: &EmbeddingDataset,
    config: &LatentConfig,
) -> Result<f64> {
    if query.len() != dataset.dimension() {
        return Err(SpadeError::DimensionMismatch {
            expected: dataset.dimension(),
            actual: query.len(),
        });
    }
    if dataset.len() < config.k {
        return Err(SpadeError::InvalidParameter(format!(
            "dataset has {} records, need at least k = {}",
            dataset.len(),
            config.k
        )));
    }
    let query = effective(query, config)?;
    let mut dists = Vec::with_capacity(dataset.len());
    for m in 0..dataset.len() {
        let other = effective(dataset.vector(m), config)?;
        dists.push((euclidean(&query, &other), m));
    }
    Ok(kth_smallest(dists, config.k))
}

/// Leave-one-out same-class k-NN distance for every member of a class, in
/// member order.
pub fn class_distance_samples(
    dataset: &EmbeddingDataset,
    class: usize,
    config: &LatentConfig,
) -> Result<Vec<ClassDistanceSample>> {
    let members = dataset.class_members(class)?.to_vec();
    members
        .into_iter()
        .map(|position| {
            Ok(ClassDistanceSample {
                position,
                class,
                z: kth_nn_distance_same_class(dataset, position, config)?,
            })
        })
        .collect()
}

/// Maximum intra-class diameter over all classes; 0 for singleton classes.
pub fn variation(dataset: &EmbeddingDataset, config: &LatentConfig) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for class in 0..dataset.n_classes() {
        let members = dataset.class_members(class)?;
        let vectors: Vec<Cow<'_, [f64]>> = members
            .iter()
            .map(|&m| effective(dataset.vector(m), config))
            .collect::<Result<_>>()?;
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                worst = worst.max(euclidean(&vectors[i], &vectors[j]));
            }
        }
    }
    Ok(worst)
}

/// Mean over all ordered pairs of distinct classes of the minimum cross-class
/// distance.
pub fn informativeness(dataset: &EmbeddingDataset, config: &LatentConfig) -> Result<f64> {
    let n_c = dataset.n_classes();
    if n_c < 2 {
        return Err(SpadeError::SingleClass);
    }
    let per_class: Vec<Vec<Cow<'_, [f64]>>> = (0..n_c)
        .map(|class| {
            dataset
                .class_members(class)?
                .iter()
                .map(|&m| effective(dataset.vector(m), config))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for c in 0..n_c {
        for c_prime in 0..n_c {
            if c == c_prime {
                continue;
            }
            let mut min = f64::INFINITY;
            for a in &per_class[c] {
                for b in &per_class[c_prime] {
                    min = min.min(euclidean(a, b));
                }
            }
            total += min;
        }
    }
    Ok(total / (n_c * (n_c - 1)) as f64)
}

/// Largest ratio of embedding distance to input distance over all pairs.
///
/// This is a data-driven lower bound on the true Lipschitz constant of the
/// embedding, never an upper bound; downstream consumers should treat bounds
/// derived from it as optimistic.
pub fn empirical_lipschitz(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(SpadeError::InvalidParameter(
            "need at least two (input, embedding) pairs".into(),
        ));
    }
    let d_in = pairs[0].0.len();
    let d_emb = pairs[0].1.len();
    for (input, embedding) in pairs {
        if input.len() != d_in {
            return Err(SpadeError::DimensionMismatch {
                expected: d_in,
                actual: input.len(),
            });
        }
        if embedding.len() != d_emb {
            return Err(SpadeError::DimensionMismatch {
                expected: d_emb,
                actual: embedding.len(),
            });
        }
    }
    let mut ratio: f64 = 0.0;
    for i in 0..pairs.len() {
        for j in (i + 1)..pairs.len() {
            let denom = euclidean(&pairs[i].0, &pairs[j].0);
            if denom == 0.0 {
                return Err(SpadeError::DuplicateInput);
            }
            ratio = ratio.max(euclidean(&pairs[i].1, &pairs[j].1) / denom);
        }
    }
    Ok(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingRecord;

    fn dataset_1d(points: &[(f64, usize)]) -> EmbeddingDataset {
        EmbeddingDataset::from_records(
            points
                .iter()
                .enumerate()
                .map(|(i, &(x, label))| EmbeddingRecord {
                    id: format!("p{i}"),
                    label,
                    vector: vec![x],
                })
                .collect(),
        )
        .unwrap()
    }

    fn raw(k: usize) -> LatentConfig {
        LatentConfig {
            normalize: false,
            k,
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let unit = normalize(&[3.0, 4.0]).unwrap();
        assert!((unit[0] - 0.6).abs() < 1e-15);
        assert!((unit[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(SpadeError::ZeroVector)));
        assert!(matches!(
            normalize(&[1e-310, 0.0]),
            Err(SpadeError::ZeroVector)
        ));
    }

    #[test]
    fn same_class_kth_distance_brute_force_examples() {
        // Class points {0, 1, 3} on the line, query at 0.
        let ds = dataset_1d(&[(0.0, 0), (1.0, 0), (3.0, 0)]);
        assert_eq!(kth_nn_distance_same_class(&ds, 0, &raw(1)).unwrap(), 1.0);
        assert_eq!(kth_nn_distance_same_class(&ds, 0, &raw(2)).unwrap(), 3.0);
    }

    #[test]
    fn same_class_requires_k_other_members() {
        let ds = dataset_1d(&[(0.0, 0), (1.0, 0)]);
        assert!(matches!(
            kth_nn_distance_same_class(&ds, 0, &raw(2)),
            Err(SpadeError::InsufficientClassSize {
                class: 0,
                size: 2,
                needed: 3
            })
        ));
    }

    #[test]
    fn to_class_distance_examples() {
        let ds = dataset_1d(&[(1.0, 0), (4.0, 0)]);
        assert_eq!(kth_nn_distance_to_class(&[1.0], &ds, 0, &raw(1)).unwrap(), 0.0);
        assert_eq!(kth_nn_distance_to_class(&[0.0], &ds, 0, &raw(2)).unwrap(), 4.0);
        assert!(matches!(
            kth_nn_distance_to_class(&[0.0], &ds, 0, &raw(3)),
            Err(SpadeError::InsufficientClassSize { .. })
        ));
    }

    #[test]
    fn to_class_checks_dimension() {
        let ds = dataset_1d(&[(1.0, 0)]);
        assert!(matches!(
            kth_nn_distance_to_class(&[0.0, 0.0], &ds, 0, &raw(1)),
            Err(SpadeError::DimensionMismatch {
                expected: 1,
                actual: 2
            })
        ));
    }

    #[test]
    fn variation_takes_worst_class_diameter() {
        let ds = EmbeddingDataset::from_records(vec![
            EmbeddingRecord {
                id: "a0".into(),
                label: 0,
                vector: vec![0.0, 0.0],
            },
            EmbeddingRecord {
                id: "a1".into(),
                label: 0,
                vector: vec![3.0, 4.0],
            },
            EmbeddingRecord {
                id: "b0".into(),
                label: 1,
                vector: vec![0.0, 0.0],
            },
            EmbeddingRecord {
                id: "b1".into(),
                label: 1,
                vector: vec![0.0, 1.0],
            },
        ])
        .unwrap();
        assert_eq!(variation(&ds, &raw(1)).unwrap(), 5.0);
    }

    #[test]
    fn variation_of_singletons_is_zero() {
        let ds = dataset_1d(&[(0.0, 0), (7.0, 1)]);
        assert_eq!(variation(&ds, &raw(1)).unwrap(), 0.0);
    }

    #[test]
    fn variation_ignores_duplicated_points() {
        let base = dataset_1d(&[(0.0, 0), (2.0, 0), (5.0, 1), (6.0, 1)]);
        let dup = dataset_1d(&[(0.0, 0), (2.0, 0), (2.0, 0), (5.0, 1), (6.0, 1)]);
        assert_eq!(
            variation(&base, &raw(1)).unwrap(),
            variation(&dup, &raw(1)).unwrap()
        );
    }

    #[test]
    fn informativeness_examples() {
        let ds = EmbeddingDataset::from_records(vec![
            EmbeddingRecord {
                id: "a".into(),
                label: 0,
                vector: vec![0.0, 0.0],
            },
            EmbeddingRecord {
                id: "b".into(),
                label: 1,
                vector: vec![3.0, 4.0],
            },
        ])
        .unwrap();
        assert_eq!(informativeness(&ds, &raw(1)).unwrap(), 5.0);

        let coincident = dataset_1d(&[(2.0, 0), (2.0, 1)]);
        assert_eq!(informativeness(&coincident, &raw(1)).unwrap(), 0.0);

        let single = dataset_1d(&[(0.0, 0), (1.0, 0)]);
        assert!(matches!(
            informativeness(&single, &raw(1)),
            Err(SpadeError::SingleClass)
        ));
    }

    #[test]
    fn lipschitz_examples() {
        let identity: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![0.0, 0.0], vec![0.0, 0.0]),
            (vec![1.0, 0.0], vec![1.0, 0.0]),
            (vec![0.0, 2.0], vec![0.0, 2.0]),
        ];
        assert_eq!(empirical_lipschitz(&identity).unwrap(), 1.0);

        let doubled: Vec<(Vec<f64>, Vec<f64>)> = identity
            .iter()
            .map(|(x, e)| (x.clone(), e.iter().map(|v| 2.0 * v).collect()))
            .collect();
        assert_eq!(empirical_lipschitz(&doubled).unwrap(), 2.0);

        let duplicated = vec![
            (vec![1.0], vec![0.0]),
            (vec![1.0], vec![5.0]),
        ];
        assert!(matches!(
            empirical_lipschitz(&duplicated),
            Err(SpadeError::DuplicateInput)
        ));
    }

    #[test]
    fn normalized_distances_use_unit_vectors() {
        // (1, 0) and (3, 4) normalize to angle acos(0.6) apart.
        let ds = EmbeddingDataset::from_records(vec![
            EmbeddingRecord {
                id: "a".into(),
                label: 0,
                vector: vec![1.0, 0.0],
            },
            EmbeddingRecord {
                id: "b".into(),
                label: 0,
                vector: vec![3.0, 4.0],
            },
        ])
        .unwrap();
        let cfg = LatentConfig {
            normalize: true,
            k: 1,
        };
        let got = kth_nn_distance_same_class(&ds, 0, &cfg).unwrap();
        let expected = euclidean(&[1.0, 0.0], &[0.6, 0.8]);
        assert_eq!(got, expected);
    }
}
