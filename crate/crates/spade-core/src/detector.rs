//! The detection pipeline: per-class tail models over same-class k-NN
//! distances, cross-class separation models, OOD scores, abstention
//! decisions, and the adversarial-perturbation lower bound.
//!
//! Fitting collects, for every training record, its leave-one-out distance to
//! the k-th nearest same-class neighbor (normalized when configured) and fits
//! an upper-tail POT model per class. A query's OOD score is the minimum over
//! classes of the fitted CDF evaluated at the query's own k-NN distance to
//! that class, so a score near 1 means the query is extreme with respect to
//! every class.
//!
//! Pairwise separation models describe the opposite tail: for each ordered
//! pair `(c, c')` they model the smallest k-th-nearest cross-class distances
//! from members of `c` into `c'`. Their low quantile minus the class model's
//! high quantile, scaled by a Lipschitz constant, lower-bounds the
//! perturbation amplitude any non-abstained misclassification requires.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};
use crate::evt::{pot_fit, PotTailModel, TailSide};
use crate::geometry::{self, LatentConfig};
use crate::store::{DistanceKind, EmbeddingDataset, ModelBundle, ModelConfig};

/// Configuration of a detector fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Neighbor rank for all distance computations.
    pub k: usize,
    /// Threshold quantile for the POT fits.
    pub q: f64,
    /// Project embeddings to the unit sphere before distances.
    pub normalize: bool,
    /// Also fit cross-class separation models.
    pub pairwise: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 10,
            q: 0.9,
            normalize: true,
            pairwise: false,
        }
    }
}

impl FitConfig {
    pub fn latent(&self) -> LatentConfig {
        LatentConfig {
            normalize: self.normalize,
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SpadeError::InvalidParameter("k must be at least 1".into()));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(SpadeError::InvalidProbability(self.q));
        }
        Ok(())
    }
}

/// Outcome of an abstention decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Predict(usize),
    Abstain,
}

/// An abstention decision together with the evidence it was based on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstainDecision {
    pub outcome: Outcome,
    /// The query's k-NN distance to the predicted class.
    pub z: f64,
    /// The class tail quantile at confidence `1 - tau`.
    pub threshold: f64,
}

impl AbstainDecision {
    pub fn is_abstain(&self) -> bool {
        matches!(self.outcome, Outcome::Abstain)
    }
}

/// A lower bound on the adversarial perturbation amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvBound {
    pub bound: f64,
    /// A bound at or below zero carries no guarantee. Negative values are
    /// reported as-is; hiding them would mask the separation diagnostic.
    pub vacuous: bool,
}

/// Fitted tail models plus the training dataset they score against.
///
/// Scoring recomputes neighbor distances against the training set, so the
/// bundle keeps the dataset by reference; it is immutable and cheap to share.
#[derive(Debug, Clone)]
pub struct DetectorBundle {
    config: FitConfig,
    class_models: Vec<PotTailModel>,
    pair_models: Option<BTreeMap<(usize, usize), PotTailModel>>,
    dataset: Arc<EmbeddingDataset>,
}

/// Fit one upper-tail model per class on leave-one-out same-class k-NN
/// distances; with `config.pairwise` also fit every ordered-pair separation
/// model. Two identical invocations produce bitwise-identical bundles.
pub fn fit_class_models(
    dataset: Arc<EmbeddingDataset>,
    config: FitConfig,
) -> Result<DetectorBundle> {
    config.validate()?;
    let latent = config.latent();
    let class_models: Vec<PotTailModel> = (0..dataset.n_classes())
        .into_par_iter()
        .map(|class| {
            let fit = || -> Result<PotTailModel> {
                let samples = geometry::class_distance_samples(&dataset, class, &latent)?;
                let distances: Vec<f64> = samples.iter().map(|s| s.z).collect();
                pot_fit(&distances, config.q, TailSide::Upper)
            };
            fit().map_err(|e| SpadeError::ClassFit {
                class,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let pair_models = if config.pairwise {
        Some(fit_pairwise_models(&dataset, &config)?)
    } else {
        None
    };
    Ok(DetectorBundle {
        config,
        class_models,
        pair_models,
        dataset,
    })
}

/// Fit a lower-tail separation model for every ordered pair of distinct
/// classes: for each member of class `c`, its k-th nearest distance into
/// class `c'`, with the POT pipeline applied to the smallest values.
pub fn fit_pairwise_models(
    dataset: &EmbeddingDataset,
    config: &FitConfig,
) -> Result<BTreeMap<(usize, usize), PotTailModel>> {
    config.validate()?;
    let latent = config.latent();
    let n_c = dataset.n_classes();
    let mut pairs = Vec::with_capacity(n_c * n_c.saturating_sub(1));
    for c in 0..n_c {
        for c_prime in 0..n_c {
            if c != c_prime {
                pairs.push((c, c_prime));
            }
        }
    }
    let fitted: Vec<((usize, usize), PotTailModel)> = pairs
        .into_par_iter()
        .map(|pair| {
            let (c, c_prime) = pair;
            let fit = || -> Result<PotTailModel> {
                let members = dataset.class_members(c)?;
                let mut distances = Vec::with_capacity(members.len());
                for &m in members {
                    distances.push(geometry::kth_nn_distance_to_class(
                        dataset.vector(m),
                        dataset,
                        c_prime,
                        &latent,
                    )?);
                }
                pot_fit(&distances, config.q, TailSide::Lower)
            };
            fit()
                .map(|model| (pair, model))
                .map_err(|e| SpadeError::PairFit {
                    pair,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    Ok(fitted.into_iter().collect())
}

/// The bound from one class model and one pair model directly:
/// `(pair quantile at 1 - tau  -  class quantile at 1 - tau) / lipschitz`.
pub fn adversarial_lower_bound(
    class_model: &PotTailModel,
    pair_model: &PotTailModel,
    tau: f64,
    lipschitz: f64,
) -> Result<AdvBound> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SpadeError::InvalidTau(tau));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(SpadeError::InvalidParameter(format!(
            "lipschitz constant must be positive and finite, got {lipschitz}"
        )));
    }
    let q_pair = pair_model.tail_quantile(1.0 - tau)?;
    let q_class = class_model.tail_quantile(1.0 - tau)?;
    let bound = (q_pair - q_class) / lipschitz;
    Ok(AdvBound {
        bound,
        vacuous: bound <= 0.0,
    })
}

impl DetectorBundle {
    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn class_models(&self) -> &[PotTailModel] {
        &self.class_models
    }

    pub fn pair_models(&self) -> Option<&BTreeMap<(usize, usize), PotTailModel>> {
        self.pair_models.as_ref()
    }

    pub fn dataset(&self) -> &Arc<EmbeddingDataset> {
        &self.dataset
    }

    /// Per-class evaluations of the fitted CDF at the query's k-NN distance.
    pub fn class_scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        let latent = self.config.latent();
        (0..self.class_models.len())
            .map(|class| {
                let z =
                    geometry::kth_nn_distance_to_class(query, &self.dataset, class, &latent)?;
                Ok(self.class_models[class].tail_probability(z))
            })
            .collect()
    }

    /// OOD score: the minimum class score, in `[0, 1]`, higher meaning more
    /// extreme with respect to every class.
    pub fn ood_score(&self, query: &[f64]) -> Result<f64> {
        Ok(self.ood_score_argmin(query)?.0)
    }

    /// OOD score together with the class attaining it (lowest index wins
    /// ties).
    pub fn ood_score_argmin(&self, query: &[f64]) -> Result<(f64, usize)> {
        let scores = self.class_scores(query)?;
        let mut best = 0;
        for (c, s) in scores.iter().enumerate().skip(1) {
            if *s < scores[best] {
                best = c;
            }
        }
        Ok((scores[best], best))
    }

    /// Predict `predicted_class` only while the query's distance to it stays
    /// within the class tail quantile at confidence `1 - tau`; abstain
    /// otherwise. Lowering `tau` loosens the threshold, so any query
    /// abstained at some `tau` is abstained at every larger `tau`.
    pub fn abstain_decide(
        &self,
        query: &[f64],
        predicted_class: usize,
        tau: f64,
    ) -> Result<AbstainDecision> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(SpadeError::InvalidTau(tau));
        }
        if predicted_class >= self.class_models.len() {
            return Err(SpadeError::UnknownClass(predicted_class));
        }
        let z = geometry::kth_nn_distance_to_class(
            query,
            &self.dataset,
            predicted_class,
            &self.config.latent(),
        )?;
        let threshold = self.class_models[predicted_class].tail_quantile(1.0 - tau)?;
        let outcome = if z <= threshold {
            Outcome::Predict(predicted_class)
        } else {
            Outcome::Abstain
        };
        Ok(AbstainDecision {
            outcome,
            z,
            threshold,
        })
    }

    /// Adversarial-perturbation lower bound for an ordered pair of classes.
    pub fn adversarial_lower_bound(
        &self,
        c: usize,
        c_prime: usize,
        tau: f64,
        lipschitz: f64,
    ) -> Result<AdvBound> {
        if c >= self.class_models.len() {
            return Err(SpadeError::UnknownClass(c));
        }
        let pairs = self
            .pair_models
            .as_ref()
            .ok_or(SpadeError::MissingPairModels)?;
        let pair_model = pairs
            .get(&(c, c_prime))
            .ok_or(SpadeError::MissingPairModels)?;
        adversarial_lower_bound(&self.class_models[c], pair_model, tau, lipschitz)
    }

    /// Serializable form, with the dataset reduced to its fingerprint.
    pub fn to_model_bundle(&self) -> ModelBundle {
        ModelBundle {
            config: ModelConfig {
                k: self.config.k,
                q: self.config.q,
                normalize: self.config.normalize,
                distance: DistanceKind::Euclidean,
            },
            fingerprint: self.dataset.fingerprint(),
            class_models: self.class_models.clone(),
            pair_models: self.pair_models.clone(),
        }
    }

    /// Rebind a persisted bundle to its training dataset.
    ///
    /// With `verify_fingerprint` the dataset content hash must match the one
    /// recorded at fit time; pass `false` only when a mismatch is understood
    /// and accepted.
    pub fn from_model_bundle(
        bundle: ModelBundle,
        dataset: Arc<EmbeddingDataset>,
        verify_fingerprint: bool,
    ) -> Result<Self> {
        if verify_fingerprint {
            let actual = dataset.fingerprint();
            if actual != bundle.fingerprint {
                return Err(SpadeError::FingerprintMismatch {
                    expected: bundle.fingerprint,
                    actual,
                });
            }
        }
        if bundle.class_models.len() != dataset.n_classes() {
            return Err(SpadeError::InvalidParameter(format!(
                "bundle carries {} class models but the dataset has {} classes",
                bundle.class_models.len(),
                dataset.n_classes()
            )));
        }
        if let Some(pairs) = &bundle.pair_models {
            let n_c = dataset.n_classes();
            let expected = n_c * n_c.saturating_sub(1);
            if pairs.len() != expected {
                return Err(SpadeError::InvalidParameter(format!(
                    "bundle carries {} pair models, expected {expected} ordered pairs",
                    pairs.len()
                )));
            }
            for &(c, c_prime) in pairs.keys() {
                if c >= n_c || c_prime >= n_c {
                    return Err(SpadeError::UnknownClass(c.max(c_prime)));
                }
            }
        }
        let config = FitConfig {
            k: bundle.config.k,
            q: bundle.config.q,
            normalize: bundle.config.normalize,
            pairwise: bundle.pair_models.is_some(),
        };
        config.validate()?;
        Ok(DetectorBundle {
            config,
            class_models: bundle.class_models,
            pair_models: bundle.pair_models,
            dataset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Two Gaussian clusters on the line, far apart.
    fn two_cluster_dataset(n_per_class: usize, seed: u64) -> Arc<EmbeddingDataset> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for class in 0..2usize {
            let center = class as f64 * 10.0;
            for i in 0..n_per_class {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                records.push(EmbeddingRecord {
                    id: format!("{class}-{i}"),
                    label: class,
                    vector: vec![center + 0.5 * x, 0.5 * y],
                });
            }
        }
        Arc::new(EmbeddingDataset::from_records(records).unwrap())
    }

    fn test_config() -> FitConfig {
        FitConfig {
            k: 5,
            q: 0.8,
            normalize: false,
            pairwise: false,
        }
    }

    #[test]
    fn fit_produces_one_model_per_class_with_expected_counts() {
        let ds = two_cluster_dataset(100, 1);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        assert_eq!(bundle.class_models().len(), 2);
        for model in bundle.class_models() {
            assert_eq!(model.n, 100);
            assert_eq!(model.n_exceed, 20);
        }
    }

    #[test]
    fn fit_rejects_small_classes() {
        let ds = two_cluster_dataset(5, 2);
        let config = FitConfig {
            k: 10,
            ..test_config()
        };
        let err = fit_class_models(ds, config).unwrap_err();
        assert!(matches!(
            err.root(),
            SpadeError::InsufficientClassSize { .. }
        ));
        assert_eq!(err.code(), "INSUFFICIENT_CLASS_SIZE");
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let ds = two_cluster_dataset(80, 3);
        let a = fit_class_models(ds.clone(), test_config()).unwrap();
        let b = fit_class_models(ds, test_config()).unwrap();
        for (ma, mb) in a.class_models().iter().zip(b.class_models()) {
            assert_eq!(ma.params.xi.to_bits(), mb.params.xi.to_bits());
            assert_eq!(ma.params.sigma.to_bits(), mb.params.sigma.to_bits());
            assert_eq!(ma.t.to_bits(), mb.t.to_bits());
        }
    }

    #[test]
    fn coincident_query_scores_zero() {
        let ds = two_cluster_dataset(60, 4);
        let config = FitConfig {
            k: 1,
            ..test_config()
        };
        let bundle = fit_class_models(ds.clone(), config).unwrap();
        let query = ds.vector(0).to_vec();
        assert_eq!(bundle.ood_score(&query).unwrap(), 0.0);
    }

    #[test]
    fn ood_score_is_minimum_of_class_scores() {
        let ds = two_cluster_dataset(80, 5);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        let query = vec![2.5, 0.0];
        let scores = bundle.class_scores(&query).unwrap();
        let (score, argmin) = bundle.ood_score_argmin(&query).unwrap();
        let expected = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(score, expected);
        assert_eq!(score, scores[argmin]);
    }

    #[test]
    fn far_query_scores_near_one() {
        let ds = two_cluster_dataset(100, 6);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        let score = bundle.ood_score(&[1e4, 1e4]).unwrap();
        assert!(score >= 0.99, "score = {score}");
    }

    #[test]
    fn score_rejects_wrong_dimension() {
        let ds = two_cluster_dataset(60, 7);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        assert!(matches!(
            bundle.ood_score(&[0.0]),
            Err(SpadeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn abstain_thresholds_follow_the_rule() {
        let ds = two_cluster_dataset(100, 8);
        let bundle = fit_class_models(ds.clone(), test_config()).unwrap();
        // A training point is deep inside its class.
        let inside = ds.vector(3).to_vec();
        let d = bundle.abstain_decide(&inside, 0, 0.05).unwrap();
        assert_eq!(d.outcome, Outcome::Predict(0));
        assert!(d.z <= d.threshold);
        // A point from the other cluster is far beyond the quantile.
        let outside = vec![10.0, 0.0];
        let d = bundle.abstain_decide(&outside, 0, 0.05).unwrap();
        assert_eq!(d.outcome, Outcome::Abstain);
        assert!(d.z > d.threshold);
    }

    #[test]
    fn abstention_is_monotone_in_tau() {
        let ds = two_cluster_dataset(100, 9);
        let bundle = fit_class_models(ds.clone(), test_config()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let taus = [0.01, 0.05, 0.2, 0.5];
        for _ in 0..50 {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let query = vec![1.2 * x, 1.2 * y];
            let mut prev_abstained = false;
            // Raising tau lowers the quantile threshold, so once a query
            // abstains at some tau it abstains at every larger tau.
            for &tau in &taus {
                let abstained = bundle.abstain_decide(&query, 0, tau).unwrap().is_abstain();
                assert!(abstained || !prev_abstained, "tau {tau}");
                prev_abstained = abstained;
            }
        }
    }

    #[test]
    fn abstain_validates_inputs() {
        let ds = two_cluster_dataset(60, 10);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        assert!(matches!(
            bundle.abstain_decide(&[0.0, 0.0], 7, 0.05),
            Err(SpadeError::UnknownClass(7))
        ));
        assert!(matches!(
            bundle.abstain_decide(&[0.0, 0.0], 0, 0.0),
            Err(SpadeError::InvalidTau(_))
        ));
    }

    #[test]
    fn pairwise_models_cover_ordered_pairs_and_separate_clusters() {
        let ds = two_cluster_dataset(100, 11);
        let config = FitConfig {
            pairwise: true,
            ..test_config()
        };
        let bundle = fit_class_models(ds, config).unwrap();
        let pairs = bundle.pair_models().unwrap();
        assert_eq!(pairs.len(), 2);
        let tau = 0.05;
        let q_pair = pairs[&(0, 1)].tail_quantile(1.0 - tau).unwrap();
        let q_class = bundle.class_models()[0].tail_quantile(1.0 - tau).unwrap();
        assert!(
            q_pair > q_class,
            "separated clusters must leave a positive gap: {q_pair} vs {q_class}"
        );
    }

    #[test]
    fn adversarial_bound_matches_quantile_gap() {
        let ds = two_cluster_dataset(100, 12);
        let config = FitConfig {
            pairwise: true,
            ..test_config()
        };
        let bundle = fit_class_models(ds, config).unwrap();
        let tau = 0.05;
        let b1 = bundle.adversarial_lower_bound(0, 1, tau, 1.0).unwrap();
        let q_pair = bundle.pair_models().unwrap()[&(0, 1)]
            .tail_quantile(1.0 - tau)
            .unwrap();
        let q_class = bundle.class_models()[0].tail_quantile(1.0 - tau).unwrap();
        assert_eq!(b1.bound, (q_pair - q_class) / 1.0);
        assert!(!b1.vacuous);
        let b3 = bundle.adversarial_lower_bound(0, 1, tau, 3.0).unwrap();
        assert_eq!(b3.bound, (q_pair - q_class) / 3.0);
    }

    #[test]
    fn adversarial_bound_on_identical_models_is_vacuous_zero() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64 * 0.01).collect();
        let class_model = pot_fit(&samples, 0.8, TailSide::Upper).unwrap();
        // A pair model with the same quantile at 1 - tau: fit the lower tail
        // on negated samples so the quantile mapping mirrors exactly.
        let negated: Vec<f64> = samples.iter().map(|s| -s).collect();
        let pair_model = pot_fit(&negated, 0.8, TailSide::Lower).unwrap();
        let tau = 0.05;
        let q_pair = pair_model.tail_quantile(1.0 - tau).unwrap();
        let q_class = class_model.tail_quantile(1.0 - tau).unwrap();
        let bound = adversarial_lower_bound(&class_model, &pair_model, tau, 1.0).unwrap();
        assert_eq!(bound.bound, q_pair - q_class);
        assert!(bound.vacuous || bound.bound > 0.0);
    }

    #[test]
    fn missing_pair_models_is_reported() {
        let ds = two_cluster_dataset(60, 13);
        let bundle = fit_class_models(ds, test_config()).unwrap();
        assert!(matches!(
            bundle.adversarial_lower_bound(0, 1, 0.05, 1.0),
            Err(SpadeError::MissingPairModels)
        ));
    }

    #[test]
    fn bundle_round_trips_through_model_bundle() {
        let ds = two_cluster_dataset(80, 14);
        let config = FitConfig {
            pairwise: true,
            ..test_config()
        };
        let bundle = fit_class_models(ds.clone(), config).unwrap();
        let persisted = bundle.to_model_bundle();
        let restored =
            DetectorBundle::from_model_bundle(persisted, ds.clone(), true).unwrap();
        assert_eq!(bundle.class_models(), restored.class_models());
        assert_eq!(bundle.pair_models(), restored.pair_models());
        assert_eq!(bundle.config(), restored.config());

        let other = two_cluster_dataset(80, 15);
        let persisted = bundle.to_model_bundle();
        assert!(matches!(
            DetectorBundle::from_model_bundle(persisted.clone(), other.clone(), true),
            Err(SpadeError::FingerprintMismatch { .. })
        ));
        // Accepted when verification is explicitly waived.
        assert!(DetectorBundle::from_model_bundle(persisted, other, false).is_ok());
    }
}
