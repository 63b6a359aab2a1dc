//! Detection metrics, synthetic embedding generation, and the
//! subsampling-stability study.
//!
//! AUROC is the Mann-Whitney statistic with ties counted one half; FPR at a
//! TPR target fixes the largest score threshold that still rejects the target
//! fraction of true positives and reports the fraction of in-distribution
//! scores flagged at it. Scores at or above the threshold count as flagged.

use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{fit_class_models, FitConfig};
use crate::error::{Result, SpadeError};
use crate::geometry::{self, LatentConfig};
use crate::store::{EmbeddingDataset, EmbeddingRecord};
use crate::util::{nearest_rank, splitmix64};

/// Displacement of shifted-cluster centers, in units of the cluster spread.
const SHIFT_FACTOR: f64 = 6.0;

/// Scores of a detector on in-distribution and out-of-distribution queries.
/// Higher scores mean more out-of-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoredRun {
    fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(SpadeError::EmptyScores);
        }
        if self
            .id_scores
            .iter()
            .chain(&self.ood_scores)
            .any(|s| !s.is_finite())
        {
            return Err(SpadeError::InvalidParameter(
                "scores must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Area under the ROC curve: the fraction of (ood, id) score pairs with the
/// OOD score higher, ties counted one half.
pub fn auroc(run: &ScoredRun) -> Result<f64> {
    run.validate()?;
    let mut id = run.id_scores.clone();
    id.sort_unstable_by(f64::total_cmp);
    let mut favorable = 0.0;
    for &s in &run.ood_scores {
        let below = id.partition_point(|&x| x < s);
        let not_above = id.partition_point(|&x| x <= s);
        favorable += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(favorable / (run.ood_scores.len() as f64 * run.id_scores.len() as f64))
}

/// False-positive rate at the largest threshold whose true-positive rate
/// still reaches `tpr_target` (scores >= threshold are flagged).
pub fn fpr_at_tpr(run: &ScoredRun, tpr_target: f64) -> Result<f64> {
    run.validate()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(SpadeError::InvalidProbability(tpr_target));
    }
    let mut ood = run.ood_scores.clone();
    ood.sort_unstable_by(f64::total_cmp);
    let needed = nearest_rank(tpr_target, ood.len());
    let threshold = ood[ood.len() - needed];
    let flagged = run.id_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(flagged as f64 / run.id_scores.len() as f64)
}

/// Shape of the out-of-distribution queries a synthetic benchmark draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    /// Uniform directions on the unit sphere: far from every cluster.
    UniformSphere,
    /// Clusters displaced from the training centers: near-OOD.
    ShiftedCluster,
}

impl std::str::FromStr for OodKind {
    type Err = SpadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-sphere" => Ok(OodKind::UniformSphere),
            "shifted-cluster" => Ok(OodKind::ShiftedCluster),
            other => Err(SpadeError::InvalidParameter(format!(
                "unknown ood kind {other:?}, expected uniform-sphere or shifted-cluster"
            ))),
        }
    }
}

/// Specification of a synthetic labeled-embedding benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub points_per_class: usize,
    pub dimension: usize,
    pub cluster_spread: f64,
    pub on_sphere: bool,
    pub ood_kind: OodKind,
    pub id_query_count: usize,
    pub ood_query_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 10,
            points_per_class: 200,
            dimension: 16,
            cluster_spread: 0.1,
            on_sphere: true,
            ood_kind: OodKind::UniformSphere,
            id_query_count: 500,
            ood_query_count: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.points_per_class == 0
            || self.dimension == 0
            || self.id_query_count == 0
            || self.ood_query_count == 0
        {
            return Err(SpadeError::InvalidParameter(
                "all synthetic counts must be at least 1".into(),
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(SpadeError::InvalidParameter(
                "cluster spread must be positive and finite".into(),
            ));
        }
        if self.id_query_count < self.n_classes {
            return Err(SpadeError::InvalidParameter(format!(
                "id query count {} cannot cover all {} classes",
                self.id_query_count, self.n_classes
            )));
        }
        Ok(())
    }
}

/// A generated benchmark: training set plus held-out ID and OOD queries.
/// ID queries carry their true class labels; OOD queries carry label 0 as a
/// placeholder.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: EmbeddingDataset,
    pub id_queries: EmbeddingDataset,
    pub ood_queries: EmbeddingDataset,
}

fn normal_vector(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(rng: &mut ChaCha12Rng, d: usize) -> Result<Vec<f64>> {
    geometry::normalize(&normal_vector(rng, d))
}

fn maybe_project(vector: Vec<f64>, on_sphere: bool) -> Result<Vec<f64>> {
    if on_sphere {
        geometry::normalize(&vector)
    } else {
        Ok(vector)
    }
}

/// Deterministic synthetic benchmark: per-class isotropic Gaussians around
/// random centers, with held-out ID queries from the same mixture and OOD
/// queries per [`OodKind`]. Identical specs produce bitwise-identical data.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let d = spec.dimension;

    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let c = normal_vector(&mut rng, d);
            maybe_project(c, spec.on_sphere)
        })
        .collect::<Result<_>>()?;

    let cluster_point =
        |rng: &mut ChaCha12Rng, center: &[f64], spread: f64, on_sphere: bool| -> Result<Vec<f64>> {
            let noise = normal_vector(rng, d);
            let point: Vec<f64> = center
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + spread * n)
                .collect();
            maybe_project(point, on_sphere)
        };

    let mut train = Vec::with_capacity(spec.n_classes * spec.points_per_class);
    for (class, center) in centers.iter().enumerate() {
        for i in 0..spec.points_per_class {
            train.push(EmbeddingRecord {
                id: format!("train-{class}-{i}"),
                label: class,
                vector: cluster_point(&mut rng, center, spec.cluster_spread, spec.on_sphere)?,
            });
        }
    }

    // Round-robin class assignment keeps the held-out labels dense and the
    // per-class query load balanced.
    let mut id_queries = Vec::with_capacity(spec.id_query_count);
    for i in 0..spec.id_query_count {
        let class = i % spec.n_classes;
        id_queries.push(EmbeddingRecord {
            id: format!("id-{i}"),
            label: class,
            vector: cluster_point(&mut rng, &centers[class], spec.cluster_spread, spec.on_sphere)?,
        });
    }

    let mut ood_queries = Vec::with_capacity(spec.ood_query_count);
    for i in 0..spec.ood_query_count {
        let vector = match spec.ood_kind {
            OodKind::UniformSphere => unit_vector(&mut rng, d)?,
            OodKind::ShiftedCluster => {
                let class = rng.random_range(0..spec.n_classes);
                let direction = unit_vector(&mut rng, d)?;
                let shifted: Vec<f64> = centers[class]
                    .iter()
                    .zip(&direction)
                    .map(|(c, u)| c + SHIFT_FACTOR * spec.cluster_spread * u)
                    .collect();
                let shifted = maybe_project(shifted, spec.on_sphere)?;
                cluster_point(&mut rng, &shifted, spec.cluster_spread, spec.on_sphere)?
            }
        };
        ood_queries.push(EmbeddingRecord {
            id: format!("ood-{i}"),
            label: 0,
            vector,
        });
    }

    Ok(SynthData {
        train: EmbeddingDataset::from_records(train)?,
        id_queries: EmbeddingDataset::from_records(id_queries)?,
        ood_queries: EmbeddingDataset::from_records(ood_queries)?,
    })
}

/// Fitted parameters of one class in one study cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellClassFit {
    pub class: usize,
    pub n_train: usize,
    pub xi: f64,
    pub sigma: f64,
    pub t: f64,
    pub n_exceed: usize,
}

/// One (fraction, seed) cell of the stability study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCell {
    pub fraction: f64,
    pub seed_index: u32,
    pub cell_seed: u64,
    pub class_fits: Vec<CellClassFit>,
    pub spade_auroc: f64,
    pub spade_fpr95: f64,
    pub baseline_auroc: f64,
    pub baseline_fpr95: f64,
}

/// Full output of a stability study, one cell per fraction and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub fractions: Vec<f64>,
    pub n_seeds: u32,
    pub base_seed: u64,
    pub cells: Vec<StabilityCell>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Per-class parameter dispersion within one fraction.
#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: usize,
    pub xi_mean: f64,
    pub xi_std: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub t_mean: f64,
    pub t_std: f64,
}

/// Aggregates over the seeds of one fraction.
#[derive(Debug, Clone, Serialize)]
pub struct FractionSummary {
    pub fraction: f64,
    pub spade_auroc_mean: f64,
    pub spade_auroc_std: f64,
    pub spade_fpr95_mean: f64,
    pub spade_fpr95_std: f64,
    pub baseline_auroc_mean: f64,
    pub baseline_auroc_std: f64,
    pub baseline_fpr95_mean: f64,
    pub baseline_fpr95_std: f64,
    pub classes: Vec<ClassSummary>,
}

/// JSON-facing summary of a stability report.
#[derive(Debug, Clone, Serialize)]
pub struct StabilitySummary {
    pub base_seed: u64,
    pub n_seeds: u32,
    pub fractions: Vec<FractionSummary>,
}

impl StabilityReport {
    /// CSV emission, one row per fraction x seed x class; cell metrics repeat
    /// on each class row.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(
            writer,
            "fraction,seed_index,cell_seed,class,n_train,xi,sigma,t,n_exceed,\
             spade_auroc,spade_fpr95,baseline_auroc,baseline_fpr95"
        )?;
        for cell in &self.cells {
            for fit in &cell.class_fits {
                writeln!(
                    writer,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    cell.fraction,
                    cell.seed_index,
                    cell.cell_seed,
                    fit.class,
                    fit.n_train,
                    fit.xi,
                    fit.sigma,
                    fit.t,
                    fit.n_exceed,
                    cell.spade_auroc,
                    cell.spade_fpr95,
                    cell.baseline_auroc,
                    cell.baseline_fpr95,
                )?;
            }
        }
        Ok(())
    }

    /// Per-fraction aggregates across seeds.
    pub fn summary(&self) -> StabilitySummary {
        let fractions = self
            .fractions
            .iter()
            .map(|&fraction| {
                let cells: Vec<&StabilityCell> = self
                    .cells
                    .iter()
                    .filter(|c| c.fraction == fraction)
                    .collect();
                let collect = |f: &dyn Fn(&StabilityCell) -> f64| -> Vec<f64> {
                    cells.iter().map(|c| f(c)).collect()
                };
                let spade_auroc = collect(&|c| c.spade_auroc);
                let spade_fpr95 = collect(&|c| c.spade_fpr95);
                let baseline_auroc = collect(&|c| c.baseline_auroc);
                let baseline_fpr95 = collect(&|c| c.baseline_fpr95);
                let n_classes = cells.first().map_or(0, |c| c.class_fits.len());
                let classes = (0..n_classes)
                    .map(|class| {
                        let xi: Vec<f64> =
                            cells.iter().map(|c| c.class_fits[class].xi).collect();
                        let sigma: Vec<f64> =
                            cells.iter().map(|c| c.class_fits[class].sigma).collect();
                        let t: Vec<f64> = cells.iter().map(|c| c.class_fits[class].t).collect();
                        ClassSummary {
                            class,
                            xi_mean: mean(&xi),
                            xi_std: sample_std(&xi),
                            sigma_mean: mean(&sigma),
                            sigma_std: sample_std(&sigma),
                            t_mean: mean(&t),
                            t_std: sample_std(&t),
                        }
                    })
                    .collect();
                FractionSummary {
                    fraction,
                    spade_auroc_mean: mean(&spade_auroc),
                    spade_auroc_std: sample_std(&spade_auroc),
                    spade_fpr95_mean: mean(&spade_fpr95),
                    spade_fpr95_std: sample_std(&spade_fpr95),
                    baseline_auroc_mean: mean(&baseline_auroc),
                    baseline_auroc_std: sample_std(&baseline_auroc),
                    baseline_fpr95_mean: mean(&baseline_fpr95),
                    baseline_fpr95_std: sample_std(&baseline_fpr95),
                    classes,
                }
            })
            .collect();
        StabilitySummary {
            base_seed: self.base_seed,
            n_seeds: self.n_seeds,
            fractions,
        }
    }
}

fn cell_seed(base_seed: u64, fraction_index: usize, seed_index: u32) -> u64 {
    base_seed ^ splitmix64(((fraction_index as u64) << 32) | seed_index as u64)
}

/// Stratified per-class subsample of `round(fraction * class size)` records
/// (at least one), in original record order.
fn subsample(
    dataset: &EmbeddingDataset,
    fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<EmbeddingDataset> {
    let mut keep = Vec::new();
    for class in 0..dataset.n_classes() {
        let members = dataset.class_members(class)?;
        let m = ((fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len());
        let chosen = index_sample(rng, members.len(), m);
        for idx in chosen.iter() {
            keep.push(members[idx]);
        }
    }
    keep.sort_unstable();
    let records = keep
        .into_iter()
        .map(|pos| dataset.records()[pos].clone())
        .collect();
    EmbeddingDataset::from_records(records)
}

/// Subsampling-stability study.
///
/// For every fraction and seed: subsample the training set per class without
/// replacement, refit the class models, and score the fixed held-out queries
/// with both the fitted detector and a class-agnostic raw k-NN distance
/// baseline. Fixed seeds reproduce identical reports.
pub fn stability_study(
    dataset: &Arc<EmbeddingDataset>,
    config: &FitConfig,
    fractions: &[f64],
    n_seeds: u32,
    base_seed: u64,
    id_queries: &[Vec<f64>],
    ood_queries: &[Vec<f64>],
) -> Result<StabilityReport> {
    config.validate()?;
    if fractions.is_empty() {
        return Err(SpadeError::InvalidParameter("no fractions given".into()));
    }
    if fractions.iter().any(|f| !f.is_finite()) {
        return Err(SpadeError::InvalidParameter(
            "fractions must be finite".into(),
        ));
    }
    for w in fractions.windows(2) {
        if w[0] >= w[1] {
            return Err(SpadeError::InvalidParameter(
                "fractions must be strictly increasing".into(),
            ));
        }
    }
    if fractions[0] <= 0.0 || *fractions.last().unwrap() > 1.0 {
        return Err(SpadeError::InvalidParameter(
            "fractions must lie in (0, 1]".into(),
        ));
    }
    if n_seeds == 0 {
        return Err(SpadeError::InvalidParameter("n_seeds must be at least 1".into()));
    }
    if id_queries.is_empty() || ood_queries.is_empty() {
        return Err(SpadeError::EmptyScores);
    }

    let mut cell_keys = Vec::with_capacity(fractions.len() * n_seeds as usize);
    for (fraction_index, &fraction) in fractions.iter().enumerate() {
        for seed_index in 0..n_seeds {
            cell_keys.push((fraction_index, fraction, seed_index));
        }
    }

    let fit_config = FitConfig {
        pairwise: false,
        ..*config
    };
    let latent = LatentConfig {
        normalize: config.normalize,
        k: config.k,
    };

    let cells: Vec<StabilityCell> = cell_keys
        .into_par_iter()
        .map(|(fraction_index, fraction, seed_index)| {
            let seed = cell_seed(base_seed, fraction_index, seed_index);
            let run = || -> Result<StabilityCell> {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let sub = Arc::new(subsample(dataset, fraction, &mut rng)?);
                let bundle = fit_class_models(sub.clone(), fit_config)?;

                let score_all = |queries: &[Vec<f64>]| -> Result<(Vec<f64>, Vec<f64>)> {
                    let mut spade = Vec::with_capacity(queries.len());
                    let mut baseline = Vec::with_capacity(queries.len());
                    for q in queries {
                        spade.push(bundle.ood_score(q)?);
                        baseline.push(geometry::kth_nn_distance_all(q, &sub, &latent)?);
                    }
                    Ok((spade, baseline))
                };
                let (spade_id, base_id) = score_all(id_queries)?;
                let (spade_ood, base_ood) = score_all(ood_queries)?;

                let spade_run = ScoredRun {
                    id_scores: spade_id,
                    ood_scores: spade_ood,
                };
                let baseline_run = ScoredRun {
                    id_scores: base_id,
                    ood_scores: base_ood,
                };

                let class_fits = bundle
                    .class_models()
                    .iter()
                    .enumerate()
                    .map(|(class, model)| CellClassFit {
                        class,
                        n_train: model.n,
                        xi: model.params.xi,
                        sigma: model.params.sigma,
                        t: model.t,
                        n_exceed: model.n_exceed,
                    })
                    .collect();

                Ok(StabilityCell {
                    fraction,
                    seed_index,
                    cell_seed: seed,
                    class_fits,
                    spade_auroc: auroc(&spade_run)?,
                    spade_fpr95: fpr_at_tpr(&spade_run, 0.95)?,
                    baseline_auroc: auroc(&baseline_run)?,
                    baseline_fpr95: fpr_at_tpr(&baseline_run, 0.95)?,
                })
            };
            run().map_err(|e| SpadeError::StudyCell {
                fraction,
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    Ok(StabilityReport {
        fractions: fractions.to_vec(),
        n_seeds,
        base_seed,
        cells,
    })
}

/// Convenience: vectors of a query dataset, in record order.
pub fn query_vectors(dataset: &EmbeddingDataset) -> Vec<Vec<f64>> {
    dataset
        .records()
        .iter()
        .map(|r| r.vector.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(id: &[f64], ood: &[f64]) -> ScoredRun {
        ScoredRun {
            id_scores: id.to_vec(),
            ood_scores: ood.to_vec(),
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&run(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auroc(&run(&[0.3, 0.7], &[0.3, 0.7])).unwrap(), 0.5);
        assert_eq!(auroc(&run(&[0.1, 0.4], &[0.3, 0.9])).unwrap(), 0.75);
        assert!(matches!(
            auroc(&run(&[], &[0.3])),
            Err(SpadeError::EmptyScores)
        ));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&run(&[0.1, 0.2], &[0.8, 0.9]), 0.95).unwrap(), 0.0);
        // A single OOD score below every ID score drags the threshold down.
        assert_eq!(fpr_at_tpr(&run(&[0.5, 0.6, 0.7], &[0.1]), 0.95).unwrap(), 1.0);
    }

    #[test]
    fn fpr_on_identical_distributions_sits_at_the_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let fpr = fpr_at_tpr(&run(&scores, &scores), 0.95).unwrap();
        assert!((0.93..=0.97).contains(&fpr), "fpr = {fpr}");
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SynthSpec {
            n_classes: 3,
            points_per_class: 20,
            dimension: 4,
            id_query_count: 10,
            ood_query_count: 10,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.train.to_binary_bytes(), b.train.to_binary_bytes());
        assert_eq!(a.id_queries.to_binary_bytes(), b.id_queries.to_binary_bytes());
        assert_eq!(a.ood_queries.to_binary_bytes(), b.ood_queries.to_binary_bytes());
    }

    #[test]
    fn on_sphere_vectors_have_unit_norm() {
        let spec = SynthSpec {
            n_classes: 2,
            points_per_class: 15,
            dimension: 5,
            id_query_count: 5,
            ood_query_count: 5,
            seed: 1,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for rec in data.train.records() {
            let norm = rec.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_sphere_ood_sits_beyond_intra_class_distances() {
        let spec = SynthSpec {
            cluster_spread: 0.05,
            n_classes: 4,
            points_per_class: 60,
            dimension: 16,
            id_query_count: 50,
            ood_query_count: 50,
            seed: 5,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let latent = LatentConfig {
            normalize: true,
            k: 5,
        };
        let train = &data.train;
        let mut intra = Vec::new();
        for pos in 0..train.len() {
            intra.push(geometry::kth_nn_distance_same_class(train, pos, &latent).unwrap());
        }
        let mut nearest = Vec::new();
        let one_nn = LatentConfig {
            normalize: true,
            k: 1,
        };
        for rec in data.ood_queries.records() {
            nearest.push(geometry::kth_nn_distance_all(&rec.vector, train, &one_nn).unwrap());
        }
        assert!(mean(&nearest) > mean(&intra));
    }

    #[test]
    fn degenerate_study_equals_plain_fit_and_eval() {
        let spec = SynthSpec {
            n_classes: 3,
            points_per_class: 60,
            dimension: 6,
            id_query_count: 40,
            ood_query_count: 40,
            seed: 3,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let train = Arc::new(data.train);
        let config = FitConfig {
            k: 5,
            q: 0.8,
            normalize: true,
            pairwise: false,
        };
        let id_q = query_vectors(&data.id_queries);
        let ood_q = query_vectors(&data.ood_queries);
        let report =
            stability_study(&train, &config, &[1.0], 1, 17, &id_q, &ood_q).unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = &report.cells[0];

        let bundle = fit_class_models(train.clone(), config).unwrap();
        for (fit, model) in cell.class_fits.iter().zip(bundle.class_models()) {
            assert_eq!(fit.xi.to_bits(), model.params.xi.to_bits());
            assert_eq!(fit.t.to_bits(), model.t.to_bits());
        }
        let id_scores: Vec<f64> = id_q.iter().map(|q| bundle.ood_score(q).unwrap()).collect();
        let ood_scores: Vec<f64> = ood_q.iter().map(|q| bundle.ood_score(q).unwrap()).collect();
        let spade_run = ScoredRun {
            id_scores,
            ood_scores,
        };
        assert_eq!(cell.spade_auroc, auroc(&spade_run).unwrap());
        assert_eq!(cell.spade_fpr95, fpr_at_tpr(&spade_run, 0.95).unwrap());
    }

    #[test]
    fn study_rejects_bad_fractions() {
        let spec = SynthSpec {
            n_classes: 2,
            points_per_class: 30,
            dimension: 3,
            id_query_count: 5,
            ood_query_count: 5,
            seed: 2,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let train = Arc::new(data.train);
        let config = FitConfig {
            k: 2,
            q: 0.5,
            normalize: true,
            pairwise: false,
        };
        let id_q = query_vectors(&data.id_queries);
        let ood_q = query_vectors(&data.ood_queries);
        for fractions in [vec![1.5], vec![0.5, 0.5], vec![]] {
            assert!(matches!(
                stability_study(&train, &config, &fractions, 1, 0, &id_q, &ood_q),
                Err(SpadeError::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn study_reports_are_reproducible() {
        let spec = SynthSpec {
            n_classes: 2,
            points_per_class: 60,
            dimension: 4,
            id_query_count: 20,
            ood_query_count: 20,
            seed: 8,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let train = Arc::new(data.train);
        let config = FitConfig {
            k: 3,
            q: 0.5,
            normalize: true,
            pairwise: false,
        };
        let id_q = query_vectors(&data.id_queries);
        let ood_q = query_vectors(&data.ood_queries);
        let a = stability_study(&train, &config, &[0.5, 1.0], 2, 7, &id_q, &ood_q).unwrap();
        let b = stability_study(&train, &config, &[0.5, 1.0], 2, 7, &id_q, &ood_q).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        a.write_csv(&mut csv_a).unwrap();
        b.write_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        let summary = a.summary();
        assert_eq!(summary.fractions.len(), 2);
    }
}
