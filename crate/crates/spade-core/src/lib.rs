//! Extreme-value tail models over k-nearest-neighbor distances in a
//! classifier's latent space.
//!
//! The library fits one Generalized Pareto tail model per class to the
//! leave-one-out k-NN distances of that class's training embeddings
//! (Peaks-Over-Threshold with maximum likelihood). The fitted models turn a
//! query's distance profile into a calibrated out-of-distribution
//! probability, drive an abstaining classifier that predicts only at
//! confidence `1 - tau`, and, combined with lower-tail models of cross-class
//! separation, yield a provable lower bound on the perturbation amplitude
//! needed to slip a misclassified sample past the abstention test.
//!
//! Modules:
//!
//! * [`store`]: dataset and model persistence (CSV, binary, JSON).
//! * [`geometry`]: normalization, exact k-NN distances, latent diagnostics.
//! * [`evt`]: GPD primitives and POT tail fitting.
//! * [`detector`]: the fitting and scoring pipeline.
//! * [`eval`]: AUROC/FPR95, synthetic benchmarks, the stability study.

pub mod detector;
pub mod error;
pub mod eval;
pub mod evt;
pub mod geometry;
pub mod store;
mod util;

pub use detector::{
    adversarial_lower_bound, fit_class_models, fit_pairwise_models, AbstainDecision, AdvBound,
    DetectorBundle, FitConfig, Outcome,
};
pub use error::{Result, SpadeError};
pub use eval::{
    auroc, fpr_at_tpr, generate_synthetic, query_vectors, stability_study, OodKind, ScoredRun,
    StabilityReport, SynthData, SynthSpec,
};
pub use evt::{
    fit_gpd_mle, gev_cdf, gpd_cdf, gpd_logpdf, gpd_quantile, pot_fit, select_threshold, GpdParams,
    PotTailModel, TailSide,
};
pub use geometry::{
    empirical_lipschitz, euclidean, informativeness, kth_nn_distance_all,
    kth_nn_distance_same_class, kth_nn_distance_to_class, normalize, variation,
    ClassDistanceSample, LatentConfig,
};
pub use store::{
    load_dataset, load_models, save_dataset, save_models, DatasetFormat, DistanceKind,
    EmbeddingDataset, EmbeddingRecord, ModelBundle, ModelConfig,
};
