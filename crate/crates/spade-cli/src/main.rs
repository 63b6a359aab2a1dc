//! `spade`: fit per-class extreme-value tail models over k-NN latent
//! distances, score queries for out-of-distribution-ness, make abstention
//! decisions, compute adversarial-perturbation lower bounds, and run
//! evaluations and stability studies.
//!
//! Every failure prints one machine-parseable line `ERROR <CODE> <message>`
//! to stderr; exit codes are 0 success, 1 i/o, 2 validation, 3 fingerprint
//! mismatch, 4 missing data, 5 missing models.

mod commands;

use clap::{Args, Parser, Subcommand};
use spade_core::SpadeError;

#[derive(Parser)]
#[command(name = "spade", version, about = "EVT tail models over latent k-NN distances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FormatArg {
    /// Dataset file encoding for every dataset read or written.
    #[arg(long, default_value = "csv", value_parser = commands::parse_format)]
    format: spade_core::DatasetFormat,
}

#[derive(Args)]
struct FitParams {
    /// Neighbor rank.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Threshold quantile for the tail fits.
    #[arg(long, default_value_t = 0.9)]
    q: f64,
    /// Project embeddings to the unit sphere before distances.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-class tail models (and optionally pairwise separation models).
    Fit {
        #[arg(long)]
        train: String,
        #[command(flatten)]
        params: FitParams,
        /// Also fit one lower-tail model per ordered pair of classes.
        #[arg(long)]
        pairwise: bool,
        #[command(flatten)]
        format: FormatArg,
        /// Output model JSON path.
        #[arg(long)]
        out: String,
    },
    /// Score queries: minimum per-class tail CDF, higher = more extreme.
    Score {
        #[arg(long)]
        model: String,
        #[arg(long)]
        train: String,
        #[arg(long)]
        queries: String,
        /// Proceed despite a training-file fingerprint mismatch.
        #[arg(long)]
        allow_mismatch: bool,
        #[command(flatten)]
        format: FormatArg,
        /// Output CSV path (id,ood_score,argmin_class).
        #[arg(long)]
        out: String,
    },
    /// Abstention decisions at confidence 1 - tau for predicted classes.
    Abstain {
        #[arg(long)]
        model: String,
        #[arg(long)]
        train: String,
        #[arg(long)]
        queries: String,
        /// CSV mapping query id to predicted class (header: id,class).
        #[arg(long)]
        predictions: String,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(long)]
        allow_mismatch: bool,
        #[command(flatten)]
        format: FormatArg,
        /// Output CSV path (id,decision,z_c,threshold).
        #[arg(long)]
        out: String,
    },
    /// Adversarial-perturbation lower bounds for all ordered class pairs.
    AdvBound {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        /// Lipschitz constant of the embedding.
        #[arg(long, conflicts_with_all = ["lipschitz_inputs", "lipschitz_embeddings"])]
        lipschitz_k: Option<f64>,
        /// Dataset of raw inputs paired with --lipschitz-embeddings to
        /// estimate the constant from data (a lower bound: the resulting
        /// perturbation bounds are optimistic).
        #[arg(long, requires = "lipschitz_embeddings")]
        lipschitz_inputs: Option<String>,
        #[arg(long, requires = "lipschitz_inputs")]
        lipschitz_embeddings: Option<String>,
        #[command(flatten)]
        format: FormatArg,
        /// Output CSV path (c,c_prime,bound,vacuous).
        #[arg(long)]
        out: String,
    },
    /// AUROC and FPR95 of the OOD score on labeled query sets.
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        train: String,
        #[arg(long)]
        id_queries: String,
        #[arg(long)]
        ood_queries: String,
        #[arg(long)]
        allow_mismatch: bool,
        #[command(flatten)]
        format: FormatArg,
        /// Optional output JSON path; the summary always prints to stdout.
        #[arg(long)]
        out: Option<String>,
    },
    /// Generate a synthetic labeled-embedding benchmark.
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        on_sphere: bool,
        #[arg(long, default_value = "uniform-sphere", value_parser = commands::parse_ood_kind)]
        ood_kind: spade_core::OodKind,
        #[arg(long, default_value_t = 500)]
        id_queries_n: usize,
        #[arg(long, default_value_t = 500)]
        ood_queries_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        format: FormatArg,
        #[arg(long)]
        out_train: String,
        #[arg(long)]
        out_id: String,
        #[arg(long)]
        out_ood: String,
    },
    /// Subsampling-stability study: refit per fraction and seed, score fixed
    /// queries with the fitted detector and a raw k-NN distance baseline.
    Stability {
        #[arg(long)]
        train: String,
        #[arg(long)]
        id_queries: String,
        #[arg(long)]
        ood_queries: String,
        /// Comma-separated subsample fractions, strictly increasing in (0,1].
        #[arg(long)]
        fractions: String,
        #[arg(long, default_value_t = 5)]
        seeds: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        params: FitParams,
        #[command(flatten)]
        format: FormatArg,
        /// Output CSV path (one row per fraction x seed x class).
        #[arg(long)]
        out: String,
        /// Optional JSON summary path.
        #[arg(long)]
        out_json: Option<String>,
    },
}

fn exit_code(err: &SpadeError) -> i32 {
    match err.root() {
        SpadeError::Io(_) => 1,
        SpadeError::FingerprintMismatch { .. } => 3,
        SpadeError::MissingPrediction(_) => 4,
        SpadeError::MissingPairModels => 5,
        _ => 2,
    }
}

fn main() {
    if let Ok(threads) = std::env::var("SPADE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit {
            train,
            params,
            pairwise,
            format,
            out,
        } => commands::fit(&train, &params, pairwise, format.format, &out),
        Command::Score {
            model,
            train,
            queries,
            allow_mismatch,
            format,
            out,
        } => commands::score(&model, &train, &queries, allow_mismatch, format.format, &out),
        Command::Abstain {
            model,
            train,
            queries,
            predictions,
            tau,
            allow_mismatch,
            format,
            out,
        } => commands::abstain(
            &model,
            &train,
            &queries,
            &predictions,
            tau,
            allow_mismatch,
            format.format,
            &out,
        ),
        Command::AdvBound {
            model,
            tau,
            lipschitz_k,
            lipschitz_inputs,
            lipschitz_embeddings,
            format,
            out,
        } => commands::adv_bound(
            &model,
            tau,
            lipschitz_k,
            lipschitz_inputs.as_deref(),
            lipschitz_embeddings.as_deref(),
            format.format,
            &out,
        ),
        Command::Eval {
            model,
            train,
            id_queries,
            ood_queries,
            allow_mismatch,
            format,
            out,
        } => commands::eval(
            &model,
            &train,
            &id_queries,
            &ood_queries,
            allow_mismatch,
            format.format,
            out.as_deref(),
        ),
        Command::Synth {
            classes,
            per_class,
            dim,
            spread,
            on_sphere,
            ood_kind,
            id_queries_n,
            ood_queries_n,
            seed,
            format,
            out_train,
            out_id,
            out_ood,
        } => commands::synth(
            spade_core::SynthSpec {
                n_classes: classes,
                points_per_class: per_class,
                dimension: dim,
                cluster_spread: spread,
                on_sphere,
                ood_kind,
                id_query_count: id_queries_n,
                ood_query_count: ood_queries_n,
                seed,
            },
            format.format,
            &out_train,
            &out_id,
            &out_ood,
        ),
        Command::Stability {
            train,
            id_queries,
            ood_queries,
            fractions,
            seeds,
            seed,
            params,
            format,
            out,
            out_json,
        } => commands::stability(
            &train,
            &id_queries,
            &ood_queries,
            &fractions,
            seeds,
            seed,
            &params,
            format.format,
            &out,
            out_json.as_deref(),
        ),
    };
    if let Err(err) = result {
        eprintln!("ERROR {} {}", err.code(), err);
        std::process::exit(exit_code(&err));
    }
}
