//! Command implementations: thin wrappers over the library so that every
//! emitted value equals the corresponding direct library call.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use spade_core::{
    empirical_lipschitz, fit_class_models, load_dataset, load_models, save_dataset, save_models,
    stability_study, DatasetFormat, DetectorBundle, EmbeddingDataset, FitConfig, OodKind, Result,
    SpadeError, SynthSpec,
};

use crate::FitParams;

pub(crate) fn parse_format(s: &str) -> std::result::Result<DatasetFormat, String> {
    s.parse::<DatasetFormat>().map_err(|e| e.to_string())
}

pub(crate) fn parse_ood_kind(s: &str) -> std::result::Result<OodKind, String> {
    s.parse::<OodKind>().map_err(|e| e.to_string())
}

/// Load a model and its training dataset, enforcing (or explicitly waiving)
/// the fingerprint binding between them.
fn load_bundle(
    model_path: &str,
    train_path: &str,
    format: DatasetFormat,
    allow_mismatch: bool,
) -> Result<DetectorBundle> {
    let model = load_models(model_path)?;
    let dataset = Arc::new(load_dataset(train_path, format)?);
    let actual = dataset.fingerprint();
    if actual != model.fingerprint {
        if allow_mismatch {
            eprintln!(
                "warning: dataset fingerprint {actual} differs from the one the model was \
                 fitted on ({}); proceeding because --allow-mismatch is set",
                model.fingerprint
            );
        } else {
            return Err(SpadeError::FingerprintMismatch {
                expected: model.fingerprint,
                actual,
            });
        }
    }
    DetectorBundle::from_model_bundle(model, dataset, false)
}

pub(crate) fn fit(
    train: &str,
    params: &FitParams,
    pairwise: bool,
    format: DatasetFormat,
    out: &str,
) -> Result<()> {
    let dataset = Arc::new(load_dataset(train, format)?);
    let config = FitConfig {
        k: params.k,
        q: params.q,
        normalize: params.normalize,
        pairwise,
    };
    let bundle = fit_class_models(dataset, config)?;
    save_models(&bundle.to_model_bundle(), out)?;
    println!("{:>5} {:>14} {:>10} {:>12} {:>9}", "class", "t", "xi", "sigma", "n_exceed");
    for (class, model) in bundle.class_models().iter().enumerate() {
        println!(
            "{class:>5} {:>14.6} {:>10.4} {:>12.6} {:>9}",
            model.t, model.params.xi, model.params.sigma, model.n_exceed
        );
    }
    if let Some(pairs) = bundle.pair_models() {
        println!("fitted {} pairwise separation models", pairs.len());
    }
    Ok(())
}

pub(crate) fn score(
    model: &str,
    train: &str,
    queries: &str,
    allow_mismatch: bool,
    format: DatasetFormat,
    out: &str,
) -> Result<()> {
    let bundle = load_bundle(model, train, format, allow_mismatch)?;
    let queries = load_dataset(queries, format)?;
    let mut writer = fs::File::create(out)?;
    writeln!(writer, "id,ood_score,argmin_class")?;
    for rec in queries.records() {
        let (score, argmin) = bundle.ood_score_argmin(&rec.vector)?;
        writeln!(writer, "{},{},{}", rec.id, score, argmin)?;
    }
    Ok(())
}

fn load_predictions(path: &str) -> Result<HashMap<String, usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                SpadeError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, e))
            }
            _ => SpadeError::MalformedFile(e.to_string()),
        })?;
    let header = reader
        .headers()
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    if header.len() < 2 || &header[0] != "id" || &header[1] != "class" {
        return Err(SpadeError::MalformedFile(
            "predictions header must be id,class".into(),
        ));
    }
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
        let class: usize = row[1]
            .parse()
            .map_err(|_| SpadeError::MalformedFile(format!("bad class {:?}", &row[1])))?;
        if map.insert(row[0].to_string(), class).is_some() {
            return Err(SpadeError::MalformedFile(format!(
                "duplicate prediction for id {:?}",
                &row[0]
            )));
        }
    }
    Ok(map)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn abstain(
    model: &str,
    train: &str,
    queries: &str,
    predictions: &str,
    tau: f64,
    allow_mismatch: bool,
    format: DatasetFormat,
    out: &str,
) -> Result<()> {
    let bundle = load_bundle(model, train, format, allow_mismatch)?;
    let queries = load_dataset(queries, format)?;
    let predictions = load_predictions(predictions)?;
    let mut writer = fs::File::create(out)?;
    writeln!(writer, "id,decision,z_c,threshold")?;
    for rec in queries.records() {
        let class = *predictions
            .get(&rec.id)
            .ok_or_else(|| SpadeError::MissingPrediction(rec.id.clone()))?;
        let decision = bundle.abstain_decide(&rec.vector, class, tau)?;
        let verdict = if decision.is_abstain() { "abstain" } else { "predict" };
        writeln!(writer, "{},{},{},{}", rec.id, verdict, decision.z, decision.threshold)?;
    }
    Ok(())
}

pub(crate) fn adv_bound(
    model: &str,
    tau: f64,
    lipschitz_k: Option<f64>,
    lipschitz_inputs: Option<&str>,
    lipschitz_embeddings: Option<&str>,
    format: DatasetFormat,
    out: &str,
) -> Result<()> {
    let model = load_models(model)?;
    let lipschitz = match (lipschitz_k, lipschitz_inputs, lipschitz_embeddings) {
        (Some(k), _, _) => k,
        (None, Some(inputs), Some(embeddings)) => {
            let inputs = load_dataset(inputs, format)?;
            let embeddings = load_dataset(embeddings, format)?;
            if inputs.len() != embeddings.len() {
                return Err(SpadeError::InvalidParameter(format!(
                    "lipschitz files pair {} inputs with {} embeddings",
                    inputs.len(),
                    embeddings.len()
                )));
            }
            for (a, b) in inputs.records().iter().zip(embeddings.records()) {
                if a.id != b.id {
                    return Err(SpadeError::InvalidParameter(format!(
                        "lipschitz files disagree on ids: {:?} vs {:?}",
                        a.id, b.id
                    )));
                }
            }
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = inputs
                .records()
                .iter()
                .zip(embeddings.records())
                .map(|(a, b)| (a.vector.clone(), b.vector.clone()))
                .collect();
            let estimate = empirical_lipschitz(&pairs)?;
            eprintln!(
                "warning: lipschitz constant {estimate} estimated from data is a lower bound \
                 on the true constant; the reported perturbation bounds are optimistic"
            );
            estimate
        }
        _ => {
            return Err(SpadeError::InvalidParameter(
                "provide --lipschitz-k or --lipschitz-inputs with --lipschitz-embeddings".into(),
            ))
        }
    };
    let pairs = model
        .pair_models
        .as_ref()
        .ok_or(SpadeError::MissingPairModels)?;
    let mut writer = fs::File::create(out)?;
    writeln!(writer, "c,c_prime,bound,vacuous")?;
    for (&(c, c_prime), pair_model) in pairs {
        let bound = spade_core::adversarial_lower_bound(
            &model.class_models[c],
            pair_model,
            tau,
            lipschitz,
        )?;
        writeln!(writer, "{c},{c_prime},{},{}", bound.bound, bound.vacuous)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    auroc: f64,
    fpr95: f64,
    n_id: usize,
    n_ood: usize,
}

/// Empty query files surface as empty score lists here rather than as
/// dataset errors, since the metrics are what an evaluation consumes.
fn load_query_vectors(path: &str, format: DatasetFormat) -> Result<EmbeddingDataset> {
    load_dataset(path, format).map_err(|e| match e {
        SpadeError::EmptyDataset => SpadeError::EmptyScores,
        other => other,
    })
}

pub(crate) fn eval(
    model: &str,
    train: &str,
    id_queries: &str,
    ood_queries: &str,
    allow_mismatch: bool,
    format: DatasetFormat,
    out: Option<&str>,
) -> Result<()> {
    let bundle = load_bundle(model, train, format, allow_mismatch)?;
    let id_queries = load_query_vectors(id_queries, format)?;
    let ood_queries = load_query_vectors(ood_queries, format)?;
    let score_all = |ds: &EmbeddingDataset| -> Result<Vec<f64>> {
        ds.records()
            .iter()
            .map(|r| bundle.ood_score(&r.vector))
            .collect()
    };
    let run = spade_core::ScoredRun {
        id_scores: score_all(&id_queries)?,
        ood_scores: score_all(&ood_queries)?,
    };
    let summary = EvalSummary {
        auroc: spade_core::auroc(&run)?,
        fpr95: spade_core::fpr_at_tpr(&run, 0.95)?,
        n_id: run.id_scores.len(),
        n_ood: run.ood_scores.len(),
    };
    let json = serde_json::to_string(&summary)
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}

pub(crate) fn synth(
    spec: SynthSpec,
    format: DatasetFormat,
    out_train: &str,
    out_id: &str,
    out_ood: &str,
) -> Result<()> {
    let data = spade_core::generate_synthetic(&spec)?;
    save_dataset(&data.train, out_train, format)?;
    save_dataset(&data.id_queries, out_id, format)?;
    save_dataset(&data.ood_queries, out_ood, format)?;
    println!(
        "wrote {} training records, {} id queries, {} ood queries",
        data.train.len(),
        data.id_queries.len(),
        data.ood_queries.len()
    );
    Ok(())
}

fn parse_fractions(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| SpadeError::InvalidParameter(format!("bad fraction {part:?}")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn stability(
    train: &str,
    id_queries: &str,
    ood_queries: &str,
    fractions: &str,
    seeds: u32,
    seed: u64,
    params: &FitParams,
    format: DatasetFormat,
    out: &str,
    out_json: Option<&str>,
) -> Result<()> {
    let dataset = Arc::new(load_dataset(train, format)?);
    let id_queries = spade_core::query_vectors(&load_query_vectors(id_queries, format)?);
    let ood_queries = spade_core::query_vectors(&load_query_vectors(ood_queries, format)?);
    let fractions = parse_fractions(fractions)?;
    let config = FitConfig {
        k: params.k,
        q: params.q,
        normalize: params.normalize,
        pairwise: false,
    };
    let report = stability_study(
        &dataset,
        &config,
        &fractions,
        seeds,
        seed,
        &id_queries,
        &ood_queries,
    )?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes)?;
    fs::write(out, csv_bytes)?;
    if let Some(path) = out_json {
        let json = serde_json::to_string_pretty(&report.summary())
            .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
        fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}
