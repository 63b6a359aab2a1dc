//! Loading, validation, and persistence of embedding datasets and fitted
//! model bundles.
//!
//! Two dataset formats are supported:
//!
//! * CSV with header `id,label,f0,...,f{d-1}`, one record per line.
//! * A little-endian binary format: magic `SPDE`, u32 version (= 1), u32 `n`,
//!   u32 `d`, u32 `n_c`, then `n` u32 labels, `n * d` f64 features row-major,
//!   then `n` length-prefixed (u16) UTF-8 ids.
//!
//! Fitted bundles persist as JSON; floats serialize in shortest round-trip
//! decimal form, so reloading reproduces every numeric field bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpadeError};
use crate::evt::{GpdParams, PotTailModel, TailSide};

pub const BINARY_MAGIC: [u8; 4] = *b"SPDE";
pub const BINARY_VERSION: u32 = 1;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for DatasetFormat {
    type Err = SpadeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DatasetFormat::Csv),
            "binary" => Ok(DatasetFormat::Binary),
            other => Err(SpadeError::InvalidParameter(format!(
                "unknown dataset format {other:?}, expected csv or binary"
            ))),
        }
    }
}

/// One labeled latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// A validated, immutable collection of labeled latent vectors.
///
/// Invariants enforced at construction: nonempty, consistent dimension,
/// finite components, dense labels `0..n_c` with every class populated, ids
/// short enough for the binary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    records: Vec<EmbeddingRecord>,
    d: usize,
    n_c: usize,
    class_index: Vec<Vec<usize>>,
}

impl EmbeddingDataset {
    /// Build and validate a dataset; `n_c` is derived as `max(label) + 1`.
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(SpadeError::EmptyDataset);
        }
        let d = records[0].vector.len();
        let mut n_c = 0;
        for (i, rec) in records.iter().enumerate() {
            if rec.vector.len() != d {
                return Err(SpadeError::MalformedFile(format!(
                    "record {i} has {} features, expected {d}",
                    rec.vector.len()
                )));
            }
            for (j, v) in rec.vector.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SpadeError::NonFiniteValue {
                        record: i,
                        component: j,
                    });
                }
            }
            if rec.id.len() > u16::MAX as usize {
                return Err(SpadeError::MalformedFile(format!(
                    "record {i} id exceeds {} bytes",
                    u16::MAX
                )));
            }
            n_c = n_c.max(rec.label + 1);
        }
        let mut class_index = vec![Vec::new(); n_c];
        for (i, rec) in records.iter().enumerate() {
            class_index[rec.label].push(i);
        }
        for (c, members) in class_index.iter().enumerate() {
            if members.is_empty() {
                return Err(SpadeError::MalformedFile(format!(
                    "class {c} has no members (labels must be dense)"
                )));
            }
        }
        Ok(EmbeddingDataset {
            records,
            d,
            n_c,
            class_index,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.n_c
    }

    /// Record positions belonging to a class.
    pub fn class_members(&self, class: usize) -> Result<&[usize]> {
        self.class_index
            .get(class)
            .map(Vec::as_slice)
            .ok_or(SpadeError::UnknownClass(class))
    }

    pub fn vector(&self, position: usize) -> &[f64] {
        &self.records[position].vector
    }

    pub fn label(&self, position: usize) -> usize {
        self.records[position].label
    }

    /// Canonical binary encoding; also the fingerprint input.
    pub fn to_binary_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (4 + 8 * self.d + 8));
        out.extend_from_slice(&BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_c as u32).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&(rec.label as u32).to_le_bytes());
        }
        for rec in &self.records {
            for v in &rec.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for rec in &self.records {
            out.extend_from_slice(&(rec.id.len() as u16).to_le_bytes());
            out.extend_from_slice(rec.id.as_bytes());
        }
        out
    }

    /// Content hash (hex SHA-256 of the canonical binary encoding). Identical
    /// record content yields the identical fingerprint regardless of the file
    /// format it was loaded from.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_binary_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Load a dataset from `path` in the given format.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path)?;
    match format {
        DatasetFormat::Csv => parse_csv(&bytes),
        DatasetFormat::Binary => parse_binary(&bytes),
    }
}

/// Save a dataset to `path` in the given format.
pub fn save_dataset(
    dataset: &EmbeddingDataset,
    path: impl AsRef<Path>,
    format: DatasetFormat,
) -> Result<()> {
    let bytes = match format {
        DatasetFormat::Csv => csv_bytes(dataset)?,
        DatasetFormat::Binary => dataset.to_binary_bytes(),
    };
    fs::write(path, bytes)?;
    Ok(())
}

fn csv_bytes(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::with_capacity(2 + dataset.d);
    header.push("id".to_string());
    header.push("label".to_string());
    for j in 0..dataset.d {
        header.push(format!("f{j}"));
    }
    writer
        .write_record(&header)
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    let mut row = Vec::with_capacity(2 + dataset.d);
    for rec in &dataset.records {
        row.clear();
        row.push(rec.id.clone());
        row.push(rec.label.to_string());
        for v in &rec.vector {
            row.push(format!("{v}"));
        }
        writer
            .write_record(&row)
            .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))
}

fn parse_csv(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(SpadeError::MalformedFile(
            "csv header must start with id,label and carry at least one feature".into(),
        ));
    }
    let d = header.len() - 2;
    for j in 0..d {
        if &header[j + 2] != format!("f{j}").as_str() {
            return Err(SpadeError::MalformedFile(format!(
                "feature column {} named {:?}, expected \"f{j}\"",
                j + 2,
                &header[j + 2]
            )));
        }
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
        if row.len() != d + 2 {
            return Err(SpadeError::MalformedFile(format!(
                "row {i} has {} fields, expected {}",
                row.len(),
                d + 2
            )));
        }
        let label: usize = row[1]
            .parse()
            .map_err(|_| SpadeError::MalformedFile(format!("row {i}: bad label {:?}", &row[1])))?;
        let mut vector = Vec::with_capacity(d);
        for j in 0..d {
            let v: f64 = row[j + 2].parse().map_err(|_| {
                SpadeError::MalformedFile(format!("row {i}: bad feature {:?}", &row[j + 2]))
            })?;
            if !v.is_finite() {
                return Err(SpadeError::NonFiniteValue {
                    record: i,
                    component: j,
                });
            }
            vector.push(v);
        }
        records.push(EmbeddingRecord {
            id: row[0].to_string(),
            label,
            vector,
        });
    }
    EmbeddingDataset::from_records(records)
}

/// Sequential reader over the binary layout.
struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(SpadeError::MalformedFile("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_binary(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4)? != BINARY_MAGIC {
        return Err(SpadeError::MalformedFile("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != BINARY_VERSION {
        return Err(SpadeError::MalformedFile(format!(
            "unsupported binary version {version}"
        )));
    }
    let n = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let n_c = cur.u32()? as usize;
    if n == 0 {
        return Err(SpadeError::EmptyDataset);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = cur.u32()? as usize;
        if label >= n_c {
            return Err(SpadeError::MalformedFile(format!(
                "record {i} label {label} >= declared class count {n_c}"
            )));
        }
        labels.push(label);
    }
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let mut vector = Vec::with_capacity(d);
        for j in 0..d {
            let v = cur.f64()?;
            if !v.is_finite() {
                return Err(SpadeError::NonFiniteValue {
                    record: i,
                    component: j,
                });
            }
            vector.push(v);
        }
        features.push(vector);
    }
    let mut records = Vec::with_capacity(n);
    for (label, vector) in labels.into_iter().zip(features) {
        let len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| SpadeError::MalformedFile("id is not valid UTF-8".into()))?
            .to_string();
        records.push(EmbeddingRecord { id, label, vector });
    }
    if cur.pos != bytes.len() {
        return Err(SpadeError::MalformedFile("trailing bytes after records".into()));
    }
    let dataset = EmbeddingDataset::from_records(records)?;
    if dataset.n_c != n_c {
        return Err(SpadeError::MalformedFile(format!(
            "declared class count {n_c} but labels span {} classes",
            dataset.n_c
        )));
    }
    Ok(dataset)
}

/// Distance functions a bundle may declare. Euclidean is the only one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
}

/// Fit configuration persisted alongside the models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub q: f64,
    pub normalize: bool,
    pub distance: DistanceKind,
}

/// A serializable set of fitted tail models bound to a training dataset by
/// fingerprint. Class models are indexed by class; pair models, when present,
/// cover every ordered pair of distinct classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub fingerprint: String,
    pub class_models: Vec<PotTailModel>,
    pub pair_models: Option<BTreeMap<(usize, usize), PotTailModel>>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntryFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair: Option<(usize, usize)>,
    t: f64,
    n: usize,
    n_exceed: usize,
    xi: f64,
    sigma: f64,
    tail: TailSide,
    empirical_sorted: Vec<f64>,
}

impl ModelEntryFile {
    fn from_model(model: &PotTailModel) -> Self {
        ModelEntryFile {
            class: None,
            pair: None,
            t: model.t,
            n: model.n,
            n_exceed: model.n_exceed,
            xi: model.params.xi,
            sigma: model.params.sigma,
            tail: model.tail,
            empirical_sorted: model.empirical_sorted.clone(),
        }
    }

    fn into_model(self) -> Result<PotTailModel> {
        let model = PotTailModel {
            params: GpdParams {
                xi: self.xi,
                sigma: self.sigma,
                mu: 0.0,
            },
            t: self.t,
            n: self.n,
            n_exceed: self.n_exceed,
            tail: self.tail,
            empirical_sorted: self.empirical_sorted,
        };
        model
            .validate()
            .map_err(|e| SpadeError::MalformedFile(format!("invalid model entry: {e}")))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelBundleFile {
    version: u32,
    config: ModelConfig,
    fingerprint: String,
    class_models: Vec<ModelEntryFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pair_models: Option<Vec<ModelEntryFile>>,
}

/// Persist a model bundle as JSON.
pub fn save_models(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, models_json_bytes(bundle)?)?;
    Ok(())
}

/// JSON encoding of a bundle, exposed for byte-level determinism checks.
pub fn models_json_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let file = ModelBundleFile {
        version: MODEL_SCHEMA_VERSION,
        config: bundle.config,
        fingerprint: bundle.fingerprint.clone(),
        class_models: bundle
            .class_models
            .iter()
            .enumerate()
            .map(|(c, m)| ModelEntryFile {
                class: Some(c),
                ..ModelEntryFile::from_model(m)
            })
            .collect(),
        pair_models: bundle.pair_models.as_ref().map(|pairs| {
            pairs
                .iter()
                .map(|(&pair, m)| ModelEntryFile {
                    pair: Some(pair),
                    ..ModelEntryFile::from_model(m)
                })
                .collect()
        }),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)
        .map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Load a model bundle from JSON.
pub fn load_models(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    // Peek at the version before full decoding so schema drift reports
    // cleanly instead of as a parse error.
    let probe: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| SpadeError::MalformedFile(e.to_string()))?;
    match probe.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MODEL_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(SpadeError::SchemaMismatch(v as u32)),
        None => {
            return Err(SpadeError::MalformedFile(
                "model file carries no version field".into(),
            ))
        }
    }
    let file: ModelBundleFile =
        serde_json::from_slice(&bytes).map_err(|e| SpadeError::MalformedFile(e.to_string()))?;

    let mut by_class: Vec<(usize, PotTailModel)> = Vec::with_capacity(file.class_models.len());
    for entry in file.class_models {
        let class = entry.class.ok_or_else(|| {
            SpadeError::MalformedFile("class model entry without class field".into())
        })?;
        by_class.push((class, entry.into_model()?));
    }
    by_class.sort_by_key(|(c, _)| *c);
    for (expected, (c, _)) in by_class.iter().enumerate() {
        if *c != expected {
            return Err(SpadeError::MalformedFile(
                "class models must cover classes 0..n_c densely".into(),
            ));
        }
    }
    let class_models: Vec<PotTailModel> = by_class.into_iter().map(|(_, m)| m).collect();

    let pair_models = match file.pair_models {
        None => None,
        Some(entries) => {
            let mut map = BTreeMap::new();
            for entry in entries {
                let pair = entry.pair.ok_or_else(|| {
                    SpadeError::MalformedFile("pair model entry without pair field".into())
                })?;
                if pair.0 == pair.1 {
                    return Err(SpadeError::MalformedFile(format!(
                        "pair model ({}, {}) relates a class to itself",
                        pair.0, pair.1
                    )));
                }
                if pair.0 >= class_models.len() || pair.1 >= class_models.len() {
                    return Err(SpadeError::MalformedFile(format!(
                        "pair model ({}, {}) names a class outside 0..{}",
                        pair.0,
                        pair.1,
                        class_models.len()
                    )));
                }
                if map.insert(pair, entry.into_model()?).is_some() {
                    return Err(SpadeError::MalformedFile(format!(
                        "duplicate pair model ({}, {})",
                        pair.0, pair.1
                    )));
                }
            }
            Some(map)
        }
    };

    Ok(ModelBundle {
        config: file.config,
        fingerprint: file.fingerprint,
        class_models,
        pair_models,
    })
}
