//! Dataset manifests, mixing, splitting, rater consistency and the synthetic
//! shape generator.

mod consistency;
mod synthetic;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalError;

pub use consistency::{split_half_consistency, DEFAULT_RESAMPLES};
pub use synthetic::{
    category_offsets, generate_synthetic, render_mask, render_sample, target_score, write_synthetic,
    ShapeKind, ShapeSpec, SyntheticDataset, SyntheticSample, TargetFn,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("invalid record at row {row}: {message}")]
    Domain { row: usize, message: String },
    #[error("duplicate image_ref `{0}`")]
    DuplicateRef(String),
    #[error("no records")]
    Empty,
    #[error("invalid split: {0}")]
    SplitSpec(String),
    #[error("split leaves the {0} part empty")]
    EmptyPart(&'static str),
    #[error("record `{0}` has no rater responses")]
    MissingResponses(String),
    #[error("record `{image_ref}` has {count} rater responses, need at least 2")]
    TooFewResponses { image_ref: String, count: usize },
    #[error("consistency undefined: {0}")]
    Consistency(#[from] EvalError),
    #[error("invalid generator input: {0}")]
    Generator(String),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_ref: String,
    pub score: f64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_responses: Option<Vec<u8>>,
}

impl ManifestRecord {
    pub fn new(image_ref: impl Into<String>, score: f64, source: impl Into<String>) -> Self {
        ManifestRecord {
            image_ref: image_ref.into(),
            score,
            source: source.into(),
            rater_responses: None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.image_ref.is_empty() {
            return Err("empty image_ref".into());
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if let Some(r) = self.rater_responses.as_deref().filter(|r| !r.is_empty()) {
            if r.iter().any(|&v| v > 1) {
                return Err("rater responses must be 0 or 1".into());
            }
            let mean = r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
            if (mean - self.score).abs() > 1e-9 {
                return Err(format!(
                    "score {} does not match rater mean {mean}",
                    self.score
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    #[serde(default)]
    pub seed: u64,
    /// Free-form provenance, e.g. the generating function of a synthetic set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    Csv,
    Json,
}

impl ManifestFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(ManifestFormat::Csv),
            "json" => Some(ManifestFormat::Json),
            _ => None,
        }
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            records,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// Check every record and the uniqueness of image references. Row numbers
    /// in errors are 1-based record positions.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            r.validate().map_err(|message| DatasetError::Domain { row: i + 1, message })?;
            if !seen.insert(r.image_ref.as_str()) {
                return Err(DatasetError::DuplicateRef(r.image_ref.clone()));
            }
        }
        Ok(())
    }

    /// Parse CSV text with header `image_ref,score,source[,rater_responses]`.
    /// Rows are numbered as data rows starting at 1.
    pub fn from_csv_str(text: &str) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| DatasetError::Parse { row: 0, message: e.to_string() })?
            .clone();
        let expected = ["image_ref", "score", "source", "rater_responses"];
        if headers.len() < 3
            || headers.len() > 4
            || headers.iter().zip(expected).any(|(h, e)| h != e)
        {
            return Err(DatasetError::Parse {
                row: 0,
                message: format!("bad header {:?}", headers.iter().collect::<Vec<_>>()),
            });
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i + 1;
            let parse = |message: String| DatasetError::Parse { row: row_no, message };
            let row = row.map_err(|e| parse(e.to_string()))?;
            if row.len() < 3 || row.len() > 4 {
                return Err(parse(format!("expected 3 or 4 fields, got {}", row.len())));
            }
            if row[0].contains(',') {
                return Err(parse("image_ref must not contain commas".into()));
            }
            let score: f64 = row[1]
                .parse()
                .map_err(|_| parse(format!("bad score `{}`", &row[1])))?;
            let rater_responses = match row.get(3).filter(|s| !s.is_empty()) {
                None => None,
                Some(s) => Some(
                    s.split(';')
                        .map(|v| match v.trim() {
                            "0" => Ok(0u8),
                            "1" => Ok(1u8),
                            other => Err(parse(format!("bad rater response `{other}`"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                ),
            };
            let rec = ManifestRecord {
                image_ref: row[0].to_string(),
                score,
                source: row[2].to_string(),
                rater_responses,
            };
            rec.validate()
                .map_err(|message| DatasetError::Domain { row: row_no, message })?;
            records.push(rec);
        }
        let m = DatasetManifest::new(records);
        m.validate()?;
        Ok(m)
    }

    /// Parse a JSON array of records.
    pub fn from_json_str(text: &str) -> Result<Self, DatasetError> {
        let records: Vec<ManifestRecord> = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            row: e.line(),
            message: e.to_string(),
        })?;
        let m = DatasetManifest::new(records);
        m.validate()?;
        Ok(m)
    }

    pub fn to_csv_string(&self) -> String {
        let with_raters = self.records.iter().any(|r| r.rater_responses.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["image_ref", "score", "source"];
        if with_raters {
            header.push("rater_responses");
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![r.image_ref.clone(), r.score.to_string(), r.source.clone()];
            if with_raters {
                row.push(
                    r.rater_responses
                        .as_deref()
                        .unwrap_or_default()
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                );
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialize")
    }
}

/// Sidecar holding manifest metadata next to `path`.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Load a manifest, picking up a `.meta.json` sidecar when present.
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let mut m = match format {
        ManifestFormat::Csv => DatasetManifest::from_csv_str(&text)?,
        ManifestFormat::Json => DatasetManifest::from_json_str(&text)?,
    };
    let meta = metadata_path(path);
    if meta.exists() {
        let text = std::fs::read_to_string(&meta).map_err(|source| DatasetError::Io {
            path: meta.display().to_string(),
            source,
        })?;
        m.metadata = Some(serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            row: e.line(),
            message: format!("{}: {e}", meta.display()),
        })?);
    }
    Ok(m)
}

pub fn save_manifest(
    manifest: &DatasetManifest,
    path: &Path,
    format: ManifestFormat,
) -> Result<(), DatasetError> {
    let write = |p: &Path, text: String| {
        std::fs::write(p, text).map_err(|e| DatasetError::Write {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let text = match format {
        ManifestFormat::Csv => manifest.to_csv_string(),
        ManifestFormat::Json => manifest.to_json_string(),
    };
    write(path, text)?;
    if let Some(meta) = &manifest.metadata {
        write(
            &metadata_path(path),
            serde_json::to_string_pretty(meta).expect("metadata serializes"),
        )?;
    }
    Ok(())
}

/// Concatenate manifests, keeping every record's source tag.
pub fn mix(manifests: &[DatasetManifest]) -> Result<DatasetManifest, DatasetError> {
    let first = manifests.first().ok_or(DatasetError::Empty)?;
    if manifests.len() == 1 {
        return Ok(first.clone());
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(manifests.iter().map(|m| m.len()).sum());
    for r in manifests.iter().flat_map(|m| &m.records) {
        if !seen.insert(r.image_ref.as_str()) {
            return Err(DatasetError::DuplicateRef(r.image_ref.clone()));
        }
        records.push(r.clone());
    }
    Ok(DatasetManifest {
        records,
        seed: first.seed,
        metadata: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(DatasetError::SplitSpec(format!("fractions {f:?} must lie in (0, 1)")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::SplitSpec(format!("fractions {f:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Part sizes by largest remainder; equal remainders favour the earlier
    /// part (train, then val), so 10 records at (0.5, 0.25, 0.25) give (5, 3, 2).
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train_frac, self.val_frac, self.test_frac].map(|f| f * n as f64);
        let mut sizes = quotas.map(|q| (q + 1e-9).floor() as usize);
        let rem: Vec<f64> = quotas
            .iter()
            .zip(&sizes)
            .map(|(q, &s)| (q - s as f64).max(0.0))
            .collect();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            if (rem[a] - rem[b]).abs() <= 1e-9 {
                a.cmp(&b)
            } else {
                rem[b].total_cmp(&rem[a])
            }
        });
        let assigned: usize = sizes.iter().sum();
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

/// Deterministic train/val/test partition. Each part keeps manifest order.
pub fn split(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest), DatasetError> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(DatasetError::Empty);
    }
    let [nt, nv, ns] = spec.sizes(manifest.len());
    for (size, name) in [(nt, "train"), (nv, "val"), (ns, "test")] {
        if size == 0 {
            return Err(DatasetError::EmptyPart(name));
        }
    }
    let mut idx: Vec<usize> = (0..manifest.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let part = |range: std::ops::Range<usize>| {
        let mut sel = idx[range].to_vec();
        sel.sort_unstable();
        DatasetManifest {
            records: sel.into_iter().map(|i| manifest.records[i].clone()).collect(),
            seed: spec.seed,
            metadata: manifest.metadata.clone(),
        }
    };
    Ok((part(0..nt), part(nt..nt + nv), part(nt + nv..nt + nv + ns)))
}
