//! Per-party data handling: ingestion, standardization and de-identification.
//!
//! Nothing here touches the network. `PartyDataset` deliberately has no
//! serialization so raw rows cannot end up in a message payload.

pub mod schema;
mod standardize;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

pub use schema::{ColumnKind, ColumnSpec, Desensitization, Normalization, Schema};
pub use standardize::{standardize, ColumnTransform, SandboxPolicy, Standardizer};

use crate::transport::PartyId;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unparseable cells in rows {rows:?}: {detail}")]
    Parse { rows: Vec<usize>, detail: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("degenerate column {0:?}: zero variance")]
    DegenerateColumn(String),
    #[error("policy does not cover column {0:?}")]
    PolicyMissing(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Entity-keyed records held inside one party.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyDataset {
    pub party_id: PartyId,
    entity_ids: Vec<String>,
    columns: Vec<(String, Vec<f64>)>,
    labels: Option<Vec<u8>>,
    schema: Schema,
}

impl PartyDataset {
    /// Checks equal column lengths, unique ids and binary labels.
    pub fn new(
        party_id: PartyId,
        entity_ids: Vec<String>,
        columns: Vec<(String, Vec<f64>)>,
        labels: Option<Vec<u8>>,
        schema: Schema,
    ) -> Result<Self, SandboxError> {
        let n = entity_ids.len();
        for (name, col) in &columns {
            if col.len() != n {
                return Err(SandboxError::Integrity(format!("column {name:?} has {} rows, expected {n}", col.len())));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(SandboxError::Integrity(format!("label column has {} rows, expected {n}", l.len())));
            }
            if let Some(pos) = l.iter().position(|&v| v > 1) {
                return Err(SandboxError::Integrity(format!("label in row {} is not 0 or 1", pos + 1)));
            }
        }
        for (name, col) in &columns {
            if let Some(spec) = schema.column(name) {
                if let (Some(lo), Some(hi)) = (spec.min, spec.max) {
                    if let Some(pos) = col.iter().position(|v| !(lo..=hi).contains(v)) {
                        return Err(SandboxError::Integrity(format!(
                            "column {name:?} row {}: {} outside declared bounds [{lo}, {hi}]",
                            pos + 1,
                            col[pos]
                        )));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for id in &entity_ids {
            if !seen.insert(id.as_str()) {
                return Err(SandboxError::Integrity(format!("duplicate entity id {id:?}")));
            }
        }
        Ok(Self { party_id, entity_ids, columns, labels, schema })
    }

    /// Builds a dataset with a generated schema; convenient for synthetic data.
    pub fn from_parts(
        party_id: impl Into<String>,
        entity_ids: Vec<String>,
        columns: Vec<(String, Vec<f64>)>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, SandboxError> {
        let mut specs = vec![ColumnSpec::id("id")];
        specs.extend(columns.iter().map(|(n, _)| ColumnSpec::numeric(n, Normalization::None)));
        if labels.is_some() {
            specs.push(ColumnSpec::label("label"));
        }
        let schema = Schema::new(specs)?;
        Self::new(PartyId::new(party_id), entity_ids, columns, labels, schema)
    }

    pub fn n_rows(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn columns(&self) -> &[(String, Vec<f64>)] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    /// Row-major feature matrix.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows()).map(|i| self.columns.iter().map(|(_, c)| c[i]).collect()).collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> PartyDataset {
        PartyDataset {
            party_id: self.party_id.clone(),
            entity_ids: idx.iter().map(|&i| self.entity_ids[i].clone()).collect(),
            columns: self.columns.iter().map(|(n, c)| (n.clone(), idx.iter().map(|&i| c[i]).collect())).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            schema: self.schema.clone(),
        }
    }

    /// Keeps only the named feature columns, in the given order.
    pub fn select_columns(&self, names: &[&str]) -> Result<PartyDataset, SandboxError> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let c = self.column(name).ok_or_else(|| SandboxError::Schema(format!("no column {name:?}")))?;
            columns.push((name.to_string(), c.to_vec()));
        }
        let keep: BTreeSet<&str> = names.iter().copied().collect();
        let schema = Schema {
            columns: self
                .schema
                .columns
                .iter()
                .filter(|c| c.kind != ColumnKind::Numeric || keep.contains(c.name.as_str()))
                .cloned()
                .collect(),
        };
        Ok(PartyDataset { columns, schema, ..self.clone() })
    }

    /// Moves a numeric column out of the features, e.g. a regression target.
    pub fn take_column(&self, name: &str) -> Result<(PartyDataset, Vec<f64>), SandboxError> {
        let target = self.column(name).ok_or_else(|| SandboxError::Schema(format!("no column {name:?}")))?.to_vec();
        let rest: Vec<&str> = self.feature_names().into_iter().filter(|n| *n != name).collect();
        Ok((self.select_columns(&rest)?, target))
    }

    /// Declares bounds on a feature column; existing values must respect them.
    pub fn with_bounds(&self, name: &str, min: f64, max: f64) -> Result<PartyDataset, SandboxError> {
        let mut schema = self.schema.clone();
        let spec = schema
            .columns
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| SandboxError::Schema(format!("no column {name:?}")))?;
        spec.min = Some(min);
        spec.max = Some(max);
        schema.validate()?;
        Self::new(self.party_id.clone(), self.entity_ids.clone(), self.columns.clone(), self.labels.clone(), schema)
    }

    /// Magnitude bound of a column, if declared.
    pub fn magnitude_bound(&self, name: &str) -> Option<f64> {
        self.schema.column(name)?.magnitude_bound()
    }

    pub(crate) fn with_columns(&self, columns: Vec<(String, Vec<f64>)>, schema: Schema) -> PartyDataset {
        PartyDataset { columns, schema, ..self.clone() }
    }

    pub(crate) fn with_ids(&self, entity_ids: Vec<String>) -> PartyDataset {
        PartyDataset { entity_ids, ..self.clone() }
    }
}

/// Reads a CSV file whose header must contain every schema column.
pub fn ingest_csv(path: &Path, schema: &Schema, party_id: PartyId) -> Result<PartyDataset, SandboxError> {
    let f = std::fs::File::open(path)?;
    ingest_reader(f, schema, party_id)
}

pub fn ingest_reader(input: impl Read, schema: &Schema, party_id: PartyId) -> Result<PartyDataset, SandboxError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let pos = header
            .iter()
            .position(|h| h == c.name)
            .ok_or_else(|| SandboxError::Schema(format!("missing column {:?}", c.name)))?;
        positions.push(pos);
    }

    let mut ids = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); schema.numeric_columns().count()];
    let mut labels: Option<Vec<u8>> = schema.label_column().map(|_| Vec::new());
    let mut bad_rows = Vec::new();
    let mut first_problem = None;

    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let mut row_ok = true;
        let mut num_vals = Vec::with_capacity(numeric.len());
        let mut label_val = None;
        let mut id_val = None;
        for (c, &pos) in schema.columns.iter().zip(&positions) {
            let cell = rec.get(pos).unwrap_or("");
            let parsed = match c.kind {
                ColumnKind::Id => {
                    if cell.is_empty() {
                        Err("empty id")
                    } else {
                        id_val = Some(cell.to_string());
                        Ok(())
                    }
                }
                ColumnKind::Numeric => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        num_vals.push(v);
                        Ok(())
                    }
                    _ => Err("not a finite number"),
                },
                ColumnKind::Label => match cell {
                    "0" => {
                        label_val = Some(0u8);
                        Ok(())
                    }
                    "1" => {
                        label_val = Some(1u8);
                        Ok(())
                    }
                    _ => Err("label must be 0 or 1"),
                },
            };
            if let Err(why) = parsed {
                row_ok = false;
                first_problem.get_or_insert_with(|| format!("row {row}, column {:?}: {why} ({cell:?})", c.name));
            }
        }
        if !row_ok {
            bad_rows.push(row);
            continue;
        }
        ids.push(id_val.expect("id parsed"));
        for (col, v) in numeric.iter_mut().zip(num_vals) {
            col.push(v);
        }
        if let (Some(l), Some(v)) = (labels.as_mut(), label_val) {
            l.push(v);
        }
    }
    if !bad_rows.is_empty() {
        return Err(SandboxError::Parse { rows: bad_rows, detail: first_problem.unwrap_or_default() });
    }
    let columns = schema.numeric_columns().map(|c| c.name.clone()).zip(numeric).collect();
    PartyDataset::new(party_id, ids, columns, labels.take(), schema.clone())
}

/// Local record of digest to raw id, for re-linking results.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMapping {
    to_raw: BTreeMap<String, String>,
}

impl IdMapping {
    pub fn raw(&self, digest: &str) -> Option<&str> {
        self.to_raw.get(digest).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }
}

/// Hex HMAC-SHA256 of an entity id.
pub fn id_digest(key: &[u8], id: &str) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(id.as_bytes());
    hex::encode(mac.finalize().into_bytes())
}

/// Key shared by all parties of one job so equal raw ids give equal digests.
pub fn job_id_key(job_id: &str, salt: &str) -> Vec<u8> {
    use sha2::Digest;
    let mut h = Sha256::new();
    h.update(b"kfed.id-key");
    h.update((job_id.len() as u32).to_be_bytes());
    h.update(job_id.as_bytes());
    h.update(salt.as_bytes());
    h.finalize().to_vec()
}

/// Replaces ids by keyed digests; rows keep their positions.
pub fn deidentify(ds: &PartyDataset, key: &[u8]) -> (PartyDataset, IdMapping) {
    let mut mapping = IdMapping::default();
    let digests: Vec<String> = ds
        .entity_ids
        .iter()
        .map(|id| {
            let d = id_digest(key, id);
            mapping.to_raw.insert(d.clone(), id.clone());
            d
        })
        .collect();
    (ds.with_ids(digests), mapping)
}
