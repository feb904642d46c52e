//! Stored knowledge: what a `learn` job produces and an `apply` job loads.
//!
//! File layout: one header line `kfed-knowledge 1 sha256=<hex>` followed by
//! the JSON body. The digest covers the body bytes exactly, so any
//! truncation or edit is caught on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Layout, Level};
use crate::cognition_federation::{Encoder, EnsembleHead};
use crate::info_federation::LinearModel;
use crate::knowledge_federation::{PredicateRegistry, Rule};
use crate::model_federation::{ModelParams, RoundMetrics, VerticalModel};
use crate::sandbox::Standardizer;
use crate::transport::PartyId;

const MAGIC: &str = "kfed-knowledge 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KnowledgeModel {
    /// An information-level statistic.
    Statistic { name: String, value: f64 },
    Ridge { model: LinearModel },
    /// `feature_names` fixes the column order the parameters expect.
    Horizontal { params: ModelParams, feature_names: Vec<String> },
    Vertical { model: VerticalModel },
    Ensemble { head: EnsembleHead, encoders: BTreeMap<PartyId, Encoder>, order: Vec<PartyId> },
    Rules { rules: Vec<Rule>, registry: PredicateRegistry },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knowledge {
    pub level: Level,
    pub layout: Layout,
    pub job_id: String,
    pub seed: u64,
    pub rounds: u64,
    pub final_metrics: Option<RoundMetrics>,
    /// Column transforms each party fitted at training time; an apply job
    /// reuses them so new rows are scaled the same way.
    pub preprocessing: BTreeMap<PartyId, Standardizer>,
    pub model: KnowledgeModel,
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("knowledge artifact integrity check failed: {0}")]
    Integrity(String),
    #[error("knowledge artifact i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Knowledge {
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_vec_pretty(self).expect("knowledge serializes");
        let digest = hex::encode(Sha256::digest(&body));
        let mut out = format!("{MAGIC} sha256={digest}\n").into_bytes();
        out.extend(body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| ArtifactError::Integrity("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| ArtifactError::Integrity("header is not text".into()))?;
        let want = header
            .strip_prefix(MAGIC)
            .and_then(|r| r.strip_prefix(" sha256="))
            .ok_or_else(|| ArtifactError::Integrity(format!("unrecognized header {header:?}")))?;
        let body = &bytes[nl + 1..];
        let got = hex::encode(Sha256::digest(body));
        if got != want {
            return Err(ArtifactError::Integrity(format!("digest mismatch: header {want}, content {got}")));
        }
        serde_json::from_slice(body).map_err(|e| ArtifactError::Integrity(e.to_string()))
    }

    /// Digest recorded in the header.
    pub fn digest(&self) -> String {
        let body = serde_json::to_vec_pretty(self).expect("knowledge serializes");
        hex::encode(Sha256::digest(&body))
    }
}

pub fn store_knowledge(k: &Knowledge, path: &Path) -> Result<(), ArtifactError> {
    std::fs::write(path, k.to_bytes())?;
    Ok(())
}

pub fn load_knowledge(path: &Path) -> Result<Knowledge, ArtifactError> {
    Knowledge::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_federation::Architecture;
    use crate::sandbox::ColumnTransform;

    fn sample() -> Knowledge {
        let mut pre = BTreeMap::new();
        pre.insert(
            PartyId::new("a"),
            Standardizer { columns: vec![ColumnTransform { name: "x".into(), bucket_edges: None, shift: 0.1, scale: 3.0 }] },
        );
        Knowledge {
            level: Level::Model,
            layout: Layout::CrossSample,
            job_id: "j".into(),
            seed: 3,
            rounds: 2,
            final_metrics: Some(RoundMetrics { round: 2, train_loss: 0.1 + 0.2, eval_metric: 1.0 / 3.0 }),
            preprocessing: pre,
            model: KnowledgeModel::Horizontal {
                params: ModelParams { arch: Architecture::Logistic { inputs: 2 }, theta: vec![0.1, -1e-300, 7.25], version: 2 },
                feature_names: vec!["x".into(), "y".into()],
            },
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        let k = sample();
        assert_eq!(Knowledge::from_bytes(&k.to_bytes()).unwrap(), k);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        store_knowledge(&k, &p).unwrap();
        assert_eq!(load_knowledge(&p).unwrap(), k);
    }

    #[test]
    fn truncation_and_edits_fail_integrity() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Knowledge::from_bytes(&bytes[..cut]), Err(ArtifactError::Integrity(_))), "cut {cut}");
        }
        let mut edited = bytes.clone();
        let last = edited.len() - 3;
        edited[last] ^= 1;
        assert!(matches!(Knowledge::from_bytes(&edited), Err(ArtifactError::Integrity(_))));
    }
}
