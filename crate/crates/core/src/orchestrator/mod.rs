//! Job orchestration: configs, the run driver, stored knowledge and the
//! files a run leaves behind.
//!
//! A run directory holds
//!
//! * `metrics.csv`: `round,train_loss,eval_metric`, one row per round;
//! * `knowledge.json`: the stored knowledge (learn jobs);
//! * `judgements.csv`: scores or matched entities (apply and knowledge jobs);
//! * `audit.log`: every envelope of the run, JSON lines;
//! * `manifest.txt`: `key=value` lines with the config hash, seed, version
//!   and a hash of every input file.
//!
//! Nothing in it may contain party dataset bytes; see [`scan_for_leaks`].

mod artifact;
mod config;
mod report;
mod run;
mod socket;
mod tools;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use artifact::{load_knowledge, store_knowledge, ArtifactError, Knowledge, KnowledgeModel};
pub use config::{
    AlignmentMethod, CognitionSection, ConfigError, EncoderShape, InfoOperation, InformationSection, JobConfig, JobKind,
    JobSection, KnowledgeSection, Layout, Level, ModelKind, PartySpec, Role, SecurityPolicy, TrainingSection, TrustModel,
    VerticalSection,
};
pub use report::{read_metrics, report, smoothed, write_metrics, Report};
pub use run::{run_config, run_job, JudgementRow, RunSummary};
pub use socket::{run_party, socket_supported};
pub use tools::{parse_forbidden, psi_files, write_key_file, PsiPartyFile};

use crate::alignment::AlignmentError;
use crate::info_federation::InfoError;
use crate::knowledge_federation::KnowledgeError;
use crate::model_federation::{ModelError, VerticalProtocol};
use crate::sandbox::SandboxError;
use crate::transport::{AuditLog, ForbiddenPattern, MsgType, PartyId, TransportError};

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("party {party}: {source}")]
    Sandbox { party: PartyId, source: SandboxError },
    #[error("alignment: {0}")]
    Alignment(#[from] AlignmentError),
    #[error("model federation: {0}")]
    Model(#[from] ModelError),
    #[error("information federation: {0}")]
    Info(#[from] InfoError),
    #[error("knowledge federation: {0}")]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("policy violation: {0}")]
    Policy(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl JobError {
    /// 2 for configuration problems found before any message flows, else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            JobError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Envelope types a job may produce under its policy. Anything else in the
/// transcript is a policy violation.
pub fn permitted_types(cfg: &JobConfig) -> BTreeSet<MsgType> {
    use MsgType::*;
    let mut t = BTreeSet::from([Error]);
    let learn = cfg.job.kind == JobKind::Learn;
    let aligned = matches!(cfg.job.layout, Layout::CrossFeature | Layout::MultiView);
    if aligned && cfg.policy.alignment == AlignmentMethod::Psi {
        t.extend([AlignBlind, AlignReply]);
    }
    match (cfg.job.level, cfg.job.layout) {
        (Level::Information, _) => t.extend([Control, EncStat]),
        (Level::Model, Layout::CrossSample) => {
            if learn {
                t.extend([ModelUpdate, GlobalUpdate]);
                if cfg.policy.masking {
                    t.insert(Control);
                }
            }
        }
        (Level::Model, _) => {
            t.insert(PartialLogit);
            if let (true, Some(v)) = (learn, &cfg.vertical) {
                match v.protocol {
                    VerticalProtocol::Plaintext => {}
                    VerticalProtocol::HeTaylor => t.extend([EncStat, Control]),
                    VerticalProtocol::LabelTransfer => t.extend([EncStat, GradientCandidates, GradientSelected]),
                }
                if v.feature_threshold.is_some() {
                    t.extend([EncStat, Control]);
                }
            }
        }
        (Level::Cognition, _) => {
            t.insert(Embedding);
            if learn {
                t.extend([HeadGradient, Control]);
            }
        }
        (Level::Knowledge, _) => t.extend([KnowledgeQuery, KnowledgeReply, Control]),
    }
    t
}

/// Fails on the first envelope whose type the policy does not allow.
pub fn check_policy(cfg: &JobConfig, log: &AuditLog) -> Result<(), JobError> {
    let allowed = permitted_types(cfg);
    for r in log.records() {
        let ok = MsgType::parse(&r.msg_type).is_some_and(|t| allowed.contains(&t));
        if !ok {
            return Err(JobError::Policy(format!(
                "{} envelope from {} to {} in round {} is not permitted by the job's policy",
                r.msg_type, r.sender, r.recipient, r.round
            )));
        }
    }
    Ok(())
}

/// Extension point for expense calculation and contribution assessment.
/// The crate ships no implementation. A deployment that bills or rewards
/// parties reads the finished run here, for example envelope counts per
/// sender from the transcript, and returns a weight per party.
pub trait ContributionAssessor {
    fn assess(&self, cfg: &JobConfig, run: &RunSummary, transcript: &AuditLog) -> std::collections::BTreeMap<PartyId, f64>;
}

/// Searches every file under `dir` for the forbidden byte patterns, both
/// raw and hex-encoded (the audit log stores payloads as hex). Returns
/// `file: label` for each hit.
pub fn scan_for_leaks(dir: &Path, forbidden: &[ForbiddenPattern]) -> std::io::Result<Vec<String>> {
    let mut hits = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let bytes = std::fs::read(&path)?;
            let lower = bytes.to_ascii_lowercase();
            for f in forbidden {
                let hexed = hex::encode(&f.bytes).into_bytes();
                if contains(&bytes, &f.bytes) || contains(&lower, &hexed) {
                    hits.push(format!("{}: {}", path.display(), f.label));
                }
            }
        }
    }
    Ok(hits)
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// `key=value` manifest; keys sorted by the caller's order.
pub(crate) fn write_manifest(path: &Path, entries: &[(String, String)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in entries {
        writeln!(f, "{k}={v}")?;
    }
    f.flush()
}

/// Parses a manifest written by a run.
pub fn read_manifest(path: &Path) -> std::io::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_finds_raw_and_hex() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello cust-0042 world").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/b.log"), hex::encode(b"secret-bytes")).unwrap();
        let pats = [
            ForbiddenPattern::new("id", b"cust-0042".to_vec()),
            ForbiddenPattern::new("blob", b"secret-bytes".to_vec()),
            ForbiddenPattern::new("absent", b"nothing-here".to_vec()),
        ];
        let hits = scan_for_leaks(dir.path(), &pats).unwrap();
        assert_eq!(hits.len(), 2, "{hits:?}");
    }
}
