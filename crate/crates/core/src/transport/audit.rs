//! Append-only capture of every envelope that crossed a party boundary.
//!
//! The persisted form is one JSON object per line with hex-encoded digest and
//! payload, so leak scans can run offline against a finished job.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use aho_corasick::AhoCorasick;
use serde::{Deserialize, Serialize};

use super::{MessageEnvelope, MsgType, PartyId, TransportError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    /// Logical tick under the simulator, unix milliseconds over sockets.
    pub ts: u64,
    pub job_id: String,
    pub round: u64,
    pub sender: PartyId,
    pub recipient: PartyId,
    pub msg_type: String,
    #[serde(with = "hex::serde")]
    pub digest: [u8; 32],
    pub len: usize,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, ts: u64, env: &MessageEnvelope) {
        let h = &env.header;
        self.records.push(AuditRecord {
            seq: self.records.len() as u64,
            ts,
            job_id: h.job_id.clone(),
            round: h.round,
            sender: h.sender.clone(),
            recipient: h.recipient.clone(),
            msg_type: h.msg_type.as_str().to_owned(),
            digest: *env.payload_digest(),
            len: env.payload().len(),
            payload: env.payload().to_vec(),
        });
    }

    /// Appends records from another log, renumbering sequence values.
    pub fn extend(&mut self, other: &AuditLog) {
        for r in &other.records {
            let mut r = r.clone();
            r.seq = self.records.len() as u64;
            self.records.push(r);
        }
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    /// Only the records whose sender is `party`, sequence numbers kept.
    pub fn sent_by(&self, party: &PartyId) -> AuditLog {
        AuditLog { records: self.records.iter().filter(|r| &r.sender == party).cloned().collect() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_of(&self, t: MsgType) -> usize {
        self.records.iter().filter(|r| r.msg_type == t.as_str()).count()
    }

    pub fn total_bytes(&self) -> usize {
        self.records.iter().map(|r| r.len).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: &Path) -> Result<Self, TransportError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: AuditRecord = serde_json::from_str(&line)
                .map_err(|e| TransportError::Decode(format!("audit log line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Byte string that must never appear in captured traffic.
#[derive(Clone, Debug)]
pub struct ForbiddenPattern {
    pub label: String,
    pub bytes: Vec<u8>,
}

impl ForbiddenPattern {
    pub fn new(label: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self { label: label.into(), bytes }
    }

    /// Big-endian f64 concatenation, the encoding used for raw vectors.
    pub fn f64_vector(label: impl Into<String>, v: &[f64]) -> Self {
        Self::new(label, v.iter().flat_map(|x| x.to_be_bytes()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakHit {
    pub seq: u64,
    pub msg_type: String,
    pub sender: PartyId,
    pub recipient: PartyId,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakReport {
    pub hits: Vec<LeakHit>,
}

impl fmt::Display for LeakReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} forbidden pattern occurrence(s)", self.hits.len())?;
        for h in &self.hits {
            writeln!(f, "  seq {} {} {} -> {}: {}", h.seq, h.msg_type, h.sender, h.recipient, h.pattern)?;
        }
        Ok(())
    }
}

impl std::error::Error for LeakReport {}

/// Scans every captured payload for any forbidden pattern. Empty patterns are
/// ignored.
pub fn audit_assert_no_leak(log: &AuditLog, forbidden: &[ForbiddenPattern]) -> Result<(), LeakReport> {
    let patterns: Vec<&ForbiddenPattern> = forbidden.iter().filter(|p| !p.bytes.is_empty()).collect();
    if patterns.is_empty() {
        return Ok(());
    }
    let ac = AhoCorasick::new(patterns.iter().map(|p| &p.bytes)).expect("byte patterns always build");
    let mut hits = Vec::new();
    for r in log.records() {
        let mut seen = std::collections::BTreeSet::new();
        for m in ac.find_overlapping_iter(&r.payload) {
            if seen.insert(m.pattern().as_usize()) {
                hits.push(LeakHit {
                    seq: r.seq,
                    msg_type: r.msg_type.clone(),
                    sender: r.sender.clone(),
                    recipient: r.recipient.clone(),
                    pattern: patterns[m.pattern().as_usize()].label.clone(),
                });
            }
        }
    }
    if hits.is_empty() {
        Ok(())
    } else {
        Err(LeakReport { hits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_with(payloads: &[Vec<u8>]) -> AuditLog {
        let mut log = AuditLog::new();
        for (i, p) in payloads.iter().enumerate() {
            let env = MessageEnvelope::new("j", i as u64, "a".into(), "b".into(), MsgType::Control, p.clone());
            log.append(i as u64, &env);
        }
        log
    }

    #[test]
    fn planted_pattern_is_found() {
        let secret = ForbiddenPattern::f64_vector("row 7", &[1.5, -2.25]);
        let mut payload = vec![0xAA; 10];
        payload.extend_from_slice(&secret.bytes);
        payload.extend_from_slice(&[0xBB; 5]);
        let log = log_with(&[vec![1, 2, 3], payload]);
        let report = audit_assert_no_leak(&log, &[secret]).unwrap_err();
        assert_eq!(report.hits.len(), 1);
        assert_eq!(report.hits[0].seq, 1);
        assert_eq!(report.hits[0].pattern, "row 7");
    }

    #[test]
    fn clean_log_passes() {
        let log = log_with(&[vec![1, 2, 3], vec![4, 5, 6]]);
        let p = ForbiddenPattern::new("x", vec![3, 4]);
        assert!(audit_assert_no_leak(&log, &[p]).is_ok());
    }

    #[test]
    fn persisted_log_roundtrips() {
        let log = log_with(&[vec![], vec![0xde, 0xad]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        log.save(&path).unwrap();
        assert_eq!(AuditLog::load(&path).unwrap(), log);
    }
}
