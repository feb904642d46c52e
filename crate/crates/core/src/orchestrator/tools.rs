//! Small operations behind the `keygen`, `psi` and `audit` commands.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::config::ConfigError;
use super::JobError;
use crate::alignment::run_psi_simulated;
use crate::crypto::SafePrimeGroup;
use crate::sandbox::{ingest_csv, Schema};
use crate::transport::{AuditLog, ForbiddenPattern, Identity, PartyId};

/// Writes a fresh channel secret key (hex) and returns the public key (hex).
pub fn write_key_file(path: &Path) -> std::io::Result<String> {
    let id = Identity::generate(&mut rand::rngs::OsRng);
    std::fs::write(path, format!("{}\n", hex::encode(id.secret_bytes())))?;
    Ok(hex::encode(id.public_bytes()))
}

/// One side of a stand-alone PSI run.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiPartyFile {
    pub id: PartyId,
    pub data: PathBuf,
    pub schema: PathBuf,
}

fn load_psi_party(path: &Path) -> Result<(PartyId, Vec<String>), JobError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let f: PsiPartyFile = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let schema = Schema::load(&base.join(&f.schema)).map_err(|source| JobError::Sandbox { party: f.id.clone(), source })?;
    let ds = ingest_csv(&base.join(&f.data), &schema, f.id.clone())
        .map_err(|source| JobError::Sandbox { party: f.id.clone(), source })?;
    Ok((f.id, ds.entity_ids().to_vec()))
}

/// Private intersection of the id columns of two party files. Returns the
/// intersection size and the transcript.
pub fn psi_files(a: &Path, b: &Path, group: &str, seed: u64) -> Result<(usize, AuditLog), JobError> {
    let group = SafePrimeGroup::named(group).map_err(|e| ConfigError(e.to_string()))?;
    let lists = [load_psi_party(a)?, load_psi_party(b)?];
    if lists[0].0 == lists[1].0 {
        return Err(ConfigError(format!("both files name party {}", lists[0].0)).into());
    }
    let (res, log) = run_psi_simulated(&lists, &group, seed)?;
    Ok((res.intersection_size, log))
}

/// Pattern file: one `label=value` per line; `hex:` before the value gives
/// raw bytes. Plain values are taken verbatim. Blank lines and `#`
/// comments are skipped.
pub fn parse_forbidden(text: &str) -> Result<Vec<ForbiddenPattern>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, value) =
            line.split_once('=').ok_or_else(|| ConfigError(format!("pattern line {}: expected label=value", i + 1)))?;
        let bytes = match value.trim_start().strip_prefix("hex:") {
            Some(h) => hex::decode(h.trim()).map_err(|e| ConfigError(format!("pattern line {}: {e}", i + 1)))?,
            None => value.as_bytes().to_vec(),
        };
        if bytes.is_empty() {
            return Err(ConfigError(format!("pattern line {}: empty value", i + 1)));
        }
        out.push(ForbiddenPattern::new(label.trim(), bytes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_file() {
        let p = parse_forbidden("# ids\nalice=cust-001\n\nblob = hex:00ff\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].label.as_str(), p[0].bytes.as_slice()), ("alice", &b"cust-001"[..]));
        assert_eq!((p[1].label.as_str(), p[1].bytes.as_slice()), ("blob", &[0u8, 255][..]));
        assert!(parse_forbidden("no-equals").is_err());
        assert!(parse_forbidden("x=hex:zz").is_err());
        assert!(parse_forbidden("x=").is_err());
    }

    #[test]
    fn key_file_matches_public_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.hex");
        let public = write_key_file(&p).unwrap();
        let secret: [u8; 32] = hex::decode(std::fs::read_to_string(&p).unwrap().trim()).unwrap().try_into().unwrap();
        assert_eq!(hex::encode(Identity::from_secret(secret).public_bytes()), public);
    }
}
