//! Information-level federation: statistics, lookups, linear inference and
//! ridge regression computed over Paillier ciphertexts.
//!
//! The scheme is additive only, so the scope stops at what sums and
//! plaintext-scalar products can express. Nonlinear models over ciphertexts
//! are out of reach here.
//!
//! Aggregation roles:
//!
//! * data parties encrypt local partial results under the crypto provider's
//!   key and send them (`ENC_STAT`) to the arbitrator;
//! * the arbitrator adds the ciphertexts, adds a uniformly random mask
//!   `r mod n` and forwards the masked total to the provider;
//! * the provider decrypts `total + r` and returns it;
//! * the arbitrator removes `r` and broadcasts the result.
//!
//! The arbitrator never holds the key and the provider only sees masked values.

mod aggregate;
mod inference;
mod lookup;
mod ridge;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{
    aggregate_and_reveal, contribute, distribute_key, info_participant, receive_key, receive_result,
    run_secure_aggregate, serve_decryption, EncryptedAggregate, InfoConfig, InfoOutcome, InfoRoles,
};
pub use inference::{encrypted_inference, encrypted_inference_party, score_encrypted_rows, serve_inference_decryptions};
pub use lookup::{lookup_owner, lookup_querier, lookup_token, run_lookup_simulated, LookupIndex};
pub use ridge::{local_ridge_stats, ridge_fit_encrypted, ridge_solve, LinearScorer, LinearModel};

use crate::crypto::CryptoError;
use crate::sandbox::{PartyDataset, SandboxError};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum InfoError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("fixed-point range exceeded: {0}")]
    Range(String),
    #[error("encoding mismatch: {0}")]
    Encoding(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("role error: {0}")]
    Roles(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
}

impl Cmp {
    pub fn eval(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Eq => lhs == rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "=",
        }
    }
}

impl FromStr for Cmp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            ">" => Cmp::Gt,
            ">=" => Cmp::Ge,
            "<" => Cmp::Lt,
            "<=" => Cmp::Le,
            "=" | "==" => Cmp::Eq,
            _ => return Err(format!("unknown comparison {s:?}")),
        })
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// `column cmp value`, evaluated row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnPredicate {
    pub column: String,
    pub cmp: Cmp,
    pub value: f64,
}

impl ColumnPredicate {
    pub fn count_in(&self, ds: &PartyDataset) -> Result<usize, InfoError> {
        let col = ds
            .column(&self.column)
            .ok_or_else(|| SandboxError::Schema(format!("no column {:?}", self.column)))?;
        Ok(col.iter().filter(|&&v| self.cmp.eval(v, self.value)).count())
    }
}

fn column_bound(ds: &PartyDataset, column: &str) -> Result<f64, InfoError> {
    ds.column(column).ok_or_else(|| SandboxError::Schema(format!("no column {column:?}")))?;
    ds.magnitude_bound(column)
        .ok_or_else(|| InfoError::Range(format!("column {column:?} of {} has no declared bounds", ds.party_id)))
}

fn local_sum(ds: &PartyDataset, column: &str) -> Result<(f64, f64), InfoError> {
    let bound = column_bound(ds, column)?;
    let col = ds.column(column).expect("checked");
    Ok((col.iter().sum(), bound * col.len() as f64))
}

/// Sum of `column` over every party's rows.
pub fn secure_sum(datasets: &[PartyDataset], column: &str, cfg: &InfoConfig) -> Result<InfoOutcome<f64>, InfoError> {
    let mut contribs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let (s, b) = local_sum(ds, column)?;
        contribs.push((ds.party_id.clone(), vec![s], vec![b]));
    }
    let out = run_secure_aggregate(&contribs, cfg)?;
    Ok(out.map(|v| v[0]))
}

/// Mean of `column` over the union of rows; sum and count travel together.
pub fn secure_mean(datasets: &[PartyDataset], column: &str, cfg: &InfoConfig) -> Result<InfoOutcome<f64>, InfoError> {
    let mut contribs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let (s, b) = local_sum(ds, column)?;
        let n = ds.n_rows() as f64;
        contribs.push((ds.party_id.clone(), vec![s, n], vec![b, n]));
    }
    let out = run_secure_aggregate(&contribs, cfg)?;
    let count = out.value[1].round();
    if count == 0.0 {
        return Err(InfoError::Range("mean over zero rows".into()));
    }
    Ok(out.map(|v| v[0] / count))
}

/// Number of rows satisfying `predicate` across parties.
pub fn secure_count(
    datasets: &[PartyDataset],
    predicate: &ColumnPredicate,
    cfg: &InfoConfig,
) -> Result<InfoOutcome<u64>, InfoError> {
    let mut contribs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let c = predicate.count_in(ds)? as f64;
        contribs.push((ds.party_id.clone(), vec![c], vec![ds.n_rows() as f64]));
    }
    let out = run_secure_aggregate(&contribs, cfg)?;
    Ok(out.map(|v| v[0].round() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ds(party: &str, values: Vec<f64>, bound: f64) -> PartyDataset {
        let ids = (0..values.len()).map(|i| format!("{party}-{i}")).collect();
        PartyDataset::from_parts(party, ids, vec![("x".into(), values)], None)
            .unwrap()
            .with_bounds("x", -bound, bound)
            .unwrap()
    }

    fn cfg(seed: u64) -> InfoConfig {
        InfoConfig::new(512, seed)
    }

    #[test]
    fn two_small_sums() {
        let parts = [ds("a", vec![2.0], 10.0), ds("b", vec![1.0, 2.0], 10.0)];
        let out = secure_sum(&parts, "x", &cfg(1)).unwrap();
        assert_eq!(out.value, 5.0);
    }

    #[test]
    fn single_party_sum_is_local_sum() {
        let parts = [ds("a", vec![1.25, -0.5, 3.0], 10.0)];
        assert_eq!(secure_sum(&parts, "x", &cfg(2)).unwrap().value, 3.75);
    }

    #[test]
    fn five_parties_thousand_values_match_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let parts: Vec<PartyDataset> = (0..5)
            .map(|p| ds(&format!("p{p}"), (0..1000).map(|_| rng.gen_range(-100.0..100.0)).collect(), 100.0))
            .collect();
        let central: f64 = parts.iter().map(|d| d.column("x").unwrap().iter().sum::<f64>()).sum();
        let out = secure_sum(&parts, "x", &cfg(4)).unwrap();
        assert!((out.value - central).abs() <= central.abs() * 2f64.powi(-20) + 1e-6, "{} vs {central}", out.value);
        let mean = secure_mean(&parts, "x", &cfg(5)).unwrap().value;
        assert!((mean - central / 5000.0).abs() < 1e-9);
    }

    #[test]
    fn count_with_predicate() {
        let parts = [ds("a", vec![1.0, 5.0, 7.0], 10.0), ds("b", vec![6.0, 0.0], 10.0)];
        let pred = ColumnPredicate { column: "x".into(), cmp: Cmp::Gt, value: 4.5 };
        assert_eq!(secure_count(&parts, &pred, &cfg(6)).unwrap().value, 3);
    }

    #[test]
    fn undeclared_bounds_are_rejected() {
        let d = PartyDataset::from_parts("a", vec!["e".into()], vec![("x".into(), vec![1.0])], None).unwrap();
        assert!(matches!(secure_sum(&[d], "x", &cfg(7)), Err(InfoError::Range(_))));
    }

    #[test]
    fn overflow_is_detected_before_encryption() {
        // 2^40 with 32 fractional bits needs 73 bits; a 64-bit toy modulus is too small
        let parts = [ds("a", vec![1.0], 2f64.powi(40))];
        let mut c = cfg(8);
        c.key_bits = 64;
        assert!(matches!(secure_sum(&parts, "x", &c), Err(InfoError::Range(_))));
    }

    #[test]
    fn enc_stat_traffic_hides_partial_sums() {
        use crate::transport::{audit_assert_no_leak, ForbiddenPattern};
        let parts = [ds("a", vec![123.456], 1000.0), ds("b", vec![654.321], 1000.0)];
        let out = secure_sum(&parts, "x", &cfg(9)).unwrap();
        let fp = crate::crypto::SignedFixedPoint::default();
        let forbidden: Vec<ForbiddenPattern> = [123.456, 654.321]
            .iter()
            .flat_map(|v: &f64| {
                let enc = num_bigint::BigUint::from(fp.to_integer(*v).unwrap() as u128);
                [
                    ForbiddenPattern::f64_vector(format!("{v} f64"), &[*v]),
                    ForbiddenPattern::new(format!("{v} fixed"), enc.to_bytes_be()),
                ]
            })
            .collect();
        audit_assert_no_leak(&out.transcript, &forbidden).unwrap();
    }
}
