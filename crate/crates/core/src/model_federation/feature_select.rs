//! Correlation-threshold feature selection across a vertical split.
//!
//! The label holder scores its own columns locally. A feature-only party
//! scores against labels it never sees: it forms `E(Σ (xᵢ − x̄) yᵢ)` from the
//! encrypted labels published for label transfer, masks it, and has the label
//! holder decrypt the masked value. The label holder also discloses the label
//! sum of squares `Σ (yᵢ − ȳ)²`, a single aggregate.

use num_bigint::RandBigInt;
use rand_chacha::ChaCha20Rng;

use super::label_transfer::{keypair, label_transfer_setup_feature_side, label_transfer_setup_label_side};
use super::{LabelTransferKeys, ModelError};
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::fixed_point::decode_at_scale;
use crate::crypto::{PaillierKeyPair, SignedFixedPoint};
use crate::sandbox::PartyDataset;
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const SCALE_BITS: u32 = 32;

/// Pearson correlation; zero when either side is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelection {
    pub party: PartyId,
    /// Every scored column with its correlation to the label, dataset order.
    pub correlations: Vec<(String, f64)>,
    /// Columns with `|corr| ≥ threshold`, dataset order.
    pub kept: Vec<String>,
}

impl FeatureSelection {
    fn from_scores(party: PartyId, correlations: Vec<(String, f64)>, threshold: f64) -> Self {
        let kept = correlations.iter().filter(|(_, c)| c.abs() >= threshold).map(|(n, _)| n.clone()).collect();
        Self { party, correlations, kept }
    }
}

/// Label holder's local scoring.
pub fn select_features_local(ds: &PartyDataset, threshold: f64) -> Result<FeatureSelection, ModelError> {
    let y: Vec<f64> = ds
        .labels()
        .ok_or_else(|| ModelError::Config(format!("{} holds no labels", ds.party_id)))?
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut scores = Vec::new();
    for (name, col) in ds.columns() {
        scores.push((name.clone(), correlation(col, &y)));
    }
    Ok(FeatureSelection::from_scores(ds.party_id.clone(), scores, threshold))
}

/// Label holder answers one masked decryption request (after setup).
pub fn feature_select_label_side(
    mb: &mut Mailbox<'_>,
    feature_party: &PartyId,
    keys: &PaillierKeyPair,
    labels: &[u8],
) -> Result<(), ModelError> {
    let env = mb.recv_from(feature_party, MsgType::EncStat)?;
    let mut r = PayloadReader::new(env.payload());
    let cts = r.bigs()?;
    r.finish()?;
    let pk = keys.public_key();
    let mut plain = Vec::with_capacity(cts.len());
    for c in cts {
        plain.push(keys.private_key().decrypt(&pk.ciphertext_from_value(c)?)?);
    }
    let mean = labels.iter().map(|&v| v as f64).sum::<f64>() / labels.len().max(1) as f64;
    let syy: f64 = labels.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
    let mut w = PayloadWriter::new();
    w.bigs(&plain).f64(syy);
    mb.send(feature_party, MsgType::Control, env.round(), w.finish())?;
    Ok(())
}

/// Feature party scores its columns against the encrypted labels.
pub fn feature_select_feature_side(
    mb: &mut Mailbox<'_>,
    label_party: &PartyId,
    keys: &LabelTransferKeys,
    ds: &PartyDataset,
    threshold: f64,
    rng: &mut ChaCha20Rng,
) -> Result<FeatureSelection, ModelError> {
    if keys.encrypted_labels.len() != ds.n_rows() {
        return Err(ModelError::Consistency(format!(
            "{} encrypted labels for {} aligned rows",
            keys.encrypted_labels.len(),
            ds.n_rows()
        )));
    }
    let pk = &keys.public_key;
    let n = pk.n();
    let fp = SignedFixedPoint::new(SCALE_BITS);
    let names: Vec<String> = ds.feature_names().into_iter().map(String::from).collect();
    let mut masked = Vec::with_capacity(names.len());
    let mut masks = Vec::with_capacity(names.len());
    let mut sxx = Vec::with_capacity(names.len());
    for (_, col) in ds.columns() {
        let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
        let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
        sxx.push(centered.iter().map(|v| v * v).sum::<f64>());
        let coeffs = centered.iter().map(|&v| fp.to_integer(v)).collect::<Result<Vec<_>, _>>()?;
        let cov = pk.linear_combination(&keys.encrypted_labels, &coeffs)?;
        let r = rng.gen_biguint_below(n);
        masked.push(pk.add(&cov, &pk.encrypt(&r, rng)?)?.value().clone());
        masks.push(r);
    }
    let mut w = PayloadWriter::new();
    w.bigs(&masked);
    mb.send(label_party, MsgType::EncStat, 1, w.finish())?;

    let env = mb.recv_from(label_party, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    let plain = r.bigs()?;
    let syy = r.f64()?;
    r.finish()?;
    if plain.len() != names.len() {
        return Err(ModelError::Protocol(format!("{} decryptions for {} columns", plain.len(), names.len())));
    }
    let mut scores = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let cov = decode_at_scale(&((&plain[k] + n - &masks[k]) % n), n, SCALE_BITS);
        let denom = (sxx[k] * syy).sqrt();
        scores.push((name, if denom > 0.0 { cov / denom } else { 0.0 }));
    }
    Ok(FeatureSelection::from_scores(ds.party_id.clone(), scores, threshold))
}

#[derive(Debug)]
pub struct VerticalSelection {
    pub label_side: FeatureSelection,
    pub feature_side: FeatureSelection,
    pub transcript: AuditLog,
}

/// Two-party simulation. `label_ds` must carry labels; both datasets aligned.
pub fn select_features_vertical(
    label_ds: &PartyDataset,
    feature_ds: &PartyDataset,
    threshold: f64,
    key_bits: u64,
    seed: u64,
) -> Result<VerticalSelection, ModelError> {
    let labels = label_ds.labels().ok_or_else(|| ModelError::Config(format!("{} holds no labels", label_ds.party_id)))?;
    if label_ds.n_rows() != feature_ds.n_rows() {
        return Err(ModelError::Consistency("datasets are not aligned".into()));
    }
    let label_side = select_features_local(label_ds, threshold)?;
    let keys = keypair(key_bits, seed)?;
    let a = label_ds.party_id.clone();
    let b = feature_ds.party_id.clone();
    let (a_ref, b_ref, keys_ref) = (&a, &b, &keys);
    let programs: Vec<PartyProgram<'_, Result<Option<FeatureSelection>, ModelError>>> = vec![
        PartyProgram::new(a.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "feature-select", None);
            let mut rng = party_rng(seed, a_ref, "feature-select");
            let r = label_transfer_setup_label_side(&mut mb, b_ref, labels, keys_ref, &mut rng)
                .and_then(|_| feature_select_label_side(&mut mb, b_ref, keys_ref, labels));
            if let Err(e) = &r {
                mb.abort(&[b_ref.clone()], &e.to_string());
            }
            r.map(|_| None)
        }),
        PartyProgram::new(b.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "feature-select", None);
            let mut rng = party_rng(seed, b_ref, "feature-select");
            let r = label_transfer_setup_feature_side(&mut mb, a_ref)
                .and_then(|k| feature_select_feature_side(&mut mb, a_ref, &k, feature_ds, threshold, &mut rng));
            if let Err(e) = &r {
                mb.abort(&[a_ref.clone()], &e.to_string());
            }
            r.map(Some)
        }),
    ];
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let transcript = out.transcript;
    let feature_side = super::collect_outputs(out.outputs)?
        .into_iter()
        .find_map(|(_, s)| s)
        .expect("feature party output");
    Ok(VerticalSelection { label_side, feature_side, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn correlation_basics() {
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn encrypted_scores_match_plain_correlation() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 150;
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let strong: Vec<f64> = y.iter().map(|&v| v as f64 * 2.0 + rng.gen_range(-0.5..0.5)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let own: Vec<f64> = y.iter().map(|&v| v as f64 + rng.gen_range(-2.0..2.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let a = PartyDataset::from_parts("bank", ids.clone(), vec![("own".into(), own.clone())], Some(y.clone())).unwrap();
        let b = PartyDataset::from_parts("telco", ids, vec![("strong".into(), strong.clone()), ("noise".into(), noise.clone())], None)
            .unwrap();
        let sel = select_features_vertical(&a, &b, 0.3, 256, 9).unwrap();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        for ((name, got), col) in sel.feature_side.correlations.iter().zip([&strong, &noise]) {
            assert!((got - correlation(col, &yf)).abs() < 1e-6, "{name}");
        }
        assert_eq!(sel.feature_side.kept, vec!["strong".to_string()]);
        assert!((sel.label_side.correlations[0].1 - correlation(&own, &yf)).abs() < 1e-12);
        let pats = [crate::transport::ForbiddenPattern::new("labels", y[..16].to_vec())];
        crate::transport::audit_assert_no_leak(&sel.transcript.sent_by(&PartyId::new("bank")), &pats).unwrap();
    }
}
