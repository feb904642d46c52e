//! Encrypted inference with a plaintext linear model.
//!
//! Each data party encrypts its feature rows under the provider's key. The
//! arbitrator scores the ciphertexts and returns `E(score)` to the owner. The
//! owner masks each score and has the provider decrypt it, then removes the
//! mask. The arbitrator never sees a plaintext and the provider only sees
//! masked values.

use num_bigint::{BigUint, RandBigInt};
use rand::RngCore;

use super::aggregate::{distribute_key, receive_key};
use super::{EncryptedAggregate, InfoConfig, InfoError, InfoOutcome, InfoRoles, LinearModel, LinearScorer};
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::fixed_point::decode_at_scale;
use crate::crypto::{PaillierKeyPair, PaillierPublicKey, SignedFixedPoint};
use crate::sandbox::PartyDataset;
use crate::transport::{simnet_run, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const ROUND_FEATURES: u64 = 1;
const ROUND_SCORES: u64 = 2;
const ROUND_DECRYPT: u64 = 3;

/// Arbitrator: score every party's encrypted rows and return them.
pub fn score_encrypted_rows(
    mb: &mut Mailbox<'_>,
    roles: &InfoRoles,
    pk: &PaillierPublicKey,
    scorer: &LinearScorer,
) -> Result<usize, InfoError> {
    let mut scored = 0;
    for p in &roles.parties {
        let env = mb.recv_from(p, MsgType::EncStat)?;
        let mut r = PayloadReader::new(env.payload());
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let row = EncryptedAggregate::from_payload(pk, r.bytes()?)?;
            out.push(scorer.score(pk, &row)?.value().clone());
        }
        r.finish()?;
        let mut w = PayloadWriter::new();
        w.u32(scorer.output_scale_bits());
        w.bigs(&out);
        mb.send(p, MsgType::EncStat, ROUND_SCORES, w.finish())?;
        scored += count;
    }
    Ok(scored)
}

/// Data party: encrypt rows, receive encrypted scores, unmask via provider.
pub fn encrypted_inference_party<R: RngCore + ?Sized>(
    mb: &mut Mailbox<'_>,
    roles: &InfoRoles,
    pk: &PaillierPublicKey,
    rows: &[Vec<f64>],
    fp: SignedFixedPoint,
    rng: &mut R,
) -> Result<Vec<f64>, InfoError> {
    let mut w = PayloadWriter::new();
    w.u32(rows.len() as u32);
    for x in rows {
        let agg = EncryptedAggregate::encrypt(pk, x, 1, x.len() as u32, fp, rng)?;
        w.bytes(&agg.to_payload());
    }
    mb.send(&roles.arbitrator, MsgType::EncStat, ROUND_FEATURES, w.finish())?;

    let env = mb.recv_from(&roles.arbitrator, MsgType::EncStat)?;
    let mut r = PayloadReader::new(env.payload());
    let scale = r.u32()?;
    let scores = r.bigs()?;
    r.finish()?;
    if scores.len() != rows.len() {
        return Err(InfoError::Protocol(format!("{} scores for {} rows", scores.len(), rows.len())));
    }
    let n = pk.n();
    let masks: Vec<BigUint> = scores.iter().map(|_| rng.gen_biguint_below(n)).collect();
    let mut masked = Vec::with_capacity(scores.len());
    for (c, m) in scores.into_iter().zip(&masks) {
        masked.push(pk.add_plain(&pk.ciphertext_from_value(c)?, m)?.value().clone());
    }
    let mut w = PayloadWriter::new();
    w.bigs(&masked);
    mb.send(&roles.provider, MsgType::EncStat, ROUND_DECRYPT, w.finish())?;

    let env = mb.recv_from(&roles.provider, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    let plain = r.bigs()?;
    r.finish()?;
    if plain.len() != masks.len() {
        return Err(InfoError::Protocol("provider returned the wrong number of values".into()));
    }
    Ok(plain.iter().zip(&masks).map(|(v, m)| decode_at_scale(&((v + n - m) % n), n, scale)).collect())
}

/// Provider: one masked decryption batch per data party.
pub fn serve_inference_decryptions(mb: &mut Mailbox<'_>, roles: &InfoRoles, kp: &PaillierKeyPair) -> Result<(), InfoError> {
    for p in &roles.parties {
        let env = mb.recv_from(p, MsgType::EncStat)?;
        let mut r = PayloadReader::new(env.payload());
        let cells = r.bigs()?;
        r.finish()?;
        let pk = kp.public_key();
        let plain = cells
            .into_iter()
            .map(|c| kp.private_key().decrypt(&pk.ciphertext_from_value(c)?))
            .collect::<Result<Vec<_>, _>>()?;
        let mut w = PayloadWriter::new();
        w.bigs(&plain);
        mb.send(p, MsgType::Control, ROUND_DECRYPT, w.finish())?;
    }
    Ok(())
}

/// Simulated encrypted scoring of every row of every dataset. Each dataset
/// must carry the model's feature columns. Scores come back per party, in
/// row order.
pub fn encrypted_inference(
    datasets: &[PartyDataset],
    model: &LinearModel,
    cfg: &InfoConfig,
) -> Result<InfoOutcome<Vec<(PartyId, Vec<f64>)>>, InfoError> {
    let roles = cfg.roles.clone().unwrap_or_else(|| InfoRoles::standard(datasets.iter().map(|d| d.party_id.clone()).collect()));
    roles.validate()?;
    if roles.parties.contains(&roles.provider) {
        return Err(InfoError::Roles("the provider cannot score its own rows: it would see unmasked values".into()));
    }
    let names: Vec<&str> = model.feature_names.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(datasets.len());
    for ds in datasets {
        rows.push((ds.party_id.clone(), ds.select_columns(&names)?.rows()));
    }
    let fp = SignedFixedPoint::new(cfg.scale_bits);
    let scorer = LinearScorer::new(model, cfg.scale_bits, cfg.scale_bits);
    let kp = cfg.keypair()?;
    let (roles_ref, kp_ref, scorer_ref) = (&roles, &kp, &scorer);
    let programs: Vec<PartyProgram<'_, Result<Option<Vec<f64>>, InfoError>>> = roles
        .everyone()
        .into_iter()
        .map(|me| {
            let local = rows.iter().find(|r| r.0 == me).map(|r| r.1.as_slice());
            let seed = cfg.seed;
            PartyProgram::new(me.clone(), move |ep| {
                let mut rng = party_rng(seed, &me, "info-inference");
                let mut mb = Mailbox::new(ep, "info-inference", None);
                let out = (|| {
                    if me == roles_ref.provider {
                        distribute_key(&mut mb, roles_ref, kp_ref)?;
                        serve_inference_decryptions(&mut mb, roles_ref, kp_ref)?;
                        return Ok(None);
                    }
                    let pk = receive_key(&mut mb, roles_ref)?;
                    if me == roles_ref.arbitrator {
                        score_encrypted_rows(&mut mb, roles_ref, &pk, scorer_ref)?;
                        return Ok(None);
                    }
                    let x = local.ok_or_else(|| InfoError::Roles(format!("{me} has no rows")))?;
                    encrypted_inference_party(&mut mb, roles_ref, &pk, x, fp, &mut rng).map(Some)
                })();
                if let Err(e) = &out {
                    mb.abort(&roles_ref.everyone(), &e.to_string());
                }
                out
            })
        })
        .collect();
    let out = simnet_run(programs, SimConfig::new(cfg.seed))?;
    let mut scores = Vec::new();
    for (p, r) in out.outputs {
        if let Some(v) = r? {
            scores.push((p, v));
        }
    }
    Ok(InfoOutcome { value: scores, transcript: out.transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{audit_assert_no_leak, ForbiddenPattern};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encrypted_scores_match_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let model = LinearModel { feature_names: vec!["a".into(), "b".into()], weights: vec![0.75, -1.5], bias: 0.25 };
        let mut datasets = Vec::new();
        for p in ["p1", "p2"] {
            let n = 12;
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let extra: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ids = (0..n).map(|i| format!("{p}-{i}")).collect();
            datasets.push(
                PartyDataset::from_parts(p, ids, vec![("extra".into(), extra), ("b".into(), b), ("a".into(), a)], None).unwrap(),
            );
        }
        let out = encrypted_inference(&datasets, &model, &InfoConfig::new(512, 3)).unwrap();
        assert_eq!(out.value.len(), 2);
        for (ds, (p, scores)) in datasets.iter().zip(&out.value) {
            assert_eq!(&ds.party_id, p);
            let (a, b) = (ds.column("a").unwrap(), ds.column("b").unwrap());
            for i in 0..ds.n_rows() {
                assert!((scores[i] - model.predict(&[a[i], b[i]])).abs() < 1e-8);
            }
            let pats = [ForbiddenPattern::f64_vector("a", &a[..3])];
            audit_assert_no_leak(&out.transcript, &pats).unwrap();
        }
    }

    #[test]
    fn provider_cannot_hold_rows() {
        let ds = PartyDataset::from_parts("p", vec!["x".into()], vec![("a".into(), vec![1.0])], None).unwrap();
        let model = LinearModel { feature_names: vec!["a".into()], weights: vec![1.0], bias: 0.0 };
        let cfg = InfoConfig {
            roles: Some(InfoRoles { parties: vec![PartyId::new("p")], arbitrator: PartyId::new("arb"), provider: PartyId::new("p") }),
            ..InfoConfig::new(256, 1)
        };
        assert!(matches!(encrypted_inference(&[ds], &model, &cfg), Err(InfoError::Roles(_))));
    }
}
