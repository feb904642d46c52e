//! Gradient aggregation for a feature-only party without revealing labels.
//!
//! Party A holds binary labels and a Paillier key; party B holds features.
//! For each sample B forms both gradient candidates `g⁰ᵢ` (as if `yᵢ = 0`)
//! and `g¹ᵢ` (as if `yᵢ = 1`) and sends them under per-sample additive masks
//!
//! ```text
//! c⁰ᵢ = g⁰ᵢ + mᵢ        c¹ᵢ = g¹ᵢ + mᵢ + δᵢ      (mod n)
//! ```
//!
//! The extra `δᵢ` keeps `c¹ᵢ − c⁰ᵢ` from exposing `g¹ᵢ − g⁰ᵢ`, which for
//! logistic loss is B's raw feature vector. A picks `c^{yᵢ}ᵢ` and sums them
//! to `S = Σ g^{yᵢ}ᵢ + Σ mᵢ + Σ yᵢδᵢ`. B cannot remove `Σ yᵢδᵢ` without the
//! labels, so it also sends `E_A(Σ mᵢ + Σ yᵢδᵢ + ρ)` computed from A's
//! encrypted labels. A decrypts it to `T` and returns `S − T`; B adds `ρ`.
//!
//! A sees candidates hidden by 120-bit masks and a `ρ`-masked sum. B sees
//! only ciphertexts under A's key and the final aggregate. Honest-but-curious
//! parties only.

use num_bigint::{BigUint, RandBigInt};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::ModelError;
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::fixed_point::decode_at_scale;
use crate::crypto::paillier::MIN_SECURE_BITS;
use crate::crypto::{Ciphertext, PaillierKeyPair, PaillierPublicKey, SignedFixedPoint};
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

/// Fractional bits of candidate encodings.
pub const CANDIDATE_SCALE_BITS: u32 = 48;
const MASK_BITS: u64 = 120;

pub(crate) fn keypair(bits: u64, seed: u64) -> Result<PaillierKeyPair, ModelError> {
    Ok(if bits < MIN_SECURE_BITS { PaillierKeyPair::generate_toy(bits, seed)? } else { PaillierKeyPair::generate(bits, seed)? })
}

/// What party B holds after setup: A's public key and A's encrypted labels,
/// one per aligned training row.
#[derive(Clone, Debug)]
pub struct LabelTransferKeys {
    pub public_key: PaillierPublicKey,
    pub encrypted_labels: Vec<Ciphertext>,
}

/// A's side of setup: publish the key and `E_A(yᵢ)` for every row.
pub fn label_transfer_setup_label_side(
    mb: &mut Mailbox<'_>,
    feature_party: &PartyId,
    labels: &[u8],
    keys: &PaillierKeyPair,
    rng: &mut ChaCha20Rng,
) -> Result<(), ModelError> {
    let pk = keys.public_key();
    let mut cts = Vec::with_capacity(labels.len());
    for &y in labels {
        if y > 1 {
            return Err(ModelError::Config(format!("label transfer needs binary labels, found {y}")));
        }
        cts.push(keys.private_key().encrypt(&BigUint::from(y), rng)?.value().clone());
    }
    let mut w = PayloadWriter::new();
    w.biguint(pk.n()).bigs(&cts);
    mb.send(feature_party, MsgType::EncStat, 0, w.finish())?;
    Ok(())
}

pub fn label_transfer_setup_feature_side(mb: &mut Mailbox<'_>, label_party: &PartyId) -> Result<LabelTransferKeys, ModelError> {
    let env = mb.recv_from(label_party, MsgType::EncStat)?;
    let mut r = PayloadReader::new(env.payload());
    let public_key = PaillierPublicKey::from_modulus(r.biguint()?)?;
    let raw = r.bigs()?;
    r.finish()?;
    let encrypted_labels = raw.into_iter().map(|v| public_key.ciphertext_from_value(v)).collect::<Result<_, _>>()?;
    Ok(LabelTransferKeys { public_key, encrypted_labels })
}

/// B's side of one aggregation. `rows` index the setup label order;
/// `cand0[k]`/`cand1[k]` are the candidates for `rows[k]`. Returns
/// `Σₖ g^{y_rows[k]}ₖ`.
#[allow(clippy::too_many_arguments)]
pub fn label_transfer_feature_side(
    mb: &mut Mailbox<'_>,
    label_party: &PartyId,
    keys: &LabelTransferKeys,
    round: u64,
    rows: &[usize],
    cand0: &[Vec<f64>],
    cand1: &[Vec<f64>],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, ModelError> {
    if cand0.len() != rows.len() || cand1.len() != rows.len() {
        return Err(ModelError::Protocol(format!(
            "{} rows but {}/{} candidates",
            rows.len(),
            cand0.len(),
            cand1.len()
        )));
    }
    let dim = cand0.first().map_or(0, Vec::len);
    if cand0.iter().chain(cand1).any(|c| c.len() != dim) {
        return Err(ModelError::Protocol("candidate vectors differ in length".into()));
    }
    let pk = &keys.public_key;
    let n = pk.n();
    let fp = SignedFixedPoint::new(CANDIDATE_SCALE_BITS);
    // the selected sum must decode without wrapping
    let bound = cand0.iter().chain(cand1).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let headroom = (pk.bits() as i32 - 2 - CANDIDATE_SCALE_BITS as i32) as f64;
    if !(bound * rows.len().max(1) as f64 <= headroom.exp2()) {
        return Err(ModelError::Range(format!("candidate magnitude {bound} too large for a {}-bit key", pk.bits())));
    }
    let mut enc_labels = Vec::with_capacity(rows.len());
    for &i in rows {
        enc_labels.push(
            keys.encrypted_labels
                .get(i)
                .cloned()
                .ok_or_else(|| ModelError::Protocol(format!("row {i} has no encrypted label")))?,
        );
    }

    let mut c0 = Vec::with_capacity(rows.len() * dim);
    let mut c1 = Vec::with_capacity(rows.len() * dim);
    let mut mask_sums = vec![BigUint::from(0u32); dim];
    let mut deltas = vec![Vec::with_capacity(rows.len()); dim];
    for (g0, g1) in cand0.iter().zip(cand1) {
        for j in 0..dim {
            let m = rng.gen_biguint(MASK_BITS);
            let d: u128 = rng.gen::<u128>() >> (128 - MASK_BITS);
            let e0 = fp.encode(g0[j], n)?;
            let e1 = fp.encode(g1[j], n)?;
            c0.push((e0 + &m) % n);
            c1.push((e1 + &m + d) % n);
            mask_sums[j] += m;
            deltas[j].push(d as i128);
        }
    }
    let mut rhos = Vec::with_capacity(dim);
    let mut masked_terms = Vec::with_capacity(dim);
    for j in 0..dim {
        let rho = rng.gen_biguint_below(n);
        let lin = pk.linear_combination(&enc_labels, &deltas[j])?;
        // a fresh encryption re-randomizes the combination of A's ciphertexts
        let fresh = pk.encrypt(&((&mask_sums[j] + &rho) % n), rng)?;
        masked_terms.push(pk.add(&lin, &fresh)?.value().clone());
        rhos.push(rho);
    }
    let mut w = PayloadWriter::new();
    w.u32(rows.len() as u32).u32(dim as u32).bigs(&c0).bigs(&c1).bigs(&masked_terms);
    mb.send(label_party, MsgType::GradientCandidates, round, w.finish())?;

    let env = mb.recv_from(label_party, MsgType::GradientSelected)?;
    if env.round() != round {
        return Err(ModelError::Protocol(format!("selection for round {} while in round {round}", env.round())));
    }
    let mut r = PayloadReader::new(env.payload());
    let selected = r.bigs()?;
    r.finish()?;
    if selected.len() != dim {
        return Err(ModelError::Protocol(format!("{} selected sums for {dim} features", selected.len())));
    }
    Ok(selected
        .iter()
        .zip(&rhos)
        .map(|(d, rho)| decode_at_scale(&((d + rho) % n), n, CANDIDATE_SCALE_BITS))
        .collect())
}

/// A's side of one aggregation over `labels[rows]`.
pub fn label_transfer_label_side(
    mb: &mut Mailbox<'_>,
    feature_party: &PartyId,
    keys: &PaillierKeyPair,
    labels: &[u8],
    round: u64,
    rows: &[usize],
) -> Result<(), ModelError> {
    let env = mb.recv_from(feature_party, MsgType::GradientCandidates)?;
    if env.round() != round {
        return Err(ModelError::Protocol(format!("candidates for round {} while in round {round}", env.round())));
    }
    let mut r = PayloadReader::new(env.payload());
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let c0 = r.bigs()?;
    let c1 = r.bigs()?;
    let terms = r.bigs()?;
    r.finish()?;
    if count != rows.len() {
        return Err(ModelError::Protocol(format!("{count} gradient candidates for {} aligned samples", rows.len())));
    }
    if c0.len() != count * dim || c1.len() != count * dim || terms.len() != dim {
        return Err(ModelError::Protocol("malformed candidate payload".into()));
    }
    let pk = keys.public_key();
    let n = pk.n();
    let mut out = Vec::with_capacity(dim);
    for (j, term) in terms.into_iter().enumerate() {
        let mut s = BigUint::from(0u32);
        for (k, &i) in rows.iter().enumerate() {
            let y = *labels.get(i).ok_or_else(|| ModelError::Protocol(format!("row {i} out of range")))?;
            let pick = if y == 1 { &c1[k * dim + j] } else { &c0[k * dim + j] };
            s += pick;
        }
        let t = keys.private_key().decrypt(&pk.ciphertext_from_value(term)?)?;
        out.push((s % n + n - t) % n);
    }
    let mut w = PayloadWriter::new();
    w.bigs(&out);
    mb.send(feature_party, MsgType::GradientSelected, round, w.finish())?;
    Ok(())
}

#[derive(Debug)]
pub struct LabelTransferOutcome {
    pub aggregate: Vec<f64>,
    pub transcript: AuditLog,
}

/// Two-party simulation of setup plus one aggregation over all rows.
pub fn secure_label_transfer(
    cand0: &[Vec<f64>],
    cand1: &[Vec<f64>],
    labels: &[u8],
    key_bits: u64,
    seed: u64,
) -> Result<LabelTransferOutcome, ModelError> {
    let a = PartyId::new("party_a");
    let b = PartyId::new("party_b");
    let rows: Vec<usize> = (0..labels.len()).collect();
    let keys = keypair(key_bits, seed)?;
    let (a_ref, b_ref, rows_ref, keys_ref) = (&a, &b, &rows, &keys);
    let programs: Vec<PartyProgram<'_, Result<Vec<f64>, ModelError>>> = vec![
        PartyProgram::new(a.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "label-transfer", None);
            let mut rng = party_rng(seed, a_ref, "label-transfer");
            let r = label_transfer_setup_label_side(&mut mb, b_ref, labels, keys_ref, &mut rng)
                .and_then(|_| label_transfer_label_side(&mut mb, b_ref, keys_ref, labels, 1, rows_ref));
            if let Err(e) = &r {
                mb.abort(&[b_ref.clone()], &e.to_string());
            }
            r.map(|_| Vec::new())
        }),
        PartyProgram::new(b.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "label-transfer", None);
            let mut rng = party_rng(seed, b_ref, "label-transfer");
            let r = label_transfer_setup_feature_side(&mut mb, a_ref)
                .and_then(|k| label_transfer_feature_side(&mut mb, a_ref, &k, 1, rows_ref, cand0, cand1, &mut rng));
            if let Err(e) = &r {
                mb.abort(&[a_ref.clone()], &e.to_string());
            }
            r
        }),
    ];
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let transcript = out.transcript;
    let outputs = super::collect_outputs(out.outputs)?;
    let aggregate = outputs.into_iter().find(|(p, _)| *p == b).map(|(_, v)| v).expect("feature party output");
    Ok(LabelTransferOutcome { aggregate, transcript })
}
