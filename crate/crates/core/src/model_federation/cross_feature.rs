//! Vertical logistic regression between a label holder A and a
//! feature-only party B, optionally with a crypto provider C.
//!
//! Weights split as `w = (w_A, w_B)`, A also owns the bias. Per batch both
//! parties compute partial logits `z_P = w_P·x_P`; the residual
//! `dᵢ = σ(zᵢ) − yᵢ` (or its Taylor form) drives both gradients. The
//! protocols differ in how B obtains `Σ dᵢ x_Bᵢ`:
//!
//! * plaintext: A returns `d` in the clear;
//! * he_taylor: B sends `E_C(z_B)`, A returns `E_C(4d)` (linear in `z_B`),
//!   both parties reduce against their features and let C decrypt masked sums;
//! * label_transfer: A returns `z_A`, B sends masked candidates for both
//!   labels and A selects (see `label_transfer`).
//!
//! All parties replay the same batch order from the job seed. After every
//! round B sends its partial logits for the evaluation rows so A can score
//! the joint model (cooperative inference).

use num_bigint::{BigUint, RandBigInt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::label_transfer::{
    keypair, label_transfer_feature_side, label_transfer_label_side, label_transfer_setup_feature_side,
    label_transfer_setup_label_side,
};
use super::{auc, collect_outputs, sigmoid, softplus_loss, ModelError, RoundMetrics};
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::fixed_point::decode_at_scale;
use crate::crypto::{Ciphertext, PaillierPublicKey, SignedFixedPoint};
use crate::sandbox::PartyDataset;
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const HE_SCALE_BITS: u32 = 32;
/// Rounds at or above this offset carry evaluation traffic.
const EVAL_ROUND_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalProtocol {
    Plaintext,
    HeTaylor,
    LabelTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFeatureConfig {
    pub rounds: u64,
    /// 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    pub seed: u64,
    pub protocol: VerticalProtocol,
    #[serde(default)]
    pub taylor_sigmoid: bool,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
}

fn default_key_bits() -> u64 {
    1024
}

impl CrossFeatureConfig {
    pub fn new(rounds: u64, learning_rate: f64, seed: u64) -> Self {
        Self {
            rounds,
            batch_size: 0,
            learning_rate,
            l2: 0.0,
            seed,
            protocol: VerticalProtocol::Plaintext,
            taylor_sigmoid: false,
            key_bits: default_key_bits(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rounds == 0 {
            return Err(ModelError::Config("rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ModelError::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if self.protocol == VerticalProtocol::HeTaylor {
            if !self.taylor_sigmoid {
                return Err(ModelError::Config(
                    "he_taylor needs taylor_sigmoid = true: only the linear residual can be formed under encryption".into(),
                ));
            }
            // two fixed-point scales plus room for sums and the mask
            if self.key_bits < 2 * HE_SCALE_BITS as u64 + 64 {
                return Err(ModelError::Config(format!("he_taylor needs keys of at least {} bits", 2 * HE_SCALE_BITS + 64)));
            }
        }
        if self.protocol == VerticalProtocol::LabelTransfer && self.key_bits < 128 {
            return Err(ModelError::Config("label_transfer needs keys of at least 128 bits".into()));
        }
        Ok(())
    }

    fn provider(&self) -> bool {
        self.protocol == VerticalProtocol::HeTaylor
    }
}

/// First-order residual `σ(z) − y ≈ ½ + z/4 − y`.
pub fn taylor_residual(z: f64, y: f64) -> f64 {
    0.5 + 0.25 * z - y
}

fn residual(z: f64, y: f64, taylor: bool) -> f64 {
    if taylor {
        taylor_residual(z, y)
    } else {
        sigmoid(z) - y
    }
}

/// The joint model; each half stays with its owner outside simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalModel {
    pub label_party: PartyId,
    pub feature_party: PartyId,
    pub label_features: Vec<String>,
    pub feature_features: Vec<String>,
    pub w_label: Vec<f64>,
    pub w_feature: Vec<f64>,
    pub bias: f64,
}

impl VerticalModel {
    pub fn logit(&self, x_label: &[f64], x_feature: &[f64]) -> f64 {
        self.bias + dot(&self.w_label, x_label) + dot(&self.w_feature, x_feature)
    }

    pub fn predict(&self, x_label: &[f64], x_feature: &[f64]) -> f64 {
        sigmoid(self.logit(x_label, x_feature))
    }

    /// `[w_label, w_feature, bias]`, the layout of a logistic model on the
    /// concatenated features.
    pub fn theta(&self) -> Vec<f64> {
        self.w_label.iter().chain(&self.w_feature).copied().chain([self.bias]).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batch order every party derives identically from the job seed.
pub(crate) struct BatchPlanner {
    rng: ChaCha20Rng,
    n: usize,
    batch_size: usize,
}

impl BatchPlanner {
    pub(crate) fn new(seed: u64, n: usize, batch_size: usize) -> Self {
        Self { rng: party_rng(seed, &PartyId::new("job"), "batch-order"), n, batch_size }
    }

    pub(crate) fn batches_per_round(&self) -> usize {
        if self.batch_size == 0 || self.batch_size >= self.n {
            1
        } else {
            self.n.div_ceil(self.batch_size)
        }
    }

    pub(crate) fn next_round(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        if self.batches_per_round() == 1 {
            return vec![idx];
        }
        idx.shuffle(&mut self.rng);
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

fn check_round(env_round: u64, want: u64) -> Result<(), ModelError> {
    if env_round != want {
        return Err(ModelError::Protocol(format!("message for round {env_round} while in round {want}")));
    }
    Ok(())
}

fn read_f64s(env: &crate::transport::MessageEnvelope, round: u64, len: usize) -> Result<Vec<f64>, ModelError> {
    check_round(env.round(), round)?;
    let mut r = PayloadReader::new(env.payload());
    let v = r.f64s()?;
    r.finish()?;
    if v.len() != len {
        return Err(ModelError::Consistency(format!("expected {len} values, got {}", v.len())));
    }
    Ok(v)
}

fn send_f64s(mb: &mut Mailbox<'_>, to: &PartyId, msg_type: MsgType, round: u64, v: &[f64]) -> Result<(), ModelError> {
    let mut w = PayloadWriter::new();
    w.f64s(v);
    mb.send(to, msg_type, round, w.finish())?;
    Ok(())
}

fn receive_provider_key(mb: &mut Mailbox<'_>, provider: &PartyId) -> Result<PaillierPublicKey, ModelError> {
    let env = mb.recv_from(provider, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    let pk = PaillierPublicKey::from_modulus(r.biguint()?)?;
    r.finish()?;
    Ok(pk)
}

/// Masks encrypted sums, has the provider decrypt them, and decodes at scale `2s`.
fn provider_reveal(
    mb: &mut Mailbox<'_>,
    provider: &PartyId,
    pk: &PaillierPublicKey,
    round: u64,
    cts: &[Ciphertext],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, ModelError> {
    let n = pk.n();
    let mut masks = Vec::with_capacity(cts.len());
    let mut masked = Vec::with_capacity(cts.len());
    for c in cts {
        let r = rng.gen_biguint_below(n);
        masked.push(pk.add_plain(c, &r)?.value().clone());
        masks.push(r);
    }
    let mut w = PayloadWriter::new();
    w.bigs(&masked);
    mb.send(provider, MsgType::EncStat, round, w.finish())?;
    let env = mb.recv_from(provider, MsgType::Control)?;
    check_round(env.round(), round)?;
    let mut r = PayloadReader::new(env.payload());
    let plain = r.bigs()?;
    r.finish()?;
    if plain.len() != cts.len() {
        return Err(ModelError::Protocol(format!("{} decryptions for {} requests", plain.len(), cts.len())));
    }
    Ok(plain
        .iter()
        .zip(&masks)
        .map(|(v, m)| decode_at_scale(&((v + n - m) % n), n, 2 * HE_SCALE_BITS))
        .collect())
}

fn scaled(fp: &SignedFixedPoint, v: f64) -> Result<i128, ModelError> {
    Ok(fp.to_integer(v)?)
}

/// What the label holder ends with.
#[derive(Clone, Debug)]
pub struct LabelSideResult {
    pub w: Vec<f64>,
    pub bias: f64,
    pub metrics: Vec<RoundMetrics>,
    /// `[w_label, bias]` after each round.
    pub trajectory: Vec<Vec<f64>>,
}

/// Label holder. `eval` defaults to the training rows.
pub fn cross_feature_label_side(
    mb: &mut Mailbox<'_>,
    feature_party: &PartyId,
    provider: Option<&PartyId>,
    x: &[Vec<f64>],
    y: &[u8],
    eval: Option<(&[Vec<f64>], &[u8])>,
    cfg: &CrossFeatureConfig,
) -> Result<LabelSideResult, ModelError> {
    cfg.validate()?;
    let me = mb.me();
    let mut rng = party_rng(cfg.seed, &me, "cross-feature");
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let (eval_x, eval_y) = eval.unwrap_or((x, y));
    let eval_yf: Vec<f64> = eval_y.iter().map(|&v| v as f64).collect();
    let fp = SignedFixedPoint::new(HE_SCALE_BITS);
    let fp2 = SignedFixedPoint::new(2 * HE_SCALE_BITS);

    let he_key = match cfg.protocol {
        VerticalProtocol::HeTaylor => {
            let c = provider.ok_or_else(|| ModelError::Config("he_taylor needs a crypto provider".into()))?;
            Some(receive_provider_key(mb, c)?)
        }
        _ => None,
    };
    let lt_keys = match cfg.protocol {
        VerticalProtocol::LabelTransfer => {
            let keys = keypair(cfg.key_bits, rng.gen())?;
            label_transfer_setup_label_side(mb, feature_party, y, &keys, &mut rng)?;
            Some(keys)
        }
        _ => None,
    };

    let mut w = vec![0.0; d];
    let mut bias = 0.0;
    let mut planner = BatchPlanner::new(cfg.seed, n, cfg.batch_size);
    let mut metrics = Vec::new();
    let mut trajectory = Vec::new();
    let mut t = 0u64;
    for round in 1..=cfg.rounds {
        let batches = planner.next_round();
        let mut loss_total = 0.0;
        for batch in &batches {
            t += 1;
            let m = batch.len() as f64;
            let z_a: Vec<f64> = batch.iter().map(|&i| bias + dot(&w, &x[i])).collect();
            let (grad_w, grad_b, loss) = match cfg.protocol {
                VerticalProtocol::Plaintext | VerticalProtocol::LabelTransfer => {
                    let env = mb.recv_from(feature_party, MsgType::PartialLogit)?;
                    let z_b = read_f64s(&env, t, batch.len())?;
                    let mut res = Vec::with_capacity(batch.len());
                    let mut loss = 0.0;
                    for (k, &i) in batch.iter().enumerate() {
                        let z = z_a[k] + z_b[k];
                        res.push(residual(z, yf[i], cfg.taylor_sigmoid));
                        loss += softplus_loss(z, yf[i]);
                    }
                    if cfg.protocol == VerticalProtocol::Plaintext {
                        send_f64s(mb, feature_party, MsgType::PartialLogit, t, &res)?;
                    } else {
                        send_f64s(mb, feature_party, MsgType::PartialLogit, t, &z_a)?;
                        label_transfer_label_side(mb, feature_party, lt_keys.as_ref().unwrap(), y, t, batch)?;
                    }
                    let mut gw = vec![0.0; d];
                    for (k, &i) in batch.iter().enumerate() {
                        for (g, xv) in gw.iter_mut().zip(&x[i]) {
                            *g += res[k] * xv;
                        }
                    }
                    let gb: f64 = res.iter().sum();
                    (gw.into_iter().map(|g| g / m).collect::<Vec<_>>(), gb / m, loss / m)
                }
                VerticalProtocol::HeTaylor => {
                    let pk = he_key.as_ref().unwrap();
                    let c = provider.unwrap();
                    let env = mb.recv_from(feature_party, MsgType::PartialLogit)?;
                    check_round(env.round(), t)?;
                    let mut r = PayloadReader::new(env.payload());
                    let enc_zb = r.bigs()?;
                    let enc_zb_sq = pk.ciphertext_from_value(r.biguint()?)?;
                    r.finish()?;
                    if enc_zb.len() != batch.len() {
                        return Err(ModelError::Consistency(format!(
                            "{} encrypted logits for a batch of {}",
                            enc_zb.len(),
                            batch.len()
                        )));
                    }
                    let enc_zb: Vec<Ciphertext> =
                        enc_zb.into_iter().map(|v| pk.ciphertext_from_value(v)).collect::<Result<_, _>>()?;
                    // E(4d) = E(z_B) + (z_A + 2 − 4y)
                    let mut e4d = Vec::with_capacity(batch.len());
                    for (k, &i) in batch.iter().enumerate() {
                        let shift = fp.encode(z_a[k] + 2.0 - 4.0 * yf[i], pk.n())?;
                        e4d.push(pk.add_plain(&enc_zb[k], &shift)?);
                    }
                    let mut wr = PayloadWriter::new();
                    wr.bigs(&e4d.iter().map(|c| c.value().clone()).collect::<Vec<_>>());
                    mb.send(feature_party, MsgType::PartialLogit, t, wr.finish())?;

                    let mut requests = Vec::with_capacity(d + 2);
                    for j in 0..d {
                        let coeffs = batch.iter().map(|&i| scaled(&fp, x[i][j])).collect::<Result<Vec<_>, _>>()?;
                        requests.push(pk.linear_combination(&e4d, &coeffs)?);
                    }
                    requests.push(pk.linear_combination(&e4d, &vec![1i128 << HE_SCALE_BITS; batch.len()])?);
                    // 8·(Taylor loss) = Σ 8 log 2 + (4 − 8y) z + z²
                    let coeffs = batch
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| scaled(&fp, 4.0 - 8.0 * yf[i] + 2.0 * z_a[k]))
                        .collect::<Result<Vec<_>, _>>()?;
                    let cross = pk.linear_combination(&enc_zb, &coeffs)?;
                    let plain: f64 = batch
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| 8.0 * std::f64::consts::LN_2 + (4.0 - 8.0 * yf[i]) * z_a[k] + z_a[k] * z_a[k])
                        .sum();
                    let loss_ct = pk.add_plain(&pk.add(&cross, &enc_zb_sq)?, &fp2.encode(plain, pk.n())?)?;
                    requests.push(loss_ct);
                    let vals = provider_reveal(mb, c, pk, t, &requests, &mut rng)?;
                    let gw = vals[..d].iter().map(|v| v / (4.0 * m)).collect();
                    (gw, vals[d] / (4.0 * m), vals[d + 1] / (8.0 * m))
                }
            };
            if !loss.is_finite() || !grad_b.is_finite() || grad_w.iter().any(|g: &f64| !g.is_finite()) {
                return Err(ModelError::Divergence { round });
            }
            loss_total += loss;
            for (wj, g) in w.iter_mut().zip(&grad_w) {
                *wj -= cfg.learning_rate * (g + cfg.l2 * *wj);
            }
            bias -= cfg.learning_rate * (grad_b + cfg.l2 * bias);
        }
        // cooperative scoring of the evaluation rows
        let env = mb.recv_from(feature_party, MsgType::PartialLogit)?;
        let z_b = read_f64s(&env, EVAL_ROUND_BASE + round, eval_x.len())?;
        let scores: Vec<f64> = eval_x.iter().zip(&z_b).map(|(xr, zb)| bias + dot(&w, xr) + zb).collect();
        metrics.push(RoundMetrics { round, train_loss: loss_total / batches.len() as f64, eval_metric: auc(&scores, &eval_yf) });
        trajectory.push(w.iter().copied().chain([bias]).collect());
    }
    Ok(LabelSideResult { w, bias, metrics, trajectory })
}

#[derive(Clone, Debug)]
pub struct FeatureSideResult {
    pub w: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
}

/// Feature-only party.
pub fn cross_feature_feature_side(
    mb: &mut Mailbox<'_>,
    label_party: &PartyId,
    provider: Option<&PartyId>,
    x: &[Vec<f64>],
    eval_x: Option<&[Vec<f64>]>,
    cfg: &CrossFeatureConfig,
) -> Result<FeatureSideResult, ModelError> {
    cfg.validate()?;
    let me = mb.me();
    let mut rng = party_rng(cfg.seed, &me, "cross-feature");
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let eval_x = eval_x.unwrap_or(x);
    let fp = SignedFixedPoint::new(HE_SCALE_BITS);
    let fp2 = SignedFixedPoint::new(2 * HE_SCALE_BITS);

    let he_key = match cfg.protocol {
        VerticalProtocol::HeTaylor => {
            let c = provider.ok_or_else(|| ModelError::Config("he_taylor needs a crypto provider".into()))?;
            Some(receive_provider_key(mb, c)?)
        }
        _ => None,
    };
    let lt_keys = match cfg.protocol {
        VerticalProtocol::LabelTransfer => Some(label_transfer_setup_feature_side(mb, label_party)?),
        _ => None,
    };
    if let Some(k) = &lt_keys {
        if k.encrypted_labels.len() != n {
            return Err(ModelError::Consistency(format!("{} encrypted labels for {n} aligned rows", k.encrypted_labels.len())));
        }
    }

    let mut w = vec![0.0; d];
    let mut planner = BatchPlanner::new(cfg.seed, n, cfg.batch_size);
    let mut trajectory = Vec::new();
    let mut t = 0u64;
    for round in 1..=cfg.rounds {
        for batch in planner.next_round() {
            t += 1;
            let m = batch.len() as f64;
            let z_b: Vec<f64> = batch.iter().map(|&i| dot(&w, &x[i])).collect();
            let grad: Vec<f64> = match cfg.protocol {
                VerticalProtocol::Plaintext => {
                    send_f64s(mb, label_party, MsgType::PartialLogit, t, &z_b)?;
                    let env = mb.recv_from(label_party, MsgType::PartialLogit)?;
                    let res = read_f64s(&env, t, batch.len())?;
                    (0..d).map(|j| batch.iter().zip(&res).map(|(&i, r)| r * x[i][j]).sum::<f64>() / m).collect()
                }
                VerticalProtocol::LabelTransfer => {
                    send_f64s(mb, label_party, MsgType::PartialLogit, t, &z_b)?;
                    let env = mb.recv_from(label_party, MsgType::PartialLogit)?;
                    let z_a = read_f64s(&env, t, batch.len())?;
                    let mut c0 = Vec::with_capacity(batch.len());
                    let mut c1 = Vec::with_capacity(batch.len());
                    for (k, &i) in batch.iter().enumerate() {
                        let p = residual(z_a[k] + z_b[k], 0.0, cfg.taylor_sigmoid);
                        c0.push(x[i].iter().map(|v| p * v).collect::<Vec<_>>());
                        c1.push(x[i].iter().map(|v| (p - 1.0) * v).collect::<Vec<_>>());
                    }
                    let sum = label_transfer_feature_side(mb, label_party, lt_keys.as_ref().unwrap(), t, &batch, &c0, &c1, &mut rng)?;
                    if d == 0 {
                        Vec::new()
                    } else {
                        sum.into_iter().map(|s| s / m).collect()
                    }
                }
                VerticalProtocol::HeTaylor => {
                    let pk = he_key.as_ref().unwrap();
                    let mut enc = Vec::with_capacity(batch.len());
                    for z in &z_b {
                        enc.push(pk.encrypt(&fp.encode(*z, pk.n())?, &mut rng)?.value().clone());
                    }
                    let sq: f64 = z_b.iter().map(|z| z * z).sum();
                    let enc_sq = pk.encrypt(&fp2.encode(sq, pk.n())?, &mut rng)?;
                    let mut wr = PayloadWriter::new();
                    wr.bigs(&enc).biguint(enc_sq.value());
                    mb.send(label_party, MsgType::PartialLogit, t, wr.finish())?;

                    let env = mb.recv_from(label_party, MsgType::PartialLogit)?;
                    check_round(env.round(), t)?;
                    let mut r = PayloadReader::new(env.payload());
                    let e4d = r.bigs()?;
                    r.finish()?;
                    if e4d.len() != batch.len() {
                        return Err(ModelError::Consistency(format!("{} residuals for a batch of {}", e4d.len(), batch.len())));
                    }
                    let e4d: Vec<Ciphertext> =
                        e4d.into_iter().map(|v| pk.ciphertext_from_value(v)).collect::<Result<_, _>>()?;
                    let mut requests = Vec::with_capacity(d);
                    for j in 0..d {
                        let coeffs = batch.iter().map(|&i| scaled(&fp, x[i][j])).collect::<Result<Vec<_>, _>>()?;
                        requests.push(pk.linear_combination(&e4d, &coeffs)?);
                    }
                    let vals = provider_reveal(mb, provider.unwrap(), pk, t, &requests, &mut rng)?;
                    vals.into_iter().map(|v| v / (4.0 * m)).collect()
                }
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::Divergence { round });
            }
            for (wj, g) in w.iter_mut().zip(&grad) {
                *wj -= cfg.learning_rate * (g + cfg.l2 * *wj);
            }
        }
        let z_eval: Vec<f64> = eval_x.iter().map(|r| dot(&w, r)).collect();
        send_f64s(mb, label_party, MsgType::PartialLogit, EVAL_ROUND_BASE + round, &z_eval)?;
        trajectory.push(w.clone());
    }
    Ok(FeatureSideResult { w, trajectory })
}

/// Crypto provider for `he_taylor`: publishes a key, then decrypts masked
/// sums for both parties once per batch.
pub fn cross_feature_provider(
    mb: &mut Mailbox<'_>,
    parties: [&PartyId; 2],
    n_rows: usize,
    cfg: &CrossFeatureConfig,
) -> Result<(), ModelError> {
    let me = mb.me();
    let keys = keypair(cfg.key_bits, party_rng(cfg.seed, &me, "paillier").gen())?;
    let mut w = PayloadWriter::new();
    w.biguint(keys.public_key().n());
    let payload = w.finish();
    for p in parties {
        mb.send(p, MsgType::Control, 0, payload.clone())?;
    }
    let pk = keys.public_key();
    let batches = BatchPlanner::new(cfg.seed, n_rows, cfg.batch_size).batches_per_round() as u64;
    let mut expected: Vec<PartyId> = parties.iter().map(|p| (*p).clone()).collect();
    expected.sort();
    for t in 1..=cfg.rounds * batches {
        for env in mb.barrier_collect(MsgType::EncStat, t, &expected)? {
            let mut r = PayloadReader::new(env.payload());
            let cts = r.bigs()?;
            r.finish()?;
            let mut plain: Vec<BigUint> = Vec::with_capacity(cts.len());
            for c in cts {
                plain.push(keys.private_key().decrypt(&pk.ciphertext_from_value(c)?)?);
            }
            let mut w = PayloadWriter::new();
            w.bigs(&plain);
            mb.send(env.sender(), MsgType::Control, t, w.finish())?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct CrossFeatureOutcome {
    pub model: VerticalModel,
    pub metrics: Vec<RoundMetrics>,
    /// `[w_label, w_feature, bias]` after each round.
    pub trajectory: Vec<Vec<f64>>,
    pub transcript: AuditLog,
}

enum Side {
    Label(LabelSideResult),
    Feature(FeatureSideResult),
    Provider,
}

/// Aligned vertical job under simulation. The evaluation pair, when given,
/// must be aligned the same way.
pub fn run_cross_feature(
    label_ds: &PartyDataset,
    feature_ds: &PartyDataset,
    eval: Option<(&PartyDataset, &PartyDataset)>,
    cfg: &CrossFeatureConfig,
) -> Result<CrossFeatureOutcome, ModelError> {
    run_cross_feature_as(label_ds, feature_ds, eval, cfg, &PartyId::new("crypto_provider"))
}

/// [`run_cross_feature`] with a named crypto provider (used by `he_taylor`).
pub fn run_cross_feature_as(
    label_ds: &PartyDataset,
    feature_ds: &PartyDataset,
    eval: Option<(&PartyDataset, &PartyDataset)>,
    cfg: &CrossFeatureConfig,
    provider: &PartyId,
) -> Result<CrossFeatureOutcome, ModelError> {
    cfg.validate()?;
    check_aligned(label_ds, feature_ds)?;
    let y = label_ds.labels().ok_or_else(|| ModelError::Config(format!("{} holds no labels", label_ds.party_id)))?;
    if feature_ds.labels().is_some() {
        return Err(ModelError::Config(format!("{} must not hold labels in a cross-feature job", feature_ds.party_id)));
    }
    let (xa, xb) = (label_ds.rows(), feature_ds.rows());
    let eval_rows = match eval {
        Some((ea, eb)) => {
            check_aligned(ea, eb)?;
            let ey = ea.labels().ok_or_else(|| ModelError::Config("evaluation rows need labels".into()))?;
            Some((ea.rows(), ey.to_vec(), eb.rows()))
        }
        None => None,
    };
    let a = label_ds.party_id.clone();
    let b = feature_ds.party_id.clone();
    let c = provider.clone();
    if cfg.provider() && (c == label_ds.party_id || c == feature_ds.party_id) {
        return Err(ModelError::Config(format!("{c} cannot both provide keys and hold data")));
    }
    let mut everyone = vec![a.clone(), b.clone()];
    if cfg.provider() {
        everyone.push(c.clone());
    }
    let (a_ref, b_ref, c_ref, all_ref, eval_ref) = (&a, &b, &c, &everyone, &eval_rows);
    let provider = cfg.provider().then_some(c_ref);
    let (xa_ref, xb_ref) = (&xa, &xb);

    let mut programs: Vec<PartyProgram<'_, Result<Side, ModelError>>> = vec![
        PartyProgram::new(a.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "cross-feature", None);
            let ev = eval_ref.as_ref().map(|(x, y, _)| (x.as_slice(), y.as_slice()));
            let r = cross_feature_label_side(&mut mb, b_ref, provider, xa_ref, y, ev, cfg).map(Side::Label);
            if let Err(e) = &r {
                mb.abort(all_ref, &e.to_string());
            }
            r
        }),
        PartyProgram::new(b.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "cross-feature", None);
            let ev = eval_ref.as_ref().map(|(_, _, x)| x.as_slice());
            let r = cross_feature_feature_side(&mut mb, a_ref, provider, xb_ref, ev, cfg).map(Side::Feature);
            if let Err(e) = &r {
                mb.abort(all_ref, &e.to_string());
            }
            r
        }),
    ];
    if cfg.provider() {
        programs.push(PartyProgram::new(c.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "cross-feature", None);
            let r = cross_feature_provider(&mut mb, [a_ref, b_ref], xa_ref.len(), cfg).map(|_| Side::Provider);
            if let Err(e) = &r {
                mb.abort(all_ref, &e.to_string());
            }
            r
        }));
    }
    let out = simnet_run(programs, SimConfig::new(cfg.seed))?;
    let transcript = out.transcript;
    let (mut la, mut fb) = (None, None);
    for (_, side) in collect_outputs(out.outputs)? {
        match side {
            Side::Label(l) => la = Some(l),
            Side::Feature(f) => fb = Some(f),
            Side::Provider => {}
        }
    }
    let (la, fb) = (la.expect("label side output"), fb.expect("feature side output"));
    let trajectory = la
        .trajectory
        .iter()
        .zip(&fb.trajectory)
        .map(|(ta, tb)| {
            let (wa, bias) = ta.split_at(ta.len() - 1);
            wa.iter().chain(tb).chain(bias).copied().collect()
        })
        .collect();
    let model = VerticalModel {
        label_party: a,
        feature_party: b,
        label_features: label_ds.feature_names().into_iter().map(String::from).collect(),
        feature_features: feature_ds.feature_names().into_iter().map(String::from).collect(),
        w_label: la.w,
        w_feature: fb.w,
        bias: la.bias,
    };
    Ok(CrossFeatureOutcome { model, metrics: la.metrics, trajectory, transcript })
}

fn check_aligned(a: &PartyDataset, b: &PartyDataset) -> Result<(), ModelError> {
    if a.entity_ids() != b.entity_ids() {
        return Err(ModelError::Consistency(format!(
            "{} and {} list entities in different orders; run alignment first",
            a.party_id, b.party_id
        )));
    }
    if a.n_rows() == 0 {
        return Err(ModelError::Consistency("no aligned rows".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_federation::{batch_loss_grad, Architecture, TrainingData};
    use crate::transport::{audit_assert_no_leak, ForbiddenPattern};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;

    /// Labels from a logistic model over all four features; A holds f0, f1.
    fn synth(n: usize, seed: u64) -> (PartyDataset, PartyDataset, Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = [1.5, -1.0, 2.0, 0.8];
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<u8> = x.iter().map(|r| (rng.gen::<f64>() < sigmoid(dot(&w, r) * 2.0)) as u8).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let col = |j: usize| x.iter().map(|r| r[j]).collect::<Vec<_>>();
        let a = PartyDataset::from_parts("bank", ids.clone(), vec![("f0".into(), col(0)), ("f1".into(), col(1))], Some(y.clone()))
            .unwrap();
        let b = PartyDataset::from_parts("telco", ids, vec![("f2".into(), col(2)), ("f3".into(), col(3))], None).unwrap();
        (a, b, x, y)
    }

    fn central(x: &[Vec<f64>], y: &[u8], cfg: &CrossFeatureConfig) -> Vec<Vec<f64>> {
        let d = x[0].len();
        let arch = Architecture::Logistic { inputs: d };
        let data = TrainingData { x: x.to_vec(), y: y.iter().map(|&v| v as f64).collect() };
        let mut theta = vec![0.0; d + 1];
        let mut planner = BatchPlanner::new(cfg.seed, x.len(), cfg.batch_size);
        let mut out = Vec::new();
        for _ in 0..cfg.rounds {
            for batch in planner.next_round() {
                let (_, g) = batch_loss_grad(&arch, &theta, &data, &batch).unwrap();
                for (t, g) in theta.iter_mut().zip(&g) {
                    *t -= cfg.learning_rate * (g + cfg.l2 * *t);
                }
            }
            out.push(theta.clone());
        }
        out
    }

    #[test]
    fn plaintext_matches_central_logistic_regression() {
        let (a, b, x, y) = synth(300, 1);
        for batch_size in [0, 64] {
            let cfg = CrossFeatureConfig { batch_size, l2: 0.01, ..CrossFeatureConfig::new(20, 0.8, 3) };
            let out = run_cross_feature(&a, &b, None, &cfg).unwrap();
            for (r, (fed, cen)) in out.trajectory.iter().zip(central(&x, &y, &cfg)).enumerate() {
                let gap = fed.iter().zip(&cen).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(gap < 1e-9, "round {}: {gap}", r + 1);
            }
            assert!(out.metrics.last().unwrap().eval_metric > 0.75);
        }
    }

    #[test]
    fn feature_party_without_features_reduces_to_local_training() {
        let (a, _, x, y) = synth(120, 2);
        let empty = PartyDataset::from_parts("telco", a.entity_ids().to_vec(), vec![], None).unwrap();
        let cfg = CrossFeatureConfig::new(10, 0.5, 1);
        let out = run_cross_feature(&a, &empty, None, &cfg).unwrap();
        let xa: Vec<Vec<f64>> = x.iter().map(|r| r[..2].to_vec()).collect();
        let cen = central(&xa, &y, &cfg);
        for (p, q) in out.trajectory.last().unwrap().iter().zip(cen.last().unwrap()) {
            assert!((p - q).abs() < 1e-12);
        }
        for proto in [VerticalProtocol::LabelTransfer, VerticalProtocol::HeTaylor] {
            let cfg = CrossFeatureConfig { protocol: proto, taylor_sigmoid: true, key_bits: 256, ..CrossFeatureConfig::new(2, 0.5, 1) };
            let out = run_cross_feature(&a, &empty, None, &cfg).unwrap();
            assert!(out.model.w_feature.is_empty());
        }
    }

    #[test]
    fn label_transfer_tracks_plaintext() {
        let (a, b, _, y) = synth(80, 3);
        let plain = run_cross_feature(&a, &b, None, &CrossFeatureConfig { batch_size: 32, ..CrossFeatureConfig::new(3, 0.5, 2) }).unwrap();
        let cfg = CrossFeatureConfig {
            batch_size: 32,
            protocol: VerticalProtocol::LabelTransfer,
            key_bits: 256,
            ..CrossFeatureConfig::new(3, 0.5, 2)
        };
        let lt = run_cross_feature(&a, &b, None, &cfg).unwrap();
        for (p, q) in plain.model.theta().iter().zip(lt.model.theta()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let forbidden = [ForbiddenPattern::new("labels u8", y[..24].to_vec()), ForbiddenPattern::f64_vector("labels f64", &yf[..8])];
        audit_assert_no_leak(&lt.transcript.sent_by(&PartyId::new("bank")), &forbidden).unwrap();
    }

    #[test]
    fn he_taylor_matches_plaintext_taylor() {
        let (a, b, _, y) = synth(60, 4);
        let taylor = CrossFeatureConfig { taylor_sigmoid: true, batch_size: 25, ..CrossFeatureConfig::new(3, 0.5, 5) };
        let plain = run_cross_feature(&a, &b, None, &taylor).unwrap();
        let cfg = CrossFeatureConfig { protocol: VerticalProtocol::HeTaylor, key_bits: 256, ..taylor.clone() };
        let he = run_cross_feature(&a, &b, None, &cfg).unwrap();
        for (p, q) in plain.model.theta().iter().zip(he.model.theta()) {
            assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
        // at θ = 0 the Taylor loss is exactly log 2
        let first = run_cross_feature(&a, &b, None, &CrossFeatureConfig { rounds: 1, batch_size: 0, ..cfg.clone() }).unwrap();
        assert!((first.metrics[0].train_loss - std::f64::consts::LN_2).abs() < 1e-9);
        let forbidden = [ForbiddenPattern::new("labels u8", y[..24].to_vec())];
        audit_assert_no_leak(&he.transcript.sent_by(&PartyId::new("bank")), &forbidden).unwrap();
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let (a, b, _, _) = synth(20, 5);
        let shuffled = b.select_rows(&(0..20).rev().collect::<Vec<_>>());
        let r = run_cross_feature(&a, &shuffled, None, &CrossFeatureConfig::new(1, 0.1, 1));
        assert!(matches!(r, Err(ModelError::Consistency(_))), "{r:?}");
    }

    #[test]
    fn he_requires_the_taylor_flag() {
        let cfg = CrossFeatureConfig { protocol: VerticalProtocol::HeTaylor, ..CrossFeatureConfig::new(1, 0.1, 1) };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }

    proptest! {
        #[test]
        fn taylor_residual_is_affine(z1 in -50.0f64..50.0, z2 in -50.0f64..50.0, y in 0u8..2) {
            let y = y as f64;
            let r0 = taylor_residual(0.0, y);
            let lhs = taylor_residual(z1 + z2, y) - r0;
            let rhs = (taylor_residual(z1, y) - r0) + (taylor_residual(z2, y) - r0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + z1.abs() + z2.abs()));
        }
    }
}
