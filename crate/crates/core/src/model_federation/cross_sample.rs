use std::collections::BTreeMap;

use super::{
    collect_outputs, fed_avg, local_train, Architecture, ModelError, ModelParams, ModelUpdate, RoundMetrics, TrainConfig,
    TrainMode, TrainingData,
};
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::{dp_perturb, pairwise_masks, MaskKeyPair, SharedSeed, SignedFixedPoint};
use crate::sandbox::PartyDataset;
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const TAG_MASK_KEY: u8 = 1;
const TAG_ROSTER: u8 = 2;
const ENC_REAL: u8 = 0;
const ENC_MASKED: u8 = 1;

/// Index in the sorted roster plus one shared seed per other party.
struct MaskState {
    index: usize,
    count: usize,
    seeds: BTreeMap<usize, SharedSeed>,
}

impl MaskState {
    fn mask(&self, round: u64, dim: usize) -> Result<Vec<u64>, ModelError> {
        let per_round: BTreeMap<usize, SharedSeed> =
            self.seeds.iter().map(|(&j, s)| (j, s.derive("kfed.round-mask", round))).collect();
        Ok(pairwise_masks(self.index, self.count, &per_round, dim)?)
    }
}

fn mask_setup_party(
    mb: &mut Mailbox<'_>,
    arbitrator: &PartyId,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<MaskState, ModelError> {
    let keys = MaskKeyPair::generate(rng);
    let mut w = PayloadWriter::new();
    w.u8(TAG_MASK_KEY).bytes(&keys.public_bytes());
    mb.send(arbitrator, MsgType::Control, 0, w.finish())?;

    let env = mb.recv_from(arbitrator, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_ROSTER {
        return Err(ModelError::Protocol("expected the mask key roster".into()));
    }
    let count = r.u32()? as usize;
    let me = mb.me();
    let context = mb.job_id().as_bytes().to_vec();
    let mut index = None;
    let mut seeds = BTreeMap::new();
    for j in 0..count {
        let id = PartyId::new(r.str()?);
        let key: [u8; 32] = r.bytes()?.try_into().map_err(|_| ModelError::Protocol("mask key must be 32 bytes".into()))?;
        if id == me {
            index = Some(j);
        } else {
            seeds.insert(j, keys.agree(&key, &context));
        }
    }
    r.finish()?;
    let index = index.ok_or_else(|| ModelError::Protocol(format!("{me} missing from the mask roster")))?;
    Ok(MaskState { index, count, seeds })
}

fn mask_setup_arbitrator(mb: &mut Mailbox<'_>, parties: &[PartyId]) -> Result<(), ModelError> {
    let envs = mb.barrier_collect(MsgType::Control, 0, parties)?;
    let mut w = PayloadWriter::new();
    w.u8(TAG_ROSTER).u32(parties.len() as u32);
    for env in &envs {
        let mut r = PayloadReader::new(env.payload());
        if r.u8()? != TAG_MASK_KEY {
            return Err(ModelError::Protocol(format!("expected a mask key from {}", env.sender())));
        }
        let key = r.bytes()?;
        r.finish()?;
        w.str(env.sender().as_str()).bytes(&key);
    }
    let roster = w.finish();
    for p in parties {
        mb.send(p, MsgType::Control, 0, roster.clone())?;
    }
    Ok(())
}

/// Encodes, range-checks and masks one vector for upload.
fn masked_upload(values: &[f64], parties: usize, state: &MaskState, round: u64) -> Result<Vec<u64>, ModelError> {
    let fp = SignedFixedPoint::default();
    // the sum of all parties must stay inside the signed 64-bit ring
    let limit = 2f64.powi(63 - fp.scale_bits() as i32) / parties as f64;
    let mut enc = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !(v.abs() < limit) {
            return Err(ModelError::Range(format!("coordinate {i} = {v} exceeds ±{limit} for {parties} parties")));
        }
        enc.push(fp.encode_u64(v)?);
    }
    let mask = state.mask(round, values.len())?;
    for (e, m) in enc.iter_mut().zip(mask) {
        *e = e.wrapping_add(m);
    }
    Ok(enc)
}

fn send_global(mb: &mut Mailbox<'_>, parties: &[PartyId], round: u64, last: bool, theta: &[f64]) -> Result<(), ModelError> {
    let mut w = PayloadWriter::new();
    w.u8(last as u8).f64s(theta);
    let payload = w.finish();
    for p in parties {
        mb.send(p, MsgType::GlobalUpdate, round, payload.clone())?;
    }
    Ok(())
}

/// Arbitrator state after training.
#[derive(Clone, Debug)]
pub struct ArbitratorResult {
    pub params: ModelParams,
    pub metrics: Vec<RoundMetrics>,
    /// Parameters after each round.
    pub trajectory: Vec<Vec<f64>>,
}

pub fn cross_sample_arbitrator(
    mb: &mut Mailbox<'_>,
    parties: &[PartyId],
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<ArbitratorResult, ModelError> {
    let mut parties = parties.to_vec();
    parties.sort();
    let masked = cfg.mode != TrainMode::PlaintextDebug;
    if masked {
        mask_setup_arbitrator(mb, &parties)?;
    }
    let dim = init.theta.len();
    let mut params = init;
    let mut metrics = Vec::new();
    let mut trajectory = Vec::new();
    for round in 1..=cfg.rounds {
        send_global(mb, &parties, round, false, &params.theta)?;
        let envs = mb.barrier_collect(MsgType::ModelUpdate, round, &parties)?;
        let (delta, n, loss_sum, correct) = if masked {
            let mut acc = vec![0u64; dim + 2];
            let mut n = 0u64;
            for env in &envs {
                let mut r = PayloadReader::new(env.payload());
                n += r.u64()?;
                if r.u8()? != ENC_MASKED {
                    return Err(ModelError::Protocol(format!("unmasked update from {} in masked mode", env.sender())));
                }
                let v = r.u64s()?;
                r.finish()?;
                if v.len() != dim + 2 {
                    return Err(ModelError::Protocol(format!("update from {} has {} coordinates", env.sender(), v.len())));
                }
                crate::crypto::masking::add_masked(&mut acc, &v);
            }
            let fp = SignedFixedPoint::default();
            let sums: Vec<f64> = acc.iter().map(|&a| fp.decode_u64(a)).collect();
            let delta = sums[..dim].iter().map(|s| s / n as f64).collect::<Vec<_>>();
            (delta, n, sums[dim], sums[dim + 1])
        } else {
            let mut updates = Vec::with_capacity(envs.len());
            for env in &envs {
                let mut r = PayloadReader::new(env.payload());
                let sample_count = r.u64()?;
                if r.u8()? != ENC_REAL {
                    return Err(ModelError::Protocol(format!("masked update from {} in plaintext mode", env.sender())));
                }
                let mut v = r.f64s()?;
                r.finish()?;
                if v.len() != dim + 2 {
                    return Err(ModelError::Protocol(format!("update from {} has {} coordinates", env.sender(), v.len())));
                }
                let correct = v.pop().unwrap();
                let loss_sum = v.pop().unwrap();
                updates.push((env.sender().clone(), ModelUpdate { round, sample_count, delta: v, loss_sum, correct }));
            }
            let g = fed_avg(&updates)?;
            (g.delta, g.sample_count, g.loss_sum, g.correct)
        };
        if delta.iter().any(|d| !d.is_finite()) || !loss_sum.is_finite() {
            return Err(ModelError::Divergence { round });
        }
        for (t, d) in params.theta.iter_mut().zip(&delta) {
            *t += d;
        }
        params.version = round;
        metrics.push(RoundMetrics { round, train_loss: loss_sum / n as f64, eval_metric: correct / n as f64 });
        trajectory.push(params.theta.clone());
    }
    send_global(mb, &parties, cfg.rounds + 1, true, &params.theta)?;
    Ok(ArbitratorResult { params, metrics, trajectory })
}

/// Data party loop: train on each broadcast until the final parameters arrive.
pub fn cross_sample_party(
    mb: &mut Mailbox<'_>,
    arbitrator: &PartyId,
    party_count: usize,
    arch: &Architecture,
    data: &TrainingData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    let me = mb.me();
    let mut rng = party_rng(seed, &me, "local-train");
    let masks = match cfg.mode {
        TrainMode::PlaintextDebug => None,
        _ => Some(mask_setup_party(mb, arbitrator, &mut party_rng(seed, &me, "mask-keys"))?),
    };
    loop {
        let env = mb.recv_from(arbitrator, MsgType::GlobalUpdate)?;
        let round = env.round();
        let mut r = PayloadReader::new(env.payload());
        let last = r.u8()? == 1;
        let theta = r.f64s()?;
        r.finish()?;
        let params = ModelParams { arch: arch.clone(), theta, version: round.saturating_sub(1) };
        if last {
            return Ok(params);
        }
        let mut update = local_train(data, &params, cfg, round, &mut rng)?;
        let mut w = PayloadWriter::new();
        w.u64(update.sample_count);
        match &masks {
            None => {
                update.delta.extend([update.loss_sum, update.correct]);
                w.u8(ENC_REAL).f64s(&update.delta);
            }
            Some(state) => {
                if cfg.mode == TrainMode::MaskedDp {
                    let dp = cfg.dp.as_ref().ok_or_else(|| ModelError::Config("masked+dp mode needs dp parameters".into()))?;
                    update.delta = dp_perturb(&update.delta, dp, &mut rng)?;
                }
                let n = update.sample_count as f64;
                let mut v: Vec<f64> = update.delta.iter().map(|d| d * n).collect();
                v.extend([update.loss_sum, update.correct]);
                w.u8(ENC_MASKED).u64s(&masked_upload(&v, party_count, state, round)?);
            }
        }
        mb.send(arbitrator, MsgType::ModelUpdate, round, w.finish())?;
    }
}

#[derive(Debug)]
pub struct CrossSampleOutcome {
    pub params: ModelParams,
    pub metrics: Vec<RoundMetrics>,
    pub trajectory: Vec<Vec<f64>>,
    pub transcript: AuditLog,
}

enum Role {
    Arbitrator(ArbitratorResult),
    Party,
}

/// Simulated horizontal job: one program per dataset plus an arbitrator.
pub fn run_cross_sample(datasets: &[PartyDataset], arch: &Architecture, cfg: &TrainConfig) -> Result<CrossSampleOutcome, ModelError> {
    run_cross_sample_as(datasets, arch, cfg, &PartyId::new("arbitrator"))
}

/// [`run_cross_sample`] with a named arbitrator.
pub fn run_cross_sample_as(
    datasets: &[PartyDataset],
    arch: &Architecture,
    cfg: &TrainConfig,
    arbitrator: &PartyId,
) -> Result<CrossSampleOutcome, ModelError> {
    cfg.validate()?;
    let init = ModelParams::init(arch.clone(), cfg.seed)?;
    let mut data = Vec::with_capacity(datasets.len());
    for ds in datasets {
        data.push((ds.party_id.clone(), TrainingData::from_dataset(ds)?));
    }
    let parties: Vec<PartyId> = data.iter().map(|d| d.0.clone()).collect();
    if parties.contains(arbitrator) {
        return Err(ModelError::Config(format!("{arbitrator} cannot both arbitrate and hold data")));
    }
    let everyone: Vec<PartyId> = parties.iter().cloned().chain([arbitrator.clone()]).collect();
    let (parties_ref, arb_ref, everyone_ref) = (&parties, arbitrator, &everyone);

    let mut programs: Vec<PartyProgram<'_, Result<Role, ModelError>>> = Vec::new();
    programs.push(PartyProgram::new(arbitrator.clone(), move |ep| {
        let mut mb = Mailbox::new(ep, "cross-sample", None);
        let r = cross_sample_arbitrator(&mut mb, parties_ref, init, cfg).map(Role::Arbitrator);
        if let Err(e) = &r {
            mb.abort(everyone_ref, &e.to_string());
        }
        r
    }));
    for (id, d) in &data {
        programs.push(PartyProgram::new(id.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "cross-sample", None);
            let r = cross_sample_party(&mut mb, arb_ref, parties_ref.len(), arch, d, cfg, cfg.seed).map(|_| Role::Party);
            if let Err(e) = &r {
                mb.abort(everyone_ref, &e.to_string());
            }
            r
        }));
    }
    let out = simnet_run(programs, SimConfig::new(cfg.seed))?;
    let transcript = out.transcript;
    for (_, role) in collect_outputs(out.outputs)? {
        if let Role::Arbitrator(a) = role {
            return Ok(CrossSampleOutcome { params: a.params, metrics: a.metrics, trajectory: a.trajectory, transcript });
        }
    }
    unreachable!("the arbitrator always reports")
}

/// One masked aggregation of `inputs` (one vector per party). Returns the
/// ring sum the arbitrator sees and its fixed-point decoding.
pub fn masked_sum_simulated(inputs: &[Vec<f64>], seed: u64) -> Result<(Vec<u64>, Vec<f64>, AuditLog), ModelError> {
    let parties: Vec<PartyId> = (0..inputs.len()).map(|i| PartyId::new(format!("p{i:03}"))).collect();
    let arbitrator = PartyId::new("arbitrator");
    let dim = inputs.first().map_or(0, Vec::len);
    let (parties_ref, arb_ref) = (&parties, &arbitrator);
    let mut programs: Vec<PartyProgram<'_, Result<Vec<u64>, ModelError>>> = Vec::new();
    programs.push(PartyProgram::new(arbitrator.clone(), move |ep| {
        let mut mb = Mailbox::new(ep, "masked-sum", None);
        mask_setup_arbitrator(&mut mb, parties_ref)?;
        let envs = mb.barrier_collect(MsgType::ModelUpdate, 1, parties_ref)?;
        let mut acc = vec![0u64; dim];
        for env in envs {
            let mut r = PayloadReader::new(env.payload());
            let v = r.u64s()?;
            r.finish()?;
            if v.len() != dim {
                return Err(ModelError::Protocol("dimension mismatch".into()));
            }
            crate::crypto::masking::add_masked(&mut acc, &v);
        }
        Ok(acc)
    }));
    for (id, v) in parties.iter().zip(inputs) {
        programs.push(PartyProgram::new(id.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "masked-sum", None);
            let me = mb.me();
            let state = mask_setup_party(&mut mb, arb_ref, &mut party_rng(seed, &me, "mask-keys"))?;
            let up = masked_upload(v, parties_ref.len(), &state, 1)?;
            let mut w = PayloadWriter::new();
            w.u64s(&up);
            mb.send(arb_ref, MsgType::ModelUpdate, 1, w.finish())?;
            Ok(Vec::new())
        }));
    }
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let transcript = out.transcript;
    let outputs = collect_outputs(out.outputs)?;
    let ring = outputs.into_iter().find(|(p, _)| *p == arbitrator).map(|(_, v)| v).expect("arbitrator output");
    let fp = SignedFixedPoint::default();
    let decoded = ring.iter().map(|&v| fp.decode_u64(v)).collect();
    Ok((ring, decoded, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_federation::batch_loss_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn synth(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|j| 1.0 - j as f64 * 0.5).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = x
            .iter()
            .map(|r| {
                let z: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
                (rng.gen::<f64>() < crate::model_federation::sigmoid(z)) as u8
            })
            .collect();
        (x, y)
    }

    fn split(x: &[Vec<f64>], y: &[u8], parts: usize) -> Vec<PartyDataset> {
        let d = x[0].len();
        (0..parts)
            .map(|p| {
                let idx: Vec<usize> = (p..x.len()).step_by(parts).collect();
                let cols = (0..d).map(|j| (format!("f{j}"), idx.iter().map(|&i| x[i][j]).collect())).collect();
                let ids = idx.iter().map(|i| format!("e{i}")).collect();
                let labels = idx.iter().map(|&i| y[i]).collect();
                PartyDataset::from_parts(&format!("party{p}"), ids, cols, Some(labels)).unwrap()
            })
            .collect()
    }

    #[test]
    fn four_party_full_batch_matches_central_gradient_descent() {
        let (x, y) = synth(400, 3, 1);
        let parties = split(&x, &y, 4);
        let arch = Architecture::Logistic { inputs: 3 };
        let cfg = TrainConfig::new(50, 0.5, 9);
        let out = run_cross_sample(&parties, &arch, &cfg).unwrap();
        let central = TrainingData { x: x.clone(), y: y.iter().map(|&v| v as f64).collect() };
        let all: Vec<usize> = (0..x.len()).collect();
        let mut theta = vec![0.0; 4];
        for (r, fed) in out.trajectory.iter().enumerate() {
            let (_, g) = batch_loss_grad(&arch, &theta, &central, &all).unwrap();
            for (t, g) in theta.iter_mut().zip(&g) {
                *t -= 0.5 * g;
            }
            for (a, b) in fed.iter().zip(&theta) {
                assert!((a - b).abs() < 1e-9, "round {}: {a} vs {b}", r + 1);
            }
        }
        assert_eq!(out.metrics.len(), 50);
        assert!(out.metrics[49].train_loss < out.metrics[0].train_loss);
    }

    #[test]
    fn single_party_minibatch_matches_local_sgd() {
        let (x, y) = synth(90, 2, 2);
        let parties = split(&x, &y, 1);
        let arch = Architecture::Mlp { inputs: 2, hidden: vec![3] };
        let cfg = TrainConfig { local_epochs: 2, batch_size: 16, ..TrainConfig::new(5, 0.3, 4) };
        let out = run_cross_sample(&parties, &arch, &cfg).unwrap();
        let data = TrainingData::from_dataset(&parties[0]).unwrap();
        let mut params = ModelParams::init(arch.clone(), 4).unwrap();
        let mut rng = party_rng(4, &parties[0].party_id, "local-train");
        for (r, fed) in out.trajectory.iter().enumerate() {
            let u = local_train(&data, &params, &cfg, r as u64 + 1, &mut rng).unwrap();
            for (t, d) in params.theta.iter_mut().zip(&u.delta) {
                *t += d;
            }
            assert_eq!(fed, &params.theta);
        }
    }

    #[test]
    fn masked_mode_tracks_plaintext_mode() {
        let (x, y) = synth(300, 3, 3);
        let parties = split(&x, &y, 3);
        let arch = Architecture::Logistic { inputs: 3 };
        let plain = run_cross_sample(&parties, &arch, &TrainConfig::new(10, 0.5, 5)).unwrap();
        let masked_cfg = TrainConfig { mode: TrainMode::Masked, ..TrainConfig::new(10, 0.5, 5) };
        let masked = run_cross_sample(&parties, &arch, &masked_cfg).unwrap();
        for (a, b) in plain.params.theta.iter().zip(&masked.params.theta) {
            assert!((a - b).abs() < 2f64.powi(-20), "{a} vs {b}");
        }
        for (a, b) in plain.metrics.iter().zip(&masked.metrics) {
            assert!((a.train_loss - b.train_loss).abs() < 2f64.powi(-20));
            assert_eq!(a.eval_metric, b.eval_metric);
        }
        // masked uploads do not carry the plaintext deltas
        let updates: Vec<_> = masked.transcript.records().iter().filter(|r| r.msg_type == "MODEL_UPDATE").collect();
        assert_eq!(updates.len(), 30);
    }

    #[test]
    fn dp_mode_runs_and_perturbs() {
        let (x, y) = synth(200, 2, 6);
        let parties = split(&x, &y, 2);
        let arch = Architecture::Logistic { inputs: 2 };
        let cfg = TrainConfig {
            mode: TrainMode::MaskedDp,
            dp: Some(crate::crypto::DpParams::gaussian(1.0, 1e-5, 1.0)),
            ..TrainConfig::new(3, 0.5, 7)
        };
        let dp = run_cross_sample(&parties, &arch, &cfg).unwrap();
        let plain = run_cross_sample(&parties, &arch, &TrainConfig::new(3, 0.5, 7)).unwrap();
        assert_ne!(dp.params.theta, plain.params.theta);
        assert!(dp.params.theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn masked_sum_is_exact_in_the_ring() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..100).map(|_| rng.gen_range(-1e3..1e3)).collect()).collect();
        let (ring, decoded, log) = masked_sum_simulated(&inputs, 3).unwrap();
        let fp = SignedFixedPoint::default();
        for j in 0..100 {
            let want = inputs.iter().fold(0u64, |a, v| a.wrapping_add(fp.encode_u64(v[j]).unwrap()));
            assert_eq!(ring[j], want);
            let real: f64 = inputs.iter().map(|v| v[j]).sum();
            assert!((decoded[j] - real).abs() <= 2f64.powi(-20));
        }
        // no single upload equals the party's plain encoding
        let plain0: Vec<u64> = inputs[0].iter().map(|&v| fp.encode_u64(v).unwrap()).collect();
        let mut w = PayloadWriter::new();
        w.u64s(&plain0);
        let forbidden = [crate::transport::ForbiddenPattern::new("p0 plain", w.finish()[4..36].to_vec())];
        crate::transport::audit_assert_no_leak(&log, &forbidden).unwrap();
    }

    #[test]
    fn party_failure_aborts_the_job() {
        let (x, y) = synth(40, 2, 9);
        let mut parties = split(&x, &y, 2);
        // wrong width for the architecture
        parties[1] = parties[1].select_columns(&["f0"]).unwrap();
        let r = run_cross_sample(&parties, &Architecture::Logistic { inputs: 2 }, &TrainConfig::new(2, 0.1, 1));
        assert!(matches!(r, Err(ModelError::Architecture(_))), "{r:?}");
    }
}
