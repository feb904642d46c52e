//! Cognition-level federation.
//!
//! Each party runs a small local encoder `f_k` over its own view of the
//! aligned entities and ships only the embedding matrix. The arbitrator
//! trains an ensemble head `h` on the concatenated embeddings and sends back
//! `∂L/∂e_k`, which every party pushes through its encoder by the chain rule.
//!
//! Trust assumption: the arbitrator holds the labels. The label party sends
//! them once at job start over the authenticated channel. Embeddings travel
//! in the clear inside that channel; additive HE cannot carry the head's
//! backward pass, so the arbitrator is trusted not to collude. With the
//! privacy flag each embedding is capped at `⌈features / 2⌉` columns so raw
//! feature vectors cannot be passed through verbatim.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::model_federation::{auc, DenseNet, Loss, ModelError, RoundMetrics};
use crate::sandbox::PartyDataset;
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const TAG_LABELS: u8 = 1;
const EVAL_ROUND_BASE: u64 = 1 << 40;

/// Shape of one party's encoder, registered with the job.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub inputs: usize,
    /// At most one hidden (tanh) layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub outputs: usize,
    /// Start from the identity map (needs `inputs == outputs`, no hidden layer).
    #[serde(default)]
    pub identity_init: bool,
}

impl EncoderSpec {
    pub fn net(&self) -> Result<DenseNet, ModelError> {
        if self.hidden.len() > 1 {
            return Err(ModelError::Architecture(format!("encoders have 1 or 2 layers, got {}", self.hidden.len() + 1)));
        }
        let mut sizes = vec![self.inputs];
        sizes.extend(&self.hidden);
        sizes.push(self.outputs);
        DenseNet::new(sizes)
    }

    pub fn check_privacy(&self) -> Result<(), ModelError> {
        let cap = self.inputs.div_ceil(2);
        if self.outputs > cap {
            return Err(ModelError::Config(format!(
                "embedding width {} exceeds the privacy cap {cap} for {} features",
                self.outputs, self.inputs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: Vec<f64>,
}

impl Encoder {
    pub fn init(spec: EncoderSpec, seed: u64, party: &PartyId) -> Result<Self, ModelError> {
        let net = spec.net()?;
        let params = if spec.identity_init { net.identity()? } else { net.init(&mut party_rng(seed, party, "encoder-init")) };
        Ok(Self { spec, params })
    }

    pub fn embed_row(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.spec.net()?.output(&self.params, x))
    }
}

/// Row-major `rows × dim` matrix from one party.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub party: PartyId,
    pub round: u64,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.u64(self.round).u64(self.rows as u64).u32(self.dim as u32).f64s(&self.data);
        w.finish()
    }

    pub fn from_payload(party: PartyId, bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = PayloadReader::new(bytes);
        let round = r.u64()?;
        let rows = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f64s()?;
        r.finish()?;
        if data.len() != rows * dim {
            return Err(ModelError::Protocol(format!("{party} sent {} values for a {rows}×{dim} matrix", data.len())));
        }
        Ok(Self { party, round, rows, dim, data })
    }
}

/// Forward pass of the encoder over every row.
pub fn local_embed(ds: &PartyDataset, encoder: &Encoder, round: u64) -> Result<Embedding, ModelError> {
    let width = ds.feature_names().len();
    if width != encoder.spec.inputs {
        return Err(ModelError::Config(format!(
            "{} has {width} features but registered an encoder for {}",
            ds.party_id, encoder.spec.inputs
        )));
    }
    let net = encoder.spec.net()?;
    let mut data = Vec::with_capacity(ds.n_rows() * encoder.spec.outputs);
    for row in ds.rows() {
        data.extend(net.output(&encoder.params, &row));
    }
    Ok(Embedding { party: ds.party_id.clone(), round, rows: ds.n_rows(), dim: encoder.spec.outputs, data })
}

/// Applies `∂L/∂e` (row-major, same shape as the embedding) to the encoder.
/// Returns the parameter gradient that was applied.
pub fn encoder_step(
    encoder: &mut Encoder,
    rows: &[Vec<f64>],
    grad_embedding: &[f64],
    learning_rate: f64,
) -> Result<Vec<f64>, ModelError> {
    let net = encoder.spec.net()?;
    let d = encoder.spec.outputs;
    if grad_embedding.len() != rows.len() * d {
        return Err(ModelError::Protocol(format!("{} gradient values for {} rows of width {d}", grad_embedding.len(), rows.len())));
    }
    let mut grad = vec![0.0; encoder.params.len()];
    for (i, x) in rows.iter().enumerate() {
        let trace = net.forward(&encoder.params, x);
        net.backward(&encoder.params, &trace, &grad_embedding[i * d..(i + 1) * d], &mut grad);
    }
    for (p, g) in encoder.params.iter_mut().zip(&grad) {
        *p -= learning_rate * g;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleHead {
    pub kind: HeadKind,
    pub inputs: usize,
    pub params: Vec<f64>,
}

impl EnsembleHead {
    pub fn net(&self) -> Result<DenseNet, ModelError> {
        match self.kind {
            HeadKind::Logistic => DenseNet::new(vec![self.inputs, 1]),
            HeadKind::Mlp { hidden } => DenseNet::new(vec![self.inputs, hidden, 1]),
        }
    }

    pub fn init(kind: HeadKind, inputs: usize, seed: u64) -> Result<Self, ModelError> {
        let mut head = Self { kind, inputs, params: Vec::new() };
        let net = head.net()?;
        head.params = match kind {
            HeadKind::Logistic => vec![0.0; net.param_count()],
            HeadKind::Mlp { .. } => net.init(&mut party_rng(seed, &PartyId::new("arbitrator"), "head-init")),
        };
        Ok(head)
    }

    /// Logit for one concatenated embedding.
    pub fn logit(&self, e: &[f64]) -> Result<f64, ModelError> {
        Ok(self.net()?.output(&self.params, e)[0])
    }
}

/// Result of one head step.
#[derive(Clone, Debug)]
pub struct EnsembleStep {
    /// Mean loss before the step.
    pub loss: f64,
    /// Accuracy before the step.
    pub accuracy: f64,
    /// `∂(mean loss)/∂e_k` per embedding, row-major, input order.
    pub input_grads: Vec<Vec<f64>>,
}

/// One full-batch gradient step on the head over the concatenated embeddings.
pub fn ensemble_round(
    head: &mut EnsembleHead,
    embeddings: &[Embedding],
    labels: &[f64],
    learning_rate: f64,
) -> Result<EnsembleStep, ModelError> {
    let rows = labels.len();
    if let Some(e) = embeddings.iter().find(|e| e.rows != rows) {
        return Err(ModelError::Protocol(format!("{} sent {} rows, expected {rows}", e.party, e.rows)));
    }
    let width: usize = embeddings.iter().map(|e| e.dim).sum();
    if width != head.inputs {
        return Err(ModelError::Protocol(format!("embeddings are {width} wide but the head takes {}", head.inputs)));
    }
    let net = head.net()?;
    let n = rows.max(1) as f64;
    let mut grad = vec![0.0; head.params.len()];
    let mut input_grads: Vec<Vec<f64>> = embeddings.iter().map(|e| vec![0.0; e.data.len()]).collect();
    let (mut loss, mut correct) = (0.0, 0.0);
    let mut x = Vec::with_capacity(width);
    for (i, &y) in labels.iter().enumerate() {
        x.clear();
        for e in embeddings {
            x.extend_from_slice(e.row(i));
        }
        let trace = net.forward(&head.params, &x);
        let o = trace.output()[0];
        let (l, dl) = Loss::Logistic.eval(o, y);
        loss += l;
        correct += ((o > 0.0) == (y >= 0.5)) as u8 as f64;
        let gx = net.backward(&head.params, &trace, &[dl / n], &mut grad);
        let mut off = 0;
        for (k, e) in embeddings.iter().enumerate() {
            input_grads[k][i * e.dim..(i + 1) * e.dim].copy_from_slice(&gx[off..off + e.dim]);
            off += e.dim;
        }
    }
    for (p, g) in head.params.iter_mut().zip(&grad) {
        *p -= learning_rate * g;
    }
    Ok(EnsembleStep { loss: loss / n, accuracy: correct / n, input_grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CognitionConfig {
    pub rounds: u64,
    pub head_learning_rate: f64,
    pub encoder_learning_rate: f64,
    pub head: HeadKind,
    pub seed: u64,
    #[serde(default)]
    pub privacy: bool,
}

impl CognitionConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rounds == 0 {
            return Err(ModelError::Config("rounds must be at least 1".into()));
        }
        for (name, v) in [("head", self.head_learning_rate), ("encoder", self.encoder_learning_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!("{name} learning rate must be non-negative, got {v}")));
            }
        }
        if let HeadKind::Mlp { hidden: 0 } = self.head {
            return Err(ModelError::Architecture("mlp head needs a non-empty hidden layer".into()));
        }
        Ok(())
    }
}

/// What the arbitrator ends with.
#[derive(Clone, Debug)]
pub struct ArbitratorState {
    pub head: EnsembleHead,
    pub metrics: Vec<RoundMetrics>,
}

fn send_embedding(mb: &mut Mailbox<'_>, to: &PartyId, msg_type: MsgType, e: &Embedding) -> Result<(), ModelError> {
    mb.send(to, msg_type, e.round, e.to_payload())?;
    Ok(())
}

/// Arbitrator: receives labels once, then steps the head every round.
/// `parties` lists the encoders in head-input order.
pub fn cognition_arbitrator(
    mb: &mut Mailbox<'_>,
    parties: &[(PartyId, EncoderSpec)],
    label_party: &PartyId,
    eval_labels: bool,
    cfg: &CognitionConfig,
) -> Result<ArbitratorState, ModelError> {
    let env = mb.recv_from(label_party, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_LABELS {
        return Err(ModelError::Protocol("expected labels from the label party".into()));
    }
    let labels: Vec<f64> = r.bytes()?.iter().map(|&v| v as f64).collect();
    let eval_y: Option<Vec<f64>> = if eval_labels { Some(r.bytes()?.iter().map(|&v| v as f64).collect()) } else { None };
    r.finish()?;

    let ids: Vec<PartyId> = parties.iter().map(|p| p.0.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    let width = parties.iter().map(|p| p.1.outputs).sum();
    let mut head = EnsembleHead::init(cfg.head, width, cfg.seed)?;
    let mut metrics = Vec::new();
    for round in 1..=cfg.rounds {
        let embeddings = collect_embeddings(mb, &ids, &sorted, parties, round)?;
        let step = ensemble_round(&mut head, &embeddings, &labels, cfg.head_learning_rate)?;
        if !step.loss.is_finite() || head.params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Divergence { round });
        }
        for (e, g) in embeddings.iter().zip(&step.input_grads) {
            let ge = Embedding { party: e.party.clone(), round, rows: e.rows, dim: e.dim, data: g.clone() };
            send_embedding(mb, &e.party, MsgType::HeadGradient, &ge)?;
        }
        let eval_metric = match &eval_y {
            None => step.accuracy,
            Some(ey) => {
                let ev = collect_embeddings(mb, &ids, &sorted, parties, EVAL_ROUND_BASE + round)?;
                accuracy_of(&head, &ev, ey)?
            }
        };
        metrics.push(RoundMetrics { round, train_loss: step.loss, eval_metric });
    }
    Ok(ArbitratorState { head, metrics })
}

fn collect_embeddings(
    mb: &mut Mailbox<'_>,
    ids: &[PartyId],
    sorted: &[PartyId],
    parties: &[(PartyId, EncoderSpec)],
    round: u64,
) -> Result<Vec<Embedding>, ModelError> {
    let envs = mb.barrier_collect(MsgType::Embedding, round, sorted)?;
    let mut by_party = BTreeMap::new();
    for env in envs {
        let e = Embedding::from_payload(env.sender().clone(), env.payload())?;
        if e.round != round {
            return Err(ModelError::Protocol(format!("{} sent round {} inside round {round}", e.party, e.round)));
        }
        by_party.insert(e.party.clone(), e);
    }
    let mut out = Vec::with_capacity(ids.len());
    for (id, spec) in ids.iter().zip(parties.iter().map(|p| &p.1)) {
        let e = by_party.remove(id).expect("barrier returned every party");
        if e.dim != spec.outputs {
            return Err(ModelError::Config(format!("{id} sent width {} but registered {}", e.dim, spec.outputs)));
        }
        out.push(e);
    }
    Ok(out)
}

fn accuracy_of(head: &EnsembleHead, embeddings: &[Embedding], labels: &[f64]) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let x: Vec<f64> = embeddings.iter().flat_map(|e| e.row(i).iter().copied()).collect();
        correct += ((head.logit(&x)? > 0.0) == (y >= 0.5)) as usize;
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Data party: embeds, receives head gradients, updates its encoder.
pub fn cognition_party(
    mb: &mut Mailbox<'_>,
    arbitrator: &PartyId,
    ds: &PartyDataset,
    eval: Option<&PartyDataset>,
    encoder: Encoder,
    labels_to_send: Option<(&[u8], Option<&[u8]>)>,
    cfg: &CognitionConfig,
) -> Result<Encoder, ModelError> {
    if cfg.privacy {
        encoder.spec.check_privacy()?;
    }
    if let Some((y, ey)) = labels_to_send {
        let mut w = PayloadWriter::new();
        w.u8(TAG_LABELS).bytes(y);
        if let Some(ey) = ey {
            w.bytes(ey);
        }
        mb.send(arbitrator, MsgType::Control, 0, w.finish())?;
    }
    let rows = ds.rows();
    let mut encoder = encoder;
    for round in 1..=cfg.rounds {
        let e = local_embed(ds, &encoder, round)?;
        send_embedding(mb, arbitrator, MsgType::Embedding, &e)?;
        let env = mb.recv_from(arbitrator, MsgType::HeadGradient)?;
        let g = Embedding::from_payload(env.sender().clone(), env.payload())?;
        if g.round != round || g.rows != e.rows || g.dim != e.dim {
            return Err(ModelError::Protocol(format!("head gradient {}×{} for round {} does not fit", g.rows, g.dim, g.round)));
        }
        encoder_step(&mut encoder, &rows, &g.data, cfg.encoder_learning_rate)?;
        if encoder.params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Divergence { round });
        }
        if let Some(ev) = eval {
            let e = local_embed(ev, &encoder, EVAL_ROUND_BASE + round)?;
            send_embedding(mb, arbitrator, MsgType::Embedding, &e)?;
        }
    }
    Ok(encoder)
}

#[derive(Debug)]
pub struct CognitionOutcome {
    pub head: EnsembleHead,
    pub encoders: BTreeMap<PartyId, Encoder>,
    /// Party order of the head input.
    pub order: Vec<PartyId>,
    pub metrics: Vec<RoundMetrics>,
    pub transcript: AuditLog,
}

impl CognitionOutcome {
    /// Cooperative inference: one view per party in `order`.
    pub fn predict(&self, views: &[Vec<f64>]) -> Result<f64, ModelError> {
        let mut x = Vec::new();
        for (p, v) in self.order.iter().zip(views) {
            x.extend(self.encoders[p].embed_row(v)?);
        }
        Ok(crate::model_federation::sigmoid(self.head.logit(&x)?))
    }
}

enum Out {
    Arb(ArbitratorState),
    Party(Encoder),
}

/// Simulated cognition job. `parties` pairs each aligned view with its
/// encoder spec; the label party's dataset carries the labels.
pub fn run_cognition(
    parties: &[(&PartyDataset, EncoderSpec)],
    label_party: &PartyId,
    eval: Option<&[&PartyDataset]>,
    cfg: &CognitionConfig,
) -> Result<CognitionOutcome, ModelError> {
    run_cognition_as(parties, label_party, eval, cfg, &PartyId::new("arbitrator"))
}

/// [`run_cognition`] with a named arbitrator.
pub fn run_cognition_as(
    parties: &[(&PartyDataset, EncoderSpec)],
    label_party: &PartyId,
    eval: Option<&[&PartyDataset]>,
    cfg: &CognitionConfig,
    arbitrator: &PartyId,
) -> Result<CognitionOutcome, ModelError> {
    cfg.validate()?;
    let first = parties.first().ok_or_else(|| ModelError::Config("a cognition job needs at least one party".into()))?.0;
    for (ds, spec) in parties {
        if ds.entity_ids() != first.entity_ids() {
            return Err(ModelError::Consistency(format!("{} is not aligned with {}", ds.party_id, first.party_id)));
        }
        if ds.feature_names().len() != spec.inputs {
            return Err(ModelError::Config(format!(
                "{} has {} features but registered {}",
                ds.party_id,
                ds.feature_names().len(),
                spec.inputs
            )));
        }
        if cfg.privacy {
            spec.check_privacy()?;
        }
    }
    if let Some(ev) = eval {
        if ev.len() != parties.len() {
            return Err(ModelError::Config("one evaluation view per party is required".into()));
        }
    }
    let label_ds = parties
        .iter()
        .find(|(d, _)| &d.party_id == label_party)
        .ok_or_else(|| ModelError::Config(format!("label party {label_party} is not in the job")))?
        .0;
    let labels = label_ds.labels().ok_or_else(|| ModelError::Config(format!("{label_party} holds no labels")))?;
    let eval_labels = match eval {
        Some(ev) => {
            let pos = parties.iter().position(|(d, _)| &d.party_id == label_party).unwrap();
            Some(ev[pos].labels().ok_or_else(|| ModelError::Config("evaluation view of the label party has no labels".into()))?)
        }
        None => None,
    };

    let arbitrator = arbitrator.clone();
    if parties.iter().any(|(d, _)| d.party_id == arbitrator) {
        return Err(ModelError::Config(format!("{arbitrator} cannot both arbitrate and hold data")));
    }
    let registry: Vec<(PartyId, EncoderSpec)> = parties.iter().map(|(d, s)| (d.party_id.clone(), s.clone())).collect();
    let everyone: Vec<PartyId> = registry.iter().map(|p| p.0.clone()).chain([arbitrator.clone()]).collect();
    let (reg_ref, all_ref, arb_ref) = (&registry, &everyone, &arbitrator);
    let mut programs: Vec<PartyProgram<'_, Result<Out, ModelError>>> = vec![PartyProgram::new(arbitrator.clone(), move |ep| {
        let mut mb = Mailbox::new(ep, "cognition", None);
        let r = cognition_arbitrator(&mut mb, reg_ref, label_party, eval.is_some(), cfg).map(Out::Arb);
        if let Err(e) = &r {
            mb.abort(all_ref, &e.to_string());
        }
        r
    })];
    for (k, (ds, spec)) in parties.iter().enumerate() {
        let ds: &PartyDataset = ds;
        let send = (&ds.party_id == label_party).then_some((labels, eval_labels));
        let ev = eval.map(|e| e[k]);
        let encoder = Encoder::init(spec.clone(), cfg.seed, &ds.party_id)?;
        programs.push(PartyProgram::new(ds.party_id.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "cognition", None);
            let r = cognition_party(&mut mb, arb_ref, ds, ev, encoder, send, cfg).map(Out::Party);
            if let Err(e) = &r {
                mb.abort(all_ref, &e.to_string());
            }
            r
        }));
    }
    let out = simnet_run(programs, SimConfig::new(cfg.seed))?;
    let transcript = out.transcript;
    let mut encoders = BTreeMap::new();
    let mut arb = None;
    for (p, o) in crate::model_federation::collect_outputs(out.outputs)? {
        match o {
            Out::Arb(a) => arb = Some(a),
            Out::Party(e) => {
                encoders.insert(p, e);
            }
        }
    }
    let arb = arb.expect("arbitrator output");
    Ok(CognitionOutcome {
        head: arb.head,
        encoders,
        order: registry.into_iter().map(|p| p.0).collect(),
        metrics: arb.metrics,
        transcript,
    })
}

/// Two views whose label is the XOR of their signs: neither view alone
/// predicts better than chance. Each view has a signal column and a noise
/// column.
pub fn xor_of_views(n: usize, seed: u64) -> (PartyDataset, PartyDataset) {
    let mut rng = party_rng(seed, &PartyId::new("dataset"), "xor-of-views");
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let mut cols = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        // keep signals away from zero so the classes are separable
        let a: f64 = rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 };
        let b: f64 = rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 };
        cols[0].push(a);
        cols[1].push(rng.gen_range(-1.0..1.0));
        cols[2].push(b);
        cols[3].push(rng.gen_range(-1.0..1.0));
        labels.push(((a > 0.0) != (b > 0.0)) as u8);
    }
    let [a, an, b, bn] = cols;
    let left = PartyDataset::from_parts("view_a", ids.clone(), vec![("a".into(), a), ("a_noise".into(), an)], Some(labels))
        .expect("well-formed columns");
    let right =
        PartyDataset::from_parts("view_b", ids, vec![("b".into(), b), ("b_noise".into(), bn)], None).expect("well-formed columns");
    (left, right)
}

/// Best-effort AUC of the trained ensemble on aligned views.
pub fn ensemble_auc(out: &CognitionOutcome, views: &[&PartyDataset], labels: &[u8]) -> Result<f64, ModelError> {
    let rows: Vec<Vec<Vec<f64>>> = views.iter().map(|v| v.rows()).collect();
    let mut scores = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r[i].clone()).collect();
        scores.push(out.predict(&v)?);
    }
    Ok(auc(&scores, &labels.iter().map(|&y| y as f64).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_federation::{batch_loss_grad, Architecture, TrainingData};
    use crate::transport::{audit_assert_no_leak, ForbiddenPattern};

    fn spec(inputs: usize, hidden: Vec<usize>, outputs: usize) -> EncoderSpec {
        EncoderSpec { inputs, hidden, outputs, identity_init: false }
    }

    #[test]
    fn identity_and_zero_encoders() {
        let (a, _) = xor_of_views(10, 1);
        let id = Encoder::init(EncoderSpec { identity_init: true, ..spec(2, vec![], 2) }, 0, &a.party_id).unwrap();
        let e = local_embed(&a, &id, 1).unwrap();
        let flat: Vec<f64> = a.rows().concat();
        assert_eq!(e.data, flat);
        let zero = Encoder { spec: spec(2, vec![3], 1), params: vec![0.0; 13] };
        assert!(local_embed(&a, &zero, 1).unwrap().data.iter().all(|&v| v == 0.0));
        let wrong = Encoder::init(spec(3, vec![], 1), 0, &a.party_id).unwrap();
        assert!(matches!(local_embed(&a, &wrong, 1), Err(ModelError::Config(_))));
    }

    #[test]
    fn zero_head_rate_still_returns_gradients() {
        let (a, b) = xor_of_views(20, 2);
        let ea = local_embed(&a, &Encoder::init(spec(2, vec![], 1), 3, &a.party_id).unwrap(), 1).unwrap();
        let eb = local_embed(&b, &Encoder::init(spec(2, vec![], 1), 3, &b.party_id).unwrap(), 1).unwrap();
        let mut head = EnsembleHead::init(HeadKind::Mlp { hidden: 4 }, 2, 1).unwrap();
        let before = head.params.clone();
        let y: Vec<f64> = a.labels().unwrap().iter().map(|&v| v as f64).collect();
        let step = ensemble_round(&mut head, &[ea, eb.clone()], &y, 0.0).unwrap();
        assert_eq!(head.params, before);
        assert!(step.input_grads.iter().all(|g| g.len() == 20 && g.iter().any(|v| *v != 0.0)));
        let short = Embedding { rows: 19, data: eb.data[..19].to_vec(), ..eb };
        assert!(matches!(ensemble_round(&mut head, &[short.clone(), short], &y, 0.1), Err(ModelError::Protocol(_))));
    }

    /// Composite loss `mean L(h(f_a(x_a), f_b(x_b)))` evaluated directly.
    fn composite_loss(head: &EnsembleHead, encs: &[&Encoder], views: &[Vec<Vec<f64>>], y: &[f64]) -> f64 {
        let net = head.net().unwrap();
        let mut total = 0.0;
        for i in 0..y.len() {
            let x: Vec<f64> = encs.iter().zip(views).flat_map(|(e, v)| e.embed_row(&v[i]).unwrap()).collect();
            total += Loss::Logistic.eval(net.output(&head.params, &x)[0], y[i]).0;
        }
        total / y.len() as f64
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (a, b) = xor_of_views(15, 4);
        let views = vec![a.rows(), b.rows()];
        let y: Vec<f64> = a.labels().unwrap().iter().map(|&v| v as f64).collect();
        let ea = Encoder::init(spec(2, vec![3], 1), 5, &a.party_id).unwrap();
        let eb = Encoder::init(spec(2, vec![], 2), 5, &b.party_id).unwrap();
        let head = EnsembleHead::init(HeadKind::Mlp { hidden: 3 }, 3, 5).unwrap();
        // analytic: head step at rate 0, encoder steps at rate 0 expose the gradients
        let mut h = head.clone();
        let embs = [local_embed(&a, &ea, 1).unwrap(), local_embed(&b, &eb, 1).unwrap()];
        let step = ensemble_round(&mut h, &embs, &y, 0.0).unwrap();
        let (mut ea2, mut eb2) = (ea.clone(), eb.clone());
        let ga = encoder_step(&mut ea2, &views[0], &step.input_grads[0], 0.0).unwrap();
        let gb = encoder_step(&mut eb2, &views[1], &step.input_grads[1], 0.0).unwrap();
        let check = |grad: &[f64], which: usize| {
            for k in 0..grad.len() {
                let f = |delta: f64| {
                    let (mut pa, mut pb) = (ea.clone(), eb.clone());
                    let p = if which == 0 { &mut pa.params } else { &mut pb.params };
                    p[k] += delta;
                    composite_loss(&head, &[&pa, &pb], &views, &y)
                };
                let theta = if which == 0 { ea.params[k] } else { eb.params[k] };
                let hstep = 1e-6 * theta.abs().max(1.0);
                let fd = (f(hstep) - f(-hstep)) / (2.0 * hstep);
                assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(grad[k].abs()).max(1e-4), "enc {which} param {k}: {fd} vs {}", grad[k]);
            }
        };
        check(&ga, 0);
        check(&gb, 1);
    }

    #[test]
    fn single_party_frozen_identity_matches_central_head() {
        let (a, _) = xor_of_views(60, 6);
        let cfg = CognitionConfig {
            rounds: 15,
            head_learning_rate: 0.7,
            encoder_learning_rate: 0.0,
            head: HeadKind::Mlp { hidden: 4 },
            seed: 2,
            privacy: false,
        };
        let id = EncoderSpec { identity_init: true, ..spec(2, vec![], 2) };
        let out = run_cognition(&[(&a, id)], &a.party_id, None, &cfg).unwrap();
        let arch = Architecture::Mlp { inputs: 2, hidden: vec![4] };
        let data = TrainingData::from_dataset(&a).unwrap();
        let mut theta = EnsembleHead::init(cfg.head, 2, cfg.seed).unwrap().params;
        let all: Vec<usize> = (0..60).collect();
        for m in &out.metrics {
            let (loss, g) = batch_loss_grad(&arch, &theta, &data, &all).unwrap();
            assert!((loss - m.train_loss).abs() < 1e-9, "round {}: {loss} vs {}", m.round, m.train_loss);
            for (t, g) in theta.iter_mut().zip(&g) {
                *t -= cfg.head_learning_rate * g;
            }
        }
        for (p, q) in out.head.params.iter().zip(&theta) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn privacy_cap_and_raw_features_stay_home() {
        let (a, b) = xor_of_views(40, 7);
        let cfg = CognitionConfig {
            rounds: 3,
            head_learning_rate: 0.5,
            encoder_learning_rate: 0.5,
            head: HeadKind::Logistic,
            seed: 1,
            privacy: true,
        };
        let too_wide = run_cognition(&[(&a, spec(2, vec![], 2)), (&b, spec(2, vec![], 1))], &a.party_id, None, &cfg);
        assert!(matches!(too_wide, Err(ModelError::Config(_))));
        let out = run_cognition(&[(&a, spec(2, vec![], 1)), (&b, spec(2, vec![], 1))], &a.party_id, None, &cfg).unwrap();
        let forbidden: Vec<ForbiddenPattern> = [&a, &b]
            .iter()
            .flat_map(|d| d.columns().iter().map(|(n, c)| ForbiddenPattern::f64_vector(n.clone(), &c[..3])))
            .collect();
        audit_assert_no_leak(&out.transcript, &forbidden).unwrap();
        let again = run_cognition(&[(&a, spec(2, vec![], 1)), (&b, spec(2, vec![], 1))], &a.party_id, None, &cfg).unwrap();
        assert_eq!(out.metrics, again.metrics);
    }
}

#[cfg(test)]
mod xor_tests {
    use super::*;

    #[test]
    fn xor_views_need_each_other() {
        let (a, b) = xor_of_views(400, 11);
        let (ta, tb) = xor_of_views(400, 12);
        let cfg = CognitionConfig {
            rounds: 400,
            head_learning_rate: 1.0,
            encoder_learning_rate: 1.0,
            head: HeadKind::Mlp { hidden: 8 },
            seed: 3,
            privacy: true,
        };
        let s = EncoderSpec { inputs: 2, hidden: vec![], outputs: 1, identity_init: false };
        let fed = run_cognition(&[(&a, s.clone()), (&b, s.clone())], &a.party_id, Some(&[&ta, &tb]), &cfg).unwrap();
        assert!(fed.metrics.last().unwrap().eval_metric >= 0.9);

        // each view on its own, same head and budget
        let with_labels = |d: &PartyDataset, y: &[u8]| {
            PartyDataset::from_parts(d.party_id.as_str(), d.entity_ids().to_vec(), d.columns().to_vec(), Some(y.to_vec())).unwrap()
        };
        let (ya, tya) = (a.labels().unwrap(), ta.labels().unwrap());
        for (train, test) in [(with_labels(&a, ya), with_labels(&ta, tya)), (with_labels(&b, ya), with_labels(&tb, tya))] {
            let solo = run_cognition(&[(&train, s.clone())], &train.party_id, Some(&[&test]), &cfg).unwrap();
            assert!(solo.metrics.last().unwrap().eval_metric <= 0.6, "{}", solo.metrics.last().unwrap().eval_metric);
        }
    }
}
