//! The run driver: loads a config, runs the job on the simulated network and
//! writes the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use super::artifact::{load_knowledge, store_knowledge, Knowledge, KnowledgeModel};
use super::config::{
    AlignmentMethod, ConfigError, InfoOperation, JobConfig, JobKind, Layout, Level, PartySpec, Role,
};
use super::report::write_metrics;
use super::{check_policy, sha256_hex, write_manifest, JobError};
use crate::alignment::{align_datasets, party_rng, run_psi_simulated, AlignmentError};
use crate::codec::{PayloadReader, PayloadWriter};
use crate::cognition_federation::{
    local_embed, run_cognition_as, CognitionConfig, Encoder, EncoderSpec, Embedding, EnsembleHead,
};
use crate::info_federation::{
    encrypted_inference, ridge_fit_encrypted, secure_count, secure_mean, secure_sum, InfoConfig, InfoRoles, LinearModel,
};
use crate::knowledge_federation::{
    federated_conjunction, forward_chain, parse_rules, Judgement, KnowledgeNode, PredicateRegistry, Rule,
};
use crate::model_federation::{
    run_cross_feature_as, run_cross_sample_as, select_features_vertical, sigmoid, CrossFeatureConfig, ModelError,
    ModelParams, RoundMetrics, TrainConfig, VerticalModel,
};
use crate::sandbox::{
    deidentify, ingest_csv, job_id_key, standardize, PartyDataset, SandboxError, SandboxPolicy, Schema, Standardizer,
};
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

/// One line of `judgements.csv`. Entities are the job's keyed digests,
/// never raw ids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JudgementRow {
    pub query: String,
    pub party: PartyId,
    pub entity: String,
    pub score: f64,
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub job_id: String,
    pub output_dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub knowledge_sha256: Option<String>,
    pub judgements: Vec<JudgementRow>,
    /// Name and value of an information-level statistic.
    pub statistic: Option<(String, f64)>,
    pub envelopes: usize,
}

/// Everything a job produced before it is written out.
#[derive(Default)]
pub(super) struct Produced {
    pub metrics: Vec<RoundMetrics>,
    pub rounds: u64,
    pub model: Option<KnowledgeModel>,
    pub preprocessing: BTreeMap<PartyId, Standardizer>,
    pub judgements: Vec<JudgementRow>,
    pub statistic: Option<(String, f64)>,
    pub transcript: AuditLog,
}

pub fn run_job(path: &Path) -> Result<RunSummary, JobError> {
    run_config(&JobConfig::load(path)?)
}

pub fn run_config(cfg: &JobConfig) -> Result<RunSummary, JobError> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let stored = match &cfg.job.knowledge {
        Some(p) if cfg.job.kind == JobKind::Apply => {
            let k = load_knowledge(&cfg.resolve(p))?;
            if (k.level, k.layout) != (cfg.job.level, cfg.job.layout) {
                return Err(ConfigError(format!(
                    "stored knowledge is {} {}, the job is {} {}",
                    k.level, k.layout, cfg.job.level, cfg.job.layout
                ))
                .into());
            }
            Some(k)
        }
        _ => None,
    };
    let ctx = Ctx { cfg, id_key: job_id_key(&cfg.job.id, &cfg.job.id_salt), stored: stored.as_ref() };
    let produced = match (cfg.job.kind, cfg.job.level, cfg.job.layout) {
        (JobKind::Learn, Level::Information, _) => ctx.learn_information()?,
        (JobKind::Learn, Level::Model, Layout::CrossSample) => ctx.learn_cross_sample()?,
        (JobKind::Learn, Level::Model, _) => ctx.learn_cross_feature()?,
        (JobKind::Learn, Level::Cognition, _) => ctx.learn_cognition()?,
        (JobKind::Learn, Level::Knowledge, _) => ctx.learn_knowledge()?,
        (JobKind::Apply, ..) => ctx.apply(stored.as_ref().expect("apply jobs load knowledge"))?,
    };
    check_policy(cfg, &produced.transcript)?;
    write_outputs(cfg, produced)
}

pub(super) struct Ctx<'a> {
    pub cfg: &'a JobConfig,
    pub id_key: Vec<u8>,
    pub stored: Option<&'a Knowledge>,
}

fn sandbox_err(party: &PartyId) -> impl Fn(SandboxError) -> JobError + '_ {
    move |source| JobError::Sandbox { party: party.clone(), source }
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cfg.job.seed
    }

    /// Ingests, scales and de-identifies one party's table. Apply jobs reuse
    /// the transform stored at training time for the columns still present.
    pub(super) fn load_party(&self, spec: &PartySpec) -> Result<(PartyDataset, Standardizer), JobError> {
        let err = sandbox_err(&spec.id);
        let schema_path = spec.schema.as_ref().ok_or_else(|| ConfigError(format!("party {} has no schema", spec.id)))?;
        let data_path = spec.data.as_ref().ok_or_else(|| ConfigError(format!("party {} has no data", spec.id)))?;
        let schema = Schema::load(&self.cfg.resolve(schema_path)).map_err(&err)?;
        let raw = ingest_csv(&self.cfg.resolve(data_path), &schema, spec.id.clone()).map_err(&err)?;
        let (scaled, st) = match self.stored.and_then(|k| k.preprocessing.get(&spec.id)) {
            Some(s) => {
                let present =
                    Standardizer { columns: s.columns.iter().filter(|c| raw.column(&c.name).is_some()).cloned().collect() };
                (present.apply(&raw).map_err(&err)?, present)
            }
            None => standardize(&raw, &SandboxPolicy::from_schema(&schema, self.id_key.clone())).map_err(&err)?,
        };
        Ok((deidentify(&scaled, &self.id_key).0, st))
    }

    /// Data parties with the label holder first.
    fn data_specs(&self) -> Vec<&PartySpec> {
        let mut specs = self.cfg.data_parties();
        specs.sort_by_key(|p| p.role != Role::LabelHolder);
        specs
    }

    fn load_all(&self, specs: &[&PartySpec], out: &mut Produced) -> Result<Vec<PartyDataset>, JobError> {
        let mut datasets = Vec::with_capacity(specs.len());
        for spec in specs {
            let (ds, st) = self.load_party(spec)?;
            out.preprocessing.insert(spec.id.clone(), st);
            datasets.push(ds);
        }
        Ok(datasets)
    }

    /// Restricts every dataset to the shared entities, in a shared order.
    fn align(&self, datasets: Vec<PartyDataset>, transcript: &mut AuditLog) -> Result<Vec<PartyDataset>, JobError> {
        let aligned = match self.cfg.policy.alignment {
            AlignmentMethod::Psi => {
                let lists: Vec<(PartyId, Vec<String>)> =
                    datasets.iter().map(|d| (d.party_id.clone(), d.entity_ids().to_vec())).collect();
                let (res, log) = run_psi_simulated(&lists, &self.cfg.psi_group()?, self.seed())?;
                transcript.extend(&log);
                align_datasets(&datasets, &res)?
            }
            AlignmentMethod::None => {
                let first = &datasets[0];
                if let Some(d) = datasets.iter().find(|d| d.entity_ids() != first.entity_ids()) {
                    return Err(AlignmentError::Consistency(format!(
                        "alignment is off but {} and {} list different entities",
                        first.party_id, d.party_id
                    ))
                    .into());
                }
                datasets
            }
        };
        if aligned[0].n_rows() == 0 {
            return Err(AlignmentError::Consistency("the parties share no entities".into()).into());
        }
        Ok(aligned)
    }

    fn learn_information(&self) -> Result<Produced, JobError> {
        let sec = self.cfg.information.as_ref().expect("validated");
        let mut out = Produced::default();
        let datasets = self.load_all(&self.data_specs(), &mut out)?;
        let ic = self.info_config(&datasets, sec.key_bits, sec.scale_bits)?;
        let (name, value, transcript) = match sec.operation {
            InfoOperation::Sum => {
                let col = sec.column.as_deref().expect("validated");
                let o = secure_sum(&datasets, col, &ic)?;
                (format!("sum({col})"), o.value, o.transcript)
            }
            InfoOperation::Mean => {
                let col = sec.column.as_deref().expect("validated");
                let o = secure_mean(&datasets, col, &ic)?;
                (format!("mean({col})"), o.value, o.transcript)
            }
            InfoOperation::Count => {
                let p = sec.predicate.as_ref().expect("validated");
                let o = secure_count(&datasets, p, &ic)?;
                (format!("count({} {} {})", p.column, p.cmp, p.value), o.value as f64, o.transcript)
            }
            InfoOperation::Ridge => {
                let target = sec.target.as_deref().expect("validated");
                let o = ridge_fit_encrypted(&datasets, target, sec.lambda, &ic)?;
                out.model = Some(KnowledgeModel::Ridge { model: o.value });
                out.transcript = o.transcript;
                return Ok(out);
            }
        };
        out.statistic = Some((name.clone(), value));
        out.model = Some(KnowledgeModel::Statistic { name, value });
        out.transcript = transcript;
        Ok(out)
    }

    fn info_config(&self, datasets: &[PartyDataset], key_bits: u64, scale_bits: u32) -> Result<InfoConfig, JobError> {
        let provider = self.cfg.crypto_provider().ok_or_else(|| ConfigError("no crypto provider".into()))?;
        Ok(InfoConfig {
            key_bits,
            seed: self.seed(),
            scale_bits,
            roles: Some(InfoRoles {
                parties: datasets.iter().map(|d| d.party_id.clone()).collect(),
                arbitrator: self.cfg.arbitrator().clone(),
                provider: provider.clone(),
            }),
        })
    }

    fn learn_cross_sample(&self) -> Result<Produced, JobError> {
        let t = self.cfg.training.as_ref().expect("validated");
        let mut out = Produced::default();
        let datasets = self.load_all(&self.data_specs(), &mut out)?;
        let names: Vec<String> = if t.features.is_empty() {
            datasets[0].feature_names().into_iter().map(String::from).collect()
        } else {
            t.features.clone()
        };
        let datasets = same_features(datasets, &names)?;
        let o = run_cross_sample_as(&datasets, &t.architecture(names.len()), &train_config(self.cfg), self.cfg.arbitrator())?;
        out.rounds = t.rounds;
        out.metrics = o.metrics;
        out.model = Some(KnowledgeModel::Horizontal { params: o.params, feature_names: names });
        out.transcript = o.transcript;
        Ok(out)
    }

    fn vertical_specs(&self) -> Result<(&PartySpec, &PartySpec), JobError> {
        let specs = self.data_specs();
        match specs.as_slice() {
            [a, b] if a.role == Role::LabelHolder => Ok((a, b)),
            _ => Err(ConfigError("cross-feature jobs need one label holder and one data party".into()).into()),
        }
    }

    fn learn_cross_feature(&self) -> Result<Produced, JobError> {
        let v = self.cfg.vertical.as_ref().expect("validated");
        let mut out = Produced::default();
        let (a, b) = self.vertical_specs()?;
        let loaded = self.load_all(&[a, b], &mut out)?;
        let aligned = self.align(loaded, &mut out.transcript)?;
        let (train, eval) = split_rows(aligned[0].n_rows(), v.eval_fraction, self.seed());
        let mut ta = aligned[0].select_rows(&train);
        let mut tb = aligned[1].select_rows(&train);
        let mut ev = (!eval.is_empty()).then(|| (aligned[0].select_rows(&eval), aligned[1].select_rows(&eval)));
        if let Some(threshold) = v.feature_threshold {
            let sel = select_features_vertical(&ta, &tb, threshold, v.key_bits, self.seed())?;
            out.transcript.extend(&sel.transcript);
            let keep_a: Vec<&str> = sel.label_side.kept.iter().map(String::as_str).collect();
            let keep_b: Vec<&str> = sel.feature_side.kept.iter().map(String::as_str).collect();
            ta = ta.select_columns(&keep_a).map_err(sandbox_err(&a.id))?;
            tb = tb.select_columns(&keep_b).map_err(sandbox_err(&b.id))?;
            if let Some((ea, eb)) = ev {
                ev = Some((
                    ea.select_columns(&keep_a).map_err(sandbox_err(&a.id))?,
                    eb.select_columns(&keep_b).map_err(sandbox_err(&b.id))?,
                ));
            }
        }
        let cf = CrossFeatureConfig {
            rounds: v.rounds,
            batch_size: v.batch_size,
            learning_rate: v.learning_rate,
            l2: v.l2,
            seed: self.seed(),
            protocol: v.protocol,
            taylor_sigmoid: v.taylor_sigmoid,
            key_bits: v.key_bits,
        };
        let provider = self.cfg.crypto_provider().cloned().unwrap_or_else(|| PartyId::new("crypto_provider"));
        let o = run_cross_feature_as(&ta, &tb, ev.as_ref().map(|(a, b)| (a, b)), &cf, &provider)?;
        out.transcript.extend(&o.transcript);
        out.rounds = v.rounds;
        out.metrics = o.metrics;
        out.model = Some(KnowledgeModel::Vertical { model: o.model });
        Ok(out)
    }

    fn learn_cognition(&self) -> Result<Produced, JobError> {
        let c = self.cfg.cognition.as_ref().expect("validated");
        let mut out = Produced::default();
        let specs = self.data_specs();
        let loaded = self.load_all(&specs, &mut out)?;
        let aligned = self.align(loaded, &mut out.transcript)?;
        let (train, eval) = split_rows(aligned[0].n_rows(), c.eval_fraction, self.seed());
        let train_views: Vec<PartyDataset> = aligned.iter().map(|d| d.select_rows(&train)).collect();
        let eval_views: Vec<PartyDataset> = aligned.iter().map(|d| d.select_rows(&eval)).collect();
        let mut parties: Vec<(&PartyDataset, EncoderSpec)> = Vec::new();
        for (spec, ds) in specs.iter().zip(&train_views) {
            let shape = spec.encoder.as_ref().expect("validated");
            parties.push((ds, shape.spec(ds.n_features())));
        }
        let eval_refs: Vec<&PartyDataset> = eval_views.iter().collect();
        let cc = CognitionConfig {
            rounds: c.rounds,
            head_learning_rate: c.head_learning_rate,
            encoder_learning_rate: c.encoder_learning_rate,
            head: c.head,
            seed: self.seed(),
            privacy: c.privacy,
        };
        let label_party = self.cfg.label_holder().expect("validated");
        let eval = (!eval.is_empty()).then_some(eval_refs.as_slice());
        let o = run_cognition_as(&parties, label_party, eval, &cc, self.cfg.arbitrator())?;
        out.transcript.extend(&o.transcript);
        out.rounds = c.rounds;
        out.metrics = o.metrics;
        out.model = Some(KnowledgeModel::Ensemble { head: o.head, encoders: o.encoders, order: o.order });
        Ok(out)
    }

    fn load_nodes(&self) -> Result<Vec<KnowledgeNode>, JobError> {
        let mut nodes = Vec::new();
        for spec in self.cfg.data_parties() {
            let path = spec.facts.as_ref().expect("validated");
            let file = std::fs::File::open(self.cfg.resolve(path))?;
            nodes.push(KnowledgeNode::from_csv(spec.id.clone(), file, Some(&self.id_key))?);
        }
        Ok(nodes)
    }

    fn learn_knowledge(&self) -> Result<Produced, JobError> {
        let k = self.cfg.knowledge.as_ref().expect("validated");
        let mut registry = PredicateRegistry::new();
        for spec in self.cfg.data_parties() {
            for pred in &spec.predicates {
                registry.register(pred.clone(), spec.id.clone())?;
            }
        }
        let rules_path = k.rules.as_ref().expect("validated");
        let rules = parse_rules(&std::fs::read_to_string(self.cfg.resolve(rules_path))?)?;
        let mut nodes = self.load_nodes()?;
        let chain = forward_chain(&mut nodes, &rules, &registry, k.max_depth, &self.cfg.psi_group()?, self.seed())?;
        let mut last: BTreeMap<&str, &Judgement> = BTreeMap::new();
        for j in &chain.judgements {
            last.insert(j.rule.as_str(), j);
        }
        let mut out = Produced { rounds: chain.depth as u64, transcript: chain.transcript.clone(), ..Default::default() };
        for rule in &rules {
            if let Some(j) = last.get(rule.name.as_str()) {
                out.judgements.extend(rule_rows(rule, j, &registry)?);
            }
        }
        out.model = Some(KnowledgeModel::Rules { rules, registry });
        Ok(out)
    }

    fn apply(&self, stored: &Knowledge) -> Result<Produced, JobError> {
        let mut out = Produced::default();
        match &stored.model {
            KnowledgeModel::Statistic { name, .. } => {
                return Err(ConfigError(format!("the stored statistic {name} has nothing to apply")).into())
            }
            KnowledgeModel::Ridge { model } => self.apply_ridge(model, &mut out)?,
            KnowledgeModel::Horizontal { params, feature_names } => self.apply_horizontal(params, feature_names, &mut out)?,
            KnowledgeModel::Vertical { model } => self.apply_vertical(model, &mut out)?,
            KnowledgeModel::Ensemble { head, encoders, order } => self.apply_ensemble(head, encoders, order, &mut out)?,
            KnowledgeModel::Rules { rules, registry } => {
                let nodes = self.load_nodes()?;
                let group = self.cfg.psi_group()?;
                for rule in rules {
                    let (j, log) = federated_conjunction(rule, &nodes, registry, &group, self.seed())?;
                    out.transcript.extend(&log);
                    out.judgements.extend(rule_rows(rule, &j, registry)?);
                }
            }
        }
        Ok(out)
    }

    fn score_rows(&self, party: &PartyId, ds: &PartyDataset, scores: &[f64], provenance: &str) -> Vec<JudgementRow> {
        ds.entity_ids()
            .iter()
            .zip(scores)
            .map(|(e, s)| JudgementRow {
                query: self.cfg.job.id.clone(),
                party: party.clone(),
                entity: e.clone(),
                score: *s,
                provenance: provenance.into(),
            })
            .collect()
    }

    fn apply_ridge(&self, model: &LinearModel, out: &mut Produced) -> Result<(), JobError> {
        let sec = self.cfg.information.as_ref().expect("validated");
        let datasets = self.load_all(&self.data_specs(), out)?;
        let ic = self.info_config(&datasets, sec.key_bits, sec.scale_bits)?;
        let o = encrypted_inference(&datasets, model, &ic)?;
        for (party, scores) in &o.value {
            let ds = datasets.iter().find(|d| &d.party_id == party).expect("scored parties hold data");
            out.judgements.extend(self.score_rows(party, ds, scores, "ridge"));
        }
        out.transcript = o.transcript;
        Ok(())
    }

    /// Every party scores its own rows with the shared model; nothing is sent.
    fn apply_horizontal(&self, params: &ModelParams, names: &[String], out: &mut Produced) -> Result<(), JobError> {
        let datasets = same_features(self.load_all(&self.data_specs(), out)?, names)?;
        for ds in &datasets {
            let scores = ds.rows().iter().map(|x| params.predict(x)).collect::<Result<Vec<f64>, ModelError>>()?;
            out.judgements.extend(self.score_rows(&ds.party_id, ds, &scores, "horizontal"));
        }
        Ok(())
    }

    /// The feature party sends its partial logits; the label party adds its
    /// own and keeps the scores.
    fn apply_vertical(&self, model: &VerticalModel, out: &mut Produced) -> Result<(), JobError> {
        let (a, b) = self.vertical_specs()?;
        if (&a.id, &b.id) != (&model.label_party, &model.feature_party) {
            return Err(ConfigError(format!(
                "the model belongs to {} and {}, the job names {} and {}",
                model.label_party, model.feature_party, a.id, b.id
            ))
            .into());
        }
        let loaded = self.load_all(&[a, b], out)?;
        let aligned = self.align(loaded, &mut out.transcript)?;
        let xa = aligned[0].select_columns(&str_refs(&model.label_features)).map_err(sandbox_err(&a.id))?.rows();
        let xb = aligned[1].select_columns(&str_refs(&model.feature_features)).map_err(sandbox_err(&b.id))?.rows();
        let (xa, xb) = (&xa, &xb);
        let zero = vec![0.0; model.feature_features.len()];
        let zero = &zero;
        let programs: Vec<PartyProgram<'_, Result<Option<Vec<f64>>, ModelError>>> = vec![
            PartyProgram::new(a.id.clone(), move |ep| {
                let mut mb = Mailbox::new(ep, "vertical-apply", None);
                let env = mb.recv_from(&model.feature_party, MsgType::PartialLogit)?;
                let mut r = PayloadReader::new(env.payload());
                let zb = r.f64s()?;
                r.finish()?;
                if zb.len() != xa.len() {
                    return Err(ModelError::Protocol(format!("{} partial logits for {} rows", zb.len(), xa.len())));
                }
                Ok(Some(xa.iter().zip(&zb).map(|(x, z)| sigmoid(model.logit(x, zero) + z)).collect()))
            }),
            PartyProgram::new(b.id.clone(), move |ep| {
                let mut mb = Mailbox::new(ep, "vertical-apply", None);
                let zb: Vec<f64> = xb.iter().map(|x| model.w_feature.iter().zip(x).map(|(w, v)| w * v).sum()).collect();
                let mut w = PayloadWriter::new();
                w.f64s(&zb);
                mb.send(&model.label_party, MsgType::PartialLogit, 1, w.finish())?;
                Ok(None)
            }),
        ];
        let sim = simnet_run(programs, SimConfig::new(self.seed()))?;
        out.transcript.extend(&sim.transcript);
        for (party, r) in sim.outputs {
            if let Some(scores) = r? {
                out.judgements.extend(self.score_rows(&party, &aligned[0], &scores, "vertical"));
            }
        }
        Ok(())
    }

    /// Each party embeds its view and sends it to the arbitrator, which runs
    /// the head and keeps the scores.
    fn apply_ensemble(
        &self,
        head: &EnsembleHead,
        encoders: &BTreeMap<PartyId, Encoder>,
        order: &[PartyId],
        out: &mut Produced,
    ) -> Result<(), JobError> {
        let mut specs = Vec::with_capacity(order.len());
        for p in order {
            let spec = self
                .cfg
                .party(p)
                .filter(|s| s.role.holds_data())
                .ok_or_else(|| ConfigError(format!("the stored ensemble needs data party {p}")))?;
            specs.push(spec);
        }
        let loaded = self.load_all(&specs, out)?;
        let aligned = self.align(loaded, &mut out.transcript)?;
        for ds in &aligned {
            let want = encoders[&ds.party_id].spec.inputs;
            if ds.n_features() != want {
                return Err(ModelError::Config(format!(
                    "{} has {} features, its encoder takes {want}",
                    ds.party_id,
                    ds.n_features()
                ))
                .into());
            }
        }
        let arbitrator = self.cfg.arbitrator();
        let mut programs: Vec<PartyProgram<'_, Result<Option<Vec<f64>>, ModelError>>> = Vec::new();
        programs.push(PartyProgram::new(arbitrator.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "ensemble-apply", None);
            let mut views = Vec::with_capacity(order.len());
            for p in order {
                let env = mb.recv_from(p, MsgType::Embedding)?;
                views.push(Embedding::from_payload(p.clone(), env.payload())?);
            }
            let rows = views.first().map_or(0, |e| e.rows);
            if views.iter().any(|e| e.rows != rows) {
                return Err(ModelError::Consistency("embeddings disagree on the number of rows".into()));
            }
            let mut scores = Vec::with_capacity(rows);
            for i in 0..rows {
                let x: Vec<f64> = views.iter().flat_map(|e| e.row(i).iter().copied()).collect();
                scores.push(sigmoid(head.logit(&x)?));
            }
            Ok(Some(scores))
        }));
        for ds in &aligned {
            let enc = &encoders[&ds.party_id];
            programs.push(PartyProgram::new(ds.party_id.clone(), move |ep| {
                let mut mb = Mailbox::new(ep, "ensemble-apply", None);
                let e = local_embed(ds, enc, 0)?;
                mb.send(arbitrator, MsgType::Embedding, 0, e.to_payload())?;
                Ok(None)
            }));
        }
        let sim = simnet_run(programs, SimConfig::new(self.seed()))?;
        out.transcript.extend(&sim.transcript);
        for (party, r) in sim.outputs {
            if let Some(scores) = r? {
                out.judgements.extend(self.score_rows(&party, &aligned[0], &scores, "ensemble"));
            }
        }
        Ok(())
    }
}

pub(super) fn train_config(cfg: &JobConfig) -> TrainConfig {
    let t = cfg.training.as_ref().expect("validated");
    TrainConfig {
        rounds: t.rounds,
        local_epochs: t.local_epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        seed: cfg.job.seed,
        mode: cfg.train_mode(),
        taylor_sigmoid: t.taylor_sigmoid,
        l2: t.l2,
        dp: cfg.policy.dp.clone(),
    }
}

/// Every party must carry exactly `names`; columns come back in that order.
pub(super) fn same_features(datasets: Vec<PartyDataset>, names: &[String]) -> Result<Vec<PartyDataset>, JobError> {
    let mut want: Vec<&str> = names.iter().map(String::as_str).collect();
    let ordered = want.clone();
    want.sort_unstable();
    datasets
        .into_iter()
        .map(|ds| {
            let mut have = ds.feature_names();
            have.sort_unstable();
            if have != want {
                return Err(JobError::Sandbox {
                    party: ds.party_id.clone(),
                    source: SandboxError::Schema(format!("feature columns {have:?} differ from the job's {want:?}")),
                });
            }
            ds.select_columns(&ordered).map_err(sandbox_err(&ds.party_id))
        })
        .collect()
}

fn str_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn rule_rows(rule: &Rule, j: &Judgement, registry: &PredicateRegistry) -> Result<Vec<JudgementRow>, JobError> {
    let owner = registry.owner(&rule.consequent.predicate)?;
    Ok(j.entities
        .iter()
        .map(|e| JudgementRow {
            query: j.query_id.clone(),
            party: owner.clone(),
            entity: e.clone(),
            score: rule.consequent.value,
            provenance: j.provenance.join(" & "),
        })
        .collect())
}

/// Seeded train/eval split of `0..n`; both halves sorted.
fn split_rows(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut party_rng(seed, &PartyId::new("job"), "eval-split"));
    let k = ((n as f64) * eval_fraction).round() as usize;
    let mut eval = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    (train, eval)
}

fn write_judgements(path: &Path, rows: &[JudgementRow]) -> Result<(), JobError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| JobError::Io(e.into()))?;
    w.write_record(["query", "party", "entity", "score", "provenance"]).map_err(|e| JobError::Io(e.into()))?;
    for r in rows {
        w.write_record([r.query.as_str(), r.party.as_str(), &r.entity, &r.score.to_string(), &r.provenance])
            .map_err(|e| JobError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub(super) fn write_outputs(cfg: &JobConfig, p: Produced) -> Result<RunSummary, JobError> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    write_metrics(&dir.join("metrics.csv"), &p.metrics)?;

    let knowledge = match (cfg.job.kind, p.model) {
        (JobKind::Learn, Some(model)) => Some(Knowledge {
            level: cfg.job.level,
            layout: cfg.job.layout,
            job_id: cfg.job.id.clone(),
            seed: cfg.job.seed,
            rounds: p.rounds,
            final_metrics: p.metrics.last().cloned(),
            preprocessing: p.preprocessing,
            model,
        }),
        _ => None,
    };
    if let Some(k) = &knowledge {
        store_knowledge(k, &dir.join("knowledge.json"))?;
    }
    if cfg.job.kind == JobKind::Apply || cfg.job.level == Level::Knowledge {
        write_judgements(&dir.join("judgements.csv"), &p.judgements)?;
    }
    let audit_path = dir.join("audit.log");
    p.transcript.save(&audit_path)?;

    let mut m: Vec<(String, String)> = vec![
        ("job_id".into(), cfg.job.id.clone()),
        ("kind".into(), cfg.job.kind.to_string()),
        ("level".into(), cfg.job.level.to_string()),
        ("layout".into(), cfg.job.layout.to_string()),
        ("seed".into(), cfg.job.seed.to_string()),
        ("kfed_version".into(), env!("CARGO_PKG_VERSION").into()),
        ("config_sha256".into(), sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))),
        ("policy".into(), serde_json::to_string(&cfg.policy).expect("policy serializes")),
        ("rounds".into(), p.rounds.to_string()),
    ];
    for f in cfg.input_files() {
        // socket-mode parties only hold their own inputs
        let digest = match std::fs::read(cfg.resolve(&f)) {
            Ok(bytes) => sha256_hex(&bytes),
            Err(_) => "unavailable".into(),
        };
        m.push((format!("input.{}", f.display()), digest));
    }
    let digest = knowledge.as_ref().map(Knowledge::digest);
    if let Some(d) = &digest {
        m.push(("knowledge_sha256".into(), d.clone()));
    }
    m.push(("envelopes".into(), p.transcript.len().to_string()));
    m.push(("audit_sha256".into(), sha256_hex(&std::fs::read(&audit_path)?)));
    if let Some((name, value)) = &p.statistic {
        m.push(("statistic".into(), name.clone()));
        m.push(("statistic_value".into(), value.to_string()));
    }
    write_manifest(&dir.join("manifest.txt"), &m)?;

    Ok(RunSummary {
        job_id: cfg.job.id.clone(),
        output_dir: dir,
        metrics: p.metrics,
        knowledge_sha256: digest,
        judgements: p.judgements,
        statistic: p.statistic,
        envelopes: p.transcript.len(),
    })
}
