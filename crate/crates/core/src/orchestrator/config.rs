//! Job configuration files (TOML).
//!
//! ```toml
//! [job]
//! id = "credit-demo"
//! kind = "learn"            # learn | apply
//! level = "model"           # information | model | cognition | knowledge
//! layout = "cross_feature"  # cross_sample | cross_feature | multi_view | knowledge_net
//! seed = 7
//! output = "runs/credit"    # relative paths resolve against the config file
//!
//! [policy]
//! he_enabled = true
//! masking = false
//! alignment = "psi"         # psi | none
//!
//! [[party]]
//! id = "bank"
//! role = "label_holder"     # data | label_holder | arbitrator | crypto_provider
//! data = "bank.csv"
//! schema = "bank.schema.toml"
//!
//! [vertical]
//! rounds = 60
//! learning_rate = 0.5
//! protocol = "label_transfer"
//! ```
//!
//! One section per layout carries its training or query settings:
//! `[training]` (cross-sample model), `[vertical]`, `[cognition]`,
//! `[information]` and `[knowledge]`.

use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cognition_federation::{EncoderSpec, HeadKind};
use crate::crypto::{DpParams, SafePrimeGroup};
use crate::info_federation::ColumnPredicate;
use crate::model_federation::{Architecture, TrainMode, VerticalProtocol};
use crate::transport::PartyId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    /// Create knowledge from the parties' data.
    Learn,
    /// Apply stored knowledge to the parties' data.
    Apply,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Information,
    Model,
    Cognition,
    Knowledge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    CrossSample,
    CrossFeature,
    MultiView,
    KnowledgeNet,
    /// Parsed only to be refused with a clear message.
    Hybrid,
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobKind::Learn => "learn",
            JobKind::Apply => "apply",
        })
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Information => "information",
            Level::Model => "model",
            Level::Cognition => "cognition",
            Level::Knowledge => "knowledge",
        })
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::CrossSample => "cross_sample",
            Layout::CrossFeature => "cross_feature",
            Layout::MultiView => "multi_view",
            Layout::KnowledgeNet => "knowledge_net",
            Layout::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSection {
    pub id: String,
    pub kind: JobKind,
    pub level: Level,
    pub layout: Layout,
    pub seed: u64,
    pub output: PathBuf,
    /// Stored knowledge for `apply` jobs.
    #[serde(default)]
    pub knowledge: Option<PathBuf>,
    /// `modp2048` or, for tests only, `test256`.
    #[serde(default = "default_group")]
    pub psi_group: String,
    /// Mixed into the job's entity-id hashing key.
    #[serde(default)]
    pub id_salt: String,
}

fn default_group() -> String {
    "modp2048".into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMethod {
    #[default]
    Psi,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustModel {
    #[default]
    HonestButCurious,
}

/// Protections a job must run under. Anything not switched on here is
/// refused, and every envelope type a run produces is checked against it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecurityPolicy {
    #[serde(default)]
    pub he_enabled: bool,
    #[serde(default)]
    pub masking: bool,
    #[serde(default)]
    pub dp: Option<DpParams>,
    #[serde(default)]
    pub alignment: AlignmentMethod,
    #[serde(default)]
    pub trust_model: TrustModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Data,
    LabelHolder,
    Arbitrator,
    CryptoProvider,
}

impl Role {
    pub fn holds_data(self) -> bool {
        matches!(self, Role::Data | Role::LabelHolder)
    }
}

/// Encoder shape for a cognition party; the input width comes from its data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub outputs: usize,
    #[serde(default)]
    pub identity_init: bool,
}

impl EncoderShape {
    pub fn spec(&self, inputs: usize) -> EncoderSpec {
        EncoderSpec { inputs, hidden: self.hidden.clone(), outputs: self.outputs, identity_init: self.identity_init }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySpec {
    pub id: PartyId,
    pub role: Role,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Knowledge nodes: fact file and owned predicates.
    #[serde(default)]
    pub facts: Option<PathBuf>,
    #[serde(default)]
    pub predicates: Vec<String>,
    #[serde(default)]
    pub encoder: Option<EncoderShape>,
    /// Socket mode: listening address and channel identity.
    #[serde(default)]
    pub address: Option<SocketAddr>,
    #[serde(default)]
    pub public_key: Option<String>,
    #[serde(default)]
    pub key_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

/// Cross-sample model training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub model: ModelKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub rounds: u64,
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub local_epochs: u64,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub taylor_sigmoid: bool,
    /// Feature columns in model order. Socket mode needs them because the
    /// arbitrator sees no data; in simulation they default to the first
    /// party's columns.
    #[serde(default)]
    pub features: Vec<String>,
}

fn one() -> u64 {
    1
}

impl TrainingSection {
    pub fn architecture(&self, inputs: usize) -> Architecture {
        match self.model {
            ModelKind::Linear => Architecture::Linear { inputs },
            ModelKind::Logistic => Architecture::Logistic { inputs },
            ModelKind::Mlp => Architecture::Mlp { inputs, hidden: self.hidden.clone() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerticalSection {
    pub rounds: u64,
    pub learning_rate: f64,
    pub protocol: VerticalProtocol,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub taylor_sigmoid: bool,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
    /// Keep only columns with `|corr(x, y)| ≥ threshold` on the training rows.
    #[serde(default)]
    pub feature_threshold: Option<f64>,
    /// Share of aligned rows held out for evaluation.
    #[serde(default)]
    pub eval_fraction: f64,
}

fn default_key_bits() -> u64 {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CognitionSection {
    pub rounds: u64,
    pub head_learning_rate: f64,
    pub encoder_learning_rate: f64,
    pub head: HeadKind,
    #[serde(default)]
    pub privacy: bool,
    #[serde(default)]
    pub eval_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoOperation {
    Sum,
    Mean,
    Count,
    Ridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformationSection {
    pub operation: InfoOperation,
    /// Column for sum and mean.
    #[serde(default)]
    pub column: Option<String>,
    #[serde(default)]
    pub predicate: Option<ColumnPredicate>,
    /// Ridge target column; every other numeric column is a feature.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
    #[serde(default = "default_scale")]
    pub scale_bits: u32,
}

fn default_scale() -> u32 {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeSection {
    /// Rule file; `apply` jobs take their rules from the stored knowledge.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
}

fn default_depth() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub job: JobSection,
    #[serde(default)]
    pub policy: SecurityPolicy,
    #[serde(rename = "party", default)]
    pub parties: Vec<PartySpec>,
    #[serde(default)]
    pub training: Option<TrainingSection>,
    #[serde(default)]
    pub vertical: Option<VerticalSection>,
    #[serde(default)]
    pub cognition: Option<CognitionSection>,
    #[serde(default)]
    pub information: Option<InformationSection>,
    #[serde(default)]
    pub knowledge: Option<KnowledgeSection>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid job config: {0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

impl JobConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: JobConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.job.output)
    }

    pub fn party(&self, id: &PartyId) -> Option<&PartySpec> {
        self.parties.iter().find(|p| &p.id == id)
    }

    fn with_role(&self, role: Role) -> Vec<&PartySpec> {
        self.parties.iter().filter(|p| p.role == role).collect()
    }

    pub fn arbitrator(&self) -> &PartyId {
        &self.with_role(Role::Arbitrator)[0].id
    }

    pub fn crypto_provider(&self) -> Option<&PartyId> {
        self.with_role(Role::CryptoProvider).first().map(|p| &p.id)
    }

    pub fn label_holder(&self) -> Option<&PartyId> {
        self.with_role(Role::LabelHolder).first().map(|p| &p.id)
    }

    /// Parties holding data or facts, in config order.
    pub fn data_parties(&self) -> Vec<&PartySpec> {
        self.parties.iter().filter(|p| p.role.holds_data()).collect()
    }

    pub fn psi_group(&self) -> Result<SafePrimeGroup, ConfigError> {
        SafePrimeGroup::named(&self.job.psi_group).map_err(|e| ConfigError(e.to_string()))
    }

    /// Mode the cross-sample trainer runs in, fixed by the policy.
    pub fn train_mode(&self) -> TrainMode {
        match (self.policy.masking, &self.policy.dp) {
            (false, _) => TrainMode::PlaintextDebug,
            (true, None) => TrainMode::Masked,
            (true, Some(_)) => TrainMode::MaskedDp,
        }
    }

    /// Structural checks; nothing touches the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let j = &self.job;
        if j.id.is_empty() || !j.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("job id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'", j.id));
        }
        self.psi_group()?;
        if j.layout == Layout::Hybrid {
            return bad("hybrid federation (federated transfer learning) is not supported");
        }
        let expected = match j.level {
            Level::Information => &[Layout::CrossSample][..],
            Level::Model => &[Layout::CrossSample, Layout::CrossFeature][..],
            Level::Cognition => &[Layout::MultiView][..],
            Level::Knowledge => &[Layout::KnowledgeNet][..],
        };
        if !expected.contains(&j.layout) {
            return bad(format!("level {} does not run on layout {}", j.level, j.layout));
        }
        if j.kind == JobKind::Apply && j.knowledge.is_none() {
            return bad("apply jobs need job.knowledge, the stored knowledge to apply");
        }
        self.validate_roster()?;
        self.validate_policy()?;
        self.validate_sections()
    }

    fn validate_roster(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for p in &self.parties {
            if !seen.insert(&p.id) {
                let roles: Vec<Role> = self.parties.iter().filter(|q| q.id == p.id).map(|q| q.role).collect();
                if roles.contains(&Role::Arbitrator) && roles.contains(&Role::CryptoProvider) {
                    return bad(format!("the arbitrator ({}) cannot also be the crypto provider", p.id));
                }
                return bad(format!("party {} is declared more than once", p.id));
            }
        }
        let arbs = self.with_role(Role::Arbitrator);
        if arbs.len() != 1 {
            return bad(format!("exactly one arbitrator required, found {}", arbs.len()));
        }
        if self.with_role(Role::CryptoProvider).len() > 1 {
            return bad("at most one crypto provider");
        }
        if self.with_role(Role::LabelHolder).len() > 1 {
            return bad("at most one label holder");
        }
        for p in &self.parties {
            let has_data = p.data.is_some() || p.facts.is_some();
            if p.role.holds_data() {
                let need_facts = self.job.level == Level::Knowledge;
                if need_facts && p.facts.is_none() {
                    return bad(format!("knowledge node {} needs a facts file", p.id));
                }
                if !need_facts && (p.data.is_none() || p.schema.is_none()) {
                    return bad(format!("party {} needs data and schema files", p.id));
                }
            } else if has_data {
                return bad(format!("{} is a {:?} and must not hold data", p.id, p.role));
            }
        }
        if self.data_parties().is_empty() {
            return bad("no data-holding parties");
        }
        Ok(())
    }

    fn validate_policy(&self) -> Result<(), ConfigError> {
        let pol = &self.policy;
        let j = &self.job;
        if let Some(dp) = &pol.dp {
            dp.validate().map_err(|e| ConfigError(e.to_string()))?;
            if !(j.level == Level::Model && j.layout == Layout::CrossSample) {
                return bad("differential privacy is offered for cross-sample model training only");
            }
            if !pol.masking {
                return bad("differential privacy is applied to masked updates; set policy.masking = true");
            }
        }
        if pol.masking && !(j.level == Level::Model && j.layout == Layout::CrossSample) {
            return bad("masking is offered for cross-sample model training only");
        }
        let provider = self.crypto_provider();
        match j.level {
            Level::Information => {
                if !pol.he_enabled {
                    return bad("information-level jobs compute over ciphertexts and need policy.he_enabled = true");
                }
                if provider.is_none() {
                    return bad("information-level jobs need a crypto provider");
                }
            }
            Level::Model if j.layout == Layout::CrossSample => {
                if pol.he_enabled {
                    return bad("cross-sample training does not use homomorphic encryption; set he_enabled = false");
                }
            }
            Level::Model => {
                let protocol = self.vertical.as_ref().map(|v| v.protocol);
                match (protocol, pol.he_enabled) {
                    (Some(VerticalProtocol::Plaintext), true) => {
                        return bad("protocol plaintext runs without encryption but the policy demands he_enabled")
                    }
                    (Some(VerticalProtocol::HeTaylor | VerticalProtocol::LabelTransfer), false) => {
                        return bad("he_taylor and label_transfer need policy.he_enabled = true")
                    }
                    _ => {}
                }
                if protocol == Some(VerticalProtocol::HeTaylor) && provider.is_none() {
                    return bad("he_taylor needs a crypto provider");
                }
            }
            Level::Cognition | Level::Knowledge => {
                if pol.he_enabled {
                    return bad(format!("{}-level jobs do not use homomorphic encryption; set he_enabled = false", j.level));
                }
            }
        }
        if j.level == Level::Knowledge && pol.alignment != AlignmentMethod::Psi {
            return bad("knowledge-level joins run through PSI; set policy.alignment = \"psi\"");
        }
        Ok(())
    }

    fn validate_sections(&self) -> Result<(), ConfigError> {
        let j = &self.job;
        let present = [
            ("training", self.training.is_some()),
            ("vertical", self.vertical.is_some()),
            ("cognition", self.cognition.is_some()),
            ("information", self.information.is_some()),
            ("knowledge", self.knowledge.is_some()),
        ];
        let wanted = match (j.level, j.layout) {
            (Level::Information, _) => "information",
            (Level::Model, Layout::CrossSample) => "training",
            (Level::Model, _) => "vertical",
            (Level::Cognition, _) => "cognition",
            (Level::Knowledge, _) => "knowledge",
        };
        for (name, is) in present {
            if is && name != wanted {
                return bad(format!("section [{name}] does not apply to a {} {} job", j.level, j.layout));
            }
        }
        // apply jobs take their settings from the stored knowledge, except
        // encrypted scoring which needs key and scale sizes
        let needed = j.kind == JobKind::Learn || wanted == "information";
        if needed && !present.iter().any(|(n, is)| *n == wanted && *is) {
            return bad(format!("a {} {} job needs a [{wanted}] section", j.level, j.layout));
        }
        let rate_ok = |v: f64| v > 0.0 && v.is_finite();
        let fraction_ok = |v: f64| (0.0..0.9).contains(&v);
        if let Some(t) = &self.training {
            if t.rounds == 0 || t.local_epochs == 0 || !rate_ok(t.learning_rate) {
                return bad("[training] needs rounds ≥ 1, local_epochs ≥ 1 and a positive learning rate");
            }
            if t.model == ModelKind::Mlp && !(1..=2).contains(&t.hidden.len()) {
                return bad("an mlp model needs 1 or 2 hidden layers");
            }
        }
        if let Some(v) = &self.vertical {
            let label_holders = self.with_role(Role::LabelHolder).len();
            let data = self.with_role(Role::Data).len();
            if label_holders != 1 || data != 1 {
                return bad("cross-feature jobs need one label holder and one data party");
            }
            if v.rounds == 0 || !rate_ok(v.learning_rate) || !fraction_ok(v.eval_fraction) {
                return bad("[vertical] needs rounds ≥ 1, a positive learning rate and eval_fraction in [0, 0.9)");
            }
            if v.protocol == VerticalProtocol::HeTaylor && !v.taylor_sigmoid {
                return bad("he_taylor needs taylor_sigmoid = true");
            }
            if let Some(t) = v.feature_threshold {
                if !(0.0..=1.0).contains(&t) {
                    return bad("feature_threshold must lie in [0, 1]");
                }
                if !self.policy.he_enabled {
                    return bad("feature selection scores correlations under encryption; set policy.he_enabled = true");
                }
            }
        }
        if let Some(c) = &self.cognition {
            if self.label_holder().is_none() {
                return bad("cognition jobs need a label holder");
            }
            if c.rounds == 0 || !fraction_ok(c.eval_fraction) {
                return bad("[cognition] needs rounds ≥ 1 and eval_fraction in [0, 0.9)");
            }
            for p in self.data_parties() {
                if p.encoder.is_none() {
                    return bad(format!("cognition party {} needs an encoder", p.id));
                }
            }
        }
        if let Some(i) = &self.information {
            let ok = match i.operation {
                InfoOperation::Sum | InfoOperation::Mean => i.column.is_some(),
                InfoOperation::Count => i.predicate.is_some(),
                InfoOperation::Ridge => i.target.is_some() && i.lambda >= 0.0 && i.lambda.is_finite(),
            };
            if !ok {
                return bad(format!("[information] {:?} is missing its column, predicate or target", i.operation));
            }
            if j.kind == JobKind::Apply && i.operation != InfoOperation::Ridge {
                return bad("information-level apply jobs score with a stored ridge model; set operation = \"ridge\"");
            }
        }
        if let Some(k) = &self.knowledge {
            if j.kind == JobKind::Learn && k.rules.is_none() {
                return bad("[knowledge] needs a rules file");
            }
            let mut owned = BTreeSet::new();
            for p in self.data_parties() {
                for pred in &p.predicates {
                    if !owned.insert(pred) {
                        return bad(format!("predicate {pred} is owned by more than one node"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        self.check_data_inputs()?;
        match &self.job.knowledge {
            Some(k) if !self.resolve(k).is_file() => {
                bad(format!("stored knowledge {} does not exist; run the learn job first", self.resolve(k).display()))
            }
            _ => Ok(()),
        }
    }

    /// [`check_inputs`](Self::check_inputs) without the stored knowledge,
    /// which an earlier job may not have produced yet.
    pub fn check_data_inputs(&self) -> Result<(), ConfigError> {
        let mut files: Vec<PathBuf> = Vec::new();
        for p in &self.parties {
            files.extend([&p.data, &p.schema, &p.facts].into_iter().flatten().map(|f| self.resolve(f)));
        }
        if let Some(r) = self.knowledge.as_ref().and_then(|k| k.rules.as_ref()) {
            files.push(self.resolve(r));
        }
        for f in files {
            if !f.is_file() {
                return bad(format!("input file {} does not exist", f.display()));
            }
        }
        Ok(())
    }

    /// Every input file, for the manifest's hash list.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = Vec::new();
        for p in &self.parties {
            files.extend([&p.data, &p.schema, &p.facts].into_iter().flatten().cloned());
        }
        files.extend(self.job.knowledge.iter().cloned());
        files.extend(self.knowledge.as_ref().and_then(|k| k.rules.clone()));
        files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[job]
id = "t1"
kind = "learn"
level = "model"
layout = "cross_sample"
seed = 1
output = "out"

[policy]
masking = true

[[party]]
id = "arbitrator"
role = "arbitrator"

[[party]]
id = "p1"
role = "data"
data = "p1.csv"
schema = "s.toml"

[training]
model = "logistic"
rounds = 5
learning_rate = 0.1
"#;

    fn parse(text: &str) -> Result<JobConfig, ConfigError> {
        JobConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn base_config_parses() {
        let cfg = parse(BASE).unwrap();
        assert_eq!(cfg.train_mode(), TrainMode::Masked);
        assert_eq!(cfg.arbitrator().as_str(), "arbitrator");
        assert_eq!(cfg.output_dir(), Path::new("/tmp/out"));
    }

    #[test]
    fn arbitrator_as_provider_is_named() {
        let text = BASE.replace("[policy]\nmasking = true", "[policy]\nmasking = true")
            + "\n[[party]]\nid = \"arbitrator\"\nrole = \"crypto_provider\"\n";
        let err = parse(&text).unwrap_err();
        assert!(err.0.contains("arbitrator") && err.0.contains("crypto provider"), "{err}");
    }

    #[test]
    fn structural_errors() {
        let cases = [
            (BASE.replace("layout = \"cross_sample\"", "layout = \"hybrid\""), "hybrid"),
            (BASE.replace("layout = \"cross_sample\"", "layout = \"multi_view\""), "does not run on"),
            (BASE.replace("masking = true", "masking = true\nhe_enabled = true"), "he_enabled"),
            (BASE.replace("masking = true", "masking = false\n[policy.dp]\nmechanism = \"gaussian\"\nepsilon = 1.0\ndelta = 1e-5\nclip_norm = 1.0"), "masking"),
            (BASE.replace("role = \"arbitrator\"", "role = \"data\""), "arbitrator"),
            (BASE.replace("[training]", "[vertical]"), "unknown field `model`"),
            (format!("{BASE}\n[unused]\nx = 1\n"), "unknown field `unused`"),
            (BASE.replace("kind = \"learn\"", "kind = \"apply\""), "job.knowledge"),
            (BASE.replace("id = \"t1\"", "id = \"../x\""), "job id"),
            (BASE.replace("rounds = 5", "rounds = 0"), "rounds"),
        ];
        for (text, needle) in cases {
            let err = parse(&text).unwrap_err();
            assert!(err.0.contains(needle), "{needle}: {err}");
        }
        assert!(parse(&BASE.replace("seed = 1", "seed = 1\nbogus = 2")).is_err());
    }
}
