//! Socket mode: each party runs `kfed run <config> --party <id>` as its own
//! process and the parties talk over authenticated TCP.
//!
//! Only cross-sample model training runs this way. Every party needs an
//! `address` and a hex `public_key`; the local party also needs a
//! `key_file` holding its hex secret key. The arbitrator writes the run
//! directory; data parties write only their own `audit.<party>.log`.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::time::Duration;

use super::artifact::KnowledgeModel;
use super::config::{ConfigError, JobConfig, JobKind, Layout, Level, PartySpec};
use super::run::{same_features, train_config, write_outputs, Ctx, Produced, RunSummary};
use super::{check_policy, JobError};
use crate::model_federation::{cross_sample_arbitrator, cross_sample_party, ModelParams, TrainingData};
use crate::sandbox::job_id_key;
use crate::transport::{Identity, Mailbox, PartyId, PeerDirectory, TcpConfig, TcpTransport};

const RECV_TIMEOUT: Duration = Duration::from_secs(300);

pub fn socket_supported(cfg: &JobConfig) -> bool {
    cfg.job.kind == JobKind::Learn && cfg.job.level == Level::Model && cfg.job.layout == Layout::CrossSample
}

fn key_bytes(hex_text: &str, what: &str) -> Result<[u8; 32], ConfigError> {
    let raw = hex::decode(hex_text.trim()).map_err(|e| ConfigError(format!("{what}: {e}")))?;
    raw.try_into().map_err(|_| ConfigError(format!("{what}: expected 32 bytes")))
}

fn address(p: &PartySpec) -> Result<std::net::SocketAddr, ConfigError> {
    p.address.ok_or_else(|| ConfigError(format!("socket mode: party {} has no address", p.id)))
}

/// Runs this process's share of the job. Returns the run summary on the
/// arbitrator and `None` on data parties.
pub fn run_party(cfg: &JobConfig, me: &PartyId) -> Result<Option<RunSummary>, JobError> {
    cfg.validate()?;
    if !socket_supported(cfg) {
        return Err(ConfigError("socket mode runs cross-sample model training only; drop --party to simulate".into()).into());
    }
    let features = &cfg.training.as_ref().expect("validated").features;
    if features.is_empty() {
        return Err(ConfigError("socket mode needs [training] features: the arbitrator sees no data".into()).into());
    }
    let mine = cfg.party(me).ok_or_else(|| ConfigError(format!("party {me} is not in the config")))?;

    let mut peers = BTreeMap::new();
    let mut directory = PeerDirectory::new();
    for p in &cfg.parties {
        if p.id == *me {
            continue;
        }
        peers.insert(p.id.clone(), address(p)?);
        let pk = p.public_key.as_deref().ok_or_else(|| ConfigError(format!("socket mode: party {} has no public_key", p.id)))?;
        directory.insert(p.id.clone(), key_bytes(pk, &format!("public key of {}", p.id))?)?;
    }
    let key_file = mine.key_file.as_ref().ok_or_else(|| ConfigError(format!("socket mode: party {me} has no key_file")))?;
    let secret = std::fs::read_to_string(cfg.resolve(key_file))
        .map_err(|e| ConfigError(format!("{}: {e}", key_file.display())))?;
    let identity = Identity::from_secret(key_bytes(&secret, "key file")?);
    if let Some(pk) = &mine.public_key {
        if key_bytes(pk, "own public key")? != identity.public_bytes() {
            return Err(ConfigError(format!("the key file of {me} does not match its public_key")).into());
        }
    }

    // Load local data before opening the mesh so data errors surface early.
    let ctx = Ctx { cfg, id_key: job_id_key(&cfg.job.id, &cfg.job.id_salt), stored: None };
    let local = if mine.role.holds_data() {
        let (ds, st) = ctx.load_party(mine)?;
        let ds = same_features(vec![ds], features)?.remove(0);
        Some((TrainingData::from_dataset(&ds)?, st))
    } else {
        None
    };

    let listener = TcpListener::bind(address(mine)?)?;
    let tcp_cfg = TcpConfig::new(me.clone(), peers);
    let mut transport = TcpTransport::connect_mesh(&tcp_cfg, listener, &identity, &directory, &mut rand::rngs::OsRng)?;

    let arbitrator = cfg.arbitrator();
    let data_parties: Vec<PartyId> = cfg.data_parties().iter().map(|p| p.id.clone()).collect();
    let arch = cfg.training.as_ref().expect("validated").architecture(features.len());
    let tc = train_config(cfg);
    let result = {
        let mut mb = Mailbox::new(&mut transport, cfg.job.id.clone(), Some(RECV_TIMEOUT));
        let r = match &local {
            None => cross_sample_arbitrator(&mut mb, &data_parties, ModelParams::init(arch.clone(), tc.seed)?, &tc).map(Some),
            Some((data, _)) => cross_sample_party(&mut mb, arbitrator, data_parties.len(), &arch, data, &tc, tc.seed).map(|_| None),
        };
        if let Err(e) = &r {
            let everyone: Vec<PartyId> = cfg.parties.iter().map(|p| p.id.clone()).filter(|p| p != me).collect();
            mb.abort(&everyone, &e.to_string());
        }
        r?
    };
    let transcript = transport.audit().clone();
    check_policy(cfg, &transcript)?;
    let Some(arb) = result else {
        let dir = cfg.output_dir();
        std::fs::create_dir_all(&dir)?;
        transcript.save(&dir.join(format!("audit.{me}.log")))?;
        return Ok(None);
    };
    let produced = Produced {
        metrics: arb.metrics,
        rounds: tc.rounds,
        model: Some(KnowledgeModel::Horizontal { params: arb.params, feature_names: features.clone() }),
        transcript,
        ..Default::default()
    };
    write_outputs(cfg, produced).map(Some)
}
