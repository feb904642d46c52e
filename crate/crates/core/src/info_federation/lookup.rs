//! Keyed-hash lookup into an encrypted record store.
//!
//! The owner indexes records by `HMAC(k, key)` and stores them encrypted
//! under the querier's Paillier key. A querier holding `k` sends tokens and
//! gets back ciphertexts it alone can open. The owner sees only tokens.

use std::collections::BTreeMap;

use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use super::{EncryptedAggregate, InfoError};
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::{PaillierKeyPair, PaillierPublicKey, SignedFixedPoint};
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig};

const TAG_QUERY: u8 = 1;
const TAG_DONE: u8 = 0;

pub fn lookup_token(key: &[u8], lookup_key: &str) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(lookup_key.as_bytes());
    mac.finalize().into_bytes().into()
}

#[derive(Clone, Debug)]
pub struct LookupIndex {
    entries: BTreeMap<[u8; 32], EncryptedAggregate>,
}

impl LookupIndex {
    /// Encrypts every record under `querier_pk` and files it under its token.
    pub fn build<R: RngCore + ?Sized>(
        index_key: &[u8],
        records: &BTreeMap<String, Vec<f64>>,
        querier_pk: &PaillierPublicKey,
        fp: SignedFixedPoint,
        rng: &mut R,
    ) -> Result<Self, InfoError> {
        let mut entries = BTreeMap::new();
        for (k, v) in records {
            let agg = EncryptedAggregate::encrypt(querier_pk, v, v.len() as u32, 1, fp, rng)?;
            entries.insert(lookup_token(index_key, k), agg);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &[u8; 32]) -> Option<&EncryptedAggregate> {
        self.entries.get(token)
    }
}

/// Owner side: answer queries until the querier signals it is done.
/// Returns the number of queries served.
pub fn lookup_owner(mb: &mut Mailbox<'_>, querier: &PartyId, index: &LookupIndex) -> Result<usize, InfoError> {
    let mut served = 0;
    loop {
        let env = mb.recv_from(querier, MsgType::Control)?;
        let mut r = PayloadReader::new(env.payload());
        match r.u8()? {
            TAG_DONE => return Ok(served),
            TAG_QUERY => {
                let token: [u8; 32] = r
                    .bytes()?
                    .try_into()
                    .map_err(|_| InfoError::Protocol("lookup token must be 32 bytes".into()))?;
                r.finish()?;
                let mut w = PayloadWriter::new();
                match index.get(&token) {
                    Some(rec) => w.u8(1).bytes(&rec.to_payload()),
                    None => w.u8(0),
                };
                mb.send(querier, MsgType::EncStat, served as u64, w.finish())?;
                served += 1;
            }
            t => return Err(InfoError::Protocol(format!("unknown lookup tag {t}"))),
        }
    }
}

/// Querier side: one round trip per key; found records are decrypted locally.
pub fn lookup_querier(
    mb: &mut Mailbox<'_>,
    owner: &PartyId,
    index_key: &[u8],
    keys: &[String],
    kp: &PaillierKeyPair,
) -> Result<Vec<Option<Vec<f64>>>, InfoError> {
    let pk = kp.public_key();
    let mut out = Vec::with_capacity(keys.len());
    for (i, k) in keys.iter().enumerate() {
        let mut w = PayloadWriter::new();
        w.u8(TAG_QUERY).bytes(&lookup_token(index_key, k));
        mb.send(owner, MsgType::Control, i as u64, w.finish())?;
        let env = mb.recv_from(owner, MsgType::EncStat)?;
        let mut r = PayloadReader::new(env.payload());
        let found = r.u8()?;
        if found == 0 {
            r.finish()?;
            out.push(None);
            continue;
        }
        let rec = EncryptedAggregate::from_payload(pk, &r.bytes()?)?;
        r.finish()?;
        let fp = SignedFixedPoint::new(rec.scale_bits);
        let values = rec
            .cells
            .iter()
            .map(|c| Ok(fp.decode(&kp.private_key().decrypt(c)?, pk.n())))
            .collect::<Result<Vec<f64>, InfoError>>()?;
        out.push(Some(values));
    }
    let mut w = PayloadWriter::new();
    w.u8(TAG_DONE);
    mb.send(owner, MsgType::Control, keys.len() as u64, w.finish())?;
    Ok(out)
}

/// Owner indexes `records` with `index_key`; the querier asks with
/// `querier_key`. A querier without the right key only ever gets not-found.
pub fn run_lookup_simulated(
    records: &BTreeMap<String, Vec<f64>>,
    index_key: &[u8],
    querier_key: &[u8],
    queries: &[String],
    key_bits: u64,
    seed: u64,
) -> Result<(Vec<Option<Vec<f64>>>, AuditLog), InfoError> {
    let owner = PartyId::new("owner");
    let querier = PartyId::new("querier");
    let kp = if key_bits < crate::crypto::paillier::MIN_SECURE_BITS {
        PaillierKeyPair::generate_toy(key_bits, seed)?
    } else {
        PaillierKeyPair::generate(key_bits, seed)?
    };
    let mut rng = party_rng(seed, &owner, "lookup-index");
    let index = LookupIndex::build(index_key, records, kp.public_key(), SignedFixedPoint::default(), &mut rng)?;

    let (o, q, kp_ref, index_ref) = (&owner, &querier, &kp, &index);
    let programs = vec![
        PartyProgram::new(owner.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "lookup", None);
            lookup_owner(&mut mb, q, index_ref).map(|_| Vec::new())
        }),
        PartyProgram::new(querier.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, "lookup", None);
            lookup_querier(&mut mb, o, querier_key, queries, kp_ref)
        }),
    ];
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let mut answers = Vec::new();
    for (p, r) in out.outputs {
        let r = r?;
        if p == querier {
            answers = r;
        }
    }
    Ok((answers, out.transcript))
}
