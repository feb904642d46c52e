use num_bigint::{BigUint, RandBigInt};
use num_traits::FromPrimitive;
use rand::RngCore;

use super::InfoError;
use crate::alignment::party_rng;
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::{Ciphertext, PaillierKeyPair, PaillierPublicKey, SignedFixedPoint};
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig, SimEndpoint};

const TAG_PUBLIC_KEY: u8 = 1;
const TAG_DECRYPTED: u8 = 2;
const TAG_RESULT: u8 = 3;

#[derive(Clone, Debug)]
pub struct InfoRoles {
    pub parties: Vec<PartyId>,
    pub arbitrator: PartyId,
    pub provider: PartyId,
}

impl InfoRoles {
    /// Dedicated arbitrator and provider parties next to the data holders.
    pub fn standard(parties: Vec<PartyId>) -> Self {
        Self { parties, arbitrator: PartyId::new("arbitrator"), provider: PartyId::new("crypto_provider") }
    }

    pub fn validate(&self) -> Result<(), InfoError> {
        if self.arbitrator == self.provider {
            return Err(InfoError::Roles("the arbitrator cannot hold the decryption key".into()));
        }
        if self.parties.contains(&self.arbitrator) {
            return Err(InfoError::Roles("the arbitrator cannot contribute data".into()));
        }
        if self.parties.is_empty() {
            return Err(InfoError::Roles("no data parties".into()));
        }
        Ok(())
    }

    /// Everyone taking part, without duplicates, in a stable order.
    pub fn everyone(&self) -> Vec<PartyId> {
        let mut all = self.parties.clone();
        for p in [&self.arbitrator, &self.provider] {
            if !all.contains(p) {
                all.push(p.clone());
            }
        }
        all
    }
}

#[derive(Clone, Debug)]
pub struct InfoConfig {
    pub key_bits: u64,
    pub seed: u64,
    pub scale_bits: u32,
    /// Defaults to [`InfoRoles::standard`] over the contributing parties.
    pub roles: Option<InfoRoles>,
}

impl InfoConfig {
    pub fn new(key_bits: u64, seed: u64) -> Self {
        Self { key_bits, seed, scale_bits: 32, roles: None }
    }

    pub(crate) fn keypair(&self) -> Result<PaillierKeyPair, InfoError> {
        let kp = if self.key_bits < crate::crypto::paillier::MIN_SECURE_BITS {
            PaillierKeyPair::generate_toy(self.key_bits, self.seed)?
        } else {
            PaillierKeyPair::generate(self.key_bits, self.seed)?
        };
        Ok(kp)
    }
}

#[derive(Debug)]
pub struct InfoOutcome<T> {
    pub value: T,
    pub transcript: AuditLog,
}

impl<T> InfoOutcome<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> InfoOutcome<U> {
        InfoOutcome { value: f(self.value), transcript: self.transcript }
    }
}

/// Ciphertext vector or matrix with its fixed-point scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedAggregate {
    pub rows: u32,
    pub cols: u32,
    pub scale_bits: u32,
    pub cells: Vec<Ciphertext>,
}

impl EncryptedAggregate {
    pub fn encrypt<R: RngCore + ?Sized>(
        pk: &PaillierPublicKey,
        values: &[f64],
        rows: u32,
        cols: u32,
        fp: SignedFixedPoint,
        rng: &mut R,
    ) -> Result<Self, InfoError> {
        if values.len() != (rows * cols) as usize {
            return Err(InfoError::Encoding(format!("{} values for a {rows}x{cols} shape", values.len())));
        }
        let cells = values
            .iter()
            .map(|&v| pk.encrypt(&fp.encode(v, pk.n())?, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rows, cols, scale_bits: fp.scale_bits(), cells })
    }

    pub fn add_assign(&mut self, pk: &PaillierPublicKey, other: &EncryptedAggregate) -> Result<(), InfoError> {
        if (self.rows, self.cols, self.scale_bits) != (other.rows, other.cols, other.scale_bits) {
            return Err(InfoError::Encoding("aggregate shapes or scales differ".into()));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a = pk.add(a, b)?;
        }
        Ok(())
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.u32(self.rows).u32(self.cols).u32(self.scale_bits);
        let values: Vec<BigUint> = self.cells.iter().map(|c| c.value().clone()).collect();
        w.bigs(&values);
        w.finish()
    }

    pub fn from_payload(pk: &PaillierPublicKey, bytes: &[u8]) -> Result<Self, InfoError> {
        let mut r = PayloadReader::new(bytes);
        let (rows, cols, scale_bits) = (r.u32()?, r.u32()?, r.u32()?);
        let cells = r
            .bigs()?
            .into_iter()
            .map(|v| pk.ciphertext_from_value(v))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        if cells.len() as u64 != rows as u64 * cols as u64 {
            return Err(InfoError::Encoding("shape descriptor does not match cell count".into()));
        }
        Ok(Self { rows, cols, scale_bits, cells })
    }
}

/// Provider: send the public key to everyone else.
pub fn distribute_key(mb: &mut Mailbox<'_>, roles: &InfoRoles, kp: &PaillierKeyPair) -> Result<(), InfoError> {
    let me = mb.me();
    let mut w = PayloadWriter::new();
    w.u8(TAG_PUBLIC_KEY).biguint(kp.public_key().n());
    let payload = w.finish();
    for p in roles.everyone().iter().filter(|p| **p != me) {
        mb.send(p, MsgType::Control, 0, payload.clone())?;
    }
    Ok(())
}

pub fn receive_key(mb: &mut Mailbox<'_>, roles: &InfoRoles) -> Result<PaillierPublicKey, InfoError> {
    let env = mb.recv_from(&roles.provider, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_PUBLIC_KEY {
        return Err(InfoError::Protocol("expected the provider's public key".into()));
    }
    let n = r.biguint()?;
    r.finish()?;
    Ok(PaillierPublicKey::from_modulus(n)?)
}

/// Data party: encrypt and send local values. `bounds[i]` bounds `|values[i]|`.
pub fn contribute<R: RngCore + ?Sized>(
    mb: &mut Mailbox<'_>,
    roles: &InfoRoles,
    pk: &PaillierPublicKey,
    values: &[f64],
    bounds: &[f64],
    fp: SignedFixedPoint,
    rng: &mut R,
) -> Result<(), InfoError> {
    check_range(pk, values, bounds, fp, roles.parties.len())?;
    let agg = EncryptedAggregate::encrypt(pk, values, values.len() as u32, 1, fp, rng)?;
    mb.send(&roles.arbitrator, MsgType::EncStat, 0, agg.to_payload())?;
    Ok(())
}

/// Each party's contribution must stay below `n / (2P)` in magnitude so the
/// sum of `P` of them cannot wrap around the signed range.
fn check_range(
    pk: &PaillierPublicKey,
    values: &[f64],
    bounds: &[f64],
    fp: SignedFixedPoint,
    parties: usize,
) -> Result<(), InfoError> {
    if values.len() != bounds.len() {
        return Err(InfoError::Range("one bound per value required".into()));
    }
    let cap = pk.half_n() / BigUint::from(parties.max(1) as u64);
    for (i, (&v, &b)) in values.iter().zip(bounds).enumerate() {
        if !(v.abs() <= b) {
            return Err(InfoError::Range(format!("cell {i}: value {v} exceeds its declared bound {b}")));
        }
        let scaled = BigUint::from_f64((b * 2f64.powi(fp.scale_bits() as i32)).ceil())
            .ok_or_else(|| InfoError::Range(format!("cell {i}: bound {b} is not a finite non-negative number")))?;
        if scaled >= cap {
            return Err(InfoError::Range(format!(
                "cell {i}: bound {b} at {} fractional bits does not fit a {}-bit modulus shared by {parties} parties",
                fp.scale_bits(),
                pk.bits()
            )));
        }
    }
    Ok(())
}

pub fn receive_result(mb: &mut Mailbox<'_>, roles: &InfoRoles) -> Result<Vec<f64>, InfoError> {
    let env = mb.recv_from(&roles.arbitrator, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_RESULT {
        return Err(InfoError::Protocol("expected an aggregate result".into()));
    }
    let v = r.f64s()?;
    r.finish()?;
    Ok(v)
}

/// Arbitrator: sum contributions, mask, have the provider decrypt, unmask,
/// broadcast the result to the data parties.
pub fn aggregate_and_reveal<R: RngCore + ?Sized>(
    mb: &mut Mailbox<'_>,
    roles: &InfoRoles,
    pk: &PaillierPublicKey,
    rng: &mut R,
) -> Result<Vec<f64>, InfoError> {
    let mut total: Option<EncryptedAggregate> = None;
    for p in &roles.parties {
        let env = mb.recv_from(p, MsgType::EncStat)?;
        let agg = EncryptedAggregate::from_payload(pk, env.payload())?;
        match total.as_mut() {
            None => total = Some(agg),
            Some(t) => t.add_assign(pk, &agg)?,
        }
    }
    let mut total = total.expect("at least one party");
    let masks: Vec<BigUint> = total.cells.iter().map(|_| rng.gen_biguint_below(pk.n())).collect();
    for (c, r) in total.cells.iter_mut().zip(&masks) {
        *c = pk.add_plain(c, r)?;
    }
    mb.send(&roles.provider, MsgType::EncStat, 0, total.to_payload())?;

    let env = mb.recv_from(&roles.provider, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_DECRYPTED {
        return Err(InfoError::Protocol("expected decrypted masked totals".into()));
    }
    let masked = r.bigs()?;
    r.finish()?;
    if masked.len() != masks.len() {
        return Err(InfoError::Protocol("provider returned the wrong number of values".into()));
    }
    let n = pk.n();
    let fp = SignedFixedPoint::new(total.scale_bits);
    let result: Vec<f64> = masked.iter().zip(&masks).map(|(m, r)| fp.decode(&((m + n - r) % n), n)).collect();

    let mut w = PayloadWriter::new();
    w.u8(TAG_RESULT).f64s(&result);
    let payload = w.finish();
    for p in &roles.parties {
        mb.send(p, MsgType::Control, 0, payload.clone())?;
    }
    Ok(result)
}

/// Provider: decrypt one masked aggregate from the arbitrator.
pub fn serve_decryption(mb: &mut Mailbox<'_>, roles: &InfoRoles, kp: &PaillierKeyPair) -> Result<(), InfoError> {
    let env = mb.recv_from(&roles.arbitrator, MsgType::EncStat)?;
    let agg = EncryptedAggregate::from_payload(kp.public_key(), env.payload())?;
    let plain = agg
        .cells
        .iter()
        .map(|c| kp.private_key().decrypt(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = PayloadWriter::new();
    w.u8(TAG_DECRYPTED).bigs(&plain);
    mb.send(&roles.arbitrator, MsgType::Control, 0, w.finish())?;
    Ok(())
}

/// Runs every role `me` holds in a safe order. Data parties and the
/// arbitrator get the aggregate back; a pure provider returns an empty vector.
#[allow(clippy::too_many_arguments)]
pub fn info_participant<R: RngCore + ?Sized>(
    mb: &mut Mailbox<'_>,
    roles: &InfoRoles,
    local: Option<(&[f64], &[f64])>,
    keypair: Option<&PaillierKeyPair>,
    fp: SignedFixedPoint,
    rng: &mut R,
) -> Result<Vec<f64>, InfoError> {
    let me = mb.me();
    let pk = if me == roles.provider {
        let kp = keypair.ok_or_else(|| InfoError::Roles("provider started without a key".into()))?;
        distribute_key(mb, roles, kp)?;
        kp.public_key().clone()
    } else {
        receive_key(mb, roles)?
    };
    if me == roles.arbitrator {
        return aggregate_and_reveal(mb, roles, &pk, rng);
    }
    if let Some((values, bounds)) = local {
        contribute(mb, roles, &pk, values, bounds, fp, rng)?;
    }
    if me == roles.provider {
        serve_decryption(mb, roles, keypair.expect("checked above"))?;
    }
    if local.is_some() {
        return receive_result(mb, roles);
    }
    Ok(Vec::new())
}

/// Simulated run of one aggregation. `contribs` holds `(party, values, bounds)`.
pub fn run_secure_aggregate(
    contribs: &[(PartyId, Vec<f64>, Vec<f64>)],
    cfg: &InfoConfig,
) -> Result<InfoOutcome<Vec<f64>>, InfoError> {
    let roles = cfg.roles.clone().unwrap_or_else(|| InfoRoles::standard(contribs.iter().map(|c| c.0.clone()).collect()));
    roles.validate()?;
    for p in &roles.parties {
        if !contribs.iter().any(|c| &c.0 == p) {
            return Err(InfoError::Roles(format!("no contribution for {p}")));
        }
    }
    let fp = SignedFixedPoint::new(cfg.scale_bits);
    let kp = cfg.keypair()?;
    let roles_ref = &roles;
    let kp_ref = &kp;
    let programs: Vec<PartyProgram<'_, Result<Vec<f64>, InfoError>>> = roles
        .everyone()
        .into_iter()
        .map(|me| {
            let local = contribs.iter().find(|c| c.0 == me).map(|c| (c.1.as_slice(), c.2.as_slice()));
            let keypair = (me == roles_ref.provider).then_some(kp_ref);
            let seed = cfg.seed;
            PartyProgram::new(me.clone(), move |ep: &mut SimEndpoint<'_>| {
                let mut rng = party_rng(seed, &me, "info");
                let mut mb = Mailbox::new(ep, "info", None);
                let out = info_participant(&mut mb, roles_ref, local, keypair, fp, &mut rng);
                if let Err(e) = &out {
                    mb.abort(&roles_ref.everyone(), &e.to_string());
                }
                out
            })
        })
        .collect();
    let out = simnet_run(programs, SimConfig::new(cfg.seed))?;
    let mut value = None;
    for (p, r) in out.outputs {
        let v = r?;
        if p == roles.arbitrator {
            value = Some(v);
        }
    }
    Ok(InfoOutcome { value: value.expect("arbitrator ran"), transcript: out.transcript })
}
