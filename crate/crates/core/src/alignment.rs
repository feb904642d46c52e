//! Private set intersection over de-identified entity ids.
//!
//! Two parties `A`, `B` with secret exponents `α`, `β`:
//!
//! ```text
//! A -> B : shuffled H(a)^α          B -> A : shuffled H(b)^β      (blind)
//! B -> A : (H(a)^α)^β, same order   A -> B : (H(b)^β)^α           (reply)
//! ```
//!
//! Each side now holds its own items double-blinded (in its own order) and
//! the peer's double-blinded set, so it learns which of its rows match and
//! nothing about the peer's other items. The common row order is the sort
//! order of the double-blinded encodings, which both sides know.
//!
//! With more than two parties the leader runs the exchange with every
//! follower, intersects locally, then sends each follower the double-blinded
//! values of the final intersection in the leader's row order. The leader
//! therefore sees each pairwise intersection.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::{BlindingKey, CryptoError, SafePrimeGroup};
use crate::sandbox::PartyDataset;
use crate::transport::{
    simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig, SimEndpoint, TransportError,
};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("alignment protocol error: {0}")]
    Protocol(String),
    #[error("alignment consistency error: {0}")]
    Consistency(String),
}

/// Message types carrying the blind and reply lists.
#[derive(Clone, Copy, Debug)]
pub struct PsiMessages {
    pub blind: MsgType,
    pub reply: MsgType,
}

impl PsiMessages {
    pub const ALIGN: PsiMessages = PsiMessages { blind: MsgType::AlignBlind, reply: MsgType::AlignReply };
    pub const KNOWLEDGE: PsiMessages = PsiMessages { blind: MsgType::KnowledgeQuery, reply: MsgType::KnowledgeReply };
}

/// One party's view of the intersection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalAlignment {
    /// Local row indices in intersection order.
    pub positions: Vec<usize>,
    /// Fingerprint of the id list the positions refer to.
    pub ids_fingerprint: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentResult {
    pub per_party: BTreeMap<PartyId, LocalAlignment>,
    pub intersection_size: usize,
}

pub fn ids_fingerprint(ids: &[String]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((ids.len() as u64).to_be_bytes());
    for id in ids {
        h.update((id.len() as u64).to_be_bytes());
        h.update(id.as_bytes());
    }
    h.finalize().into()
}

fn encode_list(group: &SafePrimeGroup, items: &[Vec<u8>]) -> Vec<u8> {
    let mut w = PayloadWriter::new();
    w.u32(items.len() as u32);
    let mut out = w.finish();
    out.reserve(items.len() * group.element_len());
    for it in items {
        out.extend_from_slice(it);
    }
    out
}

fn decode_list(group: &SafePrimeGroup, payload: &[u8]) -> Result<Vec<Vec<u8>>, AlignmentError> {
    let mut r = PayloadReader::new(payload);
    let n = r.u32()? as usize;
    let w = group.element_len();
    let body = &payload[4..];
    if body.len() != n.checked_mul(w).ok_or_else(|| AlignmentError::Protocol("list too long".into()))? {
        return Err(AlignmentError::Protocol(format!("expected {n} elements of {w} bytes")));
    }
    body.chunks_exact(w)
        .map(|c| {
            group.decode(c)?;
            Ok(c.to_vec())
        })
        .collect()
}

struct PairState {
    /// Own items double-blinded, indexed by own row.
    own_double: Vec<Vec<u8>>,
    peer_double: HashSet<Vec<u8>>,
}

fn check_unique(ids: &[String]) -> Result<(), AlignmentError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(AlignmentError::Protocol(format!("duplicate id in input: {id}")));
        }
    }
    Ok(())
}

fn pairwise_exchange<R: RngCore>(
    mb: &mut Mailbox<'_>,
    peer: &PartyId,
    hashed: &[crate::crypto::GroupElement],
    group: &SafePrimeGroup,
    msgs: PsiMessages,
    rng: &mut R,
) -> Result<PairState, AlignmentError> {
    let key = BlindingKey::random(group, rng);
    let mut perm: Vec<usize> = (0..hashed.len()).collect();
    perm.shuffle(rng);
    let blinded: Vec<Vec<u8>> = perm.iter().map(|&i| group.encode(&group.blind(&hashed[i], &key))).collect();
    mb.send(peer, msgs.blind, 0, encode_list(group, &blinded))?;

    let theirs = decode_list(group, mb.recv_from(peer, msgs.blind)?.payload())?;
    let doubled: Vec<Vec<u8>> = theirs
        .iter()
        .map(|b| Ok(group.encode(&group.blind(&group.decode(b)?, &key))))
        .collect::<Result<_, CryptoError>>()?;
    mb.send(peer, msgs.reply, 0, encode_list(group, &doubled))?;

    let reply = decode_list(group, mb.recv_from(peer, msgs.reply)?.payload())?;
    if reply.len() != hashed.len() {
        return Err(AlignmentError::Protocol(format!("peer returned {} elements for {}", reply.len(), hashed.len())));
    }
    let mut own_double = vec![Vec::new(); hashed.len()];
    for (k, d) in perm.iter().zip(reply) {
        own_double[*k] = d;
    }
    Ok(PairState { own_double, peer_double: doubled.into_iter().collect() })
}

fn hash_all(group: &SafePrimeGroup, ids: &[String]) -> Vec<crate::crypto::GroupElement> {
    ids.iter().map(|id| group.hash_to_group(id.as_bytes())).collect()
}

/// Two-party PSI from one side. Both sides call this with each other as peer.
pub fn psi_party<R: RngCore>(
    mb: &mut Mailbox<'_>,
    peer: &PartyId,
    ids: &[String],
    group: &SafePrimeGroup,
    msgs: PsiMessages,
    rng: &mut R,
) -> Result<LocalAlignment, AlignmentError> {
    let mut run = || -> Result<LocalAlignment, AlignmentError> {
        check_unique(ids)?;
        let st = pairwise_exchange(mb, peer, &hash_all(group, ids), group, msgs, rng)?;
        let mut matched: Vec<usize> = (0..ids.len()).filter(|&i| st.peer_double.contains(&st.own_double[i])).collect();
        matched.sort_by(|&a, &b| st.own_double[a].cmp(&st.own_double[b]));
        Ok(LocalAlignment { positions: matched, ids_fingerprint: ids_fingerprint(ids) })
    };
    let out = run();
    if let Err(e) = &out {
        if !matches!(e, AlignmentError::Transport(TransportError::Remote { .. })) {
            mb.abort(std::slice::from_ref(peer), &e.to_string());
        }
    }
    out
}

/// Leader side of the n-party variant. Intersection order is leader row order.
pub fn psi_leader<R: RngCore>(
    mb: &mut Mailbox<'_>,
    followers: &[PartyId],
    ids: &[String],
    group: &SafePrimeGroup,
    msgs: PsiMessages,
    rng: &mut R,
) -> Result<LocalAlignment, AlignmentError> {
    let mut run = || -> Result<LocalAlignment, AlignmentError> {
        check_unique(ids)?;
        let hashed = hash_all(group, ids);
        let mut states = Vec::with_capacity(followers.len());
        for f in followers {
            states.push(pairwise_exchange(mb, f, &hashed, group, msgs, rng)?);
        }
        let common: Vec<usize> =
            (0..ids.len()).filter(|&i| states.iter().all(|s| s.peer_double.contains(&s.own_double[i]))).collect();
        for (f, s) in followers.iter().zip(&states) {
            let list: Vec<Vec<u8>> = common.iter().map(|&i| s.own_double[i].clone()).collect();
            mb.send(f, msgs.blind, 1, encode_list(group, &list))?;
        }
        Ok(LocalAlignment { positions: common, ids_fingerprint: ids_fingerprint(ids) })
    };
    let out = run();
    if let Err(e) = &out {
        if !matches!(e, AlignmentError::Transport(TransportError::Remote { .. })) {
            mb.abort(followers, &e.to_string());
        }
    }
    out
}

/// Follower side of the n-party variant.
pub fn psi_follower<R: RngCore>(
    mb: &mut Mailbox<'_>,
    leader: &PartyId,
    ids: &[String],
    group: &SafePrimeGroup,
    msgs: PsiMessages,
    rng: &mut R,
) -> Result<LocalAlignment, AlignmentError> {
    let mut run = || -> Result<LocalAlignment, AlignmentError> {
        check_unique(ids)?;
        let st = pairwise_exchange(mb, leader, &hash_all(group, ids), group, msgs, rng)?;
        let env = mb.recv_from(leader, msgs.blind)?;
        if env.round() != 1 {
            return Err(AlignmentError::Protocol("expected the final intersection list".into()));
        }
        let index: HashMap<&[u8], usize> = st.own_double.iter().enumerate().map(|(i, d)| (d.as_slice(), i)).collect();
        let positions = decode_list(group, env.payload())?
            .iter()
            .map(|d| {
                index
                    .get(d.as_slice())
                    .copied()
                    .ok_or_else(|| AlignmentError::Protocol("leader listed an element we do not hold".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LocalAlignment { positions, ids_fingerprint: ids_fingerprint(ids) })
    };
    let out = run();
    if let Err(e) = &out {
        if !matches!(e, AlignmentError::Transport(TransportError::Remote { .. })) {
            mb.abort(std::slice::from_ref(leader), &e.to_string());
        }
    }
    out
}

/// Per-party RNG derived from a job seed.
pub fn party_rng(seed: u64, party: &PartyId, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"kfed.party-rng");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(party.as_str().as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Runs PSI for all parties on the simulated network. The first list belongs
/// to the leader; with two parties the symmetric protocol is used.
pub fn run_psi_simulated(
    lists: &[(PartyId, Vec<String>)],
    group: &SafePrimeGroup,
    seed: u64,
) -> Result<(AlignmentResult, AuditLog), AlignmentError> {
    if lists.len() < 2 {
        return Err(AlignmentError::Protocol("alignment needs at least two parties".into()));
    }
    let job = "psi";
    let ids_all: Vec<PartyId> = lists.iter().map(|(p, _)| p.clone()).collect();
    let leader = ids_all[0].clone();
    let two = lists.len() == 2;
    let programs: Vec<PartyProgram<'_, Result<LocalAlignment, AlignmentError>>> = lists
        .iter()
        .enumerate()
        .map(|(i, (me, ids))| {
            let ids_all = ids_all.clone();
            let leader = leader.clone();
            let me = me.clone();
            PartyProgram::new(me.clone(), move |ep: &mut SimEndpoint<'_>| {
                let mut rng = party_rng(seed, &me, "psi");
                let mut mb = Mailbox::new(ep, job, None);
                if two {
                    let peer = &ids_all[1 - i];
                    psi_party(&mut mb, peer, ids, group, PsiMessages::ALIGN, &mut rng)
                } else if i == 0 {
                    psi_leader(&mut mb, &ids_all[1..], ids, group, PsiMessages::ALIGN, &mut rng)
                } else {
                    psi_follower(&mut mb, &leader, ids, group, PsiMessages::ALIGN, &mut rng)
                }
            })
        })
        .collect();
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let mut per_party = BTreeMap::new();
    let mut size = None;
    for (p, r) in out.outputs {
        let local = r?;
        if *size.get_or_insert(local.positions.len()) != local.positions.len() {
            return Err(AlignmentError::Consistency("parties disagree on intersection size".into()));
        }
        per_party.insert(p, local);
    }
    Ok((AlignmentResult { per_party, intersection_size: size.unwrap_or(0) }, out.transcript))
}

pub fn psi_two_party(
    initiator_ids: &[String],
    responder_ids: &[String],
    group: &SafePrimeGroup,
    seed: u64,
) -> Result<AlignmentResult, AlignmentError> {
    let lists = [
        (PartyId::new("initiator"), initiator_ids.to_vec()),
        (PartyId::new("responder"), responder_ids.to_vec()),
    ];
    Ok(run_psi_simulated(&lists, group, seed)?.0)
}

pub fn psi_multi_party(
    id_lists: &[(PartyId, Vec<String>)],
    group: &SafePrimeGroup,
    seed: u64,
) -> Result<AlignmentResult, AlignmentError> {
    Ok(run_psi_simulated(id_lists, group, seed)?.0)
}

/// Restricts and reorders one dataset to the intersection.
pub fn align_dataset(ds: &PartyDataset, local: &LocalAlignment) -> Result<PartyDataset, AlignmentError> {
    if ids_fingerprint(ds.entity_ids()) != local.ids_fingerprint {
        return Err(AlignmentError::Consistency(format!(
            "alignment result for {} was computed over different ids",
            ds.party_id
        )));
    }
    if local.positions.iter().any(|&p| p >= ds.n_rows()) {
        return Err(AlignmentError::Consistency("alignment position out of range".into()));
    }
    Ok(ds.select_rows(&local.positions))
}

pub fn align_datasets(datasets: &[PartyDataset], result: &AlignmentResult) -> Result<Vec<PartyDataset>, AlignmentError> {
    datasets
        .iter()
        .map(|ds| {
            let local = result
                .per_party
                .get(&ds.party_id)
                .ok_or_else(|| AlignmentError::Consistency(format!("no alignment for {}", ds.party_id)))?;
            align_dataset(ds, local)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{audit_assert_no_leak, ForbiddenPattern};
    use std::collections::BTreeSet;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn matched_ids(ids: &[String], local: &LocalAlignment) -> Vec<String> {
        local.positions.iter().map(|&p| ids[p].clone()).collect()
    }

    #[test]
    fn small_overlap() {
        let g = SafePrimeGroup::test_256();
        let (a, b) = (s(&["a", "b", "c"]), s(&["b", "c", "d"]));
        let r = psi_two_party(&a, &b, &g, 1).unwrap();
        assert_eq!(r.intersection_size, 2);
        let ia = matched_ids(&a, &r.per_party[&PartyId::new("initiator")]);
        let ib = matched_ids(&b, &r.per_party[&PartyId::new("responder")]);
        assert_eq!(ia, ib);
        assert_eq!(ia.iter().cloned().collect::<BTreeSet<_>>(), s(&["b", "c"]).into_iter().collect());
    }

    #[test]
    fn disjoint_sets() {
        let g = SafePrimeGroup::test_256();
        let r = psi_two_party(&s(&["a"]), &s(&["z"]), &g, 2).unwrap();
        assert_eq!(r.intersection_size, 0);
    }

    #[test]
    fn role_swap_gives_same_intersection() {
        let g = SafePrimeGroup::test_256();
        let a: Vec<String> = (0..40).map(|i| format!("x{i}")).collect();
        let b: Vec<String> = (20..70).map(|i| format!("x{i}")).collect();
        let r1 = psi_two_party(&a, &b, &g, 3).unwrap();
        let r2 = psi_two_party(&b, &a, &g, 4).unwrap();
        let m1 = matched_ids(&a, &r1.per_party[&PartyId::new("initiator")]);
        let m2 = matched_ids(&a, &r2.per_party[&PartyId::new("responder")]);
        assert_eq!(m1.into_iter().collect::<BTreeSet<_>>(), m2.into_iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn multi_party_single_common_element() {
        let g = SafePrimeGroup::test_256();
        let lists = vec![
            (PartyId::new("p0"), s(&["x", "a", "b"])),
            (PartyId::new("p1"), s(&["c", "x", "a"])),
            (PartyId::new("p2"), s(&["x", "d", "b"])),
        ];
        let r = psi_multi_party(&lists, &g, 5).unwrap();
        assert_eq!(r.intersection_size, 1);
        for (p, ids) in &lists {
            assert_eq!(matched_ids(ids, &r.per_party[p]), s(&["x"]));
        }
    }

    #[test]
    fn identical_lists_intersect_fully() {
        let g = SafePrimeGroup::test_256();
        let ids = s(&["a", "b", "c", "d"]);
        let lists: Vec<_> = (0..3).map(|i| (PartyId::new(format!("p{i}")), ids.clone())).collect();
        let r = psi_multi_party(&lists, &g, 6).unwrap();
        assert_eq!(r.intersection_size, 4);
        for (p, ids) in &lists {
            assert_eq!(matched_ids(ids, &r.per_party[p]), *ids);
        }
    }

    #[test]
    fn transcript_hides_raw_digests() {
        let g = SafePrimeGroup::test_256();
        let a: Vec<String> = (0..30).map(|i| crate::sandbox::id_digest(b"k", &format!("u{i}"))).collect();
        let b: Vec<String> = (10..50).map(|i| crate::sandbox::id_digest(b"k", &format!("u{i}"))).collect();
        let lists = [(PartyId::new("a"), a.clone()), (PartyId::new("b"), b.clone())];
        let (_, log) = run_psi_simulated(&lists, &g, 7).unwrap();
        let forbidden: Vec<ForbiddenPattern> = a
            .iter()
            .chain(&b)
            .flat_map(|d| {
                [
                    ForbiddenPattern::new(d.clone(), d.as_bytes().to_vec()),
                    ForbiddenPattern::new(format!("{d} raw"), hex::decode(d).unwrap()),
                ]
            })
            .collect();
        audit_assert_no_leak(&log, &forbidden).unwrap();
        assert_eq!(log.count_of(MsgType::AlignBlind), 2);
        assert_eq!(log.count_of(MsgType::AlignReply), 2);
    }

    #[test]
    fn stale_result_is_rejected() {
        let g = SafePrimeGroup::test_256();
        let ids = s(&["a", "b"]);
        let ds = PartyDataset::from_parts("initiator", ids.clone(), vec![("x".into(), vec![1.0, 2.0])], None).unwrap();
        let r = psi_two_party(&ids, &s(&["b"]), &g, 8).unwrap();
        let aligned = align_dataset(&ds, &r.per_party[&PartyId::new("initiator")]).unwrap();
        assert_eq!(aligned.entity_ids(), &s(&["b"]));
        let changed = PartyDataset::from_parts("initiator", s(&["a", "c"]), vec![("x".into(), vec![1.0, 2.0])], None)
            .unwrap();
        assert!(matches!(
            align_dataset(&changed, &r.per_party[&PartyId::new("initiator")]),
            Err(AlignmentError::Consistency(_))
        ));
    }

    #[test]
    fn duplicate_input_aborts_both_sides() {
        let g = SafePrimeGroup::test_256();
        let err = psi_two_party(&s(&["a", "a"]), &s(&["a"]), &g, 9).unwrap_err();
        assert!(matches!(err, AlignmentError::Protocol(_) | AlignmentError::Transport(_)));
    }
}
