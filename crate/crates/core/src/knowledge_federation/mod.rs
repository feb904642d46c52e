//! Knowledge-level federation.
//!
//! Every party is a knowledge node: a table of `(entity digest, predicate,
//! value)` facts plus shared rules. A rule's conditions may name predicates
//! owned by different nodes. To evaluate it, each owner filters its own facts
//! and the owners intersect their match sets by blinded PSI, so nobody learns
//! which of another node's entities failed to match. Forward chaining repeats
//! this until no rule derives anything new, writing each consequent into the
//! node that owns the consequent predicate.

mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rules::{parse_rule, parse_rules, Comparison, Condition, Consequent, Rule};

use crate::alignment::{party_rng, psi_follower, psi_leader, psi_party, AlignmentError, PsiMessages};
use crate::codec::{PayloadReader, PayloadWriter};
use crate::crypto::SafePrimeGroup;
use crate::transport::{simnet_run, AuditLog, Mailbox, MsgType, PartyId, PartyProgram, SimConfig, TransportError};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("rule file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("predicate registry: {0}")]
    Registry(String),
    #[error("rule {rule} cannot be evaluated: {} offline", .missing.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", "))]
    PartialEvaluation { rule: String, missing: Vec<PartyId> },
    #[error("forward chaining did not reach a fixpoint within depth {max_depth}; rule chain: {}", .chain.join(" -> "))]
    DepthExceeded { max_depth: usize, chain: Vec<String> },
    #[error("fact file: {0}")]
    Facts(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Which node owns each predicate; shared by the whole job.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateRegistry {
    owners: BTreeMap<String, PartyId>,
}

impl PredicateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, predicate: impl Into<String>, owner: PartyId) -> Result<(), KnowledgeError> {
        let predicate = predicate.into();
        match self.owners.get(&predicate) {
            Some(o) if *o != owner => {
                Err(KnowledgeError::Registry(format!("{predicate} is already owned by {o}, not {owner}")))
            }
            _ => {
                self.owners.insert(predicate, owner);
                Ok(())
            }
        }
    }

    pub fn owner(&self, predicate: &str) -> Result<&PartyId, KnowledgeError> {
        self.owners.get(predicate).ok_or_else(|| KnowledgeError::Registry(format!("unknown predicate {predicate}")))
    }

    pub fn predicates(&self) -> impl Iterator<Item = (&str, &PartyId)> {
        self.owners.iter().map(|(p, o)| (p.as_str(), o))
    }

    /// Every predicate a rule mentions must be registered.
    pub fn check_rule(&self, rule: &Rule) -> Result<(), KnowledgeError> {
        for c in &rule.antecedents {
            self.owner(&c.predicate)?;
        }
        self.owner(&rule.consequent.predicate)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub predicate: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNode {
    pub party: PartyId,
    /// predicate → entity → values (a predicate may hold several values).
    facts: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl KnowledgeNode {
    pub fn new(party: PartyId) -> Self {
        Self { party, facts: BTreeMap::new() }
    }

    /// Adds a fact; returns false when it was already present.
    pub fn insert(&mut self, entity: &str, predicate: &str, value: f64) -> bool {
        let vals = self.facts.entry(predicate.to_string()).or_default().entry(entity.to_string()).or_default();
        if vals.iter().any(|v| v.to_bits() == value.to_bits()) {
            return false;
        }
        vals.push(value);
        true
    }

    pub fn contains(&self, entity: &str, predicate: &str, value: f64) -> bool {
        self.facts
            .get(predicate)
            .and_then(|m| m.get(entity))
            .is_some_and(|vals| vals.iter().any(|v| v.to_bits() == value.to_bits()))
    }

    pub fn facts(&self) -> Vec<Fact> {
        let mut out = Vec::new();
        for (p, ents) in &self.facts {
            for (e, vals) in ents {
                for v in vals {
                    out.push(Fact { entity: e.clone(), predicate: p.clone(), value: *v });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.facts.values().flat_map(|m| m.values()).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with columns `entity_id,predicate,value`; values are numbers or
    /// `true`/`false`. With `id_key` entity ids are replaced by keyed digests.
    pub fn from_csv<R: Read>(party: PartyId, reader: R, id_key: Option<&[u8]>) -> Result<Self, KnowledgeError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| KnowledgeError::Facts(e.to_string()))?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| KnowledgeError::Facts(format!("missing column {name}")))
        };
        let (ci, cp, cv) = (col("entity_id")?, col("predicate")?, col("value")?);
        let mut node = Self::new(party);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| KnowledgeError::Facts(e.to_string()))?;
            let row = i + 2;
            let raw = &rec[cv];
            let value = match raw {
                "true" => 1.0,
                "false" => 0.0,
                _ => raw
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| KnowledgeError::Facts(format!("row {row}: value {raw:?} is not a number")))?,
            };
            let id = match id_key {
                Some(k) => crate::sandbox::id_digest(k, &rec[ci]),
                None => rec[ci].to_string(),
            };
            if id.is_empty() || rec[cp].is_empty() {
                return Err(KnowledgeError::Facts(format!("row {row}: empty entity or predicate")));
            }
            node.insert(&id, &rec[cp], value);
        }
        Ok(node)
    }
}

/// Entities of `node` satisfying one condition.
pub fn local_match(node: &KnowledgeNode, registry: &PredicateRegistry, cond: &Condition) -> Result<BTreeSet<String>, KnowledgeError> {
    let owner = registry.owner(&cond.predicate)?;
    if *owner != node.party {
        return Err(KnowledgeError::Registry(format!("{} is owned by {owner}, not {}", cond.predicate, node.party)));
    }
    Ok(node
        .facts
        .get(&cond.predicate)
        .map(|ents| {
            ents.iter()
                .filter(|(_, vals)| vals.iter().any(|&v| cond.comparison.holds(v, cond.threshold)))
                .map(|(e, _)| e.clone())
                .collect()
        })
        .unwrap_or_default())
}

/// Owners of a rule's conditions, sorted.
pub fn rule_owners(rule: &Rule, registry: &PredicateRegistry) -> Result<Vec<PartyId>, KnowledgeError> {
    let set: BTreeSet<PartyId> = rule.antecedents.iter().map(|c| registry.owner(&c.predicate).cloned()).collect::<Result<_, _>>()?;
    Ok(set.into_iter().collect())
}

/// A node's own conjunction: the conditions it owns, intersected locally.
pub fn local_conjunction(node: &KnowledgeNode, registry: &PredicateRegistry, rule: &Rule) -> Result<BTreeSet<String>, KnowledgeError> {
    let mut acc: Option<BTreeSet<String>> = None;
    for c in rule.antecedents.iter().filter(|c| registry.owner(&c.predicate).is_ok_and(|o| *o == node.party)) {
        let m = local_match(node, registry, c)?;
        acc = Some(match acc {
            None => m,
            Some(a) => a.intersection(&m).cloned().collect(),
        });
    }
    acc.ok_or_else(|| KnowledgeError::Registry(format!("{} owns no condition of {}", node.party, rule.name)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub query_id: String,
    pub rule: String,
    /// Matching entity digests, sorted.
    pub entities: Vec<String>,
    /// `party.predicate` per condition, in rule order.
    pub provenance: Vec<String>,
}

const TAG_DELIVER: u8 = 7;

/// One owner's part of a federated conjunction. Returns the intersection
/// (sorted). The first owner leads and, when `deliver_to` names a node that
/// owns no condition, forwards the result to it over `CONTROL`.
pub fn conjunction_participant<R: rand::RngCore>(
    mb: &mut Mailbox<'_>,
    node: &KnowledgeNode,
    registry: &PredicateRegistry,
    rule: &Rule,
    group: &SafePrimeGroup,
    deliver_to: Option<&PartyId>,
    rng: &mut R,
) -> Result<Vec<String>, KnowledgeError> {
    let owners = rule_owners(rule, registry)?;
    let ids: Vec<String> = local_conjunction(node, registry, rule)?.into_iter().collect();
    let me = &node.party;
    let result: Vec<String> = if owners.len() == 1 {
        ids
    } else {
        let local = if owners.len() == 2 {
            let peer = owners.iter().find(|o| *o != me).expect("two distinct owners");
            psi_party(mb, peer, &ids, group, PsiMessages::KNOWLEDGE, rng)?
        } else if owners[0] == *me {
            psi_leader(mb, &owners[1..], &ids, group, PsiMessages::KNOWLEDGE, rng)?
        } else {
            psi_follower(mb, &owners[0], &ids, group, PsiMessages::KNOWLEDGE, rng)?
        };
        let mut v: Vec<String> = local.positions.iter().map(|&i| ids[i].clone()).collect();
        v.sort();
        v
    };
    if let Some(target) = deliver_to {
        if owners[0] == *me && !owners.contains(target) {
            let mut w = PayloadWriter::new();
            w.u8(TAG_DELIVER).u32(result.len() as u32);
            for e in &result {
                w.str(e);
            }
            mb.send(target, MsgType::Control, 0, w.finish())?;
        }
    }
    Ok(result)
}

/// Consequent owner that holds no condition: waits for the leader's list.
pub fn receive_delivery(mb: &mut Mailbox<'_>, leader: &PartyId) -> Result<Vec<String>, KnowledgeError> {
    let env = mb.recv_from(leader, MsgType::Control)?;
    let mut r = PayloadReader::new(env.payload());
    if r.u8()? != TAG_DELIVER {
        return Err(TransportError::Unexpected("expected a judgement delivery".into()).into());
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.str()?);
    }
    r.finish()?;
    Ok(out)
}

fn provenance(rule: &Rule, registry: &PredicateRegistry) -> Result<Vec<String>, KnowledgeError> {
    rule.antecedents
        .iter()
        .map(|c| Ok(format!("{}.{}", registry.owner(&c.predicate)?, c.predicate)))
        .collect()
}

fn find_node<'a>(nodes: &'a [KnowledgeNode], p: &PartyId) -> Option<&'a KnowledgeNode> {
    nodes.iter().find(|n| n.party == *p)
}

/// Simulated federated evaluation of one rule.
pub fn federated_conjunction(
    rule: &Rule,
    nodes: &[KnowledgeNode],
    registry: &PredicateRegistry,
    group: &SafePrimeGroup,
    seed: u64,
) -> Result<(Judgement, AuditLog), KnowledgeError> {
    let (entities, log) = simulate_conjunction(rule, nodes, registry, group, seed, None)?;
    let judgement = Judgement {
        query_id: format!("{}#{seed}", rule.name),
        rule: rule.name.clone(),
        entities,
        provenance: provenance(rule, registry)?,
    };
    Ok((judgement, log))
}

fn simulate_conjunction(
    rule: &Rule,
    nodes: &[KnowledgeNode],
    registry: &PredicateRegistry,
    group: &SafePrimeGroup,
    seed: u64,
    deliver_to: Option<&PartyId>,
) -> Result<(Vec<String>, AuditLog), KnowledgeError> {
    registry.check_rule(rule)?;
    let owners = rule_owners(rule, registry)?;
    let missing: Vec<PartyId> = owners.iter().filter(|o| find_node(nodes, o).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(KnowledgeError::PartialEvaluation { rule: rule.name.clone(), missing });
    }
    let deliver_to = deliver_to.filter(|t| !owners.contains(t));
    let job = format!("knowledge/{}", rule.name);
    let job = job.as_str();
    let mut programs: Vec<PartyProgram<'_, Result<Vec<String>, KnowledgeError>>> = Vec::new();
    for o in &owners {
        let node = find_node(nodes, o).unwrap();
        programs.push(PartyProgram::new(o.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, job, None);
            let mut rng = party_rng(seed, &node.party, "knowledge-psi");
            conjunction_participant(&mut mb, node, registry, rule, group, deliver_to, &mut rng)
        }));
    }
    if let Some(t) = deliver_to {
        let leader = &owners[0];
        programs.push(PartyProgram::new(t.clone(), move |ep| {
            let mut mb = Mailbox::new(ep, job, None);
            receive_delivery(&mut mb, leader)
        }));
    }
    let out = simnet_run(programs, SimConfig::new(seed))?;
    let mut result: Option<Vec<String>> = None;
    let mut first_err = None;
    for (_, r) in out.outputs {
        match r {
            Ok(v) => {
                if let Some(prev) = &result {
                    if *prev != v {
                        return Err(AlignmentError::Consistency("owners disagree on the judgement".into()).into());
                    }
                }
                result = Some(v);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok((result.unwrap_or_default(), out.transcript))
}

#[derive(Debug)]
pub struct ChainOutcome {
    /// Newly derived facts per consequent owner, in derivation order.
    pub derived: BTreeMap<PartyId, Vec<Fact>>,
    /// Iterations that derived at least one fact.
    pub depth: usize,
    pub judgements: Vec<Judgement>,
    pub transcript: AuditLog,
}

/// Rules whose consequent feeds another rule's condition, as a cycle if any.
fn find_cycle(rules: &[Rule]) -> Option<Vec<String>> {
    let feeds = |a: &Rule, b: &Rule| b.antecedents.iter().any(|c| c.predicate == a.consequent.predicate);
    let n = rules.len();
    // 0 = unvisited, 1 = on stack, 2 = done
    fn dfs(v: usize, rules: &[Rule], feeds: &dyn Fn(&Rule, &Rule) -> bool, state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<String>> {
        state[v] = 1;
        stack.push(v);
        for w in 0..rules.len() {
            if !feeds(&rules[v], &rules[w]) {
                continue;
            }
            if state[w] == 1 {
                let start = stack.iter().position(|&s| s == w).unwrap();
                let mut names: Vec<String> = stack[start..].iter().map(|&i| rules[i].name.clone()).collect();
                names.push(rules[w].name.clone());
                return Some(names);
            }
            if state[w] == 0 {
                if let Some(c) = dfs(w, rules, feeds, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    let mut state = vec![0u8; n];
    for v in 0..n {
        if state[v] == 0 {
            if let Some(c) = dfs(v, rules, &feeds, &mut state, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// Applies every rule until nothing new is derived. Nodes are read-only
/// during an iteration; derived facts are inserted between iterations.
pub fn forward_chain(
    nodes: &mut [KnowledgeNode],
    rules: &[Rule],
    registry: &PredicateRegistry,
    max_depth: usize,
    group: &SafePrimeGroup,
    seed: u64,
) -> Result<ChainOutcome, KnowledgeError> {
    for r in rules {
        registry.check_rule(r)?;
        let owner = registry.owner(&r.consequent.predicate)?;
        if find_node(nodes, owner).is_none() {
            return Err(KnowledgeError::PartialEvaluation { rule: r.name.clone(), missing: vec![owner.clone()] });
        }
    }
    let mut derived: BTreeMap<PartyId, Vec<Fact>> = BTreeMap::new();
    let mut judgements = Vec::new();
    let mut transcript = AuditLog::new();
    let mut fired_log: Vec<Vec<String>> = Vec::new();
    for iteration in 0..=max_depth {
        let mut pending: Vec<(PartyId, Fact)> = Vec::new();
        let mut fired = Vec::new();
        for (k, rule) in rules.iter().enumerate() {
            let owner = registry.owner(&rule.consequent.predicate)?.clone();
            let run_seed = seed ^ ((iteration as u64) << 32 | k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let (entities, log) = simulate_conjunction(rule, nodes, registry, group, run_seed, Some(&owner))?;
            transcript.extend(&log);
            let node = find_node(nodes, &owner).unwrap();
            let mut any = false;
            for e in &entities {
                if !node.contains(e, &rule.consequent.predicate, rule.consequent.value) {
                    pending.push((owner.clone(), Fact { entity: e.clone(), predicate: rule.consequent.predicate.clone(), value: rule.consequent.value }));
                    any = true;
                }
            }
            if any {
                fired.push(rule.name.clone());
            }
            judgements.push(Judgement {
                query_id: format!("{}#{}", rule.name, iteration + 1),
                rule: rule.name.clone(),
                entities,
                provenance: provenance(rule, registry)?,
            });
        }
        if pending.is_empty() {
            return Ok(ChainOutcome { derived, depth: iteration, judgements, transcript });
        }
        if iteration == max_depth {
            let chain = find_cycle(rules).unwrap_or_else(|| fired_log.iter().chain([&fired]).filter_map(|f| f.first().cloned()).collect());
            return Err(KnowledgeError::DepthExceeded { max_depth, chain });
        }
        for (owner, fact) in pending {
            let node = nodes.iter_mut().find(|n| n.party == owner).unwrap();
            if node.insert(&fact.entity, &fact.predicate, fact.value) {
                derived.entry(owner).or_default().push(fact);
            }
        }
        fired_log.push(fired);
    }
    unreachable!("the loop returns on its last iteration")
}
