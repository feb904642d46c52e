//! Selective receive on top of a [`Transport`].

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use super::{MessageEnvelope, MsgType, PartyId, Transport, TransportError};

/// Wraps a transport for one job. Messages that arrive before they are asked
/// for are buffered; an `ERROR` envelope from any peer aborts the wait.
pub struct Mailbox<'t> {
    transport: &'t mut dyn Transport,
    job_id: String,
    pending: VecDeque<MessageEnvelope>,
    timeout: Option<Duration>,
}

impl<'t> Mailbox<'t> {
    pub fn new(transport: &'t mut dyn Transport, job_id: impl Into<String>, timeout: Option<Duration>) -> Self {
        Self { transport, job_id: job_id.into(), pending: VecDeque::new(), timeout }
    }

    pub fn me(&self) -> PartyId {
        self.transport.local_id().clone()
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn send(&mut self, to: &PartyId, msg_type: MsgType, round: u64, payload: Vec<u8>) -> Result<(), TransportError> {
        let env = MessageEnvelope::new(self.job_id.clone(), round, self.me(), to.clone(), msg_type, payload);
        self.transport.send(env)
    }

    /// Oldest buffered or incoming message of `msg_type` from `from`.
    pub fn recv_from(&mut self, from: &PartyId, msg_type: MsgType) -> Result<MessageEnvelope, TransportError> {
        self.recv_where(|e| e.sender() == from && e.msg_type() == msg_type)
    }

    /// Oldest message of `msg_type` from anyone.
    pub fn recv_type(&mut self, msg_type: MsgType) -> Result<MessageEnvelope, TransportError> {
        self.recv_where(|e| e.msg_type() == msg_type)
    }

    /// Exactly one `msg_type` envelope per expected sender for `round`,
    /// returned in party-id order. A second envelope from the same sender
    /// for the same round is a protocol error.
    pub fn barrier_collect(
        &mut self,
        msg_type: MsgType,
        round: u64,
        expected: &[PartyId],
    ) -> Result<Vec<MessageEnvelope>, TransportError> {
        let mut got: BTreeMap<PartyId, MessageEnvelope> = BTreeMap::new();
        let matches = |e: &MessageEnvelope| e.msg_type() == msg_type && e.round() == round && expected.contains(e.sender());
        while got.len() < expected.len() {
            let env = match self.recv_where(matches) {
                Ok(env) => env,
                Err(TransportError::Timeout) => {
                    let missing = expected.iter().filter(|p| !got.contains_key(*p)).cloned().collect();
                    return Err(TransportError::BarrierTimeout { round, missing });
                }
                Err(e) => return Err(e),
            };
            let sender = env.sender().clone();
            if got.insert(sender.clone(), env).is_some() {
                return Err(TransportError::DuplicateSender { round, party: sender, msg_type: msg_type.as_str().into() });
            }
        }
        if let Some(dup) = self.pending.iter().find(|e| matches(e)) {
            return Err(TransportError::DuplicateSender {
                round,
                party: dup.sender().clone(),
                msg_type: msg_type.as_str().into(),
            });
        }
        Ok(got.into_values().collect())
    }

    fn recv_where(&mut self, want: impl Fn(&MessageEnvelope) -> bool) -> Result<MessageEnvelope, TransportError> {
        if let Some(pos) = self.pending.iter().position(&want) {
            return Ok(self.pending.remove(pos).unwrap());
        }
        loop {
            let env = self.transport.recv(self.timeout)?;
            if env.header.job_id != self.job_id {
                return Err(TransportError::Unexpected(format!(
                    "message for job {:?} while running {:?}",
                    env.header.job_id, self.job_id
                )));
            }
            if env.msg_type() == MsgType::Error {
                return Err(TransportError::Remote {
                    from: env.sender().clone(),
                    message: String::from_utf8_lossy(env.payload()).into_owned(),
                });
            }
            if want(&env) {
                return Ok(env);
            }
            self.pending.push_back(env);
        }
    }

    /// Best-effort `ERROR` notification so peers stop waiting on us.
    pub fn abort(&mut self, peers: &[PartyId], message: &str) {
        let me = self.me();
        for p in peers.iter().filter(|p| **p != me) {
            let _ = self.send(p, MsgType::Error, 0, message.as_bytes().to_vec());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{simnet_run, PartyProgram, SimConfig};

    fn ids(names: &[&str]) -> Vec<PartyId> {
        names.iter().map(|n| PartyId::new(*n)).collect()
    }

    fn run(senders: Vec<(&'static str, usize)>) -> Result<Vec<String>, TransportError> {
        let expected = ids(&["p1", "p2", "p3"]);
        let exp = &expected;
        let mut programs: Vec<PartyProgram<'_, Result<Vec<String>, TransportError>>> = vec![PartyProgram::new(
            "arb",
            move |ep| {
                let mut mb = Mailbox::new(ep, "j", Some(Duration::from_secs(1)));
                let got = mb.barrier_collect(MsgType::ModelUpdate, 3, exp)?;
                Ok(got.iter().map(|e| e.sender().as_str().to_string()).collect())
            },
        )];
        for (name, copies) in senders {
            programs.push(PartyProgram::new(name, move |ep| {
                let mut mb = Mailbox::new(ep, "j", None);
                for _ in 0..copies {
                    mb.send(&PartyId::new("arb"), MsgType::ModelUpdate, 3, vec![1])?;
                }
                Ok(Vec::new())
            }));
        }
        simnet_run(programs, SimConfig::new(5))?.outputs.remove(0).1
    }

    #[test]
    fn barrier_returns_in_party_order() {
        assert_eq!(run(vec![("p3", 1), ("p1", 1), ("p2", 1)]).unwrap(), vec!["p1", "p2", "p3"]);
    }

    #[test]
    fn barrier_timeout_lists_missing() {
        match run(vec![("p1", 1), ("p3", 1)]) {
            Err(TransportError::BarrierTimeout { round: 3, missing }) => assert_eq!(missing, ids(&["p2"])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn barrier_rejects_duplicates() {
        let r = run(vec![("p1", 2), ("p2", 1), ("p3", 1)]);
        assert!(matches!(r, Err(TransportError::DuplicateSender { ref party, .. }) if party.as_str() == "p1"), "{r:?}");
    }
}
