//! The framed wire unit every inter-party byte travels in.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! u32  body length (everything below)
//! u8   protocol version
//! u8   message type
//! u64  round
//! u16  job id length,    job id (utf-8)
//! u16  sender length,    sender id (utf-8)
//! u16  recipient length, recipient id (utf-8)
//! [32] SHA-256 of payload
//! u32  payload length,   payload
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TransportError;

pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_MAX_FRAME: usize = 16 << 20;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartyId(String);

impl PartyId {
    pub fn new(id: impl Into<String>) -> Self {
        PartyId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PartyId {
    fn from(s: &str) -> Self {
        PartyId(s.to_owned())
    }
}

macro_rules! msg_types {
    ($($name:ident = $code:expr, $wire:literal;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum MsgType {
            $($name,)*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name,)*];

            pub fn code(self) -> u8 {
                match self {
                    $(MsgType::$name => $code,)*
                }
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(MsgType::$name),)*
                    _ => None,
                }
            }

            pub fn as_str(self) -> &'static str {
                match self {
                    $(MsgType::$name => $wire,)*
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $($wire => Some(MsgType::$name),)*
                    _ => None,
                }
            }
        }
    };
}

msg_types! {
    Join = 1, "JOIN";
    AlignBlind = 2, "ALIGN_BLIND";
    AlignReply = 3, "ALIGN_REPLY";
    EncStat = 4, "ENC_STAT";
    ModelUpdate = 5, "MODEL_UPDATE";
    GlobalUpdate = 6, "GLOBAL_UPDATE";
    PartialLogit = 7, "PARTIAL_LOGIT";
    GradientCandidates = 8, "GRADIENT_CANDIDATES";
    GradientSelected = 9, "GRADIENT_SELECTED";
    Embedding = 10, "EMBEDDING";
    HeadGradient = 11, "HEAD_GRADIENT";
    KnowledgeQuery = 12, "KNOWLEDGE_QUERY";
    KnowledgeReply = 13, "KNOWLEDGE_REPLY";
    Control = 14, "CONTROL";
    Error = 15, "ERROR";
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header fields without the payload; what the audit log keeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvelopeHeader {
    pub protocol_version: u8,
    pub job_id: String,
    pub round: u64,
    pub sender: PartyId,
    pub recipient: PartyId,
    pub msg_type: MsgType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub header: EnvelopeHeader,
    payload: Vec<u8>,
    payload_digest: [u8; 32],
}

pub fn payload_digest(payload: &[u8]) -> [u8; 32] {
    Sha256::digest(payload).into()
}

impl MessageEnvelope {
    pub fn new(
        job_id: impl Into<String>,
        round: u64,
        sender: PartyId,
        recipient: PartyId,
        msg_type: MsgType,
        payload: Vec<u8>,
    ) -> Self {
        let payload_digest = payload_digest(&payload);
        Self {
            header: EnvelopeHeader {
                protocol_version: PROTOCOL_VERSION,
                job_id: job_id.into(),
                round,
                sender,
                recipient,
                msg_type,
            },
            payload,
            payload_digest,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }

    pub fn payload_digest(&self) -> &[u8; 32] {
        &self.payload_digest
    }

    pub fn sender(&self) -> &PartyId {
        &self.header.sender
    }

    pub fn recipient(&self) -> &PartyId {
        &self.header.recipient
    }

    pub fn msg_type(&self) -> MsgType {
        self.header.msg_type
    }

    pub fn round(&self) -> u64 {
        self.header.round
    }

    /// Serializes to a length-prefixed frame.
    pub fn encode(&self, max_frame: usize) -> Result<Vec<u8>, TransportError> {
        let h = &self.header;
        for (what, s) in [("job id", h.job_id.as_str()), ("sender", h.sender.as_str()), ("recipient", h.recipient.as_str())] {
            if s.len() > u16::MAX as usize {
                return Err(TransportError::Decode(format!("{what} longer than 65535 bytes")));
            }
        }
        let body_len = 1 + 1 + 8 + 6 + h.job_id.len() + h.sender.len() + h.recipient.len() + 32 + 4 + self.payload.len();
        if body_len > max_frame {
            return Err(TransportError::FrameTooLarge { size: body_len, max: max_frame });
        }
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.push(h.protocol_version);
        out.push(h.msg_type.code());
        out.extend_from_slice(&h.round.to_be_bytes());
        for s in [h.job_id.as_str(), h.sender.as_str(), h.recipient.as_str()] {
            out.extend_from_slice(&(s.len() as u16).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&self.payload_digest);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses one complete frame (length prefix included) and verifies the
    /// payload digest.
    pub fn decode(frame: &[u8], max_frame: usize) -> Result<Self, TransportError> {
        let err = |m: &str| TransportError::Decode(m.to_owned());
        if frame.len() < 4 {
            return Err(err("frame shorter than its length prefix"));
        }
        let body_len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if body_len > max_frame {
            return Err(TransportError::FrameTooLarge { size: body_len, max: max_frame });
        }
        if frame.len() != 4 + body_len {
            return Err(err("frame length does not match prefix"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], TransportError> {
            if pos + n > frame.len() {
                return Err(err("truncated frame"));
            }
            let s = &frame[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let version = take(1)?[0];
        if version != PROTOCOL_VERSION {
            return Err(TransportError::Negotiation { ours: PROTOCOL_VERSION, theirs: version });
        }
        let code = take(1)?[0];
        let msg_type = MsgType::from_code(code).ok_or_else(|| err("unknown message type"))?;
        let round = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let mut strings = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
            let s = String::from_utf8(take(n)?.to_vec()).map_err(|_| err("header string is not utf-8"))?;
            strings.push(s);
        }
        let digest: [u8; 32] = take(32)?.try_into().unwrap();
        let plen = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let payload = take(plen)?.to_vec();
        if pos != frame.len() {
            return Err(err("trailing bytes after payload"));
        }
        if payload_digest(&payload) != digest {
            return Err(err("payload digest mismatch"));
        }
        let recipient = PartyId(strings.pop().unwrap());
        let sender = PartyId(strings.pop().unwrap());
        let job_id = strings.pop().unwrap();
        Ok(Self {
            header: EnvelopeHeader { protocol_version: version, job_id, round, sender, recipient, msg_type },
            payload,
            payload_digest: digest,
        })
    }
}

impl PartyId {
    fn len(&self) -> usize {
        self.0.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> MessageEnvelope {
        MessageEnvelope::new("job-1", 3, "alice".into(), "bob".into(), MsgType::ModelUpdate, vec![1, 2, 3])
    }

    #[test]
    fn digest_matches_payload() {
        let env = sample();
        assert_eq!(env.payload_digest(), &payload_digest(&[1, 2, 3]));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let env = sample();
        let mut frame = env.encode(DEFAULT_MAX_FRAME).unwrap();
        let last = frame.len() - 1;
        frame[last] ^= 0x01;
        assert!(matches!(MessageEnvelope::decode(&frame, DEFAULT_MAX_FRAME), Err(TransportError::Decode(_))));
    }

    #[test]
    fn oversized_frames_are_rejected() {
        let env = MessageEnvelope::new("j", 0, "a".into(), "b".into(), MsgType::Control, vec![0; 1000]);
        assert!(matches!(env.encode(512), Err(TransportError::FrameTooLarge { .. })));
        let frame = env.encode(DEFAULT_MAX_FRAME).unwrap();
        assert!(matches!(MessageEnvelope::decode(&frame, 512), Err(TransportError::FrameTooLarge { .. })));
    }

    #[test]
    fn version_byte_follows_length_prefix() {
        let frame = sample().encode(DEFAULT_MAX_FRAME).unwrap();
        assert_eq!(frame[4], PROTOCOL_VERSION);
        let mut bad = frame.clone();
        bad[4] = 9;
        assert!(matches!(MessageEnvelope::decode(&bad, DEFAULT_MAX_FRAME), Err(TransportError::Negotiation { .. })));
    }

    #[test]
    fn msg_type_codes_roundtrip() {
        for &t in MsgType::ALL {
            assert_eq!(MsgType::from_code(t.code()), Some(t));
            assert_eq!(MsgType::parse(t.as_str()), Some(t));
        }
    }

    fn arb_envelope() -> impl Strategy<Value = MessageEnvelope> {
        (
            "[a-z0-9-]{0,12}",
            any::<u64>(),
            "[a-z]{1,8}",
            "[a-z]{1,8}",
            0..MsgType::ALL.len(),
            proptest::collection::vec(any::<u8>(), 0..256),
        )
            .prop_map(|(job, round, s, r, t, payload)| {
                MessageEnvelope::new(job, round, PartyId::new(s), PartyId::new(r), MsgType::ALL[t], payload)
            })
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(env in arb_envelope()) {
            let frame = env.encode(DEFAULT_MAX_FRAME).unwrap();
            prop_assert_eq!(MessageEnvelope::decode(&frame, DEFAULT_MAX_FRAME).unwrap(), env);
        }
    }
}
