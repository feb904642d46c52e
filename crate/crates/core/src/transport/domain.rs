//! Security domains: which side of the data boundary a message type lives on.

use serde::{Deserialize, Serialize};

use super::MsgType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityDomain {
    /// Inside one party. Raw data; never on the wire.
    Local,
    /// Party to party protocol messages.
    Exchange,
    /// Messages involving the arbitrator or aggregator.
    Federated,
}

impl MsgType {
    pub fn domain(self) -> SecurityDomain {
        use MsgType::*;
        match self {
            AlignBlind | AlignReply | PartialLogit | GradientCandidates | GradientSelected | KnowledgeQuery
            | KnowledgeReply => SecurityDomain::Exchange,
            Join | EncStat | ModelUpdate | GlobalUpdate | Embedding | HeadGradient | Control | Error => {
                SecurityDomain::Federated
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_message_type_is_local() {
        assert!(MsgType::ALL.iter().all(|t| t.domain() != SecurityDomain::Local));
        assert_eq!(MsgType::AlignBlind.domain(), SecurityDomain::Exchange);
        assert_eq!(MsgType::ModelUpdate.domain(), SecurityDomain::Federated);
    }
}
