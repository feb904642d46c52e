pub mod codec;
pub mod crypto;
pub mod transport;
pub mod sandbox;
pub mod alignment;
pub mod info_federation;
pub mod model_federation;
pub mod cognition_federation;
pub mod knowledge_federation;
pub mod orchestrator;
pub mod synth;
