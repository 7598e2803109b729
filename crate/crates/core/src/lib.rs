//! Decentralized private web search.
//!
//! Every node is both a client and a relay. A user's query is assessed for
//! sensitivity, accompanied by an adaptive number of fake queries drawn from
//! real traffic the node relayed for others, and each of them leaves through a
//! different peer. The engine cannot tell who sent a query, nor whether it is
//! real.
//!
//! Modules, bottom up:
//! - [`model`]: queries, term vectors, profiles, decisions.
//! - [`sensitivity`]: semantic and linkability assessment, choice of `k`.
//! - [`fakes`]: the table of relayed queries fakes are drawn from.
//! - [`peers`]: random peer sampling and relay selection.
//! - [`wire`], [`enclave`], [`relay`]: envelopes, the sealed core and the node.
//! - [`backend`]: mock engine, rate limiter, live engine.
//! - [`eval`]: query logs, the re-identification adversary and metrics.
//! - [`sim`]: discrete-event multi-node simulation and throughput bench.

pub mod backend;
pub mod config;
pub mod enclave;
pub mod error;
pub mod eval;
pub mod fakes;
pub mod model;
pub mod peers;
pub mod relay;
pub mod sensitivity;
pub mod sim;
pub mod wire;

pub use error::{Error, Result};
pub use model::{
    cosine, normalize, Millis, Origin, ProtectionDecision, QueryId, QueryRecord, SearchResult,
    SensitiveTopicDictionary, TermVector, UserId, UserProfile,
};
pub use relay::{MemoryNetwork, RelayNode, SearchOutcome, Transport};
pub use sensitivity::{decide_k, linkability_score, semantic_assess, SensitivityConfig};
