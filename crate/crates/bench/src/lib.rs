//! Fixtures shared by the criterion benches.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use decoy_core::backend::StubBackend;
use decoy_core::peers::PeerDescriptor;
use decoy_core::relay::{ManualClock, NodeSettings};
use decoy_core::wire::Envelope;
use decoy_core::{MemoryNetwork, QueryId, QueryRecord, RelayNode, Result, SearchResult, UserId, UserProfile};

const WORDS: [&str; 24] = [
    "weather", "paris", "flights", "cheap", "recipe", "pasta", "guitar", "lessons", "garden", "tools",
    "football", "scores", "train", "lyon", "hotel", "museum", "bike", "repair", "bread", "yeast",
    "diabetes", "insulin", "election", "ballot",
];

/// Deterministic query text of `terms` words, varying with `i`.
pub fn query_text(i: usize, terms: usize) -> String {
    (0..terms)
        .map(|t| WORDS[(i * 7 + t * 13 + i / WORDS.len()) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// `users` profiles of `per_user` past queries each.
pub fn profiles(users: usize, per_user: usize) -> Vec<UserProfile> {
    (0..users)
        .map(|u| {
            UserProfile::from_queries(
                UserId(format!("u{u}")),
                (0..per_user).map(|i| QueryRecord::real(i as u64, query_text(u * per_user + i, 3), i as u64)),
            )
        })
        .collect()
}

/// A client attested to a relay over an in-memory network; the relay
/// answers from a stub backend.
pub struct RelayPair {
    pub client: Arc<RelayNode>,
    pub relay: Arc<RelayNode>,
    to: PeerDescriptor,
    next: AtomicU64,
}

impl RelayPair {
    pub fn new() -> Result<Self> {
        let clock = Arc::new(ManualClock::new(0));
        let results = (1..=10)
            .map(|r| SearchResult {
                url: format!("https://example.org/{r}"),
                title: format!("result {r}"),
                rank: r,
            })
            .collect();
        let stub = Arc::new(StubBackend::new(results));
        let client = Arc::new(RelayNode::new(
            PeerDescriptor::at("client", 0),
            NodeSettings::default(),
            stub.clone(),
            clock.clone(),
            1,
        ));
        let relay = Arc::new(RelayNode::new(PeerDescriptor::at("relay", 0), NodeSettings::default(), stub, clock, 2));
        let net = MemoryNetwork::new();
        net.add(client.clone());
        net.add(relay.clone());
        let to = relay.descriptor().clone();
        client.attest_peer(&to, &net)?;
        Ok(RelayPair {
            client,
            relay,
            to,
            next: AtomicU64::new(0),
        })
    }

    /// A fresh sealed forward for the relay. Each one carries a new nonce,
    /// so none is refused as a replay.
    pub fn forward(&self) -> Result<Envelope> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let q = query_text(id as usize, 3);
        let d = self
            .client
            .core()
            .dispatch(QueryId(id), &q, 0, vec![self.to.clone()], 0, 5_000)?;
        self.client.core().finish(d.query_id);
        Ok(d.forwards.into_iter().next().expect("one forward").1)
    }
}
