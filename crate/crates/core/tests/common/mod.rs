#![allow(dead_code)]

use std::sync::Arc;

use decoy_core::backend::{Document, MockCorpus, MockEngine};
use decoy_core::peers::PeerDescriptor;
use decoy_core::relay::{ManualClock, NodeSettings};
use decoy_core::{MemoryNetwork, RelayNode, TermVector};

pub const WORDS: [&str; 12] = [
    "weather", "paris", "flights", "cheap", "recipe", "pasta", "football", "scores", "garden", "tools", "guitar",
    "lessons",
];

pub fn corpus() -> MockCorpus {
    let docs = (0..60)
        .map(|i| Document {
            url: format!("https://example.org/{i:02}"),
            title: format!("doc {i}"),
            terms: TermVector::from_terms([WORDS[i % 12], WORDS[(i * 5 + 1) % 12], WORDS[(i * 7 + 3) % 12]]),
        })
        .collect();
    MockCorpus::new(docs).unwrap()
}

pub struct Cluster {
    pub net: Arc<MemoryNetwork>,
    pub nodes: Vec<Arc<RelayNode>>,
    pub engine: Arc<MockEngine>,
    pub clock: Arc<ManualClock>,
}

/// `n` nodes knowing each other, attested, fake tables seeded, every
/// query sent with exactly `k` fakes.
pub fn cluster(n: usize, k: usize) -> Cluster {
    cluster_seeded(n, k, 0)
}

/// Clusters with different `salt` share node ids but no keys.
pub fn cluster_seeded(n: usize, k: usize, salt: u64) -> Cluster {
    let engine = Arc::new(MockEngine::new(corpus()));
    let clock = Arc::new(ManualClock::new(1_000));
    let net = Arc::new(MemoryNetwork::new());
    let settings = NodeSettings {
        fixed_k: Some(k),
        ..NodeSettings::default()
    };
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let nodes: Vec<Arc<RelayNode>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let node = Arc::new(RelayNode::new(
                PeerDescriptor::at(id, 0),
                settings.clone(),
                engine.clone(),
                clock.clone(),
                (salt << 32) + i as u64 + 7,
            ));
            node.core().seed_table(["seed alpha", "seed beta", "seed gamma", "seed delta", "seed epsilon"]);
            net.add(node.clone());
            node
        })
        .collect();
    for node in &nodes {
        node.bootstrap_view(&ids).unwrap();
    }
    for node in &nodes {
        node.ensure_attested(net.as_ref());
    }
    Cluster {
        net,
        nodes,
        engine,
        clock,
    }
}
