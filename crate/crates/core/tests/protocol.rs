mod common;

use std::collections::BTreeSet;

use common::{cluster, Cluster};
use decoy_core::enclave::{digest_of, CoreSettings};
use decoy_core::peers::PeerDescriptor;
use decoy_core::relay::NodeSettings;
use decoy_core::wire::{Envelope, MsgType};
use decoy_core::{Error, RelayNode};

fn forwards(c: &Cluster) -> Vec<Envelope> {
    c.net
        .captured()
        .iter()
        .map(|f| Envelope::decode(f).unwrap())
        .filter(|e| e.msg_type == MsgType::QueryForward)
        .collect()
}

#[test]
fn k_zero_sends_one_envelope() {
    let c = cluster(5, 0);
    c.net.start_capture();
    let out = c.nodes[0].submit_query("weather paris", c.net.as_ref()).unwrap();
    assert_eq!(forwards(&c).len(), 1);
    assert_eq!(out.decision.k, 0);
    assert_eq!(c.engine.total_calls(), 1);
}

#[test]
fn k_three_uses_four_distinct_relays_and_exact_results() {
    let c = cluster(8, 3);
    c.net.start_capture();
    let out = c.nodes[0].submit_query("cheap flights", c.net.as_ref()).unwrap();
    assert_eq!(out.results, c.engine.corpus().search_text("cheap flights"));
    assert_eq!((out.decision.k, out.decision.k_effective, out.decision.degraded), (3, 3, false));
    let calls = c.engine.calls_by_source();
    assert_eq!(calls.len(), 4);
    assert!(calls.values().all(|&n| n == 1));
    assert!(!calls.contains_key("n0"));
    assert_eq!(forwards(&c).len(), 4);
}

#[test]
fn few_relays_degrade_protection() {
    let c = cluster(3, 5);
    let out = c.nodes[0].submit_query("guitar lessons", c.net.as_ref()).unwrap();
    assert_eq!(out.decision.k, 5);
    assert_eq!(out.decision.k_effective, 1);
    assert!(out.decision.degraded);
    assert_eq!(c.nodes[0].status().degraded_count, 1);
}

#[test]
fn real_path_retried_once_then_fails() {
    let c = cluster(4, 0);
    // every relay down: the first attempt and the single retry both time out
    for n in &c.nodes[1..] {
        c.net.set_down(n.id(), true);
    }
    let err = c.nodes[0].submit_query("recipe pasta", c.net.as_ref()).unwrap_err();
    assert!(matches!(err, Error::RealPathFailed(_)), "{err}");
    assert_eq!(c.engine.total_calls(), 0);

    // one relay back: a fresh relay answers on retry or first attempt
    let c = cluster(4, 0);
    c.net.set_down(c.nodes[1].id(), true);
    c.net.set_down(c.nodes[2].id(), true);
    for _ in 0..5 {
        if let Err(e) = c.nodes[0].submit_query("recipe pasta", c.net.as_ref()) {
            // both dead relays can be picked before the live one
            assert!(matches!(e, Error::RealPathFailed(_)), "{e}");
        }
    }
    assert!(c.engine.total_calls() >= 1);
}

#[test]
fn replayed_forwards_never_reach_the_engine_twice() {
    let c = cluster(6, 2);
    c.net.start_capture();
    for q in ["weather paris", "football scores", "garden tools"] {
        c.nodes[0].submit_query(q, c.net.as_ref()).unwrap();
    }
    let captured = forwards(&c);
    let before = c.engine.total_calls();
    assert_eq!(before, 9);
    for env in &captured {
        for n in &c.nodes {
            let _ = n.handle_envelope(env);
        }
    }
    assert_eq!(c.engine.total_calls(), before);
}

#[test]
fn rogue_build_never_reaches_the_engine() {
    let c = cluster(3, 0);
    let rogue = RelayNode::new(
        PeerDescriptor::at("rogue", 0),
        NodeSettings {
            core: CoreSettings {
                build_digest: digest_of("patched"),
                allow_list: [digest_of("patched"), decoy_core::enclave::build_digest()].into(),
                ..CoreSettings::default()
            },
            ..NodeSettings::default()
        },
        c.engine.clone(),
        c.clock.clone(),
        99,
    );
    rogue.core().seed_table(["x"]);
    let target = c.nodes[0].descriptor().clone();
    assert!(rogue.attest_peer(&target, c.net.as_ref()).is_err());
    // forge a forward under a made-up key by borrowing an honest envelope
    let honest = common::cluster_seeded(2, 0, 1);
    honest.net.start_capture();
    honest.nodes[0].submit_query("weather", honest.net.as_ref()).unwrap();
    let mut forged = forwards(&honest)[0].clone();
    forged.sender_id = "rogue".into();
    assert!(c.nodes[0].handle_envelope(&forged).is_err());
    assert_eq!(c.engine.total_calls(), 0);
    assert!(c.nodes[0].status().drops.unattested >= 1);
}

#[test]
fn no_query_text_on_the_wire() {
    let c = cluster(6, 3);
    c.net.start_capture();
    let queries = ["football scores", "guitar lessons", "seed alpha"];
    for q in queries {
        c.nodes[1].submit_query(q, c.net.as_ref()).unwrap();
    }
    let frames = c.net.captured();
    assert!(!frames.is_empty());
    for needle in queries.iter().chain(&["seed beta", "https://example.org"]) {
        let n = needle.as_bytes();
        assert!(
            frames.iter().all(|f| !f.windows(n.len()).any(|w| w == n)),
            "{needle} leaked"
        );
    }
}

#[test]
fn forwards_of_equal_length_queries_look_alike() {
    let c = cluster(6, 3);
    c.net.start_capture();
    c.nodes[0].submit_query("cheap flights", c.net.as_ref()).unwrap();
    let lens: BTreeSet<usize> = forwards(&c).iter().map(|e| e.sealed_payload.len()).collect();
    // real and fake bodies all fit one bucket
    assert_eq!(lens.len(), 1);
}

#[test]
fn liveness_with_enough_relays() {
    let c = cluster(10, 3);
    for (i, q) in ["weather", "pasta recipe", "garden", "scores"].iter().enumerate() {
        let n = &c.nodes[i];
        let out = n.submit_query(q, c.net.as_ref()).unwrap();
        assert_eq!(out.results, c.engine.corpus().search_text(q));
        assert_eq!(n.status().pending, 0);
    }
}

#[test]
fn profile_grows_and_decisions_are_logged() {
    let c = cluster(4, 0);
    let n = &c.nodes[0];
    n.submit_query("weather paris", c.net.as_ref()).unwrap();
    n.submit_query("weather lyon", c.net.as_ref()).unwrap();
    assert_eq!(n.profile_len(), 2);
    let recent = n.recent_decisions(10);
    assert_eq!(recent.len(), 2);
    assert_eq!(recent[1].query, "weather lyon");
    assert!(recent[1].linkability > recent[0].linkability);
}

#[test]
fn shuffle_keeps_views_populated() {
    let c = cluster(12, 0);
    for n in &c.nodes {
        n.shuffle_once(c.net.as_ref()).unwrap();
    }
    for n in &c.nodes {
        let v = n.view_snapshot();
        assert!(!v.is_empty() && v.len() <= 20);
        assert!(!v.contains(n.id()));
    }
}

#[test]
fn unbootstrapped_node_refuses() {
    let c = cluster(2, 0);
    let lonely = RelayNode::new(
        PeerDescriptor::at("lonely", 0),
        NodeSettings::default(),
        c.engine.clone(),
        c.clock.clone(),
        3,
    );
    assert!(matches!(
        lonely.submit_query("weather", c.net.as_ref()),
        Err(Error::NotBootstrapped(_))
    ));
}
