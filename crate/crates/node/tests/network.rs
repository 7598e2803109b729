//! Nodes on loopback TCP, driven through their HTTP API.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::time::Duration;

use decoy_core::backend::MockCorpus;
use decoy_core::config::NodeConfig;
use decoy_node::{NodeHandle, NodeRuntime};
use serde_json::Value;

const CORPUS: &str = r#"{"url":"https://example.org/diabetes-diet","title":"Diabetes diet","text":"what to eat with diabetes diet sugar"}
{"url":"https://example.org/insulin","title":"Insulin basics","text":"insulin dose diabetes"}
{"url":"https://example.org/pasta","title":"Pasta recipe","text":"easy pasta recipe tomato"}
{"url":"https://example.org/weather","title":"Weather Paris","text":"weather forecast paris rain"}
{"url":"https://example.org/flights","title":"Cheap flights","text":"cheap flights paris rome"}
"#;

const SEEDS: &str = "weather lyon\ncheap hotels rome\nguitar chords\nfootball scores\nbread recipe\n";

fn write_fixtures(dir: &Path) -> NodeConfig {
    std::fs::write(dir.join("corpus.jsonl"), CORPUS).unwrap();
    std::fs::write(dir.join("seed.txt"), SEEDS).unwrap();
    NodeConfig {
        listen_addr: "127.0.0.1:0".into(),
        api_addr: "127.0.0.1:0".into(),
        corpus_path: Some(dir.join("corpus.jsonl")),
        seed_path: Some(dir.join("seed.txt")),
        deadline_ms: 2_000,
        shuffle_period_ms: 200,
        ..NodeConfig::default()
    }
}

/// Minimal HTTP/1.1 client: status and JSON body.
fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let body = body.unwrap_or("");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status: u16 = raw[9..12].parse().unwrap();
    let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
    let text = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(rest)
    } else {
        rest.to_owned()
    };
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

async fn cluster(n: usize, cfg: &NodeConfig) -> Vec<NodeHandle> {
    let mut runtimes = Vec::new();
    for i in 0..n {
        let cfg = NodeConfig {
            seed: Some(100 + i as u64),
            ..cfg.clone()
        };
        runtimes.push(NodeRuntime::bind(&cfg).await.unwrap());
    }
    let addrs: Vec<String> = runtimes.iter().map(|r| r.peer_addr().to_string()).collect();
    for r in &runtimes {
        let me = r.peer_addr().to_string();
        let others: Vec<String> = addrs.iter().filter(|a| **a != me).cloned().collect();
        r.node().bootstrap_view(&others).unwrap();
    }
    runtimes.into_iter().map(NodeRuntime::start).collect()
}

async fn call(addr: SocketAddr, method: &'static str, path: &'static str, body: Option<&'static str>) -> (u16, Value) {
    tokio::task::spawn_blocking(move || http(addr, method, path, body)).await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn search_over_tcp_returns_engine_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixtures(dir.path());
    let nodes = cluster(5, &cfg).await;
    let api = nodes[0].api_addr;

    let (code, body) = call(api, "POST", "/search", Some(r#"{"q":"diabetes diet"}"#)).await;
    let drops: Vec<_> = nodes.iter().map(|n| (n.peer_addr, n.node.status().drops)).collect();
    assert_eq!(code, 200, "{body} {drops:?}");
    let corpus = MockCorpus::load(&dir.path().join("corpus.jsonl")).unwrap();
    let want = serde_json::to_value(corpus.search_text("diabetes diet")).unwrap();
    assert_eq!(body["results"], want);
    let d = &body["decision"];
    assert_eq!(d["k"], 7);
    assert_eq!(d["semantic_sensitive"], true);
    assert_eq!(d["matched_topics"], serde_json::json!(["health"]));
    assert!(d["linkability"].is_number());
    // 4 peers cannot carry 8 queries
    assert_eq!(d["degraded"], true);
    assert_eq!(d["k_effective"], 3);

    let (code, status) = call(api, "GET", "/status", None).await;
    assert_eq!(code, 200);
    for key in ["view_size", "table_size", "pending", "degraded_count"] {
        assert!(status[key].is_u64(), "{key} in {status}");
    }
    assert!((1..=4).contains(&status["view_size"].as_u64().unwrap()));
    assert_eq!(status["pending"], 0);
    assert_eq!(status["degraded_count"], 1);

    // relays record what they forward
    assert!(nodes[1..].iter().any(|n| n.node.status().table_size > 5));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn topics_steer_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixtures(dir.path());
    let nodes = cluster(3, &cfg).await;
    let api = nodes[0].api_addr;

    let (code, c) = call(api, "GET", "/config", None).await;
    assert_eq!(code, 200);
    assert_eq!(c["k_max"], 7);
    assert_eq!(c["available_topics"].as_array().unwrap().len(), 4);

    let (code, c) = call(api, "PUT", "/config/topics", Some(r#"["politics"]"#)).await;
    assert_eq!(code, 200);
    assert_eq!(c["enabled_topics"], serde_json::json!(["politics"]));
    let (_, r) = call(api, "POST", "/search", Some(r#"{"q":"insulin dose"}"#)).await;
    assert_eq!(r["decision"]["semantic_sensitive"], false);
    assert_eq!(r["decision"]["k"], 0);

    let (code, _) = call(api, "PUT", "/config/topics", Some(r#"["health"]"#)).await;
    assert_eq!(code, 200);
    let (_, r) = call(api, "POST", "/search", Some(r#"{"q":"insulin dose"}"#)).await;
    assert_eq!(r["decision"]["semantic_sensitive"], true);
    assert_eq!(r["decision"]["matched_topics"], serde_json::json!(["health"]));

    let (code, recent) = call(api, "GET", "/decisions/recent?n=5", None).await;
    assert_eq!(code, 200);
    let recent = recent.as_array().unwrap();
    assert_eq!(recent.len(), 2);
    assert_eq!(recent[1]["semantic_sensitive"], true);

    let (code, _) = call(api, "PUT", "/config/topics", Some(r#"["astrology"]"#)).await;
    assert_eq!(code, 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn malformed_and_unbootstrapped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixtures(dir.path());
    let lonely = NodeRuntime::bind(&cfg).await.unwrap().start();
    let api = lonely.api_addr;
    for bad in [r#"{"q":"#, "[1,2]", r#"{"query":"x"}"#, ""] {
        let (code, body) = tokio::task::spawn_blocking(move || http(api, "POST", "/search", Some(bad)))
            .await
            .unwrap();
        assert_eq!(code, 400, "{bad}: {body}");
        assert!(body["error"].is_string());
    }
    let (code, _) = call(api, "PUT", "/config/topics", Some("health")).await;
    assert_eq!(code, 400);
    let (code, body) = call(api, "POST", "/search", Some(r#"{"q":"weather"}"#)).await;
    assert_eq!(code, 503, "{body}");
    let (code, _) = call(api, "GET", "/status", None).await;
    assert_eq!(code, 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn garbage_frames_do_not_reach_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixtures(dir.path());
    let nodes = cluster(2, &cfg).await;
    let peer = nodes[1].peer_addr;
    tokio::task::spawn_blocking(move || {
        // a frame claiming to be a forward from a stranger
        let mut frame = Vec::new();
        let sender = b"stranger";
        let payload = [7u8; 64];
        let len = 16 + 1 + 2 + sender.len() + payload.len();
        frame.extend_from_slice(&(len as u32).to_be_bytes());
        frame.extend_from_slice(&[1u8; 16]);
        frame.push(1);
        frame.extend_from_slice(&(sender.len() as u16).to_be_bytes());
        frame.extend_from_slice(sender);
        frame.extend_from_slice(&payload);
        let mut s = TcpStream::connect(peer).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        s.write_all(&frame).unwrap();
        let mut rest = Vec::new();
        // the node closes without answering
        assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);

        let mut s = TcpStream::connect(peer).unwrap();
        s.write_all(&u32::MAX.to_be_bytes()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        assert_eq!(s.read_to_end(&mut rest).unwrap_or(0), 0);
    })
    .await
    .unwrap();
    let status = nodes[1].node.status();
    assert_eq!(status.table_size, 5);
    assert!(status.drops.unattested >= 1);

    // the node still serves its peers afterwards
    let (code, _) = call(nodes[0].api_addr, "POST", "/search", Some(r#"{"q":"cheap flights"}"#)).await;
    assert_eq!(code, 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shuffles_spread_knowledge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixtures(dir.path());
    // a chain: node i only knows node i + 1
    let mut runtimes = Vec::new();
    for i in 0..4 {
        let c = NodeConfig {
            seed: Some(i),
            ..cfg.clone()
        };
        runtimes.push(NodeRuntime::bind(&c).await.unwrap());
    }
    let addrs: Vec<String> = runtimes.iter().map(|r| r.peer_addr().to_string()).collect();
    for (i, r) in runtimes.iter().enumerate() {
        r.node().bootstrap_view(&[addrs[(i + 1) % 4].clone()]).unwrap();
    }
    let nodes: Vec<NodeHandle> = runtimes.into_iter().map(NodeRuntime::start).collect();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(15);
    loop {
        let sizes: Vec<usize> = nodes.iter().map(|n| n.node.view_snapshot().len()).collect();
        if sizes.iter().all(|&s| s >= 2) {
            break;
        }
        assert!(tokio::time::Instant::now() < deadline, "views stuck at {sizes:?}");
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}
