//! Relay throughput.
//!
//! Two steps. First a trace: a batch of sealed forwards is pushed through a
//! relay backed by a stub engine on all worker threads, timing every
//! `handle_forward` and the batch as a whole. The batch rate is the measured
//! capacity. Then, for each offered rate, requests arriving at exactly that
//! constant rate are replayed through a first-come first-served queue with
//! one server per worker thread, each request taking its traced service time.
//!
//! Replaying one trace keeps the curve free of scheduler noise: with the
//! same service sequence, every request waits at least as long when
//! arrivals are closer together, so latency quantiles never decrease with
//! the offered rate.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::StubBackend;
use crate::error::{Error, Result};
use crate::model::{QueryId, SearchResult};
use crate::peers::PeerDescriptor;
use crate::relay::{ManualClock, MemoryNetwork, NodeSettings, RelayNode};

use super::quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Offered rates in requests per second.
    pub rates: Vec<f64>,
    /// Requests replayed at each rate.
    pub requests_per_rate: usize,
    /// Forwards timed for the trace.
    pub trace_len: usize,
    /// Worker threads; all available when absent.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            rates: vec![1_000.0, 5_000.0, 10_000.0, 20_000.0, 40_000.0, 80_000.0],
            requests_per_rate: 20_000,
            trace_len: 20_000,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub offered_rps: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    /// Requests completed per second of makespan.
    pub achieved_rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub servers: usize,
    /// Forwards per second over the traced batch.
    pub measured_rps: f64,
    pub mean_service_us: f64,
    pub points: Vec<RatePoint>,
    /// First offered rate with a median above one second.
    pub knee_rps: Option<f64>,
}

impl ThroughputReport {
    pub fn is_monotone(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].median_ms >= w[0].median_ms && w[1].p99_ms >= w[0].p99_ms)
    }
}

/// Service times in nanoseconds, servers, and the measured batch rate.
fn trace(cfg: &BenchConfig) -> Result<(Vec<u64>, usize, f64)> {
    let clock = Arc::new(ManualClock::new(0));
    let results: Vec<SearchResult> = (1..=10)
        .map(|r| SearchResult {
            url: format!("https://example.org/{r}"),
            title: format!("result {r}"),
            rank: r,
        })
        .collect();
    let stub = Arc::new(StubBackend::new(results));
    let client = Arc::new(RelayNode::new(
        PeerDescriptor::at("bench-client", 0),
        NodeSettings::default(),
        stub.clone(),
        clock.clone(),
        1,
    ));
    let relay = Arc::new(RelayNode::new(
        PeerDescriptor::at("bench-relay", 0),
        NodeSettings::default(),
        stub.clone(),
        clock,
        2,
    ));
    let net = MemoryNetwork::new();
    net.add(client.clone());
    net.add(relay.clone());
    let to = relay.descriptor().clone();
    client.attest_peer(&to, &net)?;

    let envelopes = (0..cfg.trace_len)
        .map(|i| {
            let q = format!("weather forecast {i} city");
            let d = client.core().dispatch(QueryId(i as u64), &q, 0, vec![to.clone()], 0, 5_000)?;
            client.core().finish(d.query_id);
            Ok(d.forwards.into_iter().next().expect("one forward").1)
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let servers = pool.current_num_threads();
    let start = Instant::now();
    let service: Vec<u64> = pool.install(|| {
        envelopes
            .par_iter()
            .map(|env| {
                let t = Instant::now();
                let reply = relay.handle_envelope(env);
                let ns = t.elapsed().as_nanos() as u64;
                reply.map(|_| ns)
            })
            .collect::<Result<Vec<u64>>>()
    })?;
    let wall = start.elapsed().as_secs_f64();
    if stub.calls() != cfg.trace_len as u64 {
        return Err(Error::Backend(format!("stub saw {} of {} forwards", stub.calls(), cfg.trace_len)));
    }
    Ok((service, servers, cfg.trace_len as f64 / wall))
}

/// Latencies in milliseconds of `n` requests arriving every `1/rate` s on
/// `servers` FCFS servers, request `i` taking `service[i % len]` ns.
pub(crate) fn replay(service: &[u64], servers: usize, rate: f64, n: usize) -> (Vec<f64>, f64) {
    let gap = 1e9 / rate;
    let mut free: BinaryHeap<Reverse<u64>> = (0..servers).map(|_| Reverse(0)).collect();
    let mut lat = Vec::with_capacity(n);
    let mut last = 0u64;
    for i in 0..n {
        let arrive = (i as f64 * gap) as u64;
        let Reverse(at) = free.pop().expect("servers > 0");
        let done = arrive.max(at) + service[i % service.len()];
        free.push(Reverse(done));
        last = last.max(done);
        lat.push((done - arrive) as f64 / 1e6);
    }
    (lat, n as f64 / (last as f64 / 1e9))
}

pub fn run_throughput_bench(cfg: &BenchConfig) -> Result<ThroughputReport> {
    if cfg.rates.is_empty() || cfg.rates.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config("rates must be positive".into()));
    }
    if cfg.requests_per_rate == 0 || cfg.trace_len == 0 {
        return Err(Error::Config("requests_per_rate and trace_len must be positive".into()));
    }
    let (service, servers, measured_rps) = trace(cfg)?;
    let mut rates = cfg.rates.clone();
    rates.sort_by(f64::total_cmp);
    let points: Vec<RatePoint> = rates
        .iter()
        .map(|&r| {
            let (mut lat, achieved) = replay(&service, servers, r, cfg.requests_per_rate);
            lat.sort_by(f64::total_cmp);
            RatePoint {
                offered_rps: r,
                median_ms: quantile(&lat, 0.5),
                p99_ms: quantile(&lat, 0.99),
                achieved_rps: achieved,
            }
        })
        .collect();
    let knee_rps = points.iter().find(|p| p.median_ms > 1_000.0).map(|p| p.offered_rps);
    Ok(ThroughputReport {
        servers,
        measured_rps,
        mean_service_us: service.iter().sum::<u64>() as f64 / service.len() as f64 / 1e3,
        points,
        knee_rps,
    })
}
