use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backend::{MockEngine, RateLimiter};
use crate::enclave::{CoreSettings, ResponseOutcome};
use crate::error::Result;
use crate::eval::log::{ingest_log, LogFormat};
use crate::eval::metrics::accuracy_metrics;
use crate::eval::synth::{self, SynthConfig};
use crate::model::{normalize, Millis, QueryId};
use crate::peers::{PeerDescriptor, PeerId};
use crate::relay::{ManualClock, MemoryNetwork, NodeSettings, Prepared, RelayNode};
use crate::sensitivity::{builtin_dictionaries, SensitivityConfig};
use crate::wire::Envelope;

use super::{
    AccuracySummary, Conservation, KPolicy, LatencySummary, NodeLoad, SimConfig, SimReport, Topology, Workload,
};

const HOUR_MS: f64 = 3_600_000.0;

enum Event {
    Issue { node: usize, text: String },
    Deliver { relay: usize, env: Envelope },
    Reply { origin: usize, env: Envelope },
    Deadline { origin: usize, query: QueryId, attempt: u8 },
    Shuffle { node: usize },
}

struct InFlight {
    prepared: Prepared,
    issued_at: Millis,
    attempt: u8,
    used: BTreeSet<PeerId>,
}

/// Arrivals as (time, user, text), plus the duration and the per-user rate
/// when the workload is synthetic.
struct Arrivals {
    items: Vec<(Millis, usize, String)>,
    duration_ms: Millis,
    rate: Option<f64>,
    vocabulary: Vec<String>,
}

fn arrivals(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Arrivals> {
    let users = cfg.user_count();
    match &cfg.workload {
        Workload::Synthetic {
            queries_per_hour,
            duration_ms,
            synth,
        } => {
            let period = HOUR_MS / queries_per_hour;
            let per_user = (*duration_ms as f64 / period).ceil() as usize + 1;
            let log = synth::generate(&SynthConfig {
                users,
                queries_per_user: per_user,
                seed: synth.seed ^ cfg.seed,
                ..synth.clone()
            })?;
            let mut texts: Vec<Vec<String>> = vec![Vec::new(); users];
            for r in &log.log.records {
                let u: usize = r.user_id.0.trim_start_matches("user").parse().expect("generated id");
                texts[u].push(r.query.clone());
            }
            let mut items = Vec::new();
            for (u, qs) in texts.iter().enumerate() {
                let phase = rng.gen::<f64>() * period;
                let mut j = 0;
                loop {
                    let t = phase + j as f64 * period;
                    if t >= *duration_ms as f64 {
                        break;
                    }
                    items.push((t as Millis, u, qs[j % qs.len()].clone()));
                    j += 1;
                }
            }
            let mut vocabulary = log.vocabulary;
            vocabulary.extend(log.dictionaries.iter().flat_map(|d| d.terms().iter().cloned()));
            Ok(Arrivals {
                items,
                duration_ms: *duration_ms,
                rate: Some(*queries_per_hour),
                vocabulary,
            })
        }
        Workload::Log { path } => {
            let log = ingest_log(path, LogFormat::for_path(path))?;
            let t0 = log.records.iter().map(|r| r.timestamp).min().unwrap_or(0);
            let t1 = log.records.iter().map(|r| r.timestamp).max().unwrap_or(0);
            let ids: BTreeSet<&str> = log.records.iter().map(|r| r.user_id.0.as_str()).collect();
            let index: BTreeMap<&str, usize> = ids.into_iter().enumerate().map(|(i, u)| (u, i)).collect();
            let items = log
                .records
                .iter()
                .map(|r| (r.timestamp - t0, index[r.user_id.0.as_str()] % users, r.query.clone()))
                .collect();
            let vocabulary: BTreeSet<String> = log.records.iter().flat_map(|r| normalize(&r.query)).collect();
            Ok(Arrivals {
                items,
                duration_ms: (t1 - t0).max(1),
                rate: None,
                vocabulary: vocabulary.into_iter().collect(),
            })
        }
    }
}

/// Max over mean of per-node loads; 0 when there is no load.
pub fn load_ratio(loads: &[u64]) -> f64 {
    let total: u64 = loads.iter().sum();
    if loads.is_empty() || total == 0 {
        return 0.0;
    }
    let mean = total as f64 / loads.len() as f64;
    *loads.iter().max().expect("non-empty") as f64 / mean
}

struct Sim {
    cfg: SimConfig,
    clock: Arc<ManualClock>,
    engine: Arc<MockEngine>,
    net: MemoryNetwork,
    nodes: Vec<Arc<RelayNode>>,
    index: BTreeMap<PeerId, usize>,
    proxy: Option<PeerDescriptor>,
    queue: BTreeMap<(Millis, u64), Event>,
    seq: u64,
    rng: ChaCha8Rng,
    end_ms: Millis,
    inflight: BTreeMap<(usize, QueryId), InFlight>,
    latencies: Vec<f64>,
    accuracy: AccuracySummary,
    cons: Conservation,
    issued: u64,
    completed: u64,
    failed: u64,
    deadline_misses: u64,
    dropped_fakes: u64,
    late: u64,
}

impl Sim {
    fn schedule(&mut self, at: Millis, ev: Event) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn hop(&mut self) -> Millis {
        self.cfg.latency.sample(&mut self.rng)
    }

    fn issue(&mut self, now: Millis, node: usize, text: &str) {
        self.issued += 1;
        let n = &self.nodes[node];
        let prepared = match &self.proxy {
            Some(p) => n.prepare_query_through(text, p),
            None => n.prepare_query(text),
        };
        let prepared = match prepared {
            Ok(p) => p,
            Err(e) => {
                log::debug!("node {node} could not send {text:?}: {e}");
                self.failed += 1;
                return;
            }
        };
        self.cons.queries += 1;
        self.cons.k_requested += prepared.decision.k as u64;
        self.cons.shortfall += prepared.dispatch.shortfall as u64;
        let mut used = BTreeSet::new();
        for (peer, env) in &prepared.dispatch.forwards {
            used.insert(peer.peer_id.clone());
            let relay = self.index[&peer.peer_id];
            let at = now + self.hop();
            self.schedule(at, Event::Deliver { relay, env: env.clone() });
        }
        let query = prepared.dispatch.query_id;
        self.schedule(now + self.cfg.deadline_ms, Event::Deadline { origin: node, query, attempt: 0 });
        self.inflight.insert(
            (node, query),
            InFlight {
                prepared,
                issued_at: now,
                attempt: 0,
                used,
            },
        );
    }

    fn deliver(&mut self, now: Millis, relay: usize, env: Envelope) {
        let origin = self.index.get(&env.sender_id).copied();
        match (self.nodes[relay].handle_envelope(&env), origin) {
            (Ok(reply), Some(origin)) => {
                let back = self.hop() + self.cfg.engine_ms + self.hop() + self.hop();
                self.schedule(now + back, Event::Reply { origin, env: reply });
            }
            _ => self.cons.dropped_forwards += 1,
        }
    }

    fn reply(&mut self, now: Millis, origin: usize, env: Envelope) {
        match self.nodes[origin].accept_response(&env) {
            Ok(ResponseOutcome::Real { query_id, results }) => {
                let Some(f) = self.inflight.remove(&(origin, query_id)) else { return };
                self.latencies.push((now - f.issued_at) as f64);
                let direct = self.engine.corpus().search_text(&f.prepared.query.raw_text);
                let (c, k) = accuracy_metrics(&direct, &results);
                let a = &mut self.accuracy;
                a.checked += 1;
                a.perfect += (c == 1.0 && k == 1.0) as u64;
                a.min_correctness = a.min_correctness.min(c);
                a.min_completeness = a.min_completeness.min(k);
                self.nodes[origin].complete_query(&f.prepared, true);
                self.completed += 1;
            }
            Ok(ResponseOutcome::RealFailed { query_id, reason }) => {
                log::debug!("real query {query_id} of node {origin} failed: {reason}");
                self.retry_or_fail(now, origin, query_id);
            }
            Ok(ResponseOutcome::DroppedFake { .. }) => self.dropped_fakes += 1,
            Ok(ResponseOutcome::Unknown) => self.late += 1,
            Err(_) => {}
        }
    }

    fn retry_or_fail(&mut self, now: Millis, origin: usize, query: QueryId) {
        let Some(f) = self.inflight.get_mut(&(origin, query)) else { return };
        let node = &self.nodes[origin];
        let relay = if f.attempt > 0 {
            None
        } else if self.proxy.is_some() {
            // a single proxy offers no other way out
            None
        } else {
            node.fresh_relay(&f.used)
        };
        let Some(relay) = relay else {
            let f = self.inflight.remove(&(origin, query)).expect("present");
            node.complete_query(&f.prepared, false);
            self.failed += 1;
            return;
        };
        let Ok(env) = node.core().redirect_real(query, &relay) else { return };
        f.attempt += 1;
        f.used.insert(relay.peer_id.clone());
        let attempt = f.attempt;
        self.cons.retries += 1;
        let target = self.index[&relay.peer_id];
        let at = now + self.hop();
        self.schedule(at, Event::Deliver { relay: target, env });
        self.schedule(now + self.cfg.deadline_ms, Event::Deadline { origin, query, attempt });
    }

    fn deadline(&mut self, now: Millis, origin: usize, query: QueryId, attempt: u8) {
        match self.inflight.get(&(origin, query)) {
            Some(f) if f.attempt == attempt => {
                self.deadline_misses += 1;
                if let Some(real) = self.nodes[origin].core().real_relay(query) {
                    self.nodes[origin].mark_unresponsive(&real);
                }
                self.retry_or_fail(now, origin, query);
            }
            _ => {}
        }
    }

    fn shuffle(&mut self, now: Millis, node: usize) {
        let n = &self.nodes[node];
        if let Err(e) = n.shuffle_once(&self.net) {
            log::debug!("shuffle of node {node} failed: {e}");
        }
        n.ensure_attested(&self.net);
        let next = now + self.cfg.shuffle_period_ms;
        if next < self.end_ms {
            self.schedule(next, Event::Shuffle { node });
        }
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let work = arrivals(cfg, &mut rng)?;
    let corpus = synth::corpus(&work.vocabulary, cfg.corpus_docs, rng.gen());
    let engine = Arc::new(MockEngine::new(corpus).with_rate_limit(RateLimiter::hourly(cfg.block_threshold)));
    let clock = Arc::new(ManualClock::new(0));
    let net = MemoryNetwork::new();

    let mut seeds: Vec<&str> = work.items.iter().map(|(_, _, t)| t.as_str()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds.shuffle(&mut rng);
    seeds.truncate(cfg.table_seed);

    let ids: Vec<String> = (0..cfg.node_count).map(|i| format!("node-{i:03}")).collect();
    let settings = NodeSettings {
        sensitivity: SensitivityConfig {
            k_max: cfg.k_max,
            ..SensitivityConfig::default()
        },
        view_size: cfg.view_size,
        deadline_ms: cfg.deadline_ms,
        core: CoreSettings::default(),
        fixed_k: match cfg.k_policy {
            KPolicy::Adaptive => None,
            KPolicy::Fixed { k } => Some(k),
        },
    };
    let dicts = builtin_dictionaries();
    let mut nodes = Vec::with_capacity(cfg.node_count);
    let mut index = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let node = Arc::new(RelayNode::new(
            PeerDescriptor::at(id, 0),
            settings.clone(),
            engine.clone(),
            clock.clone(),
            rng.gen(),
        ));
        node.set_dictionaries(dicts.clone());
        node.core().seed_table(seeds.iter().copied());
        net.add(node.clone());
        index.insert(node.id().clone(), i);
        nodes.push(node);
    }

    let through_one = cfg.topology == Topology::SingleProxy || cfg.node_count == 1;
    let proxy = through_one.then(|| PeerDescriptor::at(&ids[0], 0));
    if let Some(p) = &proxy {
        for n in &nodes {
            n.attest_peer(p, &net)?;
            if n.id() != &p.peer_id {
                n.add_peer(p.clone());
                n.ensure_attested(&net);
            }
        }
    } else {
        for n in &nodes {
            n.bootstrap_view(&ids)?;
        }
        for n in &nodes {
            n.ensure_attested(&net);
        }
    }

    let mut sim = Sim {
        cfg: cfg.clone(),
        clock,
        engine,
        net,
        nodes,
        index,
        proxy,
        queue: BTreeMap::new(),
        seq: 0,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
        end_ms: work.duration_ms,
        inflight: BTreeMap::new(),
        latencies: Vec::new(),
        accuracy: AccuracySummary {
            min_correctness: 1.0,
            min_completeness: 1.0,
            ..Default::default()
        },
        cons: Conservation::default(),
        issued: 0,
        completed: 0,
        failed: 0,
        deadline_misses: 0,
        dropped_fakes: 0,
        late: 0,
    };
    for (t, user, text) in &work.items {
        sim.schedule(*t, Event::Issue { node: user % cfg.node_count, text: text.clone() });
    }
    if !through_one {
        for node in 0..cfg.node_count {
            let phase = sim.rng.gen_range(0..cfg.shuffle_period_ms);
            sim.schedule(phase, Event::Shuffle { node });
        }
    }

    while let Some(((now, _), ev)) = sim.queue.pop_first() {
        sim.clock.set(now);
        match ev {
            Event::Issue { node, text } => sim.issue(now, node, &text),
            Event::Deliver { relay, env } => sim.deliver(now, relay, env),
            Event::Reply { origin, env } => sim.reply(now, origin, env),
            Event::Deadline { origin, query, attempt } => sim.deadline(now, origin, query, attempt),
            Event::Shuffle { node } => sim.shuffle(now, node),
        }
    }

    let hours = work.duration_ms as f64 / HOUR_MS;
    let calls = sim.engine.calls_by_source();
    let blocked: BTreeSet<String> = sim.engine.blocked_sources().into_iter().collect();
    let node_loads: Vec<NodeLoad> = sim
        .nodes
        .iter()
        .map(|n| {
            let requests = calls.get(n.id().as_str()).copied().unwrap_or(0);
            NodeLoad {
                node: n.id().to_string(),
                requests,
                per_hour: requests as f64 / hours,
                blocked: blocked.contains(n.id().as_str()),
            }
        })
        .collect();
    let loads: Vec<u64> = node_loads.iter().map(|l| l.requests).collect();
    let mean_rate = loads.iter().sum::<u64>() as f64 / loads.len() as f64 / hours;
    let max_rate = node_loads.iter().map(|l| l.per_hour).fold(0.0, f64::max);
    let mean_k = if sim.cons.queries == 0 {
        0.0
    } else {
        sim.cons.k_requested as f64 / sim.cons.queries as f64
    };
    let users = cfg.user_count();
    sim.cons.backend_calls = sim.engine.total_calls();
    Ok(SimReport {
        node_count: cfg.node_count,
        users,
        duration_ms: work.duration_ms,
        queries_issued: sim.issued,
        completed: sim.completed,
        failed: sim.failed,
        deadline_misses: sim.deadline_misses,
        mean_k,
        latency: LatencySummary::from_samples(&sim.latencies),
        latencies_ms: sim.latencies,
        load_ratio: load_ratio(&loads),
        node_loads,
        mean_rate_per_hour: mean_rate,
        max_rate_per_hour: max_rate,
        closed_form_rate_per_hour: work
            .rate
            .map(|r| users as f64 * r * (mean_k + 1.0) / cfg.node_count as f64),
        blocked_nodes: blocked.len(),
        accuracy: sim.accuracy,
        conservation: sim.cons,
        dropped_fake_responses: sim.dropped_fakes,
        late_responses: sim.late,
    })
}
