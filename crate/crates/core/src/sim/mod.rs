//! Multi-node simulation and the relay throughput bench.
//!
//! [`run_simulation`] instantiates real [`RelayNode`](crate::RelayNode)s
//! sharing one mock engine and drives them from a discrete-event loop with a
//! single logical clock. Query traffic pays a per-hop latency; attestation
//! and view shuffles are exchanged instantly between events since they only
//! matter for who knows whom.

mod des;
mod throughput;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::DEFAULT_BLOCK_THRESHOLD;
use crate::error::{Error, Result};
use crate::eval::synth::SynthConfig;
use crate::model::Millis;

pub use des::{load_ratio, run_simulation};
pub use throughput::{run_throughput_bench, BenchConfig, RatePoint, ThroughputReport};

/// Latency of one network hop: uniform in `base ± jitter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: Millis,
    pub jitter_ms: Millis,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            base_ms: 20,
            jitter_ms: 10,
        }
    }
}

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel {
        base_ms: 0,
        jitter_ms: 0,
    };

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Millis {
        if self.jitter_ms == 0 {
            return self.base_ms;
        }
        let lo = self.base_ms.saturating_sub(self.jitter_ms);
        rng.gen_range(lo..=self.base_ms + self.jitter_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum KPolicy {
    #[default]
    Adaptive,
    Fixed {
        k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Every query and fake leaves through a distinct peer of the view.
    #[default]
    Spread,
    /// Every envelope goes through node 0, like a centralized proxy.
    SingleProxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum Workload {
    /// Each user issues queries of a synthetic log at a constant rate,
    /// starting at a random phase.
    Synthetic {
        queries_per_hour: f64,
        duration_ms: Millis,
        #[serde(default)]
        synth: SynthConfig,
    },
    /// Replays a query log with its own timestamps, users assigned to nodes
    /// round robin.
    Log { path: PathBuf },
}

impl Default for Workload {
    fn default() -> Self {
        Workload::Synthetic {
            queries_per_hour: 31.23,
            duration_ms: 3_600_000,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub node_count: usize,
    /// One user per node when absent. Users are placed round robin.
    pub users: Option<usize>,
    pub latency: LatencyModel,
    /// Engine processing time per request.
    pub engine_ms: Millis,
    pub workload: Workload,
    pub k_policy: KPolicy,
    pub k_max: usize,
    pub topology: Topology,
    pub block_threshold: usize,
    pub view_size: usize,
    pub shuffle_period_ms: Millis,
    pub deadline_ms: Millis,
    /// Queries preloaded in every fake table.
    pub table_seed: usize,
    pub corpus_docs: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            node_count: 100,
            users: None,
            latency: LatencyModel::default(),
            engine_ms: 10,
            workload: Workload::default(),
            k_policy: KPolicy::Adaptive,
            k_max: crate::sensitivity::DEFAULT_K_MAX,
            topology: Topology::Spread,
            block_threshold: DEFAULT_BLOCK_THRESHOLD,
            view_size: crate::peers::DEFAULT_VIEW_SIZE,
            shuffle_period_ms: crate::peers::DEFAULT_SHUFFLE_PERIOD_MS,
            deadline_ms: crate::relay::DEFAULT_DEADLINE_MS,
            table_seed: 200,
            corpus_docs: 2_000,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::Config("node_count must be positive".into()));
        }
        if self.users == Some(0) {
            return Err(Error::Config("users must be positive".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if let KPolicy::Fixed { k } = self.k_policy {
            if k > self.k_max {
                return Err(Error::Config(format!("fixed k {k} exceeds k_max {}", self.k_max)));
            }
        }
        if self.view_size == 0 || self.shuffle_period_ms == 0 || self.deadline_ms == 0 {
            return Err(Error::Config("view_size, shuffle_period_ms and deadline_ms must be positive".into()));
        }
        if self.corpus_docs == 0 {
            return Err(Error::Config("corpus_docs must be positive".into()));
        }
        if let Workload::Synthetic {
            queries_per_hour,
            duration_ms,
            synth,
        } = &self.workload
        {
            if !(*queries_per_hour > 0.0) || *duration_ms == 0 {
                return Err(Error::Config("workload rate and duration must be positive".into()));
            }
            synth.validate()?;
        }
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.users.unwrap_or(self.node_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub median_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        LatencySummary {
            median_ms: quantile(&s, 0.5),
            p99_ms: quantile(&s, 0.99),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            max_ms: s[s.len() - 1],
        }
    }
}

/// Nearest-rank quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLoad {
    pub node: String,
    /// Engine requests sent under this node's identity, refused ones included.
    pub requests: u64,
    pub per_hour: f64,
    pub blocked: bool,
}

/// Bookkeeping of engine calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conservation {
    pub queries: u64,
    pub k_requested: u64,
    pub shortfall: u64,
    pub retries: u64,
    /// Forwards a relay refused to serve.
    pub dropped_forwards: u64,
    pub backend_calls: u64,
}

impl Conservation {
    /// `queries + k_requested - shortfall + retries - dropped_forwards`.
    pub fn expected_backend_calls(&self) -> u64 {
        self.queries + self.k_requested - self.shortfall + self.retries - self.dropped_forwards
    }

    pub fn balanced(&self) -> bool {
        self.expected_backend_calls() == self.backend_calls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub checked: u64,
    /// Queries with correctness = completeness = 1.
    pub perfect: u64,
    pub min_correctness: f64,
    pub min_completeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub node_count: usize,
    pub users: usize,
    pub duration_ms: Millis,
    pub queries_issued: u64,
    pub completed: u64,
    pub failed: u64,
    pub deadline_misses: u64,
    pub mean_k: f64,
    pub latency: LatencySummary,
    pub latencies_ms: Vec<f64>,
    pub node_loads: Vec<NodeLoad>,
    pub mean_rate_per_hour: f64,
    pub max_rate_per_hour: f64,
    /// Max over mean per-node load; 0 without traffic.
    pub load_ratio: f64,
    /// `users * rate * (k + 1) / nodes` with the mean k actually requested;
    /// only for synthetic workloads.
    pub closed_form_rate_per_hour: Option<f64>,
    pub blocked_nodes: usize,
    pub accuracy: AccuracySummary,
    pub conservation: Conservation,
    pub dropped_fake_responses: u64,
    /// Responses arriving once their query was already answered.
    pub late_responses: u64,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
