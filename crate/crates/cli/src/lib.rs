//! The `decoy` command line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use decoy_core::config::NodeConfig;
use decoy_core::eval::report::cdf_csv;
use decoy_core::eval::synth::{generate, SynthConfig};
use decoy_core::eval::{
    categorizer_metrics, ingest_log, k_cdf, run_attack, split_train_test, AdversaryView, AttackConfig,
    EvaluationReport, LogFormat, Mechanism, QueryLog,
};
use decoy_core::sensitivity::{builtin_dictionaries, load_dictionary_dir};
use decoy_core::sim::{run_simulation, run_throughput_bench, BenchConfig, SimConfig};
use decoy_core::{semantic_assess, QueryRecord, SensitiveTopicDictionary, SensitivityConfig};

#[derive(Debug, Parser)]
#[command(name = "decoy", version, about = "Private web search through peer relays and adaptive fake queries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the discrete-event network simulation.
    Simulate(SimulateArgs),
    /// Measure relay throughput and latency against offered load.
    Bench(BenchArgs),
    /// Replay a query log through a mechanism and attack it.
    Evaluate(EvaluateArgs),
    /// Run a node: peer server, local HTTP API and background shuffles.
    Node(NodeArgs),
    /// Flag the sensitive queries of a log with topic dictionaries.
    Categorize(CategorizeArgs),
    /// Write a synthetic query log with its ground truth and dictionaries.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON). Defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Offered rates in requests per second.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000.0, 5_000.0, 10_000.0, 20_000.0, 40_000.0, 80_000.0])]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub requests: usize,
    /// Forwards timed to build the service-time trace.
    #[arg(long, default_value_t = 20_000)]
    pub trace: usize,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LogArgs {
    /// Query log: AOL TSV, or `user_id,query,iso_timestamp` CSV.
    #[arg(long)]
    pub log: PathBuf,
    /// `aol` or `csv`; guessed from the extension when absent.
    #[arg(long)]
    pub format: Option<String>,
    /// Dictionary directory, one `<topic>.txt` per topic; built-in lists
    /// when absent.
    #[arg(long)]
    pub dict_dir: Option<PathBuf>,
    /// Ground truth: positions of the sensitive queries in the log, one per
    /// line, counting parsed rows from 0.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: LogArgs,
    /// `none`, `cyclosa` (alias `adaptive`) or `fixed_k`.
    #[arg(long, default_value = "cyclosa")]
    pub mechanism: String,
    #[arg(long, default_value_t = 7)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Enabled topics, comma separated; all dictionaries when absent.
    #[arg(long, value_delimiter = ',')]
    pub topics: Option<Vec<String>>,
    /// `grouped` or `independent`.
    #[arg(long, default_value = "grouped")]
    pub adversary: String,
    /// Let the adversary learn from the queries it attributes.
    #[arg(long)]
    pub online_adversary: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Distribution of k as `k,fraction,cumulative`.
    #[arg(long)]
    pub cdf: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NodeArgs {
    /// Node config, JSON or `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct CategorizeArgs {
    #[command(flatten)]
    pub input: LogArgs,
    /// Per-query CSV: `index,user,query,sensitive,topics`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Log destination; `.csv` writes CSV, anything else AOL TSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Where to write the dictionaries used for sensitive terms.
    #[arg(long)]
    pub dict_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub users: usize,
    #[arg(long, default_value_t = 60)]
    pub queries_per_user: usize,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.15)]
    pub sensitive_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Bench(a) => bench(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Node(a) => node(&a),
        Command::Categorize(a) => categorize(&a),
        Command::Generate(a) => generate_log(&a),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write(p, body),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg: SimConfig = match &a.config {
        Some(p) => {
            let body = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    let r = run_simulation(&cfg)?;
    eprintln!(
        "{} nodes, {} users: {} queries, {} completed, {} failed; median {:.0} ms, p99 {:.0} ms",
        r.node_count, r.users, r.queries_issued, r.completed, r.failed, r.latency.median_ms, r.latency.p99_ms
    );
    eprintln!(
        "load: mean {:.1} req/h per node, max {:.1}, max/mean {:.3}, {} blocked",
        r.mean_rate_per_hour, r.max_rate_per_hour, r.load_ratio, r.blocked_nodes
    );
    emit(a.out.as_deref(), &r.to_json())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let r = run_throughput_bench(&BenchConfig {
        rates: a.rates.clone(),
        requests_per_rate: a.requests,
        trace_len: a.trace,
        threads: a.threads,
    })?;
    println!(
        "{} worker(s), measured {:.0} forwards/s, mean service {:.1} us",
        r.servers, r.measured_rps, r.mean_service_us
    );
    println!("{:>12} {:>12} {:>12} {:>12}", "offered/s", "median ms", "p99 ms", "achieved/s");
    for p in &r.points {
        println!(
            "{:>12.0} {:>12.3} {:>12.3} {:>12.0}",
            p.offered_rps, p.median_ms, p.p99_ms, p.achieved_rps
        );
    }
    if let Some(k) = r.knee_rps {
        println!("median exceeds 1 s from {k:.0} req/s");
    }
    if let Some(p) = &a.out {
        write(p, &serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn load_input(a: &LogArgs) -> Result<(QueryLog, Vec<SensitiveTopicDictionary>, Option<HashSet<u64>>)> {
    let format = match &a.format {
        Some(f) => f.parse()?,
        None => LogFormat::for_path(&a.log),
    };
    let log = ingest_log(&a.log, format)?;
    if log.skipped > 0 {
        eprintln!("skipped {} malformed rows", log.skipped);
    }
    let dicts = match &a.dict_dir {
        Some(d) => load_dictionary_dir(d)?,
        None => builtin_dictionaries(),
    };
    let truth = match &a.truth {
        Some(p) => {
            let body = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let ids = body
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse::<u64>().with_context(|| format!("bad truth line {l:?}")))
                .collect::<Result<HashSet<u64>>>()?;
            Some(ids)
        }
        None => None,
    };
    Ok((log, dicts, truth))
}

fn adversary(s: &str) -> Result<AdversaryView> {
    match s {
        "grouped" => Ok(AdversaryView::Grouped),
        "independent" => Ok(AdversaryView::Independent),
        other => bail!("adversary must be grouped or independent, got {other}"),
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mechanism: Mechanism = a.mechanism.parse()?;
    let (log, dicts, truth) = load_input(&a.input)?;
    let split = split_train_test(&log);
    if split.dropped_users > 0 {
        eprintln!("{} users with fewer than 3 queries left out", split.dropped_users);
    }
    let enabled: BTreeSet<String> = match &a.topics {
        Some(t) => t.iter().cloned().collect(),
        None => dicts.iter().map(|d| d.topic.clone()).collect(),
    };
    let cfg = AttackConfig {
        sensitivity: SensitivityConfig {
            k_max: a.k_max,
            smoothing_alpha: a.alpha,
            enabled_topics: enabled,
            profile_window: None,
        },
        adversary: adversary(&a.adversary)?,
        online: a.online_adversary,
        seed: a.seed,
    };
    let out = run_attack(mechanism, &split, &dicts, &cfg)?;
    let mut report = EvaluationReport::from_outcome(&out);
    if let Some(truth) = &truth {
        let detected: HashSet<u64> = out.verdicts.iter().filter(|v| v.semantic_sensitive).map(|v| v.query_id.0).collect();
        let tested: HashSet<u64> = out.verdicts.iter().map(|v| v.query_id.0).collect();
        let truth: HashSet<u64> = truth.intersection(&tested).copied().collect();
        let (p, r) = categorizer_metrics(&detected, &truth);
        report.precision = Some(p);
        report.recall = Some(r);
    }
    eprintln!(
        "{} on {} test queries of {} users: re-identification {:.2}%, mean k {:.2}",
        report.mechanism,
        report.queries,
        report.per_user.len(),
        report.reidentification_rate * 100.0,
        report.mean_k
    );
    if let Some(p) = &a.csv {
        write(p, &report.to_csv())?;
    }
    if let Some(p) = &a.cdf {
        write(p, &cdf_csv(&k_cdf(&out.ks(), out.k_max)))?;
    }
    emit(a.out.as_deref(), &report.to_json())
}

pub fn node(a: &NodeArgs) -> Result<()> {
    let cfg = NodeConfig::load(&a.config)?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let runtime = decoy_node::NodeRuntime::bind(&cfg).await?;
        let handle = runtime.start();
        eprintln!(
            "node {} serving peers on {} and the API on http://{}",
            handle.node.id(),
            handle.peer_addr,
            handle.api_addr
        );
        handle.wait_for_ctrl_c().await?;
        Ok(())
    })
}

pub fn categorize(a: &CategorizeArgs) -> Result<()> {
    let (log, dicts, truth) = load_input(&a.input)?;
    let mut per_topic: BTreeMap<String, usize> = dicts.iter().map(|d| (d.topic.clone(), 0)).collect();
    let mut detected = HashSet::new();
    let mut rows = String::from("index,user,query,sensitive,topics\n");
    for (i, r) in log.records.iter().enumerate() {
        let q = QueryRecord::real(i as u64, r.query.clone(), r.timestamp);
        let (sensitive, topics) = semantic_assess(&q, &dicts);
        if sensitive {
            detected.insert(i as u64);
        }
        for t in &topics {
            *per_topic.entry(t.clone()).or_default() += 1;
        }
        let topics: Vec<&str> = topics.iter().map(String::as_str).collect();
        rows.push_str(&format!(
            "{i},{},\"{}\",{sensitive},{}\n",
            r.user_id.0,
            r.query.replace('"', "\"\""),
            topics.join(";")
        ));
    }
    println!(
        "{} of {} queries sensitive ({:.2}%)",
        detected.len(),
        log.len(),
        100.0 * detected.len() as f64 / log.len() as f64
    );
    for (t, n) in &per_topic {
        println!("  {t}: {n}");
    }
    if let Some(truth) = &truth {
        let (p, r) = categorizer_metrics(&detected, truth);
        println!("precision {p:.3}, recall {r:.3}");
    }
    if let Some(p) = &a.out {
        write(p, &rows)?;
    }
    Ok(())
}

pub fn generate_log(a: &GenerateArgs) -> Result<()> {
    let s = generate(&SynthConfig {
        users: a.users,
        queries_per_user: a.queries_per_user,
        overlap: a.overlap,
        sensitive_fraction: a.sensitive_fraction,
        seed: a.seed,
        ..SynthConfig::default()
    })?;
    let body = match a.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => s.log.to_simple_csv(),
        _ => s.log.to_aol_tsv(),
    };
    write(&a.out, &body)?;
    if let Some(p) = &a.truth {
        let lines: String = s.sensitive.iter().map(|i| format!("{i}\n")).collect();
        write(p, &lines)?;
    }
    if let Some(dir) = &a.dict_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for d in &s.dictionaries {
            let terms: String = d.terms().iter().map(|t| format!("{t}\n")).collect();
            write(&dir.join(format!("{}.txt", d.topic)), &terms)?;
        }
    }
    eprintln!(
        "{} queries from {} users, {} sensitive",
        s.log.len(),
        a.users,
        s.sensitive.len()
    );
    Ok(())
}
