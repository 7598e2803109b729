//! Assembles a node from its config and runs it.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use decoy_core::backend::{MockCorpus, MockEngine, RateLimiter, SearchBackend};
use decoy_core::config::{BackendKind, NodeConfig};
use decoy_core::eval::synth::{self, SynthConfig};
use decoy_core::peers::{load_registry, PeerDescriptor};
use decoy_core::relay::SystemClock;
use decoy_core::sensitivity::{builtin_dictionaries, load_dictionary_dir};
use decoy_core::{Error, RelayNode, Result, Transport};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::{router, ApiState};
use crate::server::serve_peers;
use crate::transport::TcpTransport;

fn backend(cfg: &NodeConfig, seed: u64) -> Result<Arc<dyn SearchBackend>> {
    match cfg.backend {
        BackendKind::Mock => {
            let corpus = match &cfg.corpus_path {
                Some(p) => MockCorpus::load(p)?,
                None => {
                    // placeholder documents so a bare node still answers
                    let vocab = synth::generate(&SynthConfig::default())?.vocabulary;
                    synth::corpus(&vocab, 2_000, seed)
                }
            };
            Ok(Arc::new(
                MockEngine::new(corpus).with_rate_limit(RateLimiter::hourly(cfg.block_threshold)),
            ))
        }
        #[cfg(feature = "http-backend")]
        BackendKind::Http => {
            let template = cfg.http_template.clone().unwrap_or_default();
            Ok(Arc::new(decoy_core::backend::HttpBackend::new(template, cfg.http_max_per_hour)?))
        }
        #[cfg(not(feature = "http-backend"))]
        BackendKind::Http => Err(Error::Config("built without the http-backend feature".into())),
    }
}

async fn bind(addr: &str) -> Result<TcpListener> {
    TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))
}

/// A node with its sockets bound but nothing served yet.
pub struct NodeRuntime {
    node: Arc<RelayNode>,
    peers: TcpListener,
    api: TcpListener,
    shuffle_period: Duration,
}

impl NodeRuntime {
    /// Binds both listeners, builds the node and, when a registry is
    /// configured, fills the view from it. The node id defaults to the bound
    /// peer address so that `listen_addr` may use port 0.
    pub async fn bind(cfg: &NodeConfig) -> Result<Self> {
        cfg.validate()?;
        let peers = bind(&cfg.listen_addr).await?;
        let api = bind(&cfg.api_addr).await?;
        let peer_addr = peers.local_addr().map_err(|e| Error::Config(e.to_string()))?.to_string();
        let id = cfg.node_id.clone().unwrap_or_else(|| peer_addr.clone());
        let seed = cfg.seed.unwrap_or_else(rand::random);

        let mut me = PeerDescriptor::at(&peer_addr, 0);
        me.peer_id = id.as_str().into();
        let node = Arc::new(RelayNode::new(
            me,
            cfg.node_settings(),
            backend(cfg, seed)?,
            Arc::new(SystemClock),
            seed,
        ));
        node.set_dictionaries(match &cfg.dict_dir {
            Some(dir) => load_dictionary_dir(dir)?,
            None => builtin_dictionaries(),
        });
        if let Some(path) = &cfg.seed_path {
            let stats = node.core().seed_table_from(path)?;
            log::info!("fake table seeded with {} queries ({} skipped)", stats.recorded, stats.skipped);
        }
        if let Some(path) = &cfg.registry_path {
            let registry: Vec<String> = load_registry(path)?
                .into_iter()
                .filter(|a| *a != peer_addr && *a != id)
                .collect();
            if !registry.is_empty() {
                node.bootstrap_view(&registry)?;
            }
        }
        Ok(NodeRuntime {
            node,
            peers,
            api,
            shuffle_period: Duration::from_millis(cfg.shuffle_period_ms),
        })
    }

    pub fn node(&self) -> &Arc<RelayNode> {
        &self.node
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peers.local_addr().expect("bound listener")
    }

    pub fn api_addr(&self) -> SocketAddr {
        self.api.local_addr().expect("bound listener")
    }

    /// Starts serving peers and the API, and the periodic upkeep: attest
    /// unknown view members, then shuffle with one of them.
    pub fn start(self) -> NodeHandle {
        let transport: Arc<dyn Transport> = Arc::new(TcpTransport);
        let peer_addr = self.peer_addr();
        let api_addr = self.api_addr();
        let node = self.node;
        let mut tasks = vec![tokio::spawn(serve_peers(self.peers, node.clone()))];

        let app = router(ApiState {
            node: node.clone(),
            transport: transport.clone(),
        });
        let api = self.api;
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(api, app).await {
                log::error!("api server stopped: {e}");
            }
        }));

        let period = self.shuffle_period;
        let upkeep_node = node.clone();
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                let node = upkeep_node.clone();
                let transport = transport.clone();
                let _ = tokio::task::spawn_blocking(move || {
                    node.ensure_attested(transport.as_ref());
                    if let Err(e) = node.shuffle_once(transport.as_ref()) {
                        log::debug!("shuffle skipped: {e}");
                    }
                })
                .await;
            }
        }));

        NodeHandle {
            node,
            peer_addr,
            api_addr,
            tasks,
        }
    }
}

/// A running node. Dropping the handle stops it.
pub struct NodeHandle {
    pub node: Arc<RelayNode>,
    pub peer_addr: SocketAddr,
    pub api_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }

    /// Runs until Ctrl-C.
    pub async fn wait_for_ctrl_c(mut self) -> Result<()> {
        tokio::signal::ctrl_c()
            .await
            .map_err(|e| Error::Config(format!("signal handler: {e}")))?;
        self.shutdown();
        Ok(())
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
