//! Node configuration file.
//!
//! Either a JSON object or `key = value` lines (`#` comments). Unknown keys
//! are rejected so that typos do not silently fall back to defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enclave::CoreSettings;
use crate::error::{Error, Result};
use crate::model::Millis;
use crate::relay::NodeSettings;
use crate::sensitivity::{SensitivityConfig, DEFAULT_TOPICS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(Error::Config(format!("backend must be mock or http, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    /// Defaults to `listen_addr`.
    pub node_id: Option<String>,
    pub k_max: usize,
    pub alpha: f64,
    pub profile_window: Option<usize>,
    pub enabled_topics: BTreeSet<String>,
    pub view_size: usize,
    pub shuffle_period_ms: Millis,
    pub table_capacity: usize,
    pub bucket_size: usize,
    pub deadline_ms: Millis,
    pub registry_path: Option<PathBuf>,
    pub dict_dir: Option<PathBuf>,
    pub seed_path: Option<PathBuf>,
    pub listen_addr: String,
    pub api_addr: String,
    pub backend: BackendKind,
    /// JSON lines corpus for the mock backend.
    pub corpus_path: Option<PathBuf>,
    pub block_threshold: usize,
    /// URL template with a `%QUERY%` placeholder for the http backend.
    pub http_template: Option<String>,
    pub http_max_per_hour: usize,
    /// Extra build digests accepted during attestation.
    pub allow_list: BTreeSet<String>,
    pub seed: Option<u64>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        let s = SensitivityConfig::default();
        let core = CoreSettings::default();
        NodeConfig {
            node_id: None,
            k_max: s.k_max,
            alpha: s.smoothing_alpha,
            profile_window: None,
            enabled_topics: DEFAULT_TOPICS.iter().map(|t| t.to_string()).collect(),
            view_size: crate::peers::DEFAULT_VIEW_SIZE,
            shuffle_period_ms: crate::peers::DEFAULT_SHUFFLE_PERIOD_MS,
            table_capacity: core.table_capacity,
            bucket_size: core.bucket_size,
            deadline_ms: crate::relay::DEFAULT_DEADLINE_MS,
            registry_path: None,
            dict_dir: None,
            seed_path: None,
            listen_addr: "127.0.0.1:7400".into(),
            api_addr: "127.0.0.1:7480".into(),
            backend: BackendKind::Mock,
            corpus_path: None,
            block_threshold: crate::backend::DEFAULT_BLOCK_THRESHOLD,
            http_template: None,
            http_max_per_hour: 60,
            allow_list: BTreeSet::new(),
            seed: None,
        }
    }
}

fn split_list(v: &str) -> impl Iterator<Item = String> + '_ {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl NodeConfig {
    pub fn parse(body: &str) -> Result<Self> {
        let cfg = if body.trim_start().starts_with('{') {
            serde_json::from_str(body).map_err(|e| Error::Config(format!("json config: {e}")))?
        } else {
            Self::parse_key_values(body)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&body)
    }

    fn parse_key_values(body: &str) -> Result<Self> {
        let mut c = NodeConfig::default();
        for (n, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "node_id" => c.node_id = Some(v.to_owned()),
                "k_max" => c.k_max = num(key, v)?,
                "alpha" => c.alpha = num(key, v)?,
                "profile_window" => c.profile_window = Some(num(key, v)?),
                "enabled_topics" => c.enabled_topics = split_list(v).collect(),
                "view_size" => c.view_size = num(key, v)?,
                "shuffle_period_ms" => c.shuffle_period_ms = num(key, v)?,
                "table_capacity" => c.table_capacity = num(key, v)?,
                "bucket_size" => c.bucket_size = num(key, v)?,
                "deadline_ms" => c.deadline_ms = num(key, v)?,
                "registry_path" => c.registry_path = Some(v.into()),
                "dict_dir" => c.dict_dir = Some(v.into()),
                "seed_path" => c.seed_path = Some(v.into()),
                "listen_addr" => c.listen_addr = v.to_owned(),
                "api_addr" => c.api_addr = v.to_owned(),
                "backend" => c.backend = v.parse()?,
                "corpus_path" => c.corpus_path = Some(v.into()),
                "block_threshold" => c.block_threshold = num(key, v)?,
                "http_template" => c.http_template = Some(v.to_owned()),
                "http_max_per_hour" => c.http_max_per_hour = num(key, v)?,
                "allow_list" => c.allow_list = split_list(v).collect(),
                "seed" => c.seed = Some(num(key, v)?),
                other => return Err(Error::Config(format!("line {}: unknown key {other}", n + 1))),
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensitivity().validate()?;
        if self.view_size == 0 {
            return Err(Error::Config("view_size must be positive".into()));
        }
        if self.table_capacity == 0 {
            return Err(Error::Config("table_capacity must be positive".into()));
        }
        if self.bucket_size < 16 {
            return Err(Error::Config("bucket_size must be at least 16".into()));
        }
        if self.deadline_ms == 0 {
            return Err(Error::Config("deadline_ms must be positive".into()));
        }
        if self.backend == BackendKind::Http && self.http_template.is_none() {
            return Err(Error::Config("http backend needs http_template".into()));
        }
        Ok(())
    }

    pub fn node_id(&self) -> &str {
        self.node_id.as_deref().unwrap_or(&self.listen_addr)
    }

    pub fn sensitivity(&self) -> SensitivityConfig {
        SensitivityConfig {
            k_max: self.k_max,
            smoothing_alpha: self.alpha,
            enabled_topics: self.enabled_topics.clone(),
            profile_window: self.profile_window,
        }
    }

    pub fn node_settings(&self) -> NodeSettings {
        let mut core = CoreSettings {
            table_capacity: self.table_capacity,
            bucket_size: self.bucket_size,
            ..CoreSettings::default()
        };
        core.allow_list.extend(self.allow_list.iter().cloned());
        NodeSettings {
            sensitivity: self.sensitivity(),
            view_size: self.view_size,
            deadline_ms: self.deadline_ms,
            core,
            fixed_k: None,
        }
    }
}
