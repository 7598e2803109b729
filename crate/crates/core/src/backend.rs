//! Search engines a relay can forward to: a deterministic mock engine guarded
//! by a bot-detection rate limiter, a stub used for throughput runs, and an
//! optional live HTTP engine behind the `http-backend` feature.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Millis, SearchResult, TermVector};
use crate::peers::PeerId;

pub const RESULT_LIMIT: usize = 10;
pub const RATE_WINDOW_MS: Millis = 3_600_000;
pub const DEFAULT_BLOCK_THRESHOLD: usize = 1_000;

/// Anything a relay can hand a query to. `source` is the identity the engine
/// sees (the relay's address).
pub trait SearchBackend: Send + Sync {
    fn search(&self, source: &PeerId, query: &str, now: Millis) -> Result<Vec<SearchResult>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub url: String,
    pub title: String,
    pub terms: TermVector,
}

#[derive(Debug, Deserialize)]
struct DocumentLine {
    url: String,
    title: String,
    text: String,
}

#[derive(Debug, Clone, Default)]
pub struct MockCorpus {
    documents: Vec<Document>,
    index: HashMap<String, Vec<usize>>,
}

impl MockCorpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut urls = HashSet::new();
        for d in &documents {
            if !urls.insert(d.url.as_str()) {
                return Err(Error::Format(format!("duplicate url {}", d.url)));
            }
        }
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, d) in documents.iter().enumerate() {
            for t in d.terms.iter() {
                index.entry(t.to_owned()).or_default().push(i);
            }
        }
        Ok(MockCorpus { documents, index })
    }

    /// Corpus file: JSON lines `{url, title, text}`; blank lines skipped.
    pub fn parse_jsonl(body: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (n, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: DocumentLine = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
            docs.push(Document {
                terms: TermVector::from_text(&format!("{} {}", d.title, d.text)),
                url: d.url,
                title: d.title,
            });
        }
        Self::new(docs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&body)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    /// Top results by `|query ∩ doc| / |query|`, ties broken by url.
    pub fn search(&self, query: &TermVector) -> Vec<SearchResult> {
        if query.is_empty() {
            return Vec::new();
        }
        let mut hits: HashMap<usize, usize> = HashMap::new();
        for t in query.iter() {
            if let Some(docs) = self.index.get(t) {
                for &d in docs {
                    *hits.entry(d).or_default() += 1;
                }
            }
        }
        let mut scored: Vec<(usize, &str, usize)> = hits
            .into_iter()
            .map(|(d, common)| (common, self.documents[d].url.as_str(), d))
            .collect();
        // common / |query| orders exactly like common since |query| is fixed
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored
            .into_iter()
            .take(RESULT_LIMIT)
            .enumerate()
            .map(|(i, (_, _, d))| SearchResult {
                url: self.documents[d].url.clone(),
                title: self.documents[d].title.clone(),
                rank: i as u32 + 1,
            })
            .collect()
    }

    pub fn search_text(&self, query: &str) -> Vec<SearchResult> {
        self.search(&TermVector::from_text(query))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateVerdict {
    Allowed,
    Blocked,
}

#[derive(Debug, Default)]
struct SourceWindow {
    hits: VecDeque<Millis>,
    blocked_until: Option<Millis>,
    ever_blocked: bool,
}

/// Per-source sliding-window request counter. A source whose count within the
/// window exceeds the threshold is refused for one full window.
#[derive(Debug)]
pub struct RateLimiter {
    window_ms: Millis,
    block_threshold: usize,
    sources: BTreeMap<String, SourceWindow>,
}

impl RateLimiter {
    pub fn new(block_threshold: usize, window_ms: Millis) -> Self {
        RateLimiter {
            window_ms,
            block_threshold,
            sources: BTreeMap::new(),
        }
    }

    pub fn hourly(block_threshold: usize) -> Self {
        Self::new(block_threshold, RATE_WINDOW_MS)
    }

    pub fn check_rate(&mut self, source: &str, now: Millis) -> RateVerdict {
        let s = self.sources.entry(source.to_owned()).or_default();
        if let Some(until) = s.blocked_until {
            if now < until {
                return RateVerdict::Blocked;
            }
            s.blocked_until = None;
        }
        while s.hits.front().is_some_and(|&t| t + self.window_ms <= now) {
            s.hits.pop_front();
        }
        s.hits.push_back(now);
        if s.hits.len() > self.block_threshold {
            s.blocked_until = Some(now + self.window_ms);
            s.ever_blocked = true;
            s.hits.clear();
            return RateVerdict::Blocked;
        }
        RateVerdict::Allowed
    }

    pub fn is_blocked(&self, source: &str, now: Millis) -> bool {
        self.sources
            .get(source)
            .and_then(|s| s.blocked_until)
            .is_some_and(|until| now < until)
    }

    /// Sources that were blocked at least once.
    pub fn blocked_sources(&self) -> Vec<String> {
        self.sources
            .iter()
            .filter(|(_, s)| s.ever_blocked)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Deterministic engine over a [`MockCorpus`], counting calls per source.
#[derive(Debug)]
pub struct MockEngine {
    corpus: MockCorpus,
    limiter: Option<Mutex<RateLimiter>>,
    calls: Mutex<BTreeMap<String, u64>>,
    total: AtomicU64,
}

impl MockEngine {
    pub fn new(corpus: MockCorpus) -> Self {
        MockEngine {
            corpus,
            limiter: None,
            calls: Mutex::new(BTreeMap::new()),
            total: AtomicU64::new(0),
        }
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = Some(Mutex::new(limiter));
        self
    }

    pub fn corpus(&self) -> &MockCorpus {
        &self.corpus
    }

    pub fn total_calls(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    /// Calls received per source, including refused ones.
    pub fn calls_by_source(&self) -> BTreeMap<String, u64> {
        self.calls.lock().clone()
    }

    pub fn blocked_sources(&self) -> Vec<String> {
        self.limiter
            .as_ref()
            .map(|l| l.lock().blocked_sources())
            .unwrap_or_default()
    }
}

impl SearchBackend for MockEngine {
    fn search(&self, source: &PeerId, query: &str, now: Millis) -> Result<Vec<SearchResult>> {
        self.total.fetch_add(1, Ordering::Relaxed);
        *self.calls.lock().entry(source.to_string()).or_default() += 1;
        if let Some(limiter) = &self.limiter {
            if limiter.lock().check_rate(source.as_str(), now) == RateVerdict::Blocked {
                return Err(Error::Backend(format!("{source} is blocked")));
            }
        }
        Ok(self.corpus.search(&TermVector::from_text(query)))
    }
}

/// Answers every query with a fixed result list without looking at it.
#[derive(Debug, Default)]
pub struct StubBackend {
    pub results: Vec<SearchResult>,
    calls: AtomicU64,
}

impl StubBackend {
    pub fn new(results: Vec<SearchResult>) -> Self {
        StubBackend {
            results,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl SearchBackend for StubBackend {
    fn search(&self, _source: &PeerId, _query: &str, _now: Millis) -> Result<Vec<SearchResult>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.results.clone())
    }
}

/// Live engine reached over HTTP. The URL template's `%QUERY%` placeholder is
/// replaced by the percent-encoded query; the response must be a JSON array
/// of `{url, title}` objects. Requests beyond `max_per_hour` are refused
/// locally before reaching the engine.
#[cfg(feature = "http-backend")]
pub struct HttpBackend {
    template: String,
    client: reqwest::blocking::Client,
    limiter: Mutex<RateLimiter>,
}

#[cfg(feature = "http-backend")]
impl HttpBackend {
    pub fn new(template: impl Into<String>, max_per_hour: usize) -> Result<Self> {
        let template = template.into();
        if !template.contains("%QUERY%") {
            return Err(Error::Config("url template lacks %QUERY%".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(5))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(HttpBackend {
            template,
            client,
            limiter: Mutex::new(RateLimiter::hourly(max_per_hour)),
        })
    }
}

#[cfg(feature = "http-backend")]
impl SearchBackend for HttpBackend {
    fn search(&self, source: &PeerId, query: &str, now: Millis) -> Result<Vec<SearchResult>> {
        #[derive(Deserialize)]
        struct Hit {
            url: String,
            #[serde(default)]
            title: String,
        }
        if self.limiter.lock().check_rate("local", now) == RateVerdict::Blocked {
            return Err(Error::Backend("local rate cap reached".into()));
        }
        let url = self
            .template
            .replace("%QUERY%", &url::form_urlencoded::byte_serialize(query.as_bytes()).collect::<String>());
        let hits: Vec<Hit> = self
            .client
            .get(url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Backend(format!("{source}: {e}")))?;
        Ok(hits
            .into_iter()
            .take(RESULT_LIMIT)
            .enumerate()
            .map(|(i, h)| SearchResult {
                url: h.url,
                title: h.title,
                rank: i as u32 + 1,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ranks_are_contiguous;

    fn doc(url: &str, text: &str) -> Document {
        Document {
            url: url.into(),
            title: url.into(),
            terms: TermVector::from_text(text),
        }
    }

    fn corpus() -> MockCorpus {
        MockCorpus::new(vec![
            doc("https://b.example/flu", "flu symptoms fever"),
            doc("https://a.example/flu", "flu symptoms cough"),
            doc("https://c.example/paris", "cheap flights paris"),
            doc("https://d.example/fever", "fever"),
        ])
        .unwrap()
    }

    #[test]
    fn single_match_ranked_first() {
        let r = corpus().search_text("paris");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].url, "https://c.example/paris");
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn empty_query_gives_nothing() {
        assert!(corpus().search_text("").is_empty());
        assert!(corpus().search_text("?!").is_empty());
    }

    #[test]
    fn ties_break_on_url() {
        let r = corpus().search_text("flu symptoms");
        assert_eq!(r[0].url, "https://a.example/flu");
        assert_eq!(r[1].url, "https://b.example/flu");
        let r = corpus().search_text("flu fever");
        assert_eq!(r[0].url, "https://b.example/flu");
        assert_eq!(r[1].url, "https://a.example/flu");
        assert!(ranks_are_contiguous(&r));
    }

    #[test]
    fn top_ten_only() {
        let docs = (0..25).map(|i| doc(&format!("u{i:02}"), "same words")).collect();
        let r = MockCorpus::new(docs).unwrap().search_text("same");
        assert_eq!(r.len(), RESULT_LIMIT);
        assert_eq!(r[0].url, "u00");
        assert!(ranks_are_contiguous(&r));
    }

    #[test]
    fn golden_results() {
        let body = r#"{"url":"https://x.example/1","title":"Diabetes diet","text":"food sugar insulin"}
{"url":"https://x.example/2","title":"Insulin pumps","text":"diabetes devices"}

{"url":"https://x.example/3","title":"Paris","text":"travel flights"}"#;
        let c = MockCorpus::parse_jsonl(body).unwrap();
        let got: Vec<(String, u32)> = c
            .search_text("diabetes insulin")
            .into_iter()
            .map(|r| (r.url, r.rank))
            .collect();
        assert_eq!(
            got,
            vec![
                ("https://x.example/1".to_string(), 1),
                ("https://x.example/2".to_string(), 2)
            ]
        );
        assert!(MockCorpus::parse_jsonl("{\"url\":1}").is_err());
        let dup = "{\"url\":\"a\",\"title\":\"\",\"text\":\"x\"}\n{\"url\":\"a\",\"title\":\"\",\"text\":\"y\"}";
        assert!(MockCorpus::parse_jsonl(dup).is_err());
    }

    #[test]
    fn limiter_threshold() {
        let mut l = RateLimiter::hourly(1000);
        for i in 0..999 {
            assert_eq!(l.check_rate("s", i), RateVerdict::Allowed);
        }
        assert_eq!(l.check_rate("s", 999), RateVerdict::Allowed);
        assert_eq!(l.check_rate("s", 1000), RateVerdict::Blocked);
        // stays blocked for the whole window, then recovers
        assert_eq!(l.check_rate("s", 1000 + RATE_WINDOW_MS - 1), RateVerdict::Blocked);
        assert_eq!(l.check_rate("s", 1000 + RATE_WINDOW_MS), RateVerdict::Allowed);
        assert_eq!(l.blocked_sources(), ["s"]);
        assert_eq!(l.check_rate("other", 5), RateVerdict::Allowed);
    }

    #[test]
    fn window_slides() {
        let mut l = RateLimiter::new(2, 100);
        assert_eq!(l.check_rate("s", 0), RateVerdict::Allowed);
        assert_eq!(l.check_rate("s", 50), RateVerdict::Allowed);
        assert_eq!(l.check_rate("s", 100), RateVerdict::Allowed);
        assert_eq!(l.check_rate("s", 120), RateVerdict::Blocked);
    }

    // One proxy carrying 10,500 requests in an hour versus a node relaying 94.
    #[test]
    fn single_proxy_versus_spread_rates() {
        let spacing = |per_hour: u64| RATE_WINDOW_MS / per_hour;
        let mut l = RateLimiter::hourly(DEFAULT_BLOCK_THRESHOLD);
        let proxy: Vec<_> = (0..10_500)
            .map(|i| l.check_rate("proxy", i * spacing(10_500)))
            .collect();
        assert!(proxy.contains(&RateVerdict::Blocked));
        let node: Vec<_> = (0..94).map(|i| l.check_rate("node", i * spacing(94))).collect();
        assert!(node.iter().all(|v| *v == RateVerdict::Allowed));
    }

    #[test]
    fn engine_counts_and_blocks() {
        let e = MockEngine::new(corpus()).with_rate_limit(RateLimiter::hourly(2));
        let src = PeerId::from("relay");
        assert!(e.search(&src, "flu", 0).is_ok());
        assert!(e.search(&src, "flu", 1).is_ok());
        assert!(matches!(e.search(&src, "flu", 2), Err(Error::Backend(_))));
        assert_eq!(e.total_calls(), 3);
        assert_eq!(e.calls_by_source()["relay"], 3);
        assert_eq!(e.blocked_sources(), ["relay"]);
    }
}
