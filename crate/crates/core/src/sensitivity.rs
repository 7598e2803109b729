//! Client-side sensitivity analysis.
//!
//! A query is protected by `k` fake queries. `k` is maximal whenever a query
//! term falls in one of the user's sensitive-topic dictionaries; otherwise it
//! is the linear projection of the linkability score onto `0..=k_max`.
//!
//! The linkability score is the exponential smoothing of the cosine
//! similarities between the query and every past query, folded in ascending
//! order so the most similar past queries weigh the most. The same fold backs
//! the re-identification adversary in [`crate::eval`].

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cosine, project_k, ProtectionDecision, QueryRecord, SensitiveTopicDictionary, UserProfile};

pub const DEFAULT_K_MAX: usize = 7;
pub const DEFAULT_SMOOTHING_ALPHA: f64 = 0.5;

/// The topics a user can pick from out of the box.
pub const DEFAULT_TOPICS: [&str; 4] = ["health", "politics", "religion", "sex"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub k_max: usize,
    pub smoothing_alpha: f64,
    pub enabled_topics: BTreeSet<String>,
    /// Number of most recent past queries consulted; `None` means all.
    pub profile_window: Option<usize>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            k_max: DEFAULT_K_MAX,
            smoothing_alpha: DEFAULT_SMOOTHING_ALPHA,
            enabled_topics: DEFAULT_TOPICS.iter().map(|s| s.to_string()).collect(),
            profile_window: None,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.smoothing_alpha > 0.0 && self.smoothing_alpha < 1.0) {
            return Err(Error::Config(format!(
                "smoothing_alpha must lie in (0,1), got {}",
                self.smoothing_alpha
            )));
        }
        Ok(())
    }
}

/// Exponential smoothing over similarities that are already sorted in
/// ascending order. The accumulator starts at the first value.
///
/// Returns 0 for an empty sequence.
pub fn smooth_ascending<I>(ascending: I, alpha: f64) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut it = ascending.into_iter();
    let Some(first) = it.next() else {
        return 0.0;
    };
    it.fold(first, |acc, s| alpha * s + (1.0 - alpha) * acc)
}

/// Sorts `similarities` ascending and smooths them.
pub fn smoothed_similarity(mut similarities: Vec<f64>, alpha: f64) -> f64 {
    similarities.sort_by(f64::total_cmp);
    smooth_ascending(similarities, alpha)
}

/// Semantic check: every topic having at least one term of the query.
pub fn semantic_assess<'a, I>(query: &QueryRecord, dicts: I) -> (bool, BTreeSet<String>)
where
    I: IntoIterator<Item = &'a SensitiveTopicDictionary>,
{
    let matched: BTreeSet<String> = dicts
        .into_iter()
        .filter(|d| query.terms.iter().any(|t| d.contains(t)))
        .map(|d| d.topic.clone())
        .collect();
    (!matched.is_empty(), matched)
}

/// Smoothed similarity between `query` and the user's past queries.
pub fn linkability_score(query: &QueryRecord, profile: &UserProfile, alpha: f64) -> f64 {
    linkability_over(query, profile.past_queries(), alpha)
}

fn linkability_over(query: &QueryRecord, past: &[QueryRecord], alpha: f64) -> f64 {
    let sims = past.iter().map(|p| cosine(&query.terms, &p.terms)).collect();
    smoothed_similarity(sims, alpha)
}

/// Full protection decision for one query. Only dictionaries whose topic is
/// enabled in `cfg` are consulted.
pub fn decide_k(
    query: &QueryRecord,
    profile: &UserProfile,
    dicts: &[SensitiveTopicDictionary],
    cfg: &SensitivityConfig,
) -> ProtectionDecision {
    let enabled = dicts.iter().filter(|d| cfg.enabled_topics.contains(&d.topic));
    let (semantic_sensitive, matched_topics) = semantic_assess(query, enabled);
    let linkability = linkability_over(query, profile.recent(cfg.profile_window), cfg.smoothing_alpha);
    let k = if semantic_sensitive {
        cfg.k_max
    } else {
        project_k(linkability, cfg.k_max)
    };
    ProtectionDecision {
        semantic_sensitive,
        linkability,
        k,
        matched_topics,
    }
}

/// Small built-in term lists for the default topics, used when no
/// dictionary directory is configured.
pub fn builtin_dictionaries() -> Vec<SensitiveTopicDictionary> {
    const LISTS: [(&str, &str); 4] = [
        (
            "health",
            "cancer diabetes insulin chemotherapy hiv aids depression anxiety tumor \
             pregnancy abortion rehab overdose antidepressant dementia hepatitis \
             schizophrenia bipolar diagnosis symptoms oncology leukemia",
        ),
        (
            "politics",
            "election democrat republican senator congress vote ballot campaign \
             parliament liberal conservative protest immigration lobbying \
             impeachment socialist candidate referendum",
        ),
        (
            "religion",
            "church mosque synagogue bible quran torah prayer atheism baptism \
             catholic muslim jewish buddhist hindu pastor rabbi imam sermon",
        ),
        (
            "sex",
            "sex porn erotic condom viagra escort nude fetish contraception \
             sexuality lgbt gay lesbian transgender dating",
        ),
    ];
    LISTS
        .iter()
        .filter_map(|(topic, words)| SensitiveTopicDictionary::new(*topic, words.split_whitespace()))
        .collect()
}

/// Parses one dictionary file body: one term per line, `#` starts a comment
/// line. Returns `None` when no term survives normalization.
pub fn parse_dictionary(topic: &str, body: &str) -> Option<SensitiveTopicDictionary> {
    let lines = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    SensitiveTopicDictionary::new(topic, lines)
}

pub fn load_dictionary(path: &Path) -> Result<SensitiveTopicDictionary> {
    let topic = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("bad dictionary file name {}", path.display())))?;
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dictionary(topic, &body)
        .ok_or_else(|| Error::Format(format!("dictionary {} has no terms", path.display())))
}

/// Loads every regular file in `dir` as a dictionary, sorted by topic.
pub fn load_dictionary_dir(dir: &Path) -> Result<Vec<SensitiveTopicDictionary>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            out.push(load_dictionary(&path)?);
        }
    }
    out.sort_by(|a, b| a.topic.cmp(&b.topic));
    Ok(out)
}
