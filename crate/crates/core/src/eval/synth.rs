//! Seeded synthetic query logs.
//!
//! Every user owns a private vocabulary and shares a common one with all
//! other users. Each term of a query comes from the shared vocabulary with
//! probability `overlap`, otherwise from the user's private one; both are
//! drawn with Zipf weights so that a few terms dominate, as in real logs.
//! Users also re-issue earlier queries, and a fraction of queries carries a
//! term from one of the sensitive-topic dictionaries.

use std::collections::BTreeSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Document, MockCorpus};
use crate::error::{Error, Result};
use crate::eval::log::{LogFormat, LogRecord, QueryLog};
use crate::model::{SensitiveTopicDictionary, TermVector, UserId};
use crate::sensitivity::builtin_dictionaries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub queries_per_user: usize,
    /// Probability that a term comes from the shared vocabulary.
    pub overlap: f64,
    /// Probability that a query carries a dictionary term.
    pub sensitive_fraction: f64,
    pub shared_vocab: usize,
    pub private_vocab: usize,
    /// Probability of re-issuing one of the user's earlier queries.
    pub repeat_prob: f64,
    pub max_terms: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 50,
            queries_per_user: 60,
            overlap: 0.5,
            sensitive_fraction: 0.15,
            shared_vocab: 400,
            private_vocab: 40,
            repeat_prob: 0.2,
            max_terms: 3,
            zipf_exponent: 1.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0,1], got {p}")))
            }
        };
        prob("overlap", self.overlap)?;
        prob("sensitive_fraction", self.sensitive_fraction)?;
        prob("repeat_prob", self.repeat_prob)?;
        if self.users == 0 || self.queries_per_user == 0 || self.max_terms == 0 {
            return Err(Error::Config("users, queries_per_user and max_terms must be positive".into()));
        }
        if self.shared_vocab == 0 || self.private_vocab == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLog {
    pub log: QueryLog,
    /// Indices into `log.records` of queries carrying a dictionary term.
    pub sensitive: BTreeSet<usize>,
    pub dictionaries: Vec<SensitiveTopicDictionary>,
    /// Every non-dictionary term that can appear.
    pub vocabulary: Vec<String>,
}

const ONSETS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable token for an index. Three syllables cover
/// 421,875 distinct words.
fn word(mut i: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut w = String::new();
    for _ in 0..3 {
        let s = i % base;
        w.push_str(ONSETS[s / VOWELS.len()]);
        w.push_str(VOWELS[s % VOWELS.len()]);
        i /= base;
    }
    w
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("positive weights")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticLog> {
    cfg.validate()?;
    let dictionaries = builtin_dictionaries();
    let reserved: BTreeSet<&str> = dictionaries.iter().flat_map(|d| d.terms().iter().map(String::as_str)).collect();
    let mut next = 0usize;
    let mut fresh = |n: usize| -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = word(next);
            next += 1;
            if !reserved.contains(w.as_str()) {
                out.push(w);
            }
        }
        out
    };
    let shared = fresh(cfg.shared_vocab);
    let private: Vec<Vec<String>> = (0..cfg.users).map(|_| fresh(cfg.private_vocab)).collect();
    let dict_terms: Vec<&String> = dictionaries.iter().flat_map(|d| d.terms().iter()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared_z = zipf(shared.len(), cfg.zipf_exponent);
    let private_z = zipf(cfg.private_vocab, cfg.zipf_exponent);
    let epoch: u64 = 1_141_171_200_000; // 2006-03-01
    let mut records = Vec::with_capacity(cfg.users * cfg.queries_per_user);
    let mut sensitive = BTreeSet::new();
    for (u, own) in private.iter().enumerate() {
        let mut issued: Vec<(String, bool)> = Vec::new();
        let mut t = epoch + rng.gen_range(0..86_400_000);
        for _ in 0..cfg.queries_per_user {
            t += rng.gen_range(60_000..7_200_000);
            let (text, is_sensitive) = if !issued.is_empty() && rng.gen_bool(cfg.repeat_prob) {
                issued[rng.gen_range(0..issued.len())].clone()
            } else {
                let n = rng.gen_range(1..=cfg.max_terms);
                let mut terms: Vec<&str> = Vec::with_capacity(n + 1);
                for _ in 0..n {
                    let w = if rng.gen_bool(cfg.overlap) {
                        &shared[shared_z.sample(&mut rng)]
                    } else {
                        &own[private_z.sample(&mut rng)]
                    };
                    if !terms.contains(&w.as_str()) {
                        terms.push(w);
                    }
                }
                let s = rng.gen_bool(cfg.sensitive_fraction);
                if s {
                    let d = dict_terms[rng.gen_range(0..dict_terms.len())];
                    let at = rng.gen_range(0..=terms.len());
                    terms.insert(at, d);
                }
                (terms.join(" "), s)
            };
            if is_sensitive {
                sensitive.insert(records.len());
            }
            records.push(LogRecord {
                user_id: UserId(format!("user{u:03}")),
                query: text.clone(),
                timestamp: t,
            });
            issued.push((text, is_sensitive));
        }
    }
    let mut vocabulary = shared;
    vocabulary.extend(private.into_iter().flatten());
    Ok(SyntheticLog {
        log: QueryLog {
            records,
            format: LogFormat::SimpleCsv,
            skipped: 0,
        },
        sensitive,
        dictionaries,
        vocabulary,
    })
}

/// A document collection over `vocabulary` for the mock engine: each
/// document holds 4 to 12 uniformly drawn terms.
pub fn corpus(vocabulary: &[String], documents: usize, seed: u64) -> MockCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..documents)
        .map(|i| {
            let n = rng.gen_range(4..=12).min(vocabulary.len());
            let terms: Vec<&String> = vocabulary.choose_multiple(&mut rng, n).collect();
            Document {
                url: format!("https://example.org/doc/{i}"),
                title: format!("{} {}", terms[0], terms[terms.len() - 1]),
                terms: TermVector::from_terms(terms),
            }
        })
        .collect();
    MockCorpus::new(docs).expect("urls are unique")
}
