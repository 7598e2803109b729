//! Shared domain vocabulary: queries, term vectors, user profiles and
//! protection verdicts. Everything here is an immutable value.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Milliseconds since an arbitrary epoch. Live nodes use the Unix epoch,
/// simulations use their own logical clock.
pub type Millis = u64;

/// Opaque identifier of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryId(pub u64);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{:016x}", self.0)
    }
}

/// Opaque identifier of a user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_owned())
    }
}

/// Whether a query was typed by a user or injected as cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Fake,
}

/// Lowercases `raw`, splits on every run of non-alphanumeric characters and
/// drops empty and duplicate tokens.
pub fn normalize(raw: &str) -> BTreeSet<String> {
    raw.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Binary term vector; the support set is the vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TermVector {
    support: BTreeSet<String>,
}

impl TermVector {
    pub fn from_text(raw: &str) -> Self {
        TermVector {
            support: normalize(raw),
        }
    }

    /// Builds a vector from already tokenized terms; each term is normalized
    /// again so the tokenizer stays the single source of truth.
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TermVector {
            support: terms.into_iter().flat_map(|t| normalize(t.as_ref())).collect(),
        }
    }

    pub fn support(&self) -> &BTreeSet<String> {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.support.contains(term)
    }

    pub fn norm(&self) -> f64 {
        (self.support.len() as f64).sqrt()
    }

    pub fn intersection_count(&self, other: &TermVector) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.support.iter().filter(|t| large.support.contains(*t)).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.support.iter().map(String::as_str)
    }

    /// Space-joined terms in lexicographic order.
    pub fn joined(&self) -> String {
        self.support.iter().map(String::as_str).collect::<Vec<_>>().join(" ")
    }
}

/// Cosine similarity of two binary vectors given their sizes and the size of
/// their intersection. Zero when either vector is empty.
pub fn overlap_cosine(len_a: usize, len_b: usize, common: usize) -> f64 {
    if len_a == 0 || len_b == 0 {
        return 0.0;
    }
    // sqrt of the exact integer product keeps cos(a, a) at exactly 1
    let c = common as f64 / ((len_a as f64) * (len_b as f64)).sqrt();
    c.min(1.0)
}

pub fn cosine(a: &TermVector, b: &TermVector) -> f64 {
    overlap_cosine(a.len(), b.len(), a.intersection_count(b))
}

/// One search query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: QueryId,
    pub raw_text: String,
    pub terms: TermVector,
    pub issued_at: Millis,
    pub origin: Origin,
}

impl QueryRecord {
    pub fn new(id: QueryId, raw_text: impl Into<String>, issued_at: Millis, origin: Origin) -> Self {
        let raw_text = raw_text.into();
        let terms = TermVector::from_text(&raw_text);
        QueryRecord {
            id,
            raw_text,
            terms,
            issued_at,
            origin,
        }
    }

    pub fn real(id: u64, raw_text: impl Into<String>, issued_at: Millis) -> Self {
        Self::new(QueryId(id), raw_text, issued_at, Origin::Real)
    }
}

/// A user's past real queries, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    past_queries: Vec<QueryRecord>,
}

impl UserProfile {
    pub fn new(user_id: UserId) -> Self {
        UserProfile {
            user_id,
            past_queries: Vec::new(),
        }
    }

    /// Builds a profile from arbitrary records. Fake-origin records are
    /// discarded and the rest sorted by issue time (stable for equal times).
    pub fn from_queries(user_id: UserId, queries: impl IntoIterator<Item = QueryRecord>) -> Self {
        let mut past_queries: Vec<_> = queries
            .into_iter()
            .filter(|q| q.origin == Origin::Real)
            .collect();
        past_queries.sort_by_key(|q| q.issued_at);
        UserProfile {
            user_id,
            past_queries,
        }
    }

    /// Appends a query, keeping issue-time order. Fake queries are ignored.
    pub fn push(&mut self, query: QueryRecord) {
        if query.origin != Origin::Real {
            return;
        }
        let pos = self
            .past_queries
            .partition_point(|q| q.issued_at <= query.issued_at);
        self.past_queries.insert(pos, query);
    }

    pub fn past_queries(&self) -> &[QueryRecord] {
        &self.past_queries
    }

    /// The `window` most recent queries, or all of them.
    pub fn recent(&self, window: Option<usize>) -> &[QueryRecord] {
        match window {
            Some(w) if w < self.past_queries.len() => {
                &self.past_queries[self.past_queries.len() - w..]
            }
            _ => &self.past_queries,
        }
    }

    pub fn len(&self) -> usize {
        self.past_queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.past_queries.is_empty()
    }
}

/// Outcome of the sensitivity analysis for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionDecision {
    pub semantic_sensitive: bool,
    pub linkability: f64,
    pub k: usize,
    pub matched_topics: BTreeSet<String>,
}

impl ProtectionDecision {
    /// Checks the decision against the projection rule for a given ceiling.
    pub fn is_consistent(&self, k_max: usize) -> bool {
        let in_range = (0.0..=1.0).contains(&self.linkability) && self.k <= k_max;
        let rule = if self.semantic_sensitive {
            self.k == k_max
        } else {
            self.k == project_k(self.linkability, k_max)
        };
        in_range && rule
    }
}

/// Linear projection of a score in [0,1] onto 0..=k_max, rounding half up.
pub fn project_k(score: f64, k_max: usize) -> usize {
    let scaled = score.clamp(0.0, 1.0) * k_max as f64;
    ((scaled + 0.5).floor() as usize).min(k_max)
}

/// Term list for one sensitive topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveTopicDictionary {
    pub topic: String,
    terms: BTreeSet<String>,
}

impl SensitiveTopicDictionary {
    /// Normalizes every entry; returns `None` when nothing survives.
    pub fn new<I, S>(topic: impl Into<String>, entries: I) -> Option<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms: BTreeSet<String> = entries
            .into_iter()
            .flat_map(|e| normalize(e.as_ref()))
            .collect();
        if terms.is_empty() {
            return None;
        }
        Some(SensitiveTopicDictionary {
            topic: topic.into(),
            terms,
        })
    }

    pub fn terms(&self) -> &BTreeSet<String> {
        &self.terms
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }
}

/// One entry of a ranked result list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: String,
    pub rank: u32,
}

/// True when ranks are exactly 1..=n in order.
pub fn ranks_are_contiguous(results: &[SearchResult]) -> bool {
    results
        .iter()
        .enumerate()
        .all(|(i, r)| r.rank as usize == i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize("Heart Attack symptoms"),
            set(&["heart", "attack", "symptoms"])
        );
        assert!(normalize("").is_empty());
        assert_eq!(normalize("heart-attack, HEART!"), set(&["heart", "attack"]));
        assert!(normalize("  ,;--  ").is_empty());
    }

    #[test]
    fn cosine_examples() {
        let a = TermVector::from_text("heart attack symptoms");
        let b = TermVector::from_text("heart attack treatment");
        assert_eq!(cosine(&a, &a), 1.0);
        // dot 2 over sqrt(3)*sqrt(3)
        assert!((cosine(&a, &b) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            cosine(&TermVector::from_text("a"), &TermVector::default()),
            0.0
        );
    }

    #[test]
    fn norm_is_sqrt_of_support() {
        let v = TermVector::from_text("one two three four");
        assert_eq!(v.norm(), 2.0);
    }

    #[test]
    fn profile_keeps_time_order_and_drops_fakes() {
        let mut p = UserProfile::new("u".into());
        p.push(QueryRecord::real(1, "b", 20));
        p.push(QueryRecord::real(2, "a", 10));
        p.push(QueryRecord::new(QueryId(3), "fake", 15, Origin::Fake));
        p.push(QueryRecord::real(4, "c", 20));
        let times: Vec<_> = p.past_queries().iter().map(|q| q.issued_at).collect();
        assert_eq!(times, vec![10, 20, 20]);
        assert_eq!(p.recent(Some(2)).len(), 2);
        assert_eq!(p.recent(Some(2))[0].id, QueryId(1));
        assert_eq!(p.recent(None).len(), 3);
    }

    #[test]
    fn projection_rounds_half_up() {
        assert_eq!(project_k(0.5, 7), 4);
        assert_eq!(project_k(0.0, 7), 0);
        assert_eq!(project_k(1.0, 7), 7);
        assert_eq!(project_k(0.07, 7), 0);
        assert_eq!(project_k(0.0715, 7), 1);
    }

    #[test]
    fn dictionary_rejects_empty() {
        assert!(SensitiveTopicDictionary::new("x", ["", " - "]).is_none());
        let d = SensitiveTopicDictionary::new("health", ["Cancer", "heart-attack"]).unwrap();
        assert_eq!(d.terms(), &set(&["cancer", "heart", "attack"]));
    }

    fn term_set() -> impl Strategy<Value = TermVector> {
        prop::collection::btree_set("[a-f]{1,2}", 0..8).prop_map(TermVector::from_terms)
    }

    proptest! {
        #[test]
        fn cosine_bounds_and_symmetry(a in term_set(), b in term_set()) {
            let ab = cosine(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, cosine(&b, &a));
            if !a.is_empty() {
                prop_assert_eq!(cosine(&a, &a), 1.0);
            }
        }

        #[test]
        fn normalize_is_idempotent(raw in "\\PC{0,40}") {
            let once = normalize(&raw);
            let joined = once.iter().cloned().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(normalize(&joined), once.clone());
            prop_assert!(once.iter().all(|t| !t.is_empty()));
        }
    }
}
