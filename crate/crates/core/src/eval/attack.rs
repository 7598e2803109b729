//! Similarity-based re-identification adversary.
//!
//! For an anonymous query the adversary scores every user profile with the
//! smoothed cosine similarity used for linkability (ascending fold over all
//! past queries of the profile). The query is attributed to a user when the
//! best score exceeds 0.5 and no other profile reaches it.
//!
//! Profiles are indexed by term so that only past queries sharing a term
//! with the query are touched. Past queries with no common term have
//! similarity 0, and any number of leading zeros folds to exactly 0, so the
//! indexed score is bit-identical to the direct fold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{overlap_cosine, QueryRecord, UserId, UserProfile};
use crate::sensitivity::smooth_ascending;

pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "user")]
pub enum Verdict {
    Reidentified(UserId),
    Unidentified,
}

/// Verdict together with the winning score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub verdict: Verdict,
    pub best_score: f64,
}

/// Profiles prepared for repeated attacks.
#[derive(Debug, Clone)]
pub struct ProfileIndex {
    users: Vec<UserId>,
    /// Per user, the term count of each past query.
    entry_lens: Vec<Vec<u32>>,
    /// Global entry offset of each user.
    offsets: Vec<usize>,
    vocab: HashMap<String, u32>,
    /// term id -> global entry ids
    postings: Vec<Vec<u32>>,
    entry_owner: Vec<u32>,
    alpha: f64,
    profiles: Vec<UserProfile>,
}

impl ProfileIndex {
    pub fn new(profiles: &[UserProfile], alpha: f64) -> Self {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<u32>> = Vec::new();
        let mut users = Vec::with_capacity(profiles.len());
        let mut entry_lens = Vec::with_capacity(profiles.len());
        let mut offsets = Vec::with_capacity(profiles.len());
        let mut entry_owner = Vec::new();
        let mut next_entry = 0u32;
        for (u, p) in profiles.iter().enumerate() {
            users.push(p.user_id.clone());
            offsets.push(next_entry as usize);
            let mut lens = Vec::with_capacity(p.len());
            for q in p.past_queries() {
                lens.push(q.terms.len() as u32);
                for t in q.terms.iter() {
                    let id = *vocab.entry(t.to_owned()).or_insert_with(|| {
                        postings.push(Vec::new());
                        (postings.len() - 1) as u32
                    });
                    postings[id as usize].push(next_entry);
                }
                entry_owner.push(u as u32);
                next_entry += 1;
            }
            entry_lens.push(lens);
        }
        ProfileIndex {
            users,
            entry_lens,
            offsets,
            vocab,
            postings,
            entry_owner,
            alpha,
            profiles: profiles.to_vec(),
        }
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn user_index(&self, user: &UserId) -> Option<usize> {
        self.users.iter().position(|u| u == user)
    }

    /// Smoothed similarity of `query` to every profile, in profile order.
    pub fn scores(&self, query: &QueryRecord) -> Vec<f64> {
        let mut common: HashMap<u32, u32> = HashMap::new();
        for t in query.terms.iter() {
            if let Some(&id) = self.vocab.get(t) {
                for &e in &self.postings[id as usize] {
                    *common.entry(e).or_default() += 1;
                }
            }
        }
        let qlen = query.terms.len();
        let mut per_user: Vec<Vec<f64>> = vec![Vec::new(); self.users.len()];
        for (e, c) in common {
            let u = self.entry_owner[e as usize] as usize;
            let len = self.entry_lens[u][e as usize - self.offsets[u]] as usize;
            per_user[u].push(overlap_cosine(qlen, len, c as usize));
        }
        per_user
            .into_iter()
            .enumerate()
            .map(|(u, mut sims)| {
                let zeros = self.entry_lens[u].len() - sims.len();
                sims.sort_by(f64::total_cmp);
                let lead = std::iter::repeat_n(0.0, zeros.min(1));
                smooth_ascending(lead.chain(sims), self.alpha)
            })
            .collect()
    }

    /// Score of one user's profile.
    pub fn score_for(&self, query: &QueryRecord, user: usize) -> f64 {
        self.scores(query)[user]
    }

    pub fn attribute(&self, query: &QueryRecord) -> Attribution {
        decide(&self.users, &self.scores(query))
    }

    /// Adds a query to a user's profile (online adversary). Rebuilds the
    /// index, so this is meant for small runs only.
    pub fn learn(&mut self, user: usize, query: &QueryRecord) {
        self.profiles[user].push(query.clone());
        *self = ProfileIndex::new(&self.profiles, self.alpha);
    }
}

/// Applies the confidence and uniqueness rule to per-profile scores.
pub fn decide(users: &[UserId], scores: &[f64]) -> Attribution {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || best <= CONFIDENCE_THRESHOLD {
        return Attribution {
            verdict: Verdict::Unidentified,
            best_score: best.max(0.0),
        };
    }
    let mut winners = scores.iter().enumerate().filter(|(_, &s)| s == best);
    let (first, _) = winners.next().expect("best is attained");
    let verdict = if winners.next().is_some() {
        Verdict::Unidentified
    } else {
        Verdict::Reidentified(users[first].clone())
    };
    Attribution {
        verdict,
        best_score: best,
    }
}

/// One-off attack without an index.
pub fn simattack(query: &QueryRecord, profiles: &[UserProfile], alpha: f64) -> Verdict {
    ProfileIndex::new(profiles, alpha).attribute(query).verdict
}
