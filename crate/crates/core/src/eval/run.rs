//! Replays a test set through a protection mechanism and attacks it.
//!
//! Fakes for a user's query are drawn from the training queries of every
//! other user. With [`AdversaryView::Grouped`] the adversary receives a real
//! query together with its fakes as one batch (they reach the engine within
//! the same instant from unrelated relays). It attributes every query of the
//! batch, keeps those it can attribute, and bets on the one with the highest
//! score; a tie at the top means it cannot choose. The real query is
//! re-identified only when the bet is the real query and names its author.
//!
//! With [`AdversaryView::Independent`] every query is judged on its own and
//! the real query's verdict is all that counts. Against static profiles
//! fakes then change nothing, so this view mostly serves as a control.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::attack::{Attribution, ProfileIndex, Verdict};
use crate::eval::log::{Split, TestQuery};
use crate::model::{Origin, QueryId, QueryRecord, SensitiveTopicDictionary, UserId};
use crate::sensitivity::{decide_k, SensitivityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Anonymous but unobfuscated.
    None,
    /// Per-query k from the sensitivity analysis.
    Adaptive,
    /// Always `k_max` fakes.
    FixedK,
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mechanism::None),
            "adaptive" | "cyclosa" => Ok(Mechanism::Adaptive),
            "fixed_k" | "fixed" => Ok(Mechanism::FixedK),
            other => Err(Error::Config(format!("unknown mechanism {other}"))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::None => "none",
            Mechanism::Adaptive => "adaptive",
            Mechanism::FixedK => "fixed_k",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryView {
    #[default]
    Grouped,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub sensitivity: SensitivityConfig,
    pub adversary: AdversaryView,
    /// Let the adversary add every attributed query to the profile it was
    /// attributed to. Runs sequentially and rebuilds the index on each
    /// update, so only suitable for small logs.
    pub online: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            sensitivity: SensitivityConfig::default(),
            adversary: AdversaryView::Grouped,
            online: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVerdict {
    pub query_id: QueryId,
    pub author: UserId,
    pub semantic_sensitive: bool,
    pub linkability: f64,
    /// k chosen by the mechanism.
    pub k: usize,
    /// Fakes actually sent (lower when the pool is short).
    pub fakes_sent: usize,
    pub attributed_to: Option<UserId>,
    pub reidentified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserBreakdown {
    pub user: UserId,
    pub attacked: usize,
    pub reidentified: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub mechanism: Mechanism,
    pub k_max: usize,
    pub adversary: AdversaryView,
    pub total: usize,
    pub reidentified: usize,
    pub rate: f64,
    pub per_user: Vec<UserBreakdown>,
    pub verdicts: Vec<QueryVerdict>,
}

impl AttackOutcome {
    pub fn ks(&self) -> Vec<usize> {
        self.verdicts.iter().map(|v| v.k).collect()
    }
}

struct FakePool {
    texts: Vec<(u32, String)>,
}

impl FakePool {
    fn new(split: &Split) -> Self {
        let mut seen = BTreeSet::new();
        let mut texts = Vec::new();
        for (u, p) in split.profiles.iter().enumerate() {
            for q in p.past_queries() {
                if seen.insert((u, q.raw_text.as_str())) {
                    texts.push((u as u32, q.raw_text.clone()));
                }
            }
        }
        FakePool { texts }
    }

    /// Up to `k` distinct texts not owned by `owner` and different from
    /// `real`.
    fn draw(&self, k: usize, owner: Option<usize>, real: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
        let ok = |(u, t): &(u32, String)| Some(*u as usize) != owner && t != real;
        let mut out: Vec<String> = Vec::with_capacity(k);
        let mut tries = 0;
        while out.len() < k && tries < 64 * (k + 1) && !self.texts.is_empty() {
            tries += 1;
            let e = &self.texts[rng.gen_range(0..self.texts.len())];
            if ok(e) && !out.contains(&e.1) {
                out.push(e.1.clone());
            }
        }
        if out.len() < k {
            let mut rest: Vec<&String> = self
                .texts
                .iter()
                .filter(|e| ok(e) && !out.contains(&e.1))
                .map(|e| &e.1)
                .collect();
            rest.sort();
            rest.dedup();
            rest.shuffle(rng);
            out.extend(rest.into_iter().take(k - out.len()).cloned());
        }
        out
    }
}

fn query_rng(seed: u64, id: QueryId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.0);
    rng
}

/// Adversary's choice over a batch: index of the query it bets on and to
/// whom it attributes it.
fn grouped_pick(attrs: &[Attribution]) -> Option<(usize, UserId)> {
    let candidates: Vec<(usize, &UserId, f64)> = attrs
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match &a.verdict {
            Verdict::Reidentified(u) => Some((i, u, a.best_score)),
            Verdict::Unidentified => None,
        })
        .collect();
    let best = candidates.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let mut top = candidates.iter().filter(|c| c.2 == best);
    let first = top.next()?;
    if top.next().is_some() {
        return None;
    }
    Some((first.0, first.1.clone()))
}

struct Prepared {
    verdict: QueryVerdict,
    batch: Vec<QueryRecord>,
}

fn prepare(
    t: &TestQuery,
    mechanism: Mechanism,
    split: &Split,
    owner: Option<usize>,
    pool: &FakePool,
    dicts: &[SensitiveTopicDictionary],
    cfg: &AttackConfig,
) -> Prepared {
    let empty = crate::model::UserProfile::new(t.author.clone());
    let profile = owner.map(|o| &split.profiles[o]).unwrap_or(&empty);
    let decision = decide_k(&t.query, profile, dicts, &cfg.sensitivity);
    let k = match mechanism {
        Mechanism::None => 0,
        Mechanism::Adaptive => decision.k,
        Mechanism::FixedK => cfg.sensitivity.k_max,
    };
    let mut rng = query_rng(cfg.seed, t.query.id);
    let fakes = pool.draw(k, owner, &t.query.raw_text, &mut rng);
    let mut batch = vec![t.query.clone()];
    batch.extend(
        fakes
            .into_iter()
            .map(|f| QueryRecord::new(t.query.id, f, t.query.issued_at, Origin::Fake)),
    );
    Prepared {
        verdict: QueryVerdict {
            query_id: t.query.id,
            author: t.author.clone(),
            semantic_sensitive: decision.semantic_sensitive,
            linkability: decision.linkability,
            k,
            fakes_sent: batch.len() - 1,
            attributed_to: None,
            reidentified: false,
        },
        batch,
    }
}

fn judge(view: AdversaryView, attrs: &[Attribution], v: &mut QueryVerdict) {
    let pick = match view {
        AdversaryView::Grouped => grouped_pick(attrs).filter(|(i, _)| *i == 0).map(|(_, u)| u),
        AdversaryView::Independent => match &attrs[0].verdict {
            Verdict::Reidentified(u) => Some(u.clone()),
            Verdict::Unidentified => None,
        },
    };
    v.reidentified = pick.as_ref() == Some(&v.author);
    v.attributed_to = pick;
}

pub fn run_attack(
    mechanism: Mechanism,
    split: &Split,
    dicts: &[SensitiveTopicDictionary],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    if split.test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    cfg.sensitivity.validate()?;
    let alpha = cfg.sensitivity.smoothing_alpha;
    let mut index = ProfileIndex::new(&split.profiles, alpha);
    let owners: BTreeMap<&UserId, usize> = split
        .profiles
        .iter()
        .enumerate()
        .map(|(i, p)| (&p.user_id, i))
        .collect();
    let pool = FakePool::new(split);
    let owner_of = |t: &TestQuery| owners.get(&t.author).copied();

    let verdicts: Vec<QueryVerdict> = if cfg.online {
        let mut out = Vec::with_capacity(split.test.len());
        for t in &split.test {
            let mut p = prepare(t, mechanism, split, owner_of(t), &pool, dicts, cfg);
            let attrs: Vec<Attribution> = p.batch.iter().map(|q| index.attribute(q)).collect();
            judge(cfg.adversary, &attrs, &mut p.verdict);
            for (q, a) in p.batch.iter().zip(&attrs) {
                if let Verdict::Reidentified(u) = &a.verdict {
                    let ui = index.user_index(u).expect("attributed user is indexed");
                    // the adversary cannot tell fakes apart; it learns them as real
                    let mut learned = q.clone();
                    learned.origin = Origin::Real;
                    index.learn(ui, &learned);
                }
            }
            out.push(p.verdict);
        }
        out
    } else {
        split
            .test
            .par_iter()
            .map(|t| {
                let mut p = prepare(t, mechanism, split, owner_of(t), &pool, dicts, cfg);
                let attrs: Vec<Attribution> = p.batch.iter().map(|q| index.attribute(q)).collect();
                judge(cfg.adversary, &attrs, &mut p.verdict);
                p.verdict
            })
            .collect()
    };

    let mut per: BTreeMap<&UserId, (usize, usize)> = BTreeMap::new();
    for v in &verdicts {
        let e = per.entry(&v.author).or_default();
        e.0 += 1;
        e.1 += v.reidentified as usize;
    }
    let per_user = per
        .into_iter()
        .map(|(u, (a, r))| UserBreakdown {
            user: u.clone(),
            attacked: a,
            reidentified: r,
            rate: r as f64 / a as f64,
        })
        .collect();
    let reidentified = verdicts.iter().filter(|v| v.reidentified).count();
    Ok(AttackOutcome {
        mechanism,
        k_max: cfg.sensitivity.k_max,
        adversary: cfg.adversary,
        total: verdicts.len(),
        reidentified,
        rate: reidentified as f64 / verdicts.len() as f64,
        per_user,
        verdicts,
    })
}
