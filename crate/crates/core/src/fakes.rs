//! Table of past queries relayed for other users. It lives inside the sealed
//! core and is the only pool fake queries are drawn from.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::Path;

use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::normalize;

pub const DEFAULT_TABLE_CAPACITY: usize = 10_000;

/// Result of a draw that may come up short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FakeDraw {
    pub queries: Vec<String>,
    /// How many requested fakes could not be supplied.
    pub shortfall: usize,
}

/// Outcome of seeding a table from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStats {
    pub recorded: usize,
    pub skipped: usize,
}

/// Bounded FIFO of query strings. Mutations are serialized by an internal
/// lock so relay handlers can share one table.
#[derive(Debug)]
pub struct PastQueryTable {
    entries: RwLock<VecDeque<String>>,
    capacity: usize,
}

impl PastQueryTable {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "table capacity must be positive");
        PastQueryTable {
            entries: RwLock::new(VecDeque::with_capacity(capacity.min(1024))),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    /// Appends a relayed query, evicting the oldest entry when full.
    pub fn record(&self, query_text: &str) -> Result<()> {
        if normalize(query_text).is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut entries = self.entries.write();
        if entries.len() == self.capacity {
            entries.pop_front();
        }
        entries.push_back(query_text.trim().to_owned());
        Ok(())
    }

    /// Draws up to `n` distinct strings uniformly, never returning `exclude`.
    /// Duplicate entries make a string proportionally more likely.
    pub fn sample_fakes<R: Rng + ?Sized>(&self, n: usize, exclude: &str, rng: &mut R) -> FakeDraw {
        if n == 0 {
            return FakeDraw {
                queries: Vec::new(),
                shortfall: 0,
            };
        }
        let entries = self.entries.read();
        let exclude = exclude.trim();
        let eligible: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i] != exclude)
            .collect();

        let mut picked: Vec<String> = Vec::with_capacity(n);
        let mut seen: HashSet<&str> = HashSet::with_capacity(n);
        // Rejection sampling keeps frequency-weighted draws while the pool is
        // much larger than n; fall back to a shuffle of the distinct set.
        let mut attempts = 0;
        while picked.len() < n && attempts < 8 * n && !eligible.is_empty() {
            attempts += 1;
            let s = entries[eligible[rng.gen_range(0..eligible.len())]].as_str();
            if seen.insert(s) {
                picked.push(s.to_owned());
            }
        }
        if picked.len() < n {
            let mut rest: Vec<&str> = eligible
                .iter()
                .map(|&i| entries[i].as_str())
                .filter(|s| !seen.contains(s))
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            rest.sort_unstable();
            rest.shuffle(rng);
            for s in rest.into_iter().take(n - picked.len()) {
                picked.push(s.to_owned());
            }
        }
        let shortfall = n - picked.len();
        FakeDraw {
            queries: picked,
            shortfall,
        }
    }

    /// Records every non-empty line of `path` in file order.
    pub fn bootstrap_seed(&self, path: &Path) -> Result<SeedStats> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(self.seed_lines(body.lines()))
    }

    pub fn seed_lines<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> SeedStats {
        let mut stats = SeedStats {
            recorded: 0,
            skipped: 0,
        };
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            match self.record(line) {
                Ok(()) => stats.recorded += 1,
                Err(_) => stats.skipped += 1,
            }
        }
        stats
    }

    pub fn snapshot(&self) -> Vec<String> {
        self.entries.read().iter().cloned().collect()
    }
}

impl Default for PastQueryTable {
    fn default() -> Self {
        Self::new(DEFAULT_TABLE_CAPACITY)
    }
}
