//! Set-based quality metrics.

use std::collections::HashSet;
use std::hash::Hash;

use crate::model::SearchResult;

/// Precision and recall of a sensitive-query detector.
///
/// `precision = |detected ∩ truth| / |detected|` (1 when both are empty,
/// 0 when only `detected` is), `recall = |detected ∩ truth| / |truth|`
/// (1 when `truth` is empty).
pub fn categorizer_metrics<T: Eq + Hash>(detected: &HashSet<T>, truth: &HashSet<T>) -> (f64, f64) {
    let hit = detected.intersection(truth).count() as f64;
    let precision = if detected.is_empty() {
        if truth.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        hit / detected.len() as f64
    };
    let recall = if truth.is_empty() {
        1.0
    } else {
        hit / truth.len() as f64
    };
    (precision, recall)
}

/// Correctness and completeness of returned results against the results of
/// the unprotected query, compared as url sets.
pub fn accuracy_metrics(original: &[SearchResult], returned: &[SearchResult]) -> (f64, f64) {
    let or: HashSet<&str> = original.iter().map(|r| r.url.as_str()).collect();
    let xs: HashSet<&str> = returned.iter().map(|r| r.url.as_str()).collect();
    let common = or.intersection(&xs).count() as f64;
    let correctness = if xs.is_empty() {
        if or.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        common / xs.len() as f64
    };
    let completeness = if or.is_empty() {
        1.0
    } else {
        common / or.len() as f64
    };
    (correctness, completeness)
}
