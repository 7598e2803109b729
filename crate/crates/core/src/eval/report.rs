//! Report output and plot data.

use serde::{Deserialize, Serialize};

use crate::eval::run::{AdversaryView, AttackOutcome, Mechanism, UserBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mechanism: Mechanism,
    pub k_max: usize,
    pub adversary: AdversaryView,
    pub queries: usize,
    pub reidentification_rate: f64,
    /// Sensitive-query detection, when ground truth is known.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Result accuracy, when results were replayed against an engine.
    pub correctness: Option<f64>,
    pub completeness: Option<f64>,
    pub mean_k: f64,
    pub per_user: Vec<UserBreakdown>,
}

impl EvaluationReport {
    pub fn from_outcome(out: &AttackOutcome) -> Self {
        let mean_k = out.verdicts.iter().map(|v| v.k as f64).sum::<f64>() / out.total.max(1) as f64;
        EvaluationReport {
            mechanism: out.mechanism,
            k_max: out.k_max,
            adversary: out.adversary,
            queries: out.total,
            reidentification_rate: out.rate,
            precision: None,
            recall: None,
            correctness: None,
            completeness: None,
            mean_k,
            per_user: out.per_user.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary header plus one row per user. Summary cells that are unknown
    /// stay empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mechanism",
            "k_max",
            "user",
            "queries",
            "reidentified",
            "reidentification_rate",
            "precision",
            "recall",
            "correctness",
            "completeness",
        ])
        .expect("in-memory csv");
        let reid = (self.reidentification_rate * self.queries as f64).round() as usize;
        w.write_record([
            self.mechanism.to_string(),
            self.k_max.to_string(),
            "*".into(),
            self.queries.to_string(),
            reid.to_string(),
            self.reidentification_rate.to_string(),
            opt(self.precision),
            opt(self.recall),
            opt(self.correctness),
            opt(self.completeness),
        ])
        .expect("in-memory csv");
        for u in &self.per_user {
            w.write_record([
                self.mechanism.to_string(),
                self.k_max.to_string(),
                u.user.0.clone(),
                u.attacked.to_string(),
                u.reidentified.to_string(),
                u.rate.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub k: usize,
    pub fraction: f64,
    pub cumulative: f64,
}

/// Empirical distribution of k over `0..=k_max`.
pub fn k_cdf(ks: &[usize], k_max: usize) -> Vec<CdfPoint> {
    let mut counts = vec![0usize; k_max + 1];
    for &k in ks {
        counts[k.min(k_max)] += 1;
    }
    let n = ks.len().max(1) as f64;
    let mut acc = 0;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            acc += c;
            CdfPoint {
                k,
                fraction: c as f64 / n,
                cumulative: acc as f64 / n,
            }
        })
        .collect()
}

/// `k,fraction,cumulative` lines for plotting.
pub fn cdf_csv(points: &[CdfPoint]) -> String {
    let mut s = String::from("k,fraction,cumulative\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.k, p.fraction, p.cumulative));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_ends_at_one() {
        let c = k_cdf(&[0, 0, 3, 7], 7);
        assert_eq!(c.len(), 8);
        assert_eq!(c[0].fraction, 0.5);
        assert_eq!(c[2].cumulative, 0.5);
        assert_eq!(c[7].cumulative, 1.0);
        assert!(cdf_csv(&c).starts_with("k,fraction,cumulative\n0,0.5,0.5\n"));
    }

    #[test]
    fn cdf_scale_free() {
        assert_eq!(k_cdf(&[1, 2], 3), k_cdf(&[1, 2, 1, 2], 3));
    }
}
