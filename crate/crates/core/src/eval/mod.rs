//! Offline evaluation: logs, the re-identification adversary, metrics and
//! reports.

pub mod attack;
pub mod log;
pub mod metrics;
pub mod report;
pub mod run;
pub mod synth;

pub use attack::{simattack, Attribution, ProfileIndex, Verdict, CONFIDENCE_THRESHOLD};
pub use log::{ingest_log, parse_log, split_train_test, LogFormat, QueryLog, Split, TestQuery};
pub use metrics::{accuracy_metrics, categorizer_metrics};
pub use report::{k_cdf, EvaluationReport};
pub use run::{run_attack, AdversaryView, AttackConfig, AttackOutcome, Mechanism};
