//! Query log ingestion and the chronological train/test split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize, Millis, QueryRecord, UserId, UserProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// `AnonID\tQuery\tQueryTime\tItemRank\tClickURL`
    AolTsv,
    /// `user_id,query,iso_timestamp`
    SimpleCsv,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aol_tsv" | "aol" | "tsv" => Ok(LogFormat::AolTsv),
            "simple_csv" | "csv" => Ok(LogFormat::SimpleCsv),
            other => Err(Error::Config(format!("unknown log format {other}"))),
        }
    }
}

impl LogFormat {
    /// Guesses the format from a file extension.
    pub fn for_path(path: &Path) -> LogFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => LogFormat::SimpleCsv,
            _ => LogFormat::AolTsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub user_id: UserId,
    pub query: String,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub records: Vec<LogRecord>,
    pub format: LogFormat,
    /// Rows that could not be parsed.
    pub skipped: usize,
}

impl QueryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn users(&self) -> usize {
        let mut ids: Vec<&UserId> = self.records.iter().map(|r| &r.user_id).collect();
        ids.sort();
        ids.dedup();
        ids.len()
    }

    /// Writes the log in the AOL column layout with empty click columns.
    /// Tabs and newlines inside queries become spaces.
    pub fn to_aol_tsv(&self) -> String {
        let mut s = String::from("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n");
        for r in &self.records {
            let ts = DateTime::from_timestamp_millis(r.timestamp as i64)
                .map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string())
                .unwrap_or_default();
            let q = r.query.replace(['\t', '\n', '\r'], " ");
            s.push_str(&format!("{}\t{}\t{}\t\t\n", r.user_id.0, q, ts));
        }
        s
    }

    /// Writes the log as `user_id,query,iso_timestamp`.
    pub fn to_simple_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.records {
            let ts = DateTime::from_timestamp_millis(r.timestamp as i64)
                .map(|t| t.to_rfc3339())
                .unwrap_or_default();
            w.write_record([r.user_id.0.as_str(), r.query.as_str(), ts.as_str()])
                .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }
}

fn parse_time(s: &str) -> Option<Millis> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return u64::try_from(t.timestamp_millis()).ok();
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return u64::try_from(t.and_utc().timestamp_millis()).ok();
        }
    }
    None
}

fn make_record(user: &str, query: &str, time: &str) -> Option<LogRecord> {
    let user = user.trim();
    if user.is_empty() || normalize(query).is_empty() {
        return None;
    }
    Some(LogRecord {
        user_id: UserId(user.to_owned()),
        query: query.trim().to_owned(),
        timestamp: parse_time(time)?,
    })
}

pub fn parse_log(body: &str, format: LogFormat) -> Result<QueryLog> {
    let mut records = Vec::new();
    let mut skipped = 0;
    match format {
        LogFormat::AolTsv => {
            for (i, line) in body.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                if i == 0 && line.starts_with("AnonID") {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                match cols.as_slice() {
                    [user, query, time, ..] => match make_record(user, query, time) {
                        Some(r) => records.push(r),
                        None => skipped += 1,
                    },
                    _ => skipped += 1,
                }
            }
        }
        LogFormat::SimpleCsv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(body.as_bytes());
            for (i, row) in reader.records().enumerate() {
                let Ok(row) = row else {
                    skipped += 1;
                    continue;
                };
                if i == 0 && row.get(0) == Some("user_id") {
                    continue;
                }
                if row.len() != 3 {
                    skipped += 1;
                    continue;
                }
                match make_record(&row[0], &row[1], &row[2]) {
                    Some(r) => records.push(r),
                    None => skipped += 1,
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Format(format!("no valid rows ({skipped} skipped)")));
    }
    Ok(QueryLog {
        records,
        format,
        skipped,
    })
}

pub fn ingest_log(path: &Path, format: LogFormat) -> Result<QueryLog> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&body, format)
}

/// One protected query of the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestQuery {
    pub author: UserId,
    pub query: QueryRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub profiles: Vec<UserProfile>,
    pub test: Vec<TestQuery>,
    /// Users with fewer than three queries.
    pub dropped_users: usize,
}

impl Split {
    pub fn training_total(&self) -> usize {
        self.profiles.iter().map(UserProfile::len).sum()
    }
}

/// Number of training queries for a user with `n` queries: two thirds,
/// rounded to nearest.
pub fn training_size(n: usize) -> usize {
    (2 * n + 1) / 3
}

/// Per user, the chronologically first two thirds become the adversary's
/// profile and the rest the test set. Query ids are assigned in log order.
pub fn split_train_test(log: &QueryLog) -> Split {
    let mut by_user: BTreeMap<&UserId, Vec<(usize, &LogRecord)>> = BTreeMap::new();
    for (i, r) in log.records.iter().enumerate() {
        by_user.entry(&r.user_id).or_default().push((i, r));
    }
    let mut profiles = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = 0;
    for (user, mut rows) in by_user {
        if rows.len() < 3 {
            dropped_users += 1;
            continue;
        }
        rows.sort_by_key(|(i, r)| (r.timestamp, *i));
        let cut = training_size(rows.len());
        let to_query = |(i, r): &(usize, &LogRecord)| QueryRecord::real(*i as u64, r.query.clone(), r.timestamp);
        profiles.push(UserProfile::from_queries(user.clone(), rows[..cut].iter().map(to_query)));
        test.extend(rows[cut..].iter().map(|row| TestQuery {
            author: user.clone(),
            query: to_query(row),
        }));
    }
    test.sort_by_key(|t| (t.query.issued_at, t.query.id));
    Split {
        profiles,
        test,
        dropped_users,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AOL: &str = "AnonID\tQuery\tQueryTime\tItemRank\tClickURL
142\trentdirect.com\t2006-03-01 07:17:12\t\t
142\twww.prescriptionfortime.com\t2006-03-12 12:31:06\t\t
217\tlottery\t2006-03-01 11:58:51\t1\thttp://www.calottery.com
217\tlottery\t2006-03-27 14:10:38\t1\thttp://www.calottery.com
993\tcar insurance quotes\t2006-03-02 08:01:00\t\t
993\tdiabetes diet\t2006-03-03 09:00:00\t2\thttp://example.org
993\tflights to paris\t2006-03-04 10:00:00\t\t
1326\tweather\t2006-03-05 10:00:00\t\t
1326\tnews\t2006-03-05 11:00:00\t\t
1326\tmaps\t2006-03-05 12:00:00\t\t
";

    #[test]
    fn aol_rows() {
        let log = parse_log(AOL, LogFormat::AolTsv).unwrap();
        assert_eq!(log.len(), 10);
        assert_eq!(log.skipped, 0);
        assert_eq!(log.users(), 4);
        assert_eq!(log.records[0].timestamp, 1_141_197_432_000);
    }

    #[test]
    fn aol_row_without_query_skipped() {
        let body = "142\t2006-03-01 07:17:12\n142\tok query\t2006-03-01 07:17:12\t\t\n";
        let log = parse_log(body, LogFormat::AolTsv).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.skipped, 1);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse_log("", LogFormat::AolTsv).is_err());
        assert!(parse_log("AnonID\tQuery\tQueryTime\tItemRank\tClickURL\n", LogFormat::AolTsv).is_err());
        assert!(parse_log("", LogFormat::SimpleCsv).is_err());
        assert!(ingest_log(Path::new("/nonexistent.tsv"), LogFormat::AolTsv).is_err());
    }

    #[test]
    fn csv_rows() {
        let body = "user_id,query,iso_timestamp\nu1,\"cheap, flights\",2024-01-01T10:00:00Z\nu2,weather,2024-01-01 11:00:00\nu3,broken\nu4,x,not-a-time\n";
        let log = parse_log(body, LogFormat::SimpleCsv).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.skipped, 2);
        assert_eq!(log.records[0].query, "cheap, flights");
        let back = parse_log(&log.to_simple_csv(), LogFormat::SimpleCsv).unwrap();
        assert_eq!(back.records, log.records);
    }

    #[test]
    fn aol_round_trip() {
        let log = parse_log(AOL, LogFormat::AolTsv).unwrap();
        let back = parse_log(&log.to_aol_tsv(), LogFormat::AolTsv).unwrap();
        assert_eq!(back.records, log.records);
    }

    #[test]
    fn split_two_thirds() {
        let log = parse_log(AOL, LogFormat::AolTsv).unwrap();
        let split = split_train_test(&log);
        // 142 and 217 have two queries each
        assert_eq!(split.dropped_users, 2);
        assert_eq!(split.profiles.len(), 2);
        assert_eq!(split.test.len(), 2);
        let p993 = split.profiles.iter().find(|p| p.user_id.0 == "993").unwrap();
        let texts: Vec<_> = p993.past_queries().iter().map(|q| q.raw_text.as_str()).collect();
        assert_eq!(texts, ["car insurance quotes", "diabetes diet"]);
    }

    #[test]
    fn split_nine_queries() {
        let records = (0..9)
            .map(|i| LogRecord {
                user_id: "u".into(),
                query: format!("query {i}"),
                timestamp: 100 - i,
            })
            .collect();
        let split = split_train_test(&QueryLog {
            records,
            format: LogFormat::SimpleCsv,
            skipped: 0,
        });
        assert_eq!(split.profiles[0].len(), 6);
        assert_eq!(split.test.len(), 3);
        // chronological, not file order
        assert_eq!(split.profiles[0].past_queries()[0].raw_text, "query 8");
    }

    #[test]
    fn training_sizes() {
        assert_eq!(training_size(3), 2);
        assert_eq!(training_size(9), 6);
        assert_eq!(training_size(10), 7);
        assert_eq!(training_size(731), 487);
    }
}
