//! Read-mostly lookup over the published rewrite table.
//!
//! The active table is an immutable snapshot behind an [`ArcSwapOption`]:
//! readers load it once per request and never block, a reload parses the new
//! file completely before publishing it. Every response names the version of
//! the snapshot it was answered from.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use arc_swap::ArcSwapOption;
use log::{error, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewrite_miner::{RewriteTable, TableError};
use crate::text::normalize;

pub const NO_TABLE_VERSION: &str = "none";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot open table {path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("table {path} is invalid: {source}")]
    Parse { path: String, source: TableError },
    #[error("utterance is empty after normalization")]
    EmptyUtterance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupRequest {
    utterance: String,
}

impl LookupRequest {
    pub fn new(raw: &str) -> Result<Self, ServiceError> {
        let utterance = normalize(raw);
        if utterance.is_empty() {
            return Err(ServiceError::EmptyUtterance);
        }
        Ok(Self { utterance })
    }

    pub fn utterance(&self) -> &str {
        &self.utterance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Rewrite { target: String, score: f64 },
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupResponse {
    #[serde(flatten)]
    pub decision: Decision,
    pub table_version: String,
    pub latency_us: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

struct Snapshot {
    version: String,
    rewrites: HashMap<String, (String, f64)>,
}

impl Snapshot {
    fn from_table(table: &RewriteTable) -> Self {
        Self {
            version: table.version(),
            rewrites: table
                .entries()
                .map(|c| (c.source_utterance.clone(), (c.target_utterance.clone(), c.score)))
                .collect(),
        }
    }
}

pub struct RewriteService {
    active: ArcSwapOption<Snapshot>,
    enabled: AtomicBool,
}

impl Default for RewriteService {
    fn default() -> Self {
        Self::new()
    }
}

impl RewriteService {
    pub fn new() -> Self {
        Self {
            active: ArcSwapOption::empty(),
            enabled: AtomicBool::new(true),
        }
    }

    pub fn with_table(table: &RewriteTable) -> Self {
        let service = Self::new();
        service.publish(table);
        service
    }

    /// Answers from a single snapshot. Never fails: anything unexpected
    /// degrades to [`Decision::PassThrough`].
    pub fn lookup(&self, request: &LookupRequest) -> LookupResponse {
        let started = Instant::now();
        let snapshot = self.active.load_full();
        let enabled = self.enabled.load(Ordering::Acquire);
        let (decision, table_version, warning) = match snapshot.as_deref() {
            None => (
                Decision::PassThrough,
                NO_TABLE_VERSION.to_string(),
                Some("no rewrite table loaded".to_string()),
            ),
            Some(snap) => {
                let decision = match snap.rewrites.get(request.utterance()) {
                    Some((target, score)) if enabled && target != request.utterance() => Decision::Rewrite {
                        target: target.clone(),
                        score: *score,
                    },
                    _ => Decision::PassThrough,
                };
                (decision, snap.version.clone(), None)
            }
        };
        LookupResponse {
            decision,
            table_version,
            latency_us: started.elapsed().as_micros() as u64,
            warning,
        }
    }

    /// Lookup on raw text; empty input passes through.
    pub fn lookup_raw(&self, raw: &str) -> LookupResponse {
        match LookupRequest::new(raw) {
            Ok(request) => self.lookup(&request),
            Err(e) => LookupResponse {
                decision: Decision::PassThrough,
                table_version: self.version(),
                latency_us: 0,
                warning: Some(e.to_string()),
            },
        }
    }

    /// Publishes an in-memory table and returns its version.
    pub fn publish(&self, table: &RewriteTable) -> String {
        let snapshot = Snapshot::from_table(table);
        let version = snapshot.version.clone();
        self.active.store(Some(Arc::new(snapshot)));
        version
    }

    /// Parses `path` and swaps it in. On failure the current table stays.
    pub fn reload(&self, path: &Path) -> Result<String, ServiceError> {
        let display = path.display().to_string();
        let parsed = File::open(path)
            .map_err(|source| ServiceError::Open {
                path: display.clone(),
                source,
            })
            .and_then(|f| {
                RewriteTable::read_tsv(BufReader::new(f)).map_err(|source| ServiceError::Parse {
                    path: display.clone(),
                    source,
                })
            });
        match parsed {
            Ok(table) => {
                let version = self.publish(&table);
                info!("loaded rewrite table {display} ({} entries, version {version})", table.len());
                Ok(version)
            }
            Err(e) => {
                error!("reload failed, keeping version {}: {e}", self.version());
                Err(e)
            }
        }
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.enabled.store(enabled, Ordering::Release);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Acquire)
    }

    pub fn version(&self) -> String {
        self.active
            .load()
            .as_ref()
            .map(|s| s.version.clone())
            .unwrap_or_else(|| NO_TABLE_VERSION.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewrite_miner::{Provenance, RewriteCandidate};

    fn shark_table() -> RewriteTable {
        RewriteTable::from_candidates(
            [RewriteCandidate {
                source_utterance: "play babe shark".into(),
                target_utterance: "play baby shark".into(),
                score: 0.8,
                support: 10,
                mined_at: 1,
            }],
            Provenance::default(),
        )
    }

    #[test]
    fn hit_and_miss() {
        let service = RewriteService::with_table(&shark_table());
        let hit = service.lookup_raw("Play  Babe Shark");
        assert_eq!(
            hit.decision,
            Decision::Rewrite {
                target: "play baby shark".into(),
                score: 0.8
            }
        );
        assert_eq!(hit.table_version, shark_table().version());
        assert_eq!(service.lookup_raw("play something else").decision, Decision::PassThrough);
    }

    #[test]
    fn no_table_fails_open() {
        let service = RewriteService::new();
        let r = service.lookup_raw("play babe shark");
        assert_eq!(r.decision, Decision::PassThrough);
        assert!(r.warning.is_some());
        assert_eq!(r.table_version, NO_TABLE_VERSION);
        assert_eq!(service.lookup_raw("   ").decision, Decision::PassThrough);
    }

    #[test]
    fn empty_table_passes_everything() {
        let service = RewriteService::with_table(&RewriteTable::default());
        assert_eq!(service.lookup_raw("play babe shark").decision, Decision::PassThrough);
    }

    #[test]
    fn disable_and_enable() {
        let service = RewriteService::with_table(&shark_table());
        service.set_enabled(false);
        assert_eq!(service.lookup_raw("play babe shark").decision, Decision::PassThrough);
        service.set_enabled(true);
        assert!(matches!(service.lookup_raw("play babe shark").decision, Decision::Rewrite { .. }));
    }

    #[test]
    fn corrupt_reload_keeps_old_version() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("v1.tsv");
        std::fs::write(&good, shark_table().to_bytes()).unwrap();
        let service = RewriteService::new();
        let v1 = service.reload(&good).unwrap();
        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "a\ta\tnot-a-number\n").unwrap();
        assert!(matches!(service.reload(&bad), Err(ServiceError::Parse { .. })));
        assert!(service.reload(&dir.path().join("missing.tsv")).is_err());
        assert_eq!(service.version(), v1);
    }

    #[test]
    fn response_serializes_flat() {
        let service = RewriteService::with_table(&shark_table());
        let json = serde_json::to_value(service.lookup_raw("play babe shark")).unwrap();
        assert_eq!(json["decision"], "rewrite");
        assert_eq!(json["target"], "play baby shark");
        assert!(json["table_version"].is_string());
    }
}
