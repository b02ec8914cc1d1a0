//! Log ingestion: record parsing, sessionization and absorbing labels.
//!
//! # Record format
//!
//! One event per line, tab-separated, in this order:
//!
//! | # | field               | notes                                             |
//! |---|---------------------|---------------------------------------------------|
//! | 0 | `customer_id`       | opaque, non-empty                                 |
//! | 1 | `device_id`         | opaque, non-empty                                 |
//! | 2 | `timestamp_ms`      | unsigned integer, milliseconds since epoch        |
//! | 3 | `utterance`         | normalized on read; empty after normalization is malformed |
//! | 4 | `interpretation_key`| `domain|intent|slot:value|...`, may be empty      |
//! | 5 | `feedback_kind`     | empty, `none`, `interjection` or `implicit_failure` |
//! | 6 | `feedback_detail`   | free text, e.g. the interjecting intent           |
//! | 7 | `response_category` | e.g. `ok`, `no-match`, `unsupported`, `exception` |
//!
//! Fields use backslash escapes (`\\`, `\t`, `\n`, `\r`). Lines starting
//! with `#` and blank lines are ignored, as are fields past the eighth.
//! Fields 5 to 7 may be omitted entirely.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpretation::InterpretationKey;
use crate::text::normalize;
use crate::tsv;

pub const DEFAULT_GAP_MS: u64 = 45_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read event stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("session gap must be positive")]
    ZeroGap,
    #[error("sessions file line {line}: {source}")]
    Sessions {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackKind {
    None,
    ExplicitInterjection,
    ImplicitFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub kind: FeedbackKind,
    pub detail: Option<String>,
}

impl FeedbackSignal {
    pub fn none() -> Self {
        Self {
            kind: FeedbackKind::None,
            detail: None,
        }
    }

    pub fn interjection(intent: impl Into<String>) -> Self {
        Self {
            kind: FeedbackKind::ExplicitInterjection,
            detail: Some(intent.into()),
        }
    }

    pub fn implicit_failure(category: impl Into<String>) -> Self {
        Self {
            kind: FeedbackKind::ImplicitFailure,
            detail: Some(category.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbsorbingLabel {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceEvent {
    pub customer_id: String,
    pub device_id: String,
    pub timestamp_ms: u64,
    pub utterance: String,
    /// `None` when the record carried no interpretation.
    pub interpretation: Option<InterpretationKey>,
    pub feedback: FeedbackSignal,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub customer_id: String,
    pub device_id: String,
    pub start_ms: u64,
}

/// A gap-delimited run of events before interjection stripping and labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSession {
    pub key: SessionKey,
    pub events: Vec<UtteranceEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub key: SessionKey,
    pub events: Vec<UtteranceEvent>,
    pub label: AbsorbingLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestConfig {
    pub gap_ms: u64,
    /// Intents that count as explicit interjections (the set J).
    pub interjections: BTreeSet<String>,
    /// Response categories that mark a turn as an implicit failure.
    pub failure_categories: BTreeSet<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            gap_ms: DEFAULT_GAP_MS,
            interjections: ["StopIntent", "CancelIntent"].map(String::from).into(),
            failure_categories: ["unsupported", "no-match", "exception"]
                .map(String::from)
                .into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub events: usize,
    pub malformed_lines: usize,
    pub duplicate_timestamps: usize,
    pub raw_sessions: usize,
    pub sessions: usize,
    pub discarded_empty: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedEvents {
    pub events: Vec<UtteranceEvent>,
    pub skipped: usize,
}

/// Parses a record stream. Malformed lines are logged and skipped; only a
/// failing reader is fatal.
pub fn parse_events<R: BufRead>(input: R, config: &IngestConfig) -> Result<ParsedEvents, IngestError> {
    let mut parsed = ParsedEvents::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if !tsv::is_data_line(&line) {
            continue;
        }
        match parse_record(&line, config) {
            Ok(event) => parsed.events.push(event),
            Err(reason) => {
                warn!("skipping malformed record on line {}: {reason}", idx + 1);
                parsed.skipped += 1;
            }
        }
    }
    Ok(parsed)
}

pub fn parse_record(line: &str, config: &IngestConfig) -> Result<UtteranceEvent, String> {
    let fields = tsv::split_fields(line);
    if fields.len() < 5 {
        return Err(format!("expected at least 5 fields, got {}", fields.len()));
    }
    let customer_id = fields[0].trim();
    let device_id = fields[1].trim();
    if customer_id.is_empty() || device_id.is_empty() {
        return Err("empty customer or device id".into());
    }
    let timestamp_ms: u64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad timestamp `{}`", fields[2]))?;
    let utterance = normalize(&fields[3]);
    if utterance.is_empty() {
        return Err("empty utterance".into());
    }
    let interpretation = match fields[4].trim() {
        "" => None,
        raw => Some(raw.parse::<InterpretationKey>().map_err(|e| e.to_string())?),
    };
    let field = |i: usize| fields.get(i).map(|s| s.trim()).unwrap_or("");
    let feedback = classify_feedback(
        interpretation.as_ref(),
        field(5),
        field(6),
        field(7),
        config,
    )?;
    Ok(UtteranceEvent {
        customer_id: customer_id.to_string(),
        device_id: device_id.to_string(),
        timestamp_ms,
        utterance,
        interpretation,
        feedback,
    })
}

/// Rule-based feedback labeling.
///
/// An event is an explicit interjection when its intent is in J, or when the
/// log tags it as one with a detail naming a member of J. It is an implicit
/// failure when tagged so or when the response category is a failure
/// category.
fn classify_feedback(
    interpretation: Option<&InterpretationKey>,
    kind: &str,
    detail: &str,
    response_category: &str,
    config: &IngestConfig,
) -> Result<FeedbackSignal, String> {
    if let Some(intent) = interpretation
        .map(InterpretationKey::intent)
        .filter(|i| config.interjections.contains(*i))
    {
        return Ok(FeedbackSignal::interjection(intent));
    }
    match kind {
        "" | "none" => {}
        "interjection" => {
            if config.interjections.contains(detail) {
                return Ok(FeedbackSignal::interjection(detail));
            }
            warn!("interjection tag with detail `{detail}` outside the interjection set; ignored");
        }
        "implicit_failure" => {
            let detail = if detail.is_empty() { response_category } else { detail };
            return Ok(FeedbackSignal::implicit_failure(detail));
        }
        other => return Err(format!("unknown feedback kind `{other}`")),
    }
    if config.failure_categories.contains(response_category) {
        return Ok(FeedbackSignal::implicit_failure(response_category));
    }
    Ok(FeedbackSignal::none())
}

/// Formats an event as one record line (without trailing newline).
pub fn format_record(event: &UtteranceEvent, response_category: &str) -> String {
    let (kind, detail) = match event.feedback.kind {
        FeedbackKind::None => ("none", ""),
        FeedbackKind::ExplicitInterjection => {
            ("interjection", event.feedback.detail.as_deref().unwrap_or(""))
        }
        FeedbackKind::ImplicitFailure => (
            "implicit_failure",
            event.feedback.detail.as_deref().unwrap_or(""),
        ),
    };
    let interpretation = event
        .interpretation
        .as_ref()
        .map(InterpretationKey::as_str)
        .unwrap_or("");
    [
        event.customer_id.as_str(),
        event.device_id.as_str(),
        &event.timestamp_ms.to_string(),
        event.utterance.as_str(),
        interpretation,
        kind,
        detail,
        response_category,
    ]
    .iter()
    .map(|f| tsv::escape(f))
    .collect::<Vec<_>>()
    .join("\t")
}

/// Groups events by `(customer, device)`, orders each group by timestamp and
/// cuts a new session wherever the gap to the previous event exceeds
/// `gap_ms`. A gap of exactly `gap_ms` stays in the same session.
///
/// Events sharing a timestamp within a group are kept in input order.
pub fn sessionize(events: &[UtteranceEvent], gap_ms: u64) -> Result<(Vec<RawSession>, usize), IngestError> {
    if gap_ms == 0 {
        return Err(IngestError::ZeroGap);
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&UtteranceEvent>> = BTreeMap::new();
    for event in events {
        groups
            .entry((event.customer_id.as_str(), event.device_id.as_str()))
            .or_default()
            .push(event);
    }
    let per_group: Vec<(Vec<RawSession>, usize)> = groups
        .into_par_iter()
        .map(|(_, mut group)| {
            // stable: equal timestamps keep input order
            group.sort_by_key(|e| e.timestamp_ms);
            let mut duplicates = 0;
            let mut sessions: Vec<RawSession> = Vec::new();
            let mut prev: Option<u64> = None;
            for event in group {
                match prev {
                    Some(p) if event.timestamp_ms - p <= gap_ms => {
                        if event.timestamp_ms == p {
                            duplicates += 1;
                        }
                        sessions
                            .last_mut()
                            .expect("session open")
                            .events
                            .push(event.clone());
                    }
                    _ => sessions.push(RawSession {
                        key: SessionKey {
                            customer_id: event.customer_id.clone(),
                            device_id: event.device_id.clone(),
                            start_ms: event.timestamp_ms,
                        },
                        events: vec![event.clone()],
                    }),
                }
                prev = Some(event.timestamp_ms);
            }
            (sessions, duplicates)
        })
        .collect();
    let mut sessions = Vec::new();
    let mut duplicates = 0;
    for (group_sessions, dups) in per_group {
        sessions.extend(group_sessions);
        duplicates += dups;
    }
    if duplicates > 0 {
        warn!("{duplicates} events share a (customer, device, timestamp) triple with a predecessor");
    }
    Ok((sessions, duplicates))
}

/// Strips interjections and attaches the absorbing label. Returns `None`
/// when nothing is left (a session made only of interjections).
pub fn finalize_session(raw: RawSession) -> Option<Session> {
    let RawSession { key, mut events } = raw;
    let last = events.len().checked_sub(1)?;
    let terminal_interjection = events[last].feedback.kind == FeedbackKind::ExplicitInterjection;
    events.retain(|e| e.feedback.kind != FeedbackKind::ExplicitInterjection);
    let terminal_failure = events
        .last()
        .is_some_and(|e| e.feedback.kind == FeedbackKind::ImplicitFailure);
    let label = if terminal_interjection || terminal_failure {
        AbsorbingLabel::Failure
    } else {
        AbsorbingLabel::Success
    };
    if events.is_empty() {
        return None;
    }
    Some(Session { key, events, label })
}

/// Full ingest: parse, sessionize, finalize.
pub fn ingest<R: BufRead>(input: R, config: &IngestConfig) -> Result<(Vec<Session>, IngestStats), IngestError> {
    let parsed = parse_events(input, config)?;
    let (sessions, stats) = build_sessions(&parsed.events, config)?;
    Ok((
        sessions,
        IngestStats {
            malformed_lines: parsed.skipped,
            ..stats
        },
    ))
}

pub fn build_sessions(
    events: &[UtteranceEvent],
    config: &IngestConfig,
) -> Result<(Vec<Session>, IngestStats), IngestError> {
    let (raw, duplicate_timestamps) = sessionize(events, config.gap_ms)?;
    let raw_sessions = raw.len();
    let sessions: Vec<Session> = raw.into_iter().filter_map(finalize_session).collect();
    let stats = IngestStats {
        events: events.len(),
        malformed_lines: 0,
        duplicate_timestamps,
        raw_sessions,
        sessions: sessions.len(),
        discarded_empty: raw_sessions - sessions.len(),
    };
    Ok((sessions, stats))
}

/// Sessions are stored as JSON lines, one session per line.
pub fn write_sessions<W: Write>(sessions: &[Session], mut out: W) -> std::io::Result<()> {
    for session in sessions {
        serde_json::to_writer(&mut out, session)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sessions<R: BufRead>(input: R) -> Result<Vec<Session>, IngestError> {
    let mut sessions = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session = serde_json::from_str(&line).map_err(|source| IngestError::Sessions {
            line: idx + 1,
            source,
        })?;
        sessions.push(session);
    }
    Ok(sessions)
}
