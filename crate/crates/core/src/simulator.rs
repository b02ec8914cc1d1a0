//! Synthetic session corpora with planted reformulation patterns.
//!
//! A [`WorldSpec`] describes an utterance inventory, how often each
//! utterance succeeds, and what users do after a failure: rephrase into
//! another utterance, interject with "stop", or give up. Each simulated user
//! draws from its own seeded stream, so generation is reproducible and
//! parallel across users.
//!
//! Replaying a world with a rewrite table applied changes only which
//! utterance the system processes; user behaviour still follows what the
//! user said. [`expected_defect_rate`] gives the matching closed form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, format_record, AbsorbingLabel, FeedbackSignal, IngestConfig, Session, UtteranceEvent};
use crate::interpretation::InterpretationKey;
use crate::rewrite_miner::RewriteTable;

pub const STOP_UTTERANCE: &str = "stop";
pub const STOP_INTERPRETATION: &str = "Global|StopIntent";
pub const OK_RESPONSE: &str = "ok";
pub const FAILED_RESPONSE: &str = "no-match";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse world spec: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedUtterance {
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub text: String,
    pub interpretation: String,
    pub success_prob: f64,
    /// Relative frequency as a session opener; zero means the utterance is
    /// only reached by rephrasing.
    #[serde(default)]
    pub weight: f64,
    /// After a failure: probability of rephrasing.
    #[serde(default)]
    pub rephrase_prob: f64,
    /// After a failure: probability of saying "stop". The remaining mass
    /// abandons the session.
    #[serde(default)]
    pub interject_prob: f64,
    #[serde(default)]
    pub rephrase_to: Vec<WeightedUtterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    /// Inclusive range of the delay between turns of one session.
    pub turn_delay_ms: [u64; 2],
    /// Inclusive range of the idle time between sessions of one user.
    pub session_gap_ms: [u64; 2],
}

impl Default for TimeModel {
    fn default() -> Self {
        Self {
            turn_delay_ms: [2_000, 30_000],
            session_gap_ms: [60_000, 3_600_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub population: usize,
    pub sessions_per_user: usize,
    pub max_turns: usize,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub time: TimeModel,
    pub utterances: Vec<UtteranceSpec>,
    #[serde(default)]
    pub planted: Vec<PlantedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRate {
    pub source: String,
    pub target: String,
    pub source_success: f64,
    pub target_success: f64,
    pub rephrase_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<PlantedRate>,
}

fn is_prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl WorldSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let spec: WorldSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world spec serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.population == 0 || self.sessions_per_user == 0 {
            return bad("population and sessions_per_user must be positive".into());
        }
        if self.max_turns == 0 {
            return bad("max_turns must be positive".into());
        }
        let [dmin, dmax] = self.time.turn_delay_ms;
        let [gmin, gmax] = self.time.session_gap_ms;
        if dmin == 0 || dmin > dmax || gmin > gmax {
            return bad("time ranges must be non-empty and turn delays positive".into());
        }
        if dmax >= gmin {
            return bad(format!(
                "turn delays (up to {dmax} ms) must be shorter than session gaps (from {gmin} ms)"
            ));
        }
        let mut texts = BTreeSet::new();
        for u in &self.utterances {
            if !texts.insert(u.text.as_str()) {
                return bad(format!("duplicate utterance `{}`", u.text));
            }
            if crate::text::normalize(&u.text) != u.text || u.text.is_empty() {
                return bad(format!("utterance `{}` is not normalized", u.text));
            }
            if u.text == STOP_UTTERANCE {
                return bad("`stop` is reserved for interjections".into());
            }
            if let Err(e) = u.interpretation.parse::<InterpretationKey>() {
                return bad(format!("utterance `{}`: {e}", u.text));
            }
            if ![u.success_prob, u.rephrase_prob, u.interject_prob].iter().all(|p| is_prob(*p)) {
                return bad(format!("utterance `{}` has a probability outside [0, 1]", u.text));
            }
            if u.rephrase_prob + u.interject_prob > 1.0 + 1e-12 {
                return bad(format!("utterance `{}`: rephrase + interject exceeds 1", u.text));
            }
            if !(u.weight >= 0.0 && u.weight.is_finite()) {
                return bad(format!("utterance `{}` has a negative weight", u.text));
            }
            if u.rephrase_prob > 0.0 {
                let total: f64 = u.rephrase_to.iter().map(|r| r.weight).sum();
                if u.rephrase_to.iter().any(|r| r.weight.is_nan() || r.weight < 0.0) || total.is_nan() || total <= 0.0 {
                    return bad(format!("utterance `{}` rephrases but has no positive rephrase weights", u.text));
                }
            }
        }
        for u in &self.utterances {
            for r in &u.rephrase_to {
                if !texts.contains(r.text.as_str()) {
                    return bad(format!("`{}` rephrases into unknown `{}`", u.text, r.text));
                }
            }
        }
        if self.utterances.iter().map(|u| u.weight).sum::<f64>() <= 0.0 {
            return bad("no utterance can open a session".into());
        }
        for p in &self.planted {
            let Some(source) = self.utterance(&p.source) else {
                return bad(format!("planted source `{}` not in inventory", p.source));
            };
            let Some(target) = self.utterance(&p.target) else {
                return bad(format!("planted target `{}` not in inventory", p.target));
            };
            if !source.rephrase_to.iter().any(|r| r.text == p.target && r.weight > 0.0) {
                return bad(format!("`{}` never rephrases into `{}`", p.source, p.target));
            }
            if target.success_prob <= source.success_prob {
                return bad(format!("planted target `{}` is not more successful", p.target));
            }
        }
        Ok(())
    }

    pub fn utterance(&self, text: &str) -> Option<&UtteranceSpec> {
        self.utterances.iter().find(|u| u.text == text)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            pairs: self
                .planted
                .iter()
                .filter_map(|p| {
                    let s = self.utterance(&p.source)?;
                    let t = self.utterance(&p.target)?;
                    Some(PlantedRate {
                        source: p.source.clone(),
                        target: p.target.clone(),
                        source_success: s.success_prob,
                        target_success: t.success_prob,
                        rephrase_prob: s.rephrase_prob,
                    })
                })
                .collect(),
        }
    }

    pub fn total_sessions(&self) -> usize {
        self.population * self.sessions_per_user
    }
}

/// A generated log record together with the system response category.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub event: UtteranceEvent,
    pub response_category: String,
}

struct Compiled<'a> {
    spec: &'a WorldSpec,
    keys: Vec<InterpretationKey>,
    openers: Vec<(usize, f64)>,
    rephrase: Vec<Vec<(usize, f64)>>,
    rewrite: Vec<usize>,
    stop_key: InterpretationKey,
}

fn pick(rng: &mut ChaCha8Rng, choices: &[(usize, f64)]) -> usize {
    let total: f64 = choices.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in choices {
        if x < *w {
            return *i;
        }
        x -= w;
    }
    choices.last().expect("non-empty choices").0
}

impl<'a> Compiled<'a> {
    fn new(spec: &'a WorldSpec, table: Option<&RewriteTable>) -> Self {
        let index: HashMap<&str, usize> = spec
            .utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.text.as_str(), i))
            .collect();
        let keys = spec
            .utterances
            .iter()
            .map(|u| u.interpretation.parse().expect("validated"))
            .collect();
        let openers = spec
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.weight > 0.0)
            .map(|(i, u)| (i, u.weight))
            .collect();
        let rephrase = spec
            .utterances
            .iter()
            .map(|u| {
                u.rephrase_to
                    .iter()
                    .filter(|r| r.weight > 0.0)
                    .map(|r| (index[r.text.as_str()], r.weight))
                    .collect()
            })
            .collect();
        // a rewrite into an utterance outside the inventory leaves the
        // request unchanged
        let rewrite = (0..spec.utterances.len())
            .map(|i| {
                table
                    .and_then(|t| t.get(&spec.utterances[i].text))
                    .and_then(|c| index.get(c.target_utterance.as_str()).copied())
                    .unwrap_or(i)
            })
            .collect();
        Self {
            spec,
            keys,
            openers,
            rephrase,
            rewrite,
            stop_key: STOP_INTERPRETATION.parse().expect("valid key"),
        }
    }

    fn user(&self, seed: u64, user: usize) -> Vec<SimEvent> {
        let spec = self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        let customer_id = format!("cust-{user:05}");
        let device_id = format!("dev-{user:05}");
        let [dmin, dmax] = spec.time.turn_delay_ms;
        let [gmin, gmax] = spec.time.session_gap_ms;
        let mut now = spec.start_ms + rng.random_range(0..=gmax);
        let mut out = Vec::new();
        let mut emit = |now: u64, said: usize, processed: Option<usize>, ok: bool| {
            let (utterance, interpretation, feedback, category) = match processed {
                Some(p) => (
                    spec.utterances[said].text.clone(),
                    self.keys[p].clone(),
                    if ok {
                        FeedbackSignal::none()
                    } else {
                        FeedbackSignal::implicit_failure(FAILED_RESPONSE)
                    },
                    if ok { OK_RESPONSE } else { FAILED_RESPONSE },
                ),
                None => (
                    STOP_UTTERANCE.to_string(),
                    self.stop_key.clone(),
                    FeedbackSignal::interjection("StopIntent"),
                    OK_RESPONSE,
                ),
            };
            out.push(SimEvent {
                event: UtteranceEvent {
                    customer_id: customer_id.clone(),
                    device_id: device_id.clone(),
                    timestamp_ms: now,
                    utterance,
                    interpretation: Some(interpretation),
                    feedback,
                },
                response_category: category.to_string(),
            });
        };
        for session in 0..spec.sessions_per_user {
            if session > 0 {
                now += rng.random_range(gmin..=gmax);
            }
            let mut said = pick(&mut rng, &self.openers);
            for turn in 1..=spec.max_turns {
                if turn > 1 {
                    now += rng.random_range(dmin..=dmax);
                }
                let processed = self.rewrite[said];
                let ok = rng.random::<f64>() < spec.utterances[processed].success_prob;
                emit(now, said, Some(processed), ok);
                if ok || turn == spec.max_turns {
                    break;
                }
                let policy = &spec.utterances[said];
                let r = rng.random::<f64>();
                if r < policy.rephrase_prob {
                    said = pick(&mut rng, &self.rephrase[said]);
                } else {
                    if r < policy.rephrase_prob + policy.interject_prob {
                        now += rng.random_range(dmin..=dmax);
                        emit(now, said, None, true);
                    }
                    break;
                }
            }
        }
        out
    }
}

/// Generates the event log of a world. Users are independent streams
/// derived from `seed`; output is ordered by user, then time.
pub fn generate(spec: &WorldSpec, seed: u64) -> Result<(Vec<SimEvent>, GroundTruth), SimError> {
    spec.validate()?;
    Ok((simulate(spec, seed, None), spec.ground_truth()))
}

/// Re-runs a world with `table` applied at lookup time.
pub fn replay(spec: &WorldSpec, seed: u64, table: Option<&RewriteTable>) -> Result<Vec<SimEvent>, SimError> {
    spec.validate()?;
    Ok(simulate(spec, seed, table))
}

fn simulate(spec: &WorldSpec, seed: u64, table: Option<&RewriteTable>) -> Vec<SimEvent> {
    let compiled = Compiled::new(spec, table);
    let per_user: Vec<Vec<SimEvent>> = (0..spec.population)
        .into_par_iter()
        .map(|u| compiled.user(seed, u))
        .collect();
    per_user.into_iter().flatten().collect()
}

pub fn write_log<W: Write>(events: &[SimEvent], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "# customer_id\tdevice_id\ttimestamp_ms\tutterance\tinterpretation_key\tfeedback_kind\tfeedback_detail\tresponse_category"
    )?;
    for e in events {
        writeln!(out, "{}", format_record(&e.event, &e.response_category))?;
    }
    Ok(())
}

/// Fraction of sessions labeled failure.
pub fn defect_rate(sessions: &[Session]) -> f64 {
    if sessions.is_empty() {
        return 0.0;
    }
    let failed = sessions.iter().filter(|s| s.label == AbsorbingLabel::Failure).count();
    failed as f64 / sessions.len() as f64
}

/// Defect rate of a generated log, through the regular ingest path.
pub fn log_defect_rate(events: &[SimEvent], config: &IngestConfig) -> Result<f64, SimError> {
    let raw: Vec<UtteranceEvent> = events.iter().map(|e| e.event.clone()).collect();
    let (sessions, _) = ingest::build_sessions(&raw, config)?;
    Ok(defect_rate(&sessions))
}

/// Replays the world with `table` (or without, when `None`) and measures
/// the defect rate of the resulting log.
pub fn evaluate_defect_rate(
    spec: &WorldSpec,
    seed: u64,
    table: Option<&RewriteTable>,
    config: &IngestConfig,
) -> Result<f64, SimError> {
    log_defect_rate(&replay(spec, seed, table)?, config)
}

/// Closed-form probability that a session ends in failure.
pub fn expected_defect_rate(spec: &WorldSpec, table: Option<&RewriteTable>) -> f64 {
    let compiled = Compiled::new(spec, table);
    let n = spec.utterances.len();
    // fail[k][u]: failure probability when `u` is said at turn k (1-based)
    let mut next = vec![1.0; n];
    for turn in (1..=spec.max_turns).rev() {
        let mut current = vec![0.0; n];
        for (u, current_u) in current.iter_mut().enumerate() {
            let processed = compiled.rewrite[u];
            let p_fail = 1.0 - spec.utterances[processed].success_prob;
            let after_failure = if turn == spec.max_turns {
                1.0
            } else {
                let policy = &spec.utterances[u];
                let choices = &compiled.rephrase[u];
                let total: f64 = choices.iter().map(|(_, w)| w).sum();
                let rephrased: f64 = if total > 0.0 {
                    choices.iter().map(|(v, w)| w / total * next[*v]).sum()
                } else {
                    0.0
                };
                policy.rephrase_prob * rephrased + (1.0 - policy.rephrase_prob)
            };
            *current_u = p_fail * after_failure;
        }
        next = current;
    }
    let total: f64 = compiled.openers.iter().map(|(_, w)| w).sum();
    compiled.openers.iter().map(|(u, w)| w / total * next[*u]).sum()
}

/// Ready-made worlds for tests, benchmarks and the CLI.
pub mod presets {
    use super::*;

    const BROKEN: [(&str, &str); 8] = [
        ("maj and dragons", "imagine dragons"),
        ("shadow by lady gaga", "shallow by lady gaga"),
        ("rumer", "rumor by lee brice"),
        ("despicable meat", "despicable me"),
        ("babe shark", "baby shark"),
        ("island ninety point five", "island ninety eight point five"),
        ("a lever", "a lover"),
        ("bazzi angel", "beautiful by bazzi"),
    ];

    const BACKGROUND: [&str; 6] = [
        "pop music",
        "the weather channel",
        "jazz for dinner",
        "my workout playlist",
        "classical piano",
        "country hits",
    ];

    fn music(text: &str) -> String {
        format!("Music|PlayMusicIntent|ArtistName:{text}")
    }

    fn opener(text: String, success_prob: f64, weight: f64) -> UtteranceSpec {
        UtteranceSpec {
            interpretation: music(text.trim_start_matches("play ")),
            text,
            success_prob,
            weight,
            rephrase_prob: 0.0,
            interject_prob: 0.0,
            rephrase_to: Vec::new(),
        }
    }

    /// `planted` defective utterances (at most 8), each rephrased by most
    /// users into a working alternative, over a background of successful
    /// requests.
    pub fn planted_world(planted: usize, population: usize) -> WorldSpec {
        let mut utterances = Vec::new();
        let mut pairs = Vec::new();
        for (bad, good) in BROKEN.iter().take(planted) {
            let source = format!("play {bad}");
            let target = format!("play {good}");
            let mut s = opener(source.clone(), 0.05, 1.0);
            s.rephrase_prob = 0.7;
            s.interject_prob = 0.1;
            s.rephrase_to = vec![WeightedUtterance {
                text: target.clone(),
                weight: 1.0,
            }];
            utterances.push(s);
            utterances.push(opener(target.clone(), 0.9, 1.0));
            pairs.push(PlantedPair { source, target });
        }
        for name in BACKGROUND.iter().take(3) {
            utterances.push(opener(format!("play {name}"), 0.95, 2.0));
        }
        WorldSpec {
            population,
            sessions_per_user: 5,
            max_turns: 4,
            start_ms: 1_600_000_000_000,
            time: TimeModel::default(),
            utterances,
            planted: pairs,
        }
    }

    /// Equally good utterances that users sometimes rephrase between; there
    /// is nothing to fix.
    pub fn no_harm_world(population: usize) -> WorldSpec {
        let mut utterances: Vec<UtteranceSpec> = BACKGROUND
            .iter()
            .map(|name| opener(format!("play {name}"), 0.9, 1.0))
            .collect();
        let n = utterances.len();
        for i in 0..n {
            let alt = utterances[(i + 1) % n].text.clone();
            let u = &mut utterances[i];
            u.rephrase_prob = 0.5;
            u.interject_prob = 0.2;
            u.rephrase_to = vec![WeightedUtterance { text: alt, weight: 1.0 }];
        }
        WorldSpec {
            population,
            sessions_per_user: 5,
            max_turns: 4,
            start_ms: 1_600_000_000_000,
            time: TimeModel::default(),
            utterances,
            planted: Vec::new(),
        }
    }

    /// One utterance that always works.
    pub fn trivial_world(population: usize) -> WorldSpec {
        WorldSpec {
            population,
            sessions_per_user: 1,
            max_turns: 3,
            start_ms: 0,
            time: TimeModel::default(),
            utterances: vec![opener("play imagine dragons".into(), 1.0, 1.0)],
            planted: Vec::new(),
        }
    }
}

/// Counts sessions by length, handy for checking generated behaviour.
pub fn session_lengths(sessions: &[Session]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for s in sessions {
        *out.entry(s.events.len()).or_insert(0) += 1;
    }
    out
}
