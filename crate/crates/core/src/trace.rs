//! Append-only episode traces, their JSONL persistence, offline replay of
//! the retrieval threshold controller, and failure attribution.
//!
//! Trace file layout, one JSON object per line:
//!
//! ```text
//! {"episode":{"scenario_id":..,"method_id":..,"seed":..}}
//! {"turn":1,"signals":{..},"flags":{..},"action":{"id":..,"kind":..,"payload":{..}},"outcome":{"valid":..,"observations":{..}},"note":..}
//! ...
//! {"success":..,"metrics":{..}}
//! ```
//!
//! A file may hold any number of such blocks back to back.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calendar::{self, CalendarScenario, Field};
use crate::decision::{Action, ActionKind, Signal, SignalSource};
use crate::error::{Error, Result};
use crate::signal::blend_composite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub valid: bool,
    #[serde(default)]
    pub observations: BTreeMap<String, Value>,
}

impl Outcome {
    pub fn new(valid: bool) -> Self {
        Outcome {
            valid,
            observations: BTreeMap::new(),
        }
    }

    pub fn observe(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.observations.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub turn: u32,
    pub signals: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub action: Action,
    pub outcome: Outcome,
    #[serde(default)]
    pub note: String,
}

impl TurnRecord {
    pub fn observation(&self, key: &str) -> Option<&Value> {
        self.outcome.observations.get(key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub scenario_id: String,
    pub method_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scenario_id: String,
    pub method_id: String,
    pub seed: u64,
    pub turns: Vec<TurnRecord>,
    pub success: bool,
    pub metrics: BTreeMap<String, f64>,
}

impl EpisodeTrace {
    pub fn new(scenario_id: impl Into<String>, method_id: impl Into<String>, seed: u64) -> Self {
        EpisodeTrace {
            scenario_id: scenario_id.into(),
            method_id: method_id.into(),
            seed,
            turns: Vec::new(),
            success: false,
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn header(&self) -> EpisodeHeader {
        EpisodeHeader {
            scenario_id: self.scenario_id.clone(),
            method_id: self.method_id.clone(),
            seed: self.seed,
        }
    }
}

/// Appends `record`, which must carry the next turn number.
pub fn append_turn(mut trace: EpisodeTrace, record: TurnRecord) -> Result<EpisodeTrace> {
    push_turn(&mut trace, record)?;
    Ok(trace)
}

pub fn push_turn(trace: &mut EpisodeTrace, record: TurnRecord) -> Result<()> {
    let expected = trace.turns.last().map_or(1, |t| t.turn + 1);
    if record.turn != expected {
        return Err(Error::Sequencing {
            expected,
            got: record.turn,
        });
    }
    for (name, v) in &record.signals {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::InconsistentState(format!(
                "turn {}: signal `{name}` = {v} outside [0, 1]",
                record.turn
            )));
        }
    }
    trace.turns.push(record);
    Ok(())
}

// ─── JSONL persistence ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    episode: EpisodeHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminatorLine {
    success: bool,
    metrics: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TraceLine {
    Header(HeaderLine),
    Terminator(TerminatorLine),
    Turn(Box<TurnRecord>),
}

pub fn write_trace<W: Write>(out: &mut W, trace: &EpisodeTrace) -> Result<()> {
    serde_json::to_writer(&mut *out, &HeaderLine { episode: trace.header() })?;
    out.write_all(b"\n")?;
    for t in &trace.turns {
        serde_json::to_writer(&mut *out, t)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut *out,
        &TerminatorLine {
            success: trace.success,
            metrics: trace.metrics.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn traces_to_string(traces: &[EpisodeTrace]) -> Result<String> {
    let mut buf = Vec::new();
    for t in traces {
        write_trace(&mut buf, t)?;
    }
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn save_traces(path: impl AsRef<Path>, traces: &[EpisodeTrace]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    for t in traces {
        write_trace(&mut out, t)?;
    }
    out.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<EpisodeTrace>> {
    let mut traces = Vec::new();
    let mut open: Option<EpisodeTrace> = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("trace line {}: {e}", lineno + 1)))?;
        match parsed {
            TraceLine::Header(h) => {
                if open.is_some() {
                    return Err(Error::Data(format!(
                        "trace line {}: episode header before previous terminator",
                        lineno + 1
                    )));
                }
                open = Some(EpisodeTrace::new(h.episode.scenario_id, h.episode.method_id, h.episode.seed));
            }
            TraceLine::Turn(t) => {
                let trace = open
                    .as_mut()
                    .ok_or_else(|| Error::Data(format!("trace line {}: turn outside an episode", lineno + 1)))?;
                push_turn(trace, *t)?;
            }
            TraceLine::Terminator(term) => {
                let mut trace = open
                    .take()
                    .ok_or_else(|| Error::Data(format!("trace line {}: terminator without header", lineno + 1)))?;
                trace.success = term.success;
                trace.metrics = term.metrics;
                traces.push(trace);
            }
        }
    }
    if let Some(t) = open {
        return Err(Error::Data(format!("episode `{}` has no terminator", t.scenario_id)));
    }
    Ok(traces)
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<EpisodeTrace>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_traces(BufReader::new(file))
}

// ─── Retrieval replay ────────────────────────────────────────────────────────

/// Signal and flag names written by retrieval episodes.
pub mod retrieval_keys {
    pub const P_DENSE: &str = "p_dense";
    pub const P_LLM: &str = "p_llm";
    pub const P_HAT: &str = "p_hat";
    pub const GOLD_PRESENT: &str = "gold_present";
    pub const EXECUTED: &str = "executed";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub success: bool,
    /// Round at which the controller stopped (0-based).
    pub rounds: u32,
    pub actions: Vec<ActionKind>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RoundSignals {
    pub p_dense: f64,
    pub p_llm: f64,
    pub gold_present: bool,
}

pub(crate) fn round_signals(trace: &EpisodeTrace, budget: u32) -> Result<Vec<RoundSignals>> {
    let incomplete = |message: String| Error::IncompleteTrace {
        scenario_id: trace.scenario_id.clone(),
        message,
    };
    (0..=budget)
        .map(|round| {
            let rec = trace
                .turns
                .get(round as usize)
                .ok_or_else(|| incomplete(format!("no record for round {round}")))?;
            let get = |name: &str| {
                rec.signals
                    .get(name)
                    .copied()
                    .ok_or_else(|| incomplete(format!("round {round} lacks `{name}`")))
            };
            Ok(RoundSignals {
                p_dense: get(retrieval_keys::P_DENSE)?,
                p_llm: get(retrieval_keys::P_LLM)?,
                gold_present: *rec
                    .flags
                    .get(retrieval_keys::GOLD_PRESENT)
                    .ok_or_else(|| incomplete(format!("round {round} lacks `gold_present`")))?,
            })
        })
        .collect()
}

pub(crate) fn composite(p_dense: f64, p_llm: f64, alpha: f64) -> Result<f64> {
    let d = Signal::new(retrieval_keys::P_DENSE, p_dense, SignalSource::Oracle)?;
    let l = Signal::new(retrieval_keys::P_LLM, p_llm, SignalSource::Oracle)?;
    Ok(blend_composite(&d, &l, alpha)?.value)
}

/// Re-runs the composite threshold controller over logged per-round signals.
/// Nothing is retrieved; success is read from the logged gold flags.
pub fn replay_threshold_controller(
    trace: &EpisodeTrace,
    tau: f64,
    alpha: f64,
    budget: u32,
) -> Result<ReplayOutcome> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
    }
    if !tau.is_finite() {
        return Err(Error::config("tau", "must be finite"));
    }
    let rounds = round_signals(trace, budget)?;
    let mut actions = Vec::new();
    for (round, r) in rounds.iter().enumerate() {
        let p = composite(r.p_dense, r.p_llm, alpha)?;
        if p >= tau || round as u32 == budget {
            actions.push(ActionKind::Stop);
            return Ok(ReplayOutcome {
                success: r.gold_present,
                rounds: round as u32,
                actions,
            });
        }
        actions.push(ActionKind::Expand);
    }
    unreachable!("loop always stops at the budget round")
}

// ─── Attribution ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionCategory {
    SignalEstimation,
    DecisionPolicy,
    QuestionGeneration,
    Execution,
    EarlyStopDense,
    EarlyStopLlm,
    EarlyStopBoth,
    CorpusGap,
}

impl AttributionCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SignalEstimation => "signal_estimation",
            Self::DecisionPolicy => "decision_policy",
            Self::QuestionGeneration => "question_generation",
            Self::Execution => "execution",
            Self::EarlyStopDense => "early_stop_dense",
            Self::EarlyStopLlm => "early_stop_llm",
            Self::EarlyStopBoth => "early_stop_both",
            Self::CorpusGap => "corpus_gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub turn: u32,
    pub field: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionLabel {
    pub category: AttributionCategory,
    pub evidence: Vec<Evidence>,
}

fn evidence(turn: u32, field: &str, value: impl Into<Value>) -> Evidence {
    Evidence {
        turn,
        field: field.to_string(),
        value: value.into(),
    }
}

/// Classifies a failed retrieval episode by the signals at its stop round.
///
/// A component is "high" when it is at or above `tau` on its own. If the
/// controller ran to budget and the gold answer never showed up, the
/// failure is a corpus gap.
pub fn attribute_retrieval_failure(trace: &EpisodeTrace, tau: f64, budget: u32) -> Result<AttributionLabel> {
    if trace.success {
        return Err(Error::Precondition(format!(
            "episode `{}` succeeded; nothing to attribute",
            trace.scenario_id
        )));
    }
    let executed: Vec<&TurnRecord> = trace
        .turns
        .iter()
        .filter(|t| {
            t.observation(retrieval_keys::EXECUTED)
                .and_then(Value::as_bool)
                .unwrap_or(true)
        })
        .collect();
    let stop = *executed.last().ok_or_else(|| Error::IncompleteTrace {
        scenario_id: trace.scenario_id.clone(),
        message: "no executed rounds".to_string(),
    })?;
    let stop_round = stop.turn - 1;
    let gold_seen = executed
        .iter()
        .any(|t| t.flags.get(retrieval_keys::GOLD_PRESENT).copied().unwrap_or(false));

    if stop_round == budget && !gold_seen {
        let ev = executed
            .iter()
            .map(|t| evidence(t.turn, retrieval_keys::GOLD_PRESENT, false))
            .collect();
        return Ok(AttributionLabel {
            category: AttributionCategory::CorpusGap,
            evidence: ev,
        });
    }

    let get = |name: &str| {
        stop.signals.get(name).copied().ok_or_else(|| Error::IncompleteTrace {
            scenario_id: trace.scenario_id.clone(),
            message: format!("stop round lacks `{name}`"),
        })
    };
    let d = get(retrieval_keys::P_DENSE)?;
    let l = get(retrieval_keys::P_LLM)?;
    let category = match (d >= tau, l >= tau) {
        (true, true) => AttributionCategory::EarlyStopBoth,
        (true, false) => AttributionCategory::EarlyStopDense,
        (false, true) => AttributionCategory::EarlyStopLlm,
        // Neither alone clears tau: blame the larger one.
        (false, false) if d >= l => AttributionCategory::EarlyStopDense,
        (false, false) => AttributionCategory::EarlyStopLlm,
    };
    Ok(AttributionLabel {
        category,
        evidence: vec![
            evidence(stop.turn, retrieval_keys::P_DENSE, d),
            evidence(stop.turn, retrieval_keys::P_LLM, l),
            evidence(stop.turn, retrieval_keys::GOLD_PRESENT, false),
        ],
    })
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

/// Walks a failed calendar episode and names the first broken component,
/// checking the estimator, then the policy, then question generation, and
/// blaming execution when all three are consistent.
pub fn attribute_calendar_failure(trace: &EpisodeTrace, scenario: &CalendarScenario) -> Result<AttributionLabel> {
    if trace.success {
        return Err(Error::Precondition(format!(
            "episode `{}` succeeded; nothing to attribute",
            trace.scenario_id
        )));
    }

    // Ground truth: fields with an explicit value in the conversation so far.
    let mut present: BTreeSet<Field> = calendar::explicit_fields_in_query(scenario);
    let mut estimation = Vec::new();
    for t in &trace.turns {
        let report = t
            .observation("report")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::IncompleteTrace {
                scenario_id: trace.scenario_id.clone(),
                message: format!("turn {} has no extractor report", t.turn),
            })?;
        for field in Field::ALL {
            let logged = report.get(field.as_str()).and_then(Value::as_bool).unwrap_or(false);
            if logged != present.contains(&field) {
                estimation.push(evidence(t.turn, field.as_str(), logged));
            }
        }
        for f in string_list(t.observation("answer_fields")) {
            if let Some(field) = Field::parse(&f) {
                present.insert(field);
            }
        }
    }
    if !estimation.is_empty() {
        return Ok(AttributionLabel {
            category: AttributionCategory::SignalEstimation,
            evidence: estimation,
        });
    }

    let mut policy = Vec::new();
    let mut last: Option<(ActionKind, bool)> = None;
    for t in &trace.turns {
        let p_suff = t.signals.get("p_suff").copied().ok_or_else(|| Error::IncompleteTrace {
            scenario_id: trace.scenario_id.clone(),
            message: format!("turn {} lacks p_suff", t.turn),
        })?;
        let expected = calendar::dc_policy(p_suff, last.map(|l| l.0), last.map(|l| l.1));
        if expected != t.action.kind {
            policy.push(evidence(t.turn, "action", t.action.kind.as_str()));
        }
        last = Some((t.action.kind, t.outcome.valid));
    }
    if !policy.is_empty() {
        return Ok(AttributionLabel {
            category: AttributionCategory::DecisionPolicy,
            evidence: policy,
        });
    }

    let mut generation = Vec::new();
    for t in trace.turns.iter().filter(|t| t.action.kind == ActionKind::Clarify) {
        let missing = string_list(t.observation("missing"));
        for target in string_list(t.observation("targets")) {
            if !missing.contains(&target) {
                generation.push(evidence(t.turn, "targets", target));
            }
        }
    }
    if !generation.is_empty() {
        return Ok(AttributionLabel {
            category: AttributionCategory::QuestionGeneration,
            evidence: generation,
        });
    }

    let ev = trace
        .turns
        .iter()
        .filter(|t| t.action.kind == ActionKind::Execute && !t.outcome.valid)
        .map(|t| evidence(t.turn, "valid", false))
        .collect();
    Ok(AttributionLabel {
        category: AttributionCategory::Execution,
        evidence: ev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(turn: u32) -> TurnRecord {
        TurnRecord {
            turn,
            signals: BTreeMap::new(),
            flags: BTreeMap::new(),
            action: Action::of_kind(ActionKind::Clarify),
            outcome: Outcome::new(true),
            note: String::new(),
        }
    }

    #[test]
    fn append_sequencing() {
        let t = EpisodeTrace::new("s", "m", 0);
        let t = append_turn(t, rec(1)).unwrap();
        assert_eq!(t.turns.len(), 1);
        let err = append_turn(t.clone(), rec(3)).unwrap_err();
        assert!(matches!(err, Error::Sequencing { expected: 2, got: 3 }));
        let t2 = append_turn(t.clone(), rec(2)).unwrap();
        assert_eq!(t2.turns.len(), 2);
        assert_eq!(t2.turns[0], t.turns[0]);
    }

    fn retrieval_trace(rounds: &[(f64, f64, bool)], stop_round: usize) -> EpisodeTrace {
        let mut t = EpisodeTrace::new("medium/q1", "dc_composite", 0);
        for (i, &(d, l, g)) in rounds.iter().enumerate() {
            let kind = if i < stop_round { ActionKind::Expand } else { ActionKind::Stop };
            let mut r = rec(i as u32 + 1);
            r.signals.insert("p_dense".into(), d);
            r.signals.insert("p_llm".into(), l);
            r.flags.insert("gold_present".into(), g);
            r.action = Action::of_kind(kind);
            r.outcome = Outcome::new(true).observe("executed", i <= stop_round);
            push_turn(&mut t, r).unwrap();
        }
        t.success = rounds[stop_round].2;
        t
    }

    #[test]
    fn replay_basic() {
        let t = retrieval_trace(&[(0.2, 0.1, false), (0.9, 1.0, true), (0.9, 1.0, true)], 1);
        let r = replay_threshold_controller(&t, 0.8, 0.4, 2).unwrap();
        assert_eq!(r.rounds, 1);
        assert!(r.success);
        assert_eq!(r.actions, vec![ActionKind::Expand, ActionKind::Stop]);
        let r0 = replay_threshold_controller(&t, 0.0, 0.4, 2).unwrap();
        assert_eq!(r0.rounds, 0);
        assert!(!r0.success);
    }

    #[test]
    fn replay_incomplete() {
        let mut t = retrieval_trace(&[(0.2, 0.1, false), (0.9, 1.0, true)], 1);
        assert!(matches!(
            replay_threshold_controller(&t, 0.8, 0.4, 2),
            Err(Error::IncompleteTrace { .. })
        ));
        t.turns[0].signals.remove("p_llm");
        assert!(matches!(
            replay_threshold_controller(&t, 0.8, 0.4, 1),
            Err(Error::IncompleteTrace { .. })
        ));
    }

    #[test]
    fn retrieval_attribution_examples() {
        let both = retrieval_trace(&[(0.9, 0.9, false), (0.9, 0.9, false), (0.9, 0.9, true)], 0);
        assert_eq!(
            attribute_retrieval_failure(&both, 0.8, 2).unwrap().category,
            AttributionCategory::EarlyStopBoth
        );
        let gap = retrieval_trace(&[(0.3, 0.0, false), (0.3, 0.0, false), (0.4, 0.0, false)], 2);
        assert_eq!(
            attribute_retrieval_failure(&gap, 0.8, 2).unwrap().category,
            AttributionCategory::CorpusGap
        );
        let dense = retrieval_trace(&[(0.95, 0.2, false), (0.9, 0.2, false), (0.9, 0.2, false)], 0);
        assert_eq!(
            attribute_retrieval_failure(&dense, 0.8, 2).unwrap().category,
            AttributionCategory::EarlyStopDense
        );
        let llm = retrieval_trace(&[(0.1, 0.9, false), (0.1, 0.9, false), (0.1, 0.9, false)], 0);
        assert_eq!(
            attribute_retrieval_failure(&llm, 0.8, 2).unwrap().category,
            AttributionCategory::EarlyStopLlm
        );
        let ok = retrieval_trace(&[(0.9, 0.9, true), (0.9, 0.9, true), (0.9, 0.9, true)], 0);
        assert!(matches!(
            attribute_retrieval_failure(&ok, 0.8, 2),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_layout() {
        let mut t = retrieval_trace(&[(0.2, 0.1, false), (0.9, 1.0, true), (0.9, 1.0, true)], 1);
        t.metrics.insert("stop_round".into(), 1.0);
        let text = traces_to_string(&[t.clone(), t.clone()]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[0].starts_with(r#"{"episode":{"scenario_id":"medium/q1","method_id":"dc_composite","seed":0}}"#));
        assert!(lines[1].starts_with(r#"{"turn":1,"signals":{"p_dense":0.2,"p_llm":0.1},"flags":{"gold_present":false},"action":{"id":"expand","kind":"expand","payload":{}},"outcome":{"valid":true,"observations":{"executed":true}}"#));
        assert_eq!(lines[4], r#"{"success":true,"metrics":{"stop_round":1.0}}"#);
        let back = read_traces(text.as_bytes()).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
    }

    #[test]
    fn reader_rejects_broken_files() {
        let text = r#"{"turn":1,"signals":{},"flags":{},"action":{"id":"a","kind":"stop"},"outcome":{"valid":true}}"#;
        assert!(read_traces(text.as_bytes()).is_err());
        let text = r#"{"episode":{"scenario_id":"s","method_id":"m","seed":1}}"#;
        assert!(read_traces(text.as_bytes()).is_err());
    }
}
