//! Clarify-or-execute calendar booking.
//!
//! The language-model pieces of the original loop (field extractor,
//! question writer, event writer, user) are replaced by an oracle
//! extractor, templates, and seeded noise/drift. The control logic is the
//! three-branch rule in [`dc_policy`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{
    builtin_rules, Action, ActionKind, DecisionContext, DecisionRule, RuleParams, Signal, SignalSource,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::signal::{apply_noise, NoiseSpec};
use crate::trace::{push_turn, EpisodeTrace, Outcome, TurnRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Date,
    StartTime,
    DurationMin,
    Attendees,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Date, Field::StartTime, Field::DurationMin, Field::Attendees];

    /// Order in which fields are withheld as `k` grows, and in which an
    /// observed field is made vague.
    pub const OMISSION_ORDER: [Field; 4] = [Field::DurationMin, Field::Date, Field::StartTime, Field::Attendees];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Date => "date",
            Field::StartTime => "start_time",
            Field::DurationMin => "duration_min",
            Field::Attendees => "attendees",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.as_str() == s)
    }

    fn spoken(self) -> &'static str {
        match self {
            Field::Date => "date",
            Field::StartTime => "start time",
            Field::DurationMin => "duration in minutes",
            Field::Attendees => "attendees",
        }
    }

    fn vague_phrase(self) -> &'static str {
        match self {
            Field::Date => "Jack's usual slot",
            Field::StartTime => "Jack's usual time",
            Field::DurationMin => "the usual length",
            Field::Attendees => "the usual team",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFields {
    pub date: String,
    pub start_time: String,
    pub duration_min: u32,
    pub attendees: Vec<String>,
}

impl EventFields {
    pub fn base() -> Self {
        EventFields {
            date: "2026-02-17".into(),
            start_time: "11:30".into(),
            duration_min: 30,
            attendees: vec!["Jack".into()],
        }
    }

    /// The value of `field` as a user would state it.
    pub fn value_text(&self, field: Field) -> String {
        match field {
            Field::Date => self.date.clone(),
            Field::StartTime => self.start_time.clone(),
            Field::DurationMin => self.duration_min.to_string(),
            Field::Attendees => self.attendees.join(", "),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambiguity {
    Absent,
    Unresolvable,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VagueReference {
    pub field: Field,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarScenario {
    pub id: String,
    pub k: u8,
    pub ambiguity: Ambiguity,
    pub initial_query: String,
    pub private_facts: EventFields,
    pub withheld: Vec<Field>,
    /// Phrases the extractor must treat as unusable.
    #[serde(default)]
    pub vague: Vec<VagueReference>,
}

impl CalendarScenario {
    /// What the initial query mentions per field, explicit or vague.
    pub fn initial_mentions(&self) -> BTreeMap<Field, String> {
        let mut m = BTreeMap::new();
        for f in Field::ALL {
            if self.withheld.contains(&f) {
                continue;
            }
            let text = match self.vague.iter().find(|v| v.field == f) {
                Some(v) => v.phrase.clone(),
                None => self.private_facts.value_text(f),
            };
            m.insert(f, text);
        }
        m
    }

    fn is_vague(&self, field: Field, text: &str) -> bool {
        self.vague.iter().any(|v| v.field == field && v.phrase == text)
    }
}

fn compose_query(mentions: &BTreeMap<Field, String>) -> String {
    let mut q = String::from("Schedule a meeting");
    if let Some(a) = mentions.get(&Field::Attendees) {
        q.push_str(" with ");
        q.push_str(a);
    }
    if let Some(d) = mentions.get(&Field::Date) {
        q.push_str(" on ");
        q.push_str(d);
    }
    if let Some(t) = mentions.get(&Field::StartTime) {
        q.push_str(" at ");
        q.push_str(t);
    }
    if let Some(d) = mentions.get(&Field::DurationMin) {
        q.push_str(" for ");
        q.push_str(d);
        q.push_str(" minutes");
    }
    q.push('.');
    q
}

/// The 8 scenarios: k = 0..=4 withheld fields, absent or unresolvable for
/// 1 <= k <= 3.
pub fn generate_scenarios() -> Vec<CalendarScenario> {
    let facts = EventFields::base();
    let mut out = Vec::with_capacity(8);
    for k in 0u8..=4 {
        let withheld: Vec<Field> = Field::OMISSION_ORDER[..k as usize].to_vec();
        let variants: &[Ambiguity] = if k == 0 || k == 4 {
            &[Ambiguity::NotApplicable]
        } else {
            &[Ambiguity::Absent, Ambiguity::Unresolvable]
        };
        for &ambiguity in variants {
            let mut vague = Vec::new();
            if ambiguity == Ambiguity::Unresolvable {
                let field = Field::OMISSION_ORDER
                    .into_iter()
                    .find(|f| !withheld.contains(f))
                    .expect("k <= 3 leaves an observed field");
                vague.push(VagueReference {
                    field,
                    phrase: field.vague_phrase().to_string(),
                });
            }
            let id = match ambiguity {
                Ambiguity::NotApplicable => format!("k{k}"),
                Ambiguity::Absent => format!("k{k}_absent"),
                Ambiguity::Unresolvable => format!("k{k}_unresolvable"),
            };
            let mut s = CalendarScenario {
                id,
                k,
                ambiguity,
                initial_query: String::new(),
                private_facts: facts.clone(),
                withheld: withheld.clone(),
                vague,
            };
            s.initial_query = compose_query(&s.initial_mentions());
            out.push(s);
        }
    }
    out
}

pub fn find_scenario(id: &str) -> Option<CalendarScenario> {
    generate_scenarios().into_iter().find(|s| s.id == id)
}

// ─── Conversation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Assistant,
}

/// One message with its structured content: the fields a user message
/// mentions (verbatim text), or the fields an assistant question targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub mentions: BTreeMap<Field, String>,
    #[serde(default)]
    pub targets: Vec<Field>,
}

pub type Conversation = Vec<Message>;

pub fn initial_conversation(scenario: &CalendarScenario) -> Conversation {
    vec![Message {
        speaker: Speaker::User,
        text: scenario.initial_query.clone(),
        mentions: scenario.initial_mentions(),
        targets: Vec::new(),
    }]
}

/// Fields stated explicitly (not vaguely) in the initial query.
pub fn explicit_fields_in_query(scenario: &CalendarScenario) -> BTreeSet<Field> {
    scenario
        .initial_mentions()
        .into_iter()
        .filter(|(f, text)| !scenario.is_vague(*f, text))
        .map(|(f, _)| f)
        .collect()
}

// ─── Extraction ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub fields: BTreeMap<Field, bool>,
}

impl ExtractorReport {
    pub fn empty() -> Self {
        ExtractorReport {
            fields: Field::ALL.into_iter().map(|f| (f, false)).collect(),
        }
    }

    pub fn confirmed(&self, field: Field) -> bool {
        self.fields.get(&field).copied().unwrap_or(false)
    }

    pub fn p_suff(&self) -> f64 {
        Field::ALL.iter().filter(|f| self.confirmed(**f)).count() as f64 / 4.0
    }

    pub fn missing(&self) -> Vec<Field> {
        Field::ALL.into_iter().filter(|f| !self.confirmed(*f)).collect()
    }

    pub fn confirmed_fields(&self) -> Vec<Field> {
        Field::ALL.into_iter().filter(|f| self.confirmed(*f)).collect()
    }

    /// Field-wise OR: once confirmed, a field stays confirmed.
    pub fn lock(&self, prior: &ExtractorReport) -> ExtractorReport {
        ExtractorReport {
            fields: Field::ALL
                .into_iter()
                .map(|f| (f, self.confirmed(f) || prior.confirmed(f)))
                .collect(),
        }
    }

    fn as_string_map(&self) -> BTreeMap<String, bool> {
        self.fields.iter().map(|(f, v)| (f.as_str().to_string(), *v)).collect()
    }

    fn from_string_map(m: &BTreeMap<String, bool>) -> Self {
        ExtractorReport {
            fields: Field::ALL
                .into_iter()
                .map(|f| (f, m.get(f.as_str()).copied().unwrap_or(false)))
                .collect(),
        }
    }

    pub fn to_signal(&self) -> Signal {
        let mut s = Signal::new("p_suff", self.p_suff(), SignalSource::Oracle).expect("p_suff in [0, 1]");
        for (f, v) in &self.fields {
            s = s.with_detail(f.as_str(), *v);
        }
        s
    }
}

fn scan(conversation: &[Message], scenario: &CalendarScenario) -> ExtractorReport {
    let mut r = ExtractorReport::empty();
    for m in conversation.iter().filter(|m| m.speaker == Speaker::User) {
        for (f, text) in &m.mentions {
            if !text.trim().is_empty() && !scenario.is_vague(*f, text) {
                r.fields.insert(*f, true);
            }
        }
    }
    r
}

/// Marks each field present iff the conversation gives an explicit, usable
/// value for it, then ORs with `prior`.
pub fn oracle_extract(
    conversation: &[Message],
    scenario: &CalendarScenario,
    prior: &ExtractorReport,
) -> ExtractorReport {
    scan(conversation, scenario).lock(prior)
}

/// Oracle extraction with seeded report noise applied before the lock.
pub fn noisy_extract(
    conversation: &[Message],
    scenario: &CalendarScenario,
    prior: &ExtractorReport,
    noise: &NoiseSpec,
) -> ExtractorReport {
    let raw = scan(conversation, scenario);
    if noise.is_identity() {
        return raw.lock(prior);
    }
    let noisy = apply_noise(&raw.as_string_map(), noise);
    ExtractorReport::from_string_map(&noisy).lock(prior)
}

// ─── Policy ──────────────────────────────────────────────────────────────────

/// The three-branch rule: never execute right after a failed execution;
/// execute once every field is confirmed; otherwise clarify.
pub fn dc_policy(p_suff: f64, last_action: Option<ActionKind>, last_valid: Option<bool>) -> ActionKind {
    if last_action == Some(ActionKind::Execute) && last_valid == Some(false) {
        ActionKind::Clarify
    } else if p_suff == 1.0 {
        ActionKind::Execute
    } else {
        ActionKind::Clarify
    }
}

/// Registry form of [`dc_policy`]. Reads signal `p_suff` (per-field detail
/// gives the clarify targets) and flag `last_execute_failed`.
pub struct CalendarDcRule;

impl DecisionRule for CalendarDcRule {
    fn offered(&self, _: &RuleParams, _: &DecisionContext) -> Vec<Action> {
        vec![
            Action::of_kind(ActionKind::Execute),
            Action::of_kind(ActionKind::Clarify),
        ]
    }

    fn choose(&self, _: &RuleParams, ctx: &DecisionContext) -> Result<Action> {
        let p = ctx.signal("p_suff")?;
        let (last, valid) = if ctx.flag("last_execute_failed") {
            (Some(ActionKind::Execute), Some(false))
        } else {
            (None, None)
        };
        Ok(match dc_policy(p.value, last, valid) {
            ActionKind::Execute => Action::of_kind(ActionKind::Execute),
            _ => {
                let targets: Vec<&str> = Field::ALL
                    .into_iter()
                    .filter(|f| !p.detail.get(f.as_str()).and_then(|v| v.as_bool()).unwrap_or(false))
                    .map(Field::as_str)
                    .collect();
                Action::of_kind(ActionKind::Clarify).with("targets", targets)
            }
        })
    }
}

// ─── Question generation and user simulation ────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    Targeted,
    Drifting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub targets: Vec<Field>,
}

fn spoken_list(fields: &[Field]) -> String {
    let words: Vec<&str> = fields.iter().map(|f| f.spoken()).collect();
    match words.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// One question covering `missing`. In drifting mode, with probability
/// `drift_rate`, one missing target is swapped for an already confirmed
/// field, so the question asks about the wrong thing.
pub fn generate_question(
    missing: &[Field],
    confirmed: &[Field],
    mode: QuestionMode,
    drift_rate: f64,
    seed: u64,
) -> Result<Question> {
    if missing.is_empty() {
        return Err(Error::Precondition("question needs at least one missing field".into()));
    }
    if !(0.0..=1.0).contains(&drift_rate) {
        return Err(Error::config("drift_rate", format!("{drift_rate} outside [0, 1]")));
    }
    let mut targets: Vec<Field> = missing.to_vec();
    if mode == QuestionMode::Drifting && !confirmed.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.gen::<f64>() < drift_rate {
            let slot = rng.gen_range(0..targets.len());
            let wrong = *confirmed.choose(&mut rng).expect("non-empty");
            targets[slot] = wrong;
            targets.sort();
            targets.dedup();
        }
    }
    Ok(Question {
        text: format!("Could you tell me the {}?", spoken_list(&targets)),
        targets,
    })
}

/// A confirmation question for when every field is already confirmed but
/// the last execution failed.
pub fn confirmation_question() -> Question {
    Question {
        text: "Can you confirm the meeting details are correct?".into(),
        targets: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub values: BTreeMap<Field, String>,
}

/// States the true value of exactly the targeted fields.
pub fn simulate_user(targets: &[Field], facts: &EventFields) -> Answer {
    if targets.is_empty() {
        return Answer {
            text: "Yes.".into(),
            values: BTreeMap::new(),
        };
    }
    let mut values = BTreeMap::new();
    let mut parts = Vec::new();
    for &f in targets {
        let v = facts.value_text(f);
        parts.push(match f {
            Field::Date => format!("The date is {v}."),
            Field::StartTime => format!("It starts at {v}."),
            Field::DurationMin => format!("The meeting lasts for {v} minutes."),
            Field::Attendees => format!("The attendees are {v}."),
        });
        values.insert(f, v);
    }
    Answer {
        text: parts.join(" "),
        values,
    }
}

// ─── Execution ───────────────────────────────────────────────────────────────

/// Event as written by the executor; `None` is a null field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftEvent {
    pub date: Option<String>,
    pub start_time: Option<String>,
    pub duration_min: Option<String>,
    pub attendees: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub event: DraftEvent,
    pub valid: bool,
}

fn split_names(text: &str) -> Vec<String> {
    text.split(',')
        .flat_map(|p| p.split(" and "))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fills each confirmed field with its most recent stated value, copying
/// vague text literally, and leaves unconfirmed fields null.
pub fn execute_event(report: &ExtractorReport, conversation: &[Message], facts: &EventFields) -> Execution {
    let latest = |f: Field| -> Option<String> {
        if !report.confirmed(f) {
            return None;
        }
        conversation
            .iter()
            .rev()
            .filter(|m| m.speaker == Speaker::User)
            .find_map(|m| m.mentions.get(&f).cloned())
    };
    let event = DraftEvent {
        date: latest(Field::Date),
        start_time: latest(Field::StartTime),
        duration_min: latest(Field::DurationMin),
        attendees: latest(Field::Attendees).map(|t| split_names(&t)),
    };
    let valid = event.date.as_deref() == Some(facts.date.as_str())
        && event.start_time.as_deref() == Some(facts.start_time.as_str())
        && event
            .duration_min
            .as_deref()
            .and_then(|d| d.trim().parse::<u32>().ok())
            == Some(facts.duration_min)
        && event.attendees.as_ref() == Some(&facts.attendees);
    Execution { event, valid }
}

// ─── Episodes ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarMethod {
    Dc,
    Retry,
}

impl CalendarMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CalendarMethod::Dc => "dc",
            CalendarMethod::Retry => "retry",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalendarConfig {
    pub budget: u32,
    pub question_mode: QuestionMode,
    pub drift_rate: f64,
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
}

impl Default for CalendarConfig {
    fn default() -> Self {
        CalendarConfig {
            budget: 6,
            question_mode: QuestionMode::Targeted,
            drift_rate: 0.0,
            false_negative_rate: 0.0,
            false_positive_rate: 0.0,
        }
    }
}

impl CalendarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::config("budget", "must be at least 1"));
        }
        for (name, v) in [
            ("drift_rate", self.drift_rate),
            ("false_negative_rate", self.false_negative_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn fields_json(fields: &[Field]) -> serde_json::Value {
    fields.iter().map(|f| f.as_str()).collect::<Vec<_>>().into()
}

/// Runs one episode. `dc` extracts, decides and acts each turn; `retry`
/// executes every turn. The episode ends on a valid execution or when the
/// budget runs out.
pub fn run_calendar_episode(
    method: CalendarMethod,
    scenario: &CalendarScenario,
    config: &CalendarConfig,
    seed: u64,
) -> Result<EpisodeTrace> {
    config.validate()?;
    let mut trace = EpisodeTrace::new(scenario.id.clone(), method.as_str(), seed);
    let mut conversation = initial_conversation(scenario);
    let mut prior = ExtractorReport::empty();
    let mut last_failed = false;
    let mut history: Vec<String> = Vec::new();
    let (mut wasted, mut clarifications) = (0u32, 0u32);
    let mut first_action: Option<ActionKind> = None;

    for turn in 1..=config.budget {
        let noise = NoiseSpec {
            false_negative_rate: config.false_negative_rate,
            false_positive_rate: config.false_positive_rate,
            seed: derive_seed(seed, &[u64::from(turn), 1]),
        };
        let report = match method {
            CalendarMethod::Dc => noisy_extract(&conversation, scenario, &prior, &noise),
            CalendarMethod::Retry => oracle_extract(&conversation, scenario, &ExtractorReport::empty()),
        };
        let p_suff = report.p_suff();
        let ctx = DecisionContext::new()
            .with_signal(report.to_signal())
            .with_flag("last_execute_failed", last_failed)
            .with_counter("turn", u64::from(turn - 1))
            .with_counter("budget", u64::from(config.budget))
            .with_history(history.clone());
        ctx.validate()?;
        let action = match method {
            CalendarMethod::Dc => builtin_rules().decide("calendar_dc", &RuleParams::new(), &ctx)?.chosen,
            CalendarMethod::Retry => Action::of_kind(ActionKind::Execute),
        };
        first_action.get_or_insert(action.kind);

        let missing = report.missing();
        let mut outcome;
        match action.kind {
            ActionKind::Execute => {
                let exec = execute_event(&report, &conversation, &scenario.private_facts);
                if !exec.valid {
                    wasted += 1;
                }
                last_failed = !exec.valid;
                outcome = Outcome::new(exec.valid).observe("event", serde_json::to_value(&exec.event)?);
            }
            _ => {
                clarifications += 1;
                let question = if missing.is_empty() {
                    confirmation_question()
                } else {
                    generate_question(
                        &missing,
                        &report.confirmed_fields(),
                        config.question_mode,
                        config.drift_rate,
                        derive_seed(seed, &[u64::from(turn), 2]),
                    )?
                };
                let answer = simulate_user(&question.targets, &scenario.private_facts);
                conversation.push(Message {
                    speaker: Speaker::Assistant,
                    text: question.text.clone(),
                    mentions: BTreeMap::new(),
                    targets: question.targets.clone(),
                });
                conversation.push(Message {
                    speaker: Speaker::User,
                    text: answer.text.clone(),
                    mentions: answer.values.clone(),
                    targets: Vec::new(),
                });
                last_failed = false;
                let answered: Vec<Field> = answer.values.keys().copied().collect();
                outcome = Outcome::new(true)
                    .observe("targets", fields_json(&question.targets))
                    .observe("question", question.text)
                    .observe("answer", answer.text)
                    .observe("answer_fields", fields_json(&answered));
            }
        }
        outcome = outcome
            .observe("report", serde_json::to_value(report.as_string_map())?)
            .observe("missing", fields_json(&missing));
        let valid = outcome.valid;
        history.push(format!("{}:{}", action.kind, if valid { "ok" } else { "invalid" }));
        push_turn(
            &mut trace,
            TurnRecord {
                turn,
                signals: BTreeMap::from([("p_suff".to_string(), p_suff)]),
                flags: ctx.flags.clone(),
                action: action.clone(),
                outcome,
                note: String::new(),
            },
        )?;
        prior = report;
        if action.kind == ActionKind::Execute && valid {
            trace.success = true;
            break;
        }
    }

    let optimal_first = if scenario.k == 0 {
        ActionKind::Execute
    } else {
        ActionKind::Clarify
    };
    trace.metrics = BTreeMap::from([
        ("k".to_string(), f64::from(scenario.k)),
        ("turns".to_string(), trace.turns.len() as f64),
        ("wasted".to_string(), f64::from(wasted)),
        ("clarifications".to_string(), f64::from(clarifications)),
        (
            "first_action_optimal".to_string(),
            if first_action == Some(optimal_first) { 1.0 } else { 0.0 },
        ),
    ]);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalendarMetrics {
    pub success_rate: f64,
    pub first_action_optimality: f64,
    pub wasted_executions: f64,
    pub clarifications: f64,
    pub avg_turns: f64,
}

/// Per-run averages over a set of calendar traces.
pub fn calendar_metrics(traces: &[EpisodeTrace]) -> Result<CalendarMetrics> {
    if traces.is_empty() {
        return Err(Error::Precondition("no traces to aggregate".into()));
    }
    let n = traces.len() as f64;
    let mean = |name: &str| traces.iter().map(|t| t.metric(name).unwrap_or(0.0)).sum::<f64>() / n;
    Ok(CalendarMetrics {
        success_rate: traces.iter().filter(|t| t.success).count() as f64 / n,
        first_action_optimality: mean("first_action_optimal"),
        wasted_executions: mean("wasted"),
        clarifications: mean("clarifications"),
        avg_turns: mean("turns"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(id: &str) -> CalendarScenario {
        find_scenario(id).unwrap()
    }

    #[test]
    fn scenario_table() {
        let s = generate_scenarios();
        assert_eq!(s.len(), 8);
        let q: Vec<&str> = s.iter().map(|s| s.initial_query.as_str()).collect();
        assert_eq!(
            q,
            [
                "Schedule a meeting with Jack on 2026-02-17 at 11:30 for 30 minutes.",
                "Schedule a meeting with Jack on 2026-02-17 at 11:30.",
                "Schedule a meeting with Jack on Jack's usual slot at 11:30.",
                "Schedule a meeting with Jack at 11:30.",
                "Schedule a meeting with Jack at Jack's usual time.",
                "Schedule a meeting with Jack.",
                "Schedule a meeting with the usual team.",
                "Schedule a meeting.",
            ]
        );
        for sc in &s {
            assert_eq!(sc.withheld.len(), sc.k as usize);
            assert_eq!(sc.ambiguity == Ambiguity::NotApplicable, sc.k == 0 || sc.k == 4);
        }
    }

    #[test]
    fn extraction_examples() {
        let s = scenario("k1_absent");
        let conv = initial_conversation(&s);
        let r = oracle_extract(&conv, &s, &ExtractorReport::empty());
        assert_eq!(r.missing(), vec![Field::DurationMin]);
        assert_eq!(r.p_suff(), 0.75);

        let mut conv2 = conv.clone();
        let ans = simulate_user(&[Field::DurationMin], &s.private_facts);
        assert_eq!(ans.text, "The meeting lasts for 30 minutes.");
        conv2.push(Message {
            speaker: Speaker::User,
            text: ans.text,
            mentions: ans.values,
            targets: vec![],
        });
        assert_eq!(oracle_extract(&conv2, &s, &r).p_suff(), 1.0);

        // lock
        let mut prior = ExtractorReport::empty();
        prior.fields.insert(Field::Date, true);
        let s4 = scenario("k4");
        let r = oracle_extract(&initial_conversation(&s4), &s4, &prior);
        assert!(r.confirmed(Field::Date));
    }

    #[test]
    fn vague_reference_is_unconfirmed() {
        let s = scenario("k1_unresolvable");
        let r = oracle_extract(&initial_conversation(&s), &s, &ExtractorReport::empty());
        assert_eq!(r.missing(), vec![Field::Date, Field::DurationMin]);
    }

    #[test]
    fn policy_box() {
        assert_eq!(dc_policy(1.0, None, None), ActionKind::Execute);
        assert_eq!(dc_policy(0.75, Some(ActionKind::Clarify), Some(true)), ActionKind::Clarify);
        assert_eq!(dc_policy(1.0, Some(ActionKind::Execute), Some(false)), ActionKind::Clarify);
    }

    #[test]
    fn question_generation() {
        let q = generate_question(&[Field::DurationMin], &[], QuestionMode::Targeted, 0.0, 1).unwrap();
        assert_eq!(q.targets, vec![Field::DurationMin]);
        let q = generate_question(&[Field::DurationMin], &[Field::Date], QuestionMode::Drifting, 1.0, 1).unwrap();
        assert!(q.targets.contains(&Field::Date));
        assert!(!q.targets.contains(&Field::DurationMin));
        let q = generate_question(&Field::ALL, &[], QuestionMode::Targeted, 0.0, 1).unwrap();
        assert_eq!(q.targets.len(), 4);
        assert!(q.text.ends_with('?'));
        assert!(generate_question(&[], &[], QuestionMode::Targeted, 0.0, 1).is_err());
    }

    #[test]
    fn user_simulator() {
        let facts = EventFields::base();
        assert!(simulate_user(&[Field::DurationMin], &facts).text.contains("30 minutes"));
        let a = simulate_user(&[Field::Date], &facts);
        assert!(a.text.contains("2026-02-17"));
        assert_eq!(a.values.len(), 1);
        assert!(simulate_user(&[], &facts).values.is_empty());
    }

    #[test]
    fn execution_examples() {
        let facts = EventFields::base();
        let s = scenario("k0");
        let conv = initial_conversation(&s);
        let r = oracle_extract(&conv, &s, &ExtractorReport::empty());
        assert!(execute_event(&r, &conv, &facts).valid);

        let s = scenario("k1_absent");
        let conv = initial_conversation(&s);
        let r = oracle_extract(&conv, &s, &ExtractorReport::empty());
        let e = execute_event(&r, &conv, &facts);
        assert_eq!(e.event.duration_min, None);
        assert!(!e.valid);

        let s = scenario("k3_unresolvable");
        let conv = initial_conversation(&s);
        let mut r = oracle_extract(&conv, &s, &ExtractorReport::empty());
        r.fields.insert(Field::Attendees, true);
        let e = execute_event(&r, &conv, &facts);
        assert_eq!(e.event.attendees, Some(vec!["the usual team".to_string()]));
        assert!(!e.valid);
    }

    #[test]
    fn episode_examples() {
        let cfg = CalendarConfig::default();
        let t = run_calendar_episode(CalendarMethod::Dc, &scenario("k0"), &cfg, 1).unwrap();
        assert!(t.success);
        assert_eq!(t.turns.len(), 1);

        let t = run_calendar_episode(CalendarMethod::Retry, &scenario("k1_absent"), &cfg, 1).unwrap();
        assert!(!t.success);
        assert_eq!(t.metric("turns"), Some(6.0));
        assert_eq!(t.metric("wasted"), Some(6.0));

        let t = run_calendar_episode(CalendarMethod::Dc, &scenario("k2_absent"), &cfg, 1).unwrap();
        assert!(t.success);
        assert_eq!(t.metric("turns"), Some(2.0));
        assert_eq!(t.metric("wasted"), Some(0.0));
        assert_eq!(t.metric("clarifications"), Some(1.0));
    }

    #[test]
    fn metrics_examples() {
        let cfg = CalendarConfig::default();
        let s = scenario("k2_absent");
        let runs: Vec<_> = (0..10)
            .map(|i| run_calendar_episode(CalendarMethod::Dc, &s, &cfg, i).unwrap())
            .collect();
        let m = calendar_metrics(&runs).unwrap();
        assert_eq!(m.success_rate, 1.0);
        assert_eq!(m.avg_turns, 2.0);

        let r = run_calendar_episode(CalendarMethod::Retry, &scenario("k1_absent"), &cfg, 0).unwrap();
        assert_eq!(calendar_metrics(&[r]).unwrap().first_action_optimality, 0.0);
        let d = run_calendar_episode(CalendarMethod::Dc, &scenario("k0"), &cfg, 0).unwrap();
        assert_eq!(calendar_metrics(&[d]).unwrap().first_action_optimality, 1.0);
        assert!(calendar_metrics(&[]).is_err());
    }
}
