//! Stop-or-expand control over a BM25 top-k passage set.
//!
//! One fixed ranking per question is cut at k = 3, 6, 9, so the round sets
//! nest. Each round carries a dense similarity signal and a judge signal;
//! the controller stops once the method's signal reaches `tau`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{
    builtin_rules, unit_param, Action, ActionKind, DecisionContext, DecisionRule, RuleParams, Signal, SignalSource,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::signal::{blend_composite, normalize_linear};
use crate::trace::{push_turn, replay_threshold_controller, retrieval_keys as keys, EpisodeTrace, Outcome, TurnRecord};

pub const K_SCHEDULE: [usize; 3] = [3, 6, 9];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    /// The question whose annotated passage this is, if any.
    #[serde(default, rename = "question_id", skip_serializing_if = "Option::is_none")]
    pub source_question_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Easy,
    Medium,
    Hard,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Easy, Bucket::Medium, Bucket::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Easy => "easy",
            Bucket::Medium => "medium",
            Bucket::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Bucket> {
        Bucket::ALL.into_iter().find(|b| b.as_str() == s)
    }

    pub fn from_rank(rank: usize) -> Bucket {
        match rank {
            0..=3 => Bucket::Easy,
            4..=9 => Bucket::Medium,
            _ => Bucket::Hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub annotated_passage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

// ─── BM25 ────────────────────────────────────────────────────────────────────

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    passages: Vec<Passage>,
    doc_len: Vec<f64>,
    avgdl: f64,
    postings: HashMap<String, Vec<(usize, u32)>>,
    by_id: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(corpus: Vec<Passage>, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("corpus", "empty corpus"));
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(Error::config("bm25", format!("need k1 >= 0 and b in [0, 1], got {params:?}")));
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut by_id = HashMap::with_capacity(corpus.len());
        for (i, p) in corpus.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate passage id `{}`", p.id)));
            }
            let toks = tokenize(&p.text);
            doc_len.push(toks.len() as f64);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i, n));
            }
        }
        let avgdl = doc_len.iter().sum::<f64>() / doc_len.len() as f64;
        Ok(Bm25Index {
            params,
            passages: corpus,
            doc_len,
            avgdl,
            postings,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.passages.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every passage, in corpus order. Repeated query terms count
    /// once per occurrence.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.passages.len()];
        let Bm25Params { k1, b } = self.params;
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let norm = k1 * (1.0 - b + b * self.doc_len[doc] / self.avgdl);
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    /// Full ranking: score descending, ties by passage id.
    pub fn rank(&self, query: &str) -> Vec<(&Passage, f64)> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.passages.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.passages[a].id.cmp(&self.passages[b].id))
        });
        order.into_iter().map(|i| (&self.passages[i], scores[i])).collect()
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<(&Passage, f64)> {
        let mut r = self.rank(query);
        r.truncate(k);
        r
    }
}

pub fn build_bm25_index(corpus: Vec<Passage>) -> Result<Bm25Index> {
    Bm25Index::build(corpus, Bm25Params::default())
}

/// 1-based rank of the question's annotated passage.
pub fn annotated_rank(question: &QuestionItem, index: &Bm25Index) -> Result<usize> {
    if index.passage(&question.annotated_passage_id).is_none() {
        return Err(Error::Data(format!(
            "question `{}`: annotated passage `{}` not in corpus",
            question.id, question.annotated_passage_id
        )));
    }
    Ok(index
        .rank(&question.question)
        .iter()
        .position(|(p, _)| p.id == question.annotated_passage_id)
        .expect("passage present")
        + 1)
}

pub fn assign_bucket(question: &QuestionItem, index: &Bm25Index) -> Result<Bucket> {
    annotated_rank(question, index).map(Bucket::from_rank)
}

// ─── Signals ─────────────────────────────────────────────────────────────────

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hashed bag of tokens with term-frequency weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder { dim: 256, seed: 0 }
    }
}

impl HashedEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(1);
        let mut v = vec![0.0; dim];
        for t in tokenize(text) {
            v[(fnv1a(self.seed, t.as_bytes()) % dim as u64) as usize] += 1.0;
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Max cosine between question and any passage, mapped from `bounds` to [0, 1].
pub fn dense_signal(question: &str, passages: &[&str], embedder: &HashedEmbedder, bounds: (f64, f64)) -> Result<Signal> {
    if passages.is_empty() {
        return Err(Error::Precondition("dense signal needs at least one passage".into()));
    }
    let q = embedder.embed(question);
    let best = passages
        .iter()
        .map(|p| cosine(&q, &embedder.embed(p)))
        .fold(f64::NEG_INFINITY, f64::max);
    let v = normalize_linear(best, bounds.0, bounds.1)?;
    Signal::new(keys::P_DENSE, v, SignalSource::Lexical)
}

/// Substring oracle standing in for an answerability judge: `conf` when the
/// gold answer appears in some passage, `1 - conf` otherwise.
pub fn oracle_judge_signal(gold_answer: &str, passages: &[&str], confidence: f64) -> Result<Signal> {
    if passages.is_empty() {
        return Err(Error::Precondition("judge needs at least one passage".into()));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::config("oracle_confidence", format!("{confidence} outside [0, 1]")));
    }
    let answerable = passages.iter().any(|p| contains_ci(p, gold_answer));
    let v = if answerable { confidence } else { 1.0 - confidence };
    Signal::new(keys::P_LLM, v, SignalSource::Oracle).map(|s| s.with_detail("answerable", answerable))
}

// ─── States ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalState {
    pub question_id: String,
    pub bucket: Bucket,
    /// Cumulative passage ids per round.
    pub rounds: Vec<Vec<String>>,
    pub gold_present: Vec<bool>,
    #[serde(default)]
    pub p_dense: Vec<f64>,
    #[serde(default)]
    pub p_llm: Vec<f64>,
}

impl RetrievalState {
    pub fn has_signals(&self) -> bool {
        self.p_dense.len() == self.rounds.len() && self.p_llm.len() == self.rounds.len()
    }
}

pub fn precompute_states(question: &QuestionItem, index: &Bm25Index) -> Result<RetrievalState> {
    let bucket = assign_bucket(question, index)?;
    let ranking = index.search(&question.question, *K_SCHEDULE.last().expect("non-empty"));
    let mut rounds = Vec::new();
    let mut gold = Vec::new();
    for &k in &K_SCHEDULE {
        let top = &ranking[..k.min(ranking.len())];
        rounds.push(top.iter().map(|(p, _)| p.id.clone()).collect());
        gold.push(top.iter().any(|(p, _)| contains_ci(&p.text, &question.gold_answer)));
    }
    Ok(RetrievalState {
        question_id: question.id.clone(),
        bucket,
        rounds,
        gold_present: gold,
        p_dense: Vec::new(),
        p_llm: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub embedder: HashedEmbedder,
    pub dense_bounds: (f64, f64),
    pub oracle_confidence: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            embedder: HashedEmbedder::default(),
            dense_bounds: (0.0, 1.0),
            oracle_confidence: 1.0,
        }
    }
}

/// Fills the per-round dense and judge signals of a state.
pub fn compute_signals(
    state: &mut RetrievalState,
    question: &QuestionItem,
    index: &Bm25Index,
    cfg: &SignalConfig,
) -> Result<()> {
    state.p_dense.clear();
    state.p_llm.clear();
    for ids in &state.rounds {
        let texts: Vec<&str> = ids
            .iter()
            .map(|id| index.passage(id).map(|p| p.text.as_str()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InconsistentState(format!("state `{}` names unknown passages", state.question_id)))?;
        state
            .p_dense
            .push(dense_signal(&question.question, &texts, &cfg.embedder, cfg.dense_bounds)?.value);
        state
            .p_llm
            .push(oracle_judge_signal(&question.gold_answer, &texts, cfg.oracle_confidence)?.value);
    }
    Ok(())
}

// ─── Controller ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Expansion rounds after the first retrieval.
    pub budget: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau: 0.8,
            alpha: 0.4,
            budget: 2,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", format!("{} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if self.budget as usize >= K_SCHEDULE.len() {
            return Err(Error::config("budget", format!("at most {} expansions", K_SCHEDULE.len() - 1)));
        }
        Ok(())
    }
}

/// Stop at `tau` or at the budget round, otherwise expand to the next k.
pub fn controller_step(p_hat: f64, round: u32, config: &ControllerConfig) -> Result<Action> {
    if round > config.budget {
        return Err(Error::Precondition(format!("round {round} beyond budget {}", config.budget)));
    }
    let k = K_SCHEDULE[round as usize];
    Ok(if p_hat >= config.tau {
        Action::of_kind(ActionKind::Stop).with("k", k).with("forced", false)
    } else if round == config.budget {
        Action::of_kind(ActionKind::Stop).with("k", k).with("forced", true)
    } else {
        Action::of_kind(ActionKind::Expand).with("k", K_SCHEDULE[round as usize + 1])
    })
}

/// Registry form of [`controller_step`]: signal `p_hat`, counters `round`
/// and `budget`, param `tau`.
pub struct RetrievalThresholdRule;

impl DecisionRule for RetrievalThresholdRule {
    fn offered(&self, _: &RuleParams, _: &DecisionContext) -> Vec<Action> {
        vec![Action::of_kind(ActionKind::Stop), Action::of_kind(ActionKind::Expand)]
    }

    fn choose(&self, params: &RuleParams, ctx: &DecisionContext) -> Result<Action> {
        let cfg = ControllerConfig {
            tau: unit_param(params, "tau", 0.8)?,
            alpha: 0.0,
            budget: ctx.counter("budget")? as u32,
        };
        controller_step(ctx.signal_value(keys::P_HAT)?, ctx.counter("round")? as u32, &cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    DcLlm,
    DcDense,
    DcComposite,
}

impl RetrievalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMethod::DcLlm => "dc_llm",
            RetrievalMethod::DcDense => "dc_dense",
            RetrievalMethod::DcComposite => "dc_composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::DcLlm, Self::DcDense, Self::DcComposite]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    /// The blend weight that makes the composite equal this method's signal.
    pub fn effective_alpha(self, alpha: f64) -> f64 {
        match self {
            RetrievalMethod::DcLlm => 0.0,
            RetrievalMethod::DcDense => 1.0,
            RetrievalMethod::DcComposite => alpha,
        }
    }
}

/// Runs the controller over a precomputed state. Every round is logged with
/// both component signals; rounds after the stop are marked
/// `executed = false` so the trace can be replayed at other settings.
pub fn run_retrieval_episode(
    method: RetrievalMethod,
    question: &QuestionItem,
    state: &RetrievalState,
    config: &ControllerConfig,
) -> Result<EpisodeTrace> {
    config.validate()?;
    if !state.has_signals() {
        return Err(Error::Precondition(format!("state `{}` has no signals", state.question_id)));
    }
    let alpha = config.effective_alpha(method);
    let mut trace = EpisodeTrace::new(format!("{}/{}", state.bucket.as_str(), question.id), method.as_str(), 0);
    let params = RuleParams::from([("tau".to_string(), config.tau)]);
    let mut stop_round: Option<u32> = None;
    let mut history = Vec::new();
    for round in 0..=config.budget {
        let r = round as usize;
        let d = Signal::new(keys::P_DENSE, state.p_dense[r], SignalSource::Lexical)?;
        let l = Signal::new(keys::P_LLM, state.p_llm[r], SignalSource::Oracle)?;
        let p_hat = blend_composite(&d, &l, alpha)?;
        let executed = stop_round.is_none();
        let (action, note) = if executed {
            let ctx = DecisionContext::new()
                .with_signal(p_hat.clone())
                .with_counter("round", u64::from(round))
                .with_counter("budget", u64::from(config.budget))
                .with_history(history.clone());
            let a = builtin_rules().decide("retrieval_threshold", &params, &ctx)?.chosen;
            if a.kind == ActionKind::Stop {
                stop_round = Some(round);
            }
            (a, String::new())
        } else {
            (Action::new("shadow", ActionKind::Custom), "shadow".to_string())
        };
        history.push(action.id.clone());
        push_turn(
            &mut trace,
            TurnRecord {
                turn: round + 1,
                signals: BTreeMap::from([
                    (keys::P_DENSE.to_string(), d.value),
                    (keys::P_HAT.to_string(), p_hat.value),
                    (keys::P_LLM.to_string(), l.value),
                ]),
                flags: BTreeMap::from([(keys::GOLD_PRESENT.to_string(), state.gold_present[r])]),
                action,
                outcome: Outcome::new(true)
                    .observe(keys::EXECUTED, executed)
                    .observe("passages", state.rounds[r].clone()),
                note,
            },
        )?;
    }
    let stop = stop_round.expect("controller stops by the budget round");
    trace.success = state.gold_present[stop as usize];
    trace.metrics = BTreeMap::from([
        ("tau".into(), config.tau),
        ("alpha".into(), alpha),
        ("stop_round".into(), f64::from(stop)),
    ]);
    Ok(trace)
}

impl ControllerConfig {
    fn effective_alpha(&self, method: RetrievalMethod) -> f64 {
        method.effective_alpha(self.alpha)
    }
}

// ─── Sweep ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bucket: String,
    pub tau: f64,
    pub alpha: f64,
    pub n: usize,
    pub success: f64,
    pub avg_rounds: f64,
}

/// Bucket label of a retrieval trace (`bucket/question`).
pub fn trace_bucket(trace: &EpisodeTrace) -> &str {
    trace.scenario_id.split('/').next().unwrap_or("")
}

/// Replays every trace at every (alpha, tau) pair and aggregates per bucket.
/// Rows are ordered by alpha, then tau, then bucket, following grid order.
pub fn sweep(traces: &[EpisodeTrace], tau_grid: &[f64], alpha_grid: &[f64], budget: u32) -> Result<Vec<SweepRow>> {
    let mut buckets: BTreeMap<String, Vec<&EpisodeTrace>> = BTreeMap::new();
    for t in traces {
        buckets.entry(trace_bucket(t).to_string()).or_default().push(t);
    }
    let order = |b: &str| Bucket::parse(b).map_or(3, |b| b as usize);
    let mut names: Vec<&String> = buckets.keys().collect();
    names.sort_by_key(|b| (order(b), b.to_string()));

    let mut rows = Vec::new();
    for &alpha in alpha_grid {
        for &tau in tau_grid {
            for name in &names {
                let group = &buckets[*name];
                let (mut ok, mut rounds) = (0usize, 0u64);
                for t in group {
                    let r = replay_threshold_controller(t, tau, alpha, budget)?;
                    ok += usize::from(r.success);
                    rounds += u64::from(r.rounds);
                }
                rows.push(SweepRow {
                    bucket: name.to_string(),
                    tau,
                    alpha,
                    n: group.len(),
                    success: ok as f64 / group.len() as f64,
                    avg_rounds: rounds as f64 / group.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

// ─── Corpus synthesis and ingestion ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BucketCounts {
    pub easy: usize,
    pub medium: usize,
    pub hard: usize,
}

impl BucketCounts {
    pub fn get(&self, b: Bucket) -> usize {
        match b {
            Bucket::Easy => self.easy,
            Bucket::Medium => self.medium,
            Bucket::Hard => self.hard,
        }
    }

    /// Parses `e,m,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config("synth", format!("expected e,m,h counts: {e}")))?;
        match parts.as_slice() {
            [easy, medium, hard] => Ok(BucketCounts {
                easy: *easy,
                medium: *medium,
                hard: *hard,
            }),
            _ => Err(Error::config("synth", "expected three counts e,m,h")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub passages: Vec<Passage>,
    pub questions: Vec<QuestionItem>,
}

const PASSAGE_LEN: usize = 24;
const TOPIC_WORDS: usize = 3;
const SYNTH_ATTEMPTS: u64 = 8;

struct WordSource {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordSource {
    fn fresh(&mut self) -> String {
        const C: &[u8] = b"bdfglmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let syllables = self.rng.gen_range(3..=4);
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        C[self.rng.gen_range(0..C.len())] as char,
                        V[self.rng.gen_range(0..V.len())] as char,
                    ]
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Number of passages that outrank the annotated one, drawn per bucket.
fn outrankers(bucket: Bucket, rng: &mut ChaCha8Rng) -> usize {
    match bucket {
        Bucket::Easy => rng.gen_range(0..=2),
        Bucket::Medium => rng.gen_range(3..=8),
        Bucket::Hard => rng.gen_range(9..=14),
    }
}

fn synthesize_once(counts: BucketCounts, seed: u64) -> SyntheticCorpus {
    let mut words = WordSource {
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1])),
        used: BTreeSet::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let filler: Vec<String> = (0..64).map(|_| words.fresh()).collect();
    let pad = |body: Vec<String>, rng: &mut ChaCha8Rng| -> String {
        let mut toks = body;
        while toks.len() < PASSAGE_LEN {
            toks.push(filler.choose(rng).expect("non-empty").clone());
        }
        toks.shuffle(rng);
        toks.join(" ")
    };

    let mut passages = Vec::new();
    let mut questions = Vec::new();
    let mut qn = 0usize;
    for bucket in Bucket::ALL {
        for _ in 0..counts.get(bucket) {
            let qid = format!("q{qn:05}");
            let answer = format!("kx{qn:05}q");
            qn += 1;
            let topic: Vec<String> = (0..TOPIC_WORDS).map(|_| words.fresh()).collect();
            let gold_id = format!("p{:06}", passages.len());
            let mut body = topic.clone();
            body.push(answer.clone());
            passages.push(Passage {
                id: gold_id.clone(),
                text: pad(body, &mut rng),
                source_question_id: Some(qid.clone()),
            });
            // Same length, topic words twice: strictly higher BM25 score.
            for _ in 0..outrankers(bucket, &mut rng) {
                let body: Vec<String> = topic.iter().chain(topic.iter()).cloned().collect();
                passages.push(Passage {
                    id: format!("p{:06}", passages.len()),
                    text: pad(body, &mut rng),
                    source_question_id: None,
                });
            }
            questions.push(QuestionItem {
                id: qid,
                question: format!("Which {}?", topic.join(" ")),
                gold_answer: answer,
                annotated_passage_id: gold_id,
                bucket: Some(bucket),
            });
        }
    }
    SyntheticCorpus { passages, questions }
}

/// Generates a corpus whose questions land in the requested BM25 buckets,
/// checked afterwards with [`assign_bucket`].
pub fn synthesize_corpus(counts: BucketCounts, seed: u64) -> Result<SyntheticCorpus> {
    if counts.easy + counts.medium + counts.hard == 0 {
        return Ok(SyntheticCorpus {
            passages: Vec::new(),
            questions: Vec::new(),
        });
    }
    for attempt in 0..SYNTH_ATTEMPTS {
        let corpus = synthesize_once(counts, derive_seed(seed, &[attempt]));
        let index = build_bm25_index(corpus.passages.clone())?;
        let mut ok = true;
        for q in &corpus.questions {
            if Some(assign_bucket(q, &index)?) != q.bucket {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(corpus);
        }
        log::debug!("synthesis attempt {attempt} missed a bucket, retrying");
    }
    Err(Error::Synthesis(format!(
        "no corpus matched the requested buckets after {SYNTH_ATTEMPTS} attempts"
    )))
}

/// One JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads a passage file (`{id, text, question_id?}` per line) and a
/// question file (`{id, question, gold_answer, annotated_passage_id}`),
/// checking that every gold answer occurs in its annotated passage.
pub fn load_corpus(passages: &Path, questions: &Path) -> Result<SyntheticCorpus> {
    let passages: Vec<Passage> = read_jsonl(passages)?;
    let questions: Vec<QuestionItem> = read_jsonl(questions)?;
    let by_id: HashMap<&str, &Passage> = passages.iter().map(|p| (p.id.as_str(), p)).collect();
    for p in &passages {
        if p.text.trim().is_empty() {
            return Err(Error::Data(format!("passage `{}` has empty text", p.id)));
        }
    }
    for q in &questions {
        let p = by_id.get(q.annotated_passage_id.as_str()).ok_or_else(|| {
            Error::Data(format!("question `{}`: unknown passage `{}`", q.id, q.annotated_passage_id))
        })?;
        if !contains_ci(&p.text, &q.gold_answer) {
            return Err(Error::Data(format!(
                "question `{}`: gold answer not in passage `{}`",
                q.id, p.id
            )));
        }
    }
    Ok(SyntheticCorpus { passages, questions })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::file(path, e))
}

/// Index plus signal-bearing states for every question of a corpus.
pub struct PreparedCorpus {
    pub index: Bm25Index,
    pub questions: Vec<QuestionItem>,
    pub states: Vec<RetrievalState>,
}

pub fn prepare(corpus: SyntheticCorpus, signals: &SignalConfig) -> Result<PreparedCorpus> {
    let index = build_bm25_index(corpus.passages)?;
    let mut states = Vec::with_capacity(corpus.questions.len());
    for q in &corpus.questions {
        let mut st = precompute_states(q, &index)?;
        compute_signals(&mut st, q, &index, signals)?;
        states.push(st);
    }
    Ok(PreparedCorpus {
        index,
        questions: corpus.questions,
        states,
    })
}
