//! Person search in a synthetic organisation graph.
//!
//! Two beliefs drive the policy: sufficiency (`1 / |candidates|`) and a
//! structural correctness estimate for the node just visited. A failed
//! visit removes the node and every untried candidate sharing its observed
//! hidden profile, so sufficiency can rise without a clarification.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::decision::{
    builtin_rules, unit_param, Action, ActionKind, DecisionContext, DecisionRule, RuleParams, Signal, SignalSource,
};
use crate::error::{Error, Result};
use crate::trace::{push_turn, EpisodeTrace, Outcome, TurnRecord};

pub const TAU_SUFF: f64 = 0.4;
pub const THETA_CORR: f64 = 0.5;
pub const P_CORR_MIN: f64 = 0.05;
pub const P_CORR_MAX: f64 = 0.95;
pub const DEFAULT_NODES: usize = 200;
/// Seed whose random nodes leave the injected S5 structure intact.
pub const DEFAULT_GRAPH_SEED: u64 = 269;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Department,
    Role,
    Location,
    Project,
    Level,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Department,
        Attribute::Role,
        Attribute::Location,
        Attribute::Project,
        Attribute::Level,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Department => "department",
            Attribute::Role => "role",
            Attribute::Location => "location",
            Attribute::Project => "project",
            Attribute::Level => "level",
        }
    }

    pub fn parse(s: &str) -> Option<Attribute> {
        Attribute::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn values(self) -> [&'static str; 4] {
        match self {
            Attribute::Department => ["Engineering", "Marketing", "Sales", "Finance"],
            Attribute::Role => ["Manager", "Analyst", "Engineer", "Lead"],
            Attribute::Location => ["New York", "London", "Tokyo", "Berlin"],
            Attribute::Project => ["Alpha", "Beta", "Gamma", "Delta"],
            Attribute::Level => ["L1", "L2", "L3", "L4"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonNode {
    pub id: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    pub department: String,
    pub role: String,
    pub location: String,
    pub project: String,
    pub level: String,
}

impl PersonNode {
    pub fn get(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::Department => &self.department,
            Attribute::Role => &self.role,
            Attribute::Location => &self.location,
            Attribute::Project => &self.project,
            Attribute::Level => &self.level,
        }
    }

    pub fn shared_attributes(&self, other: &PersonNode) -> usize {
        Attribute::ALL.iter().filter(|a| self.get(**a) == other.get(**a)).count()
    }

    fn matches(&self, known: &BTreeMap<Attribute, String>) -> bool {
        known.iter().all(|(a, v)| self.get(*a) == v)
    }

    fn profile(&self, attrs: &[Attribute]) -> BTreeMap<Attribute, String> {
        attrs.iter().map(|a| (*a, self.get(*a).to_string())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgGraph {
    pub nodes: Vec<PersonNode>,
    pub edges: BTreeSet<(u32, u32)>,
    pub seed: u64,
}

impl OrgGraph {
    pub fn node(&self, id: u32) -> Result<&PersonNode> {
        self.nodes
            .get(id as usize)
            .filter(|n| n.id == id)
            .ok_or_else(|| Error::InconsistentState(format!("no node with id {id}")))
    }

    pub fn matching(&self, known: &BTreeMap<Attribute, String>) -> BTreeSet<u32> {
        self.nodes.iter().filter(|n| n.matches(known)).map(|n| n.id).collect()
    }
}

/// (label, location, level) of the 10 injected nodes, in id order.
const S5_NODES: [(&str, &str, &str); 10] = [
    ("S5_Node_A", "London", "L2"),
    ("S5_Node_B", "London", "L1"),
    ("S5_Node_C", "London", "L4"),
    ("S5_Decoy_D", "Tokyo", "L1"),
    ("S5_Node_E", "Tokyo", "L1"),
    ("S5_Node_F", "Tokyo", "L2"),
    ("S5_Target", "Tokyo", "L3"),
    ("S5_Node_F2", "Tokyo", "L4"),
    ("S5_Node_G", "Berlin", "L2"),
    ("S5_Node_H", "Berlin", "L1"),
];
const S5_TARGET: u32 = 6;
const S5_DECOY: u32 = 3;

/// `n` people with seeded uniform attributes (the injected S5 nodes come
/// first), base edges between pairs sharing at least two attributes and
/// `floor(0.15 * base)` noisy edges between pairs sharing at most one.
pub fn generate_graph(n: usize, seed: u64) -> Result<OrgGraph> {
    if n < S5_NODES.len() {
        return Err(Error::config("nodes", format!("need at least {}, got {n}", S5_NODES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(n);
    for (i, (label, location, level)) in S5_NODES.iter().enumerate() {
        nodes.push(PersonNode {
            id: i as u32,
            label: label.to_string(),
            department: "Engineering".into(),
            role: "Manager".into(),
            location: location.to_string(),
            project: "Alpha".into(),
            level: level.to_string(),
        });
    }
    for id in S5_NODES.len()..n {
        let mut pick = |a: Attribute| a.values()[rng.gen_range(0..4)].to_string();
        nodes.push(PersonNode {
            id: id as u32,
            label: String::new(),
            department: pick(Attribute::Department),
            role: pick(Attribute::Role),
            location: pick(Attribute::Location),
            project: pick(Attribute::Project),
            level: pick(Attribute::Level),
        });
    }

    let mut edges = BTreeSet::new();
    let mut weak = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let pair = (i as u32, j as u32);
            match nodes[i].shared_attributes(&nodes[j]) {
                s if s >= 2 => {
                    edges.insert(pair);
                }
                _ => weak.push(pair),
            }
        }
    }
    let n_noisy = edges.len() * 15 / 100;
    if n_noisy > weak.len() {
        return Err(Error::Generation(format!(
            "need {n_noisy} noisy edges but only {} weakly related pairs exist",
            weak.len()
        )));
    }
    for idx in sample(&mut rng, weak.len(), n_noisy) {
        edges.insert(weak[idx]);
    }
    Ok(OrgGraph { nodes, edges, seed })
}

// ─── Scenarios ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphScenario {
    pub id: String,
    pub known: BTreeMap<Attribute, String>,
    pub target: u32,
    #[serde(default)]
    pub forced_first_visit: Option<u32>,
    pub budget: u32,
    #[serde(default)]
    pub notes: String,
}

impl GraphScenario {
    pub fn validate(&self, graph: &OrgGraph) -> Result<()> {
        let cands = graph.matching(&self.known);
        if !cands.contains(&self.target) {
            return Err(Error::config(
                format!("{}.target", self.id),
                "target does not match the known attributes",
            ));
        }
        if let Some(d) = self.forced_first_visit {
            if !graph.node(d)?.matches(&self.known) {
                return Err(Error::config(format!("{}.forced_first_visit", self.id), "decoy is not a candidate"));
            }
        }
        if self.budget == 0 {
            return Err(Error::config(format!("{}.budget", self.id), "must be positive"));
        }
        Ok(())
    }

    pub fn query(&self) -> String {
        let parts: Vec<String> = self.known.iter().map(|(a, v)| format!("{} {v}", a.as_str())).collect();
        format!("Find the person with {}.", parts.join(", "))
    }
}

fn known_of(node: &PersonNode, attrs: &[Attribute]) -> BTreeMap<Attribute, String> {
    node.profile(attrs)
}

fn action_kinds(trace: &EpisodeTrace) -> Vec<ActionKind> {
    trace.turns.iter().map(|t| t.action.kind).collect()
}

fn asked(trace: &EpisodeTrace) -> Vec<String> {
    trace
        .turns
        .iter()
        .filter_map(|t| t.action.payload.get("attribute").and_then(|v| v.as_str()).map(str::to_string))
        .collect()
}

fn dc_kinds(graph: &OrgGraph, s: &GraphScenario) -> Result<(Vec<ActionKind>, EpisodeTrace)> {
    let t = run_graph_episode(GraphMethod::Dc, graph, s, 0)?;
    Ok((action_kinds(&t), t))
}

/// Builds S1..S5 for a generated graph by deterministic search, checking
/// each against the action sequence it is meant to exercise.
pub fn build_scenarios(graph: &OrgGraph) -> Result<Vec<GraphScenario>> {
    use ActionKind::*;
    let random_ids = || graph.nodes.iter().filter(|n| n.id as usize >= S5_NODES.len());
    let missing = |what: &str| Error::Generation(format!("no {what} fixture in graph seed {}", graph.seed));

    let s1 = random_ids()
        .find_map(|n| {
            Attribute::ALL.iter().rev().find_map(|&omit| {
                let attrs: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| *a != omit).collect();
                let known = known_of(n, &attrs);
                (graph.matching(&known).len() == 1).then(|| GraphScenario {
                    id: "S1".into(),
                    known,
                    target: n.id,
                    forced_first_visit: None,
                    budget: 5,
                    notes: "4 of 5 attributes known, unique match".into(),
                })
            })
        })
        .ok_or_else(|| missing("S1"))?;

    let mut s2 = None;
    'outer: for n in random_ids() {
        for i in 0..5 {
            for j in i + 1..5 {
                let known = known_of(n, &[Attribute::ALL[i], Attribute::ALL[j]]);
                if graph.matching(&known).len() != 13 {
                    continue;
                }
                let s = GraphScenario {
                    id: "S2".into(),
                    known,
                    target: n.id,
                    forced_first_visit: None,
                    budget: 5,
                    notes: "2 of 5 attributes known, 13 candidates; two clarifications leave the target and one lower-id decoy".into(),
                };
                if dc_kinds(graph, &s)?.0 == [Clarify, Clarify, Execute, Backtrack, Accept] {
                    s2 = Some(s);
                    break 'outer;
                }
            }
        }
    }
    let s2 = s2.ok_or_else(|| missing("S2"))?;

    let mut s3 = None;
    'outer3: for n in random_ids() {
        for &omit in Attribute::ALL.iter().rev() {
            let attrs: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| *a != omit).collect();
            let known = known_of(n, &attrs);
            let cands = graph.matching(&known);
            if cands.len() != 2 {
                continue;
            }
            let decoy = *cands.iter().find(|c| **c != n.id).expect("two candidates");
            if graph.node(decoy)?.get(omit) == n.get(omit) {
                continue;
            }
            let s = GraphScenario {
                id: "S3".into(),
                known,
                target: n.id,
                forced_first_visit: Some(decoy),
                budget: 5,
                notes: "4 of 5 attributes known, 2 candidates, forced decoy with a unique hidden value".into(),
            };
            if dc_kinds(graph, &s)?.0 == [Execute, Backtrack, Accept] {
                s3 = Some(s);
                break 'outer3;
            }
        }
    }
    let s3 = s3.ok_or_else(|| missing("S3"))?;

    // Prefer the Manager / L2 query of the reference trace.
    let mut s4_targets: Vec<&PersonNode> = random_ids().collect();
    s4_targets.sort_by_key(|n| (!(n.role == "Manager" && n.level == "L2"), n.id));
    let mut s4 = None;
    for n in s4_targets {
        let known = known_of(n, &[Attribute::Role, Attribute::Level]);
        if graph.matching(&known).len() != 10 {
            continue;
        }
        let mut s = GraphScenario {
            id: "S4".into(),
            known,
            target: n.id,
            forced_first_visit: None,
            budget: 6,
            notes: "role and level known, 10 candidates; department then location leave the target and a forced decoy differing only in project".into(),
        };
        let (_, probe) = dc_kinds(graph, &s)?;
        if asked(&probe).get(..2) != Some(&["department".to_string(), "location".to_string()][..]) {
            continue;
        }
        let mut k2 = s.known.clone();
        k2.insert(Attribute::Department, n.department.clone());
        k2.insert(Attribute::Location, n.location.clone());
        let after = graph.matching(&k2);
        let mut k1 = s.known.clone();
        k1.insert(Attribute::Department, n.department.clone());
        if after.len() != 2 || graph.matching(&k1).len() != 3 {
            continue;
        }
        let decoy = *after.iter().find(|c| **c != n.id).expect("two candidates");
        if graph.node(decoy)?.project == n.project {
            continue;
        }
        s.forced_first_visit = Some(decoy);
        let (kinds, t) = dc_kinds(graph, &s)?;
        if kinds == [Clarify, Clarify, Execute, Backtrack, Accept] && t.success {
            s4 = Some(s);
            break;
        }
    }
    let s4 = s4.ok_or_else(|| missing("S4"))?;

    let target = graph.node(S5_TARGET)?;
    let s5 = GraphScenario {
        id: "S5".into(),
        known: known_of(target, &[Attribute::Department, Attribute::Project, Attribute::Role]),
        target: S5_TARGET,
        forced_first_visit: Some(S5_DECOY),
        budget: 5,
        notes: "injected subgraph: 12 candidates, location clarification leaves 5, the failed decoy visit eliminates node E".into(),
    };
    if graph.matching(&s5.known).len() != 12 {
        return Err(missing("S5 (needs exactly 12 initial candidates)"));
    }
    let (kinds, t) = dc_kinds(graph, &s5)?;
    if kinds != [Clarify, Execute, Backtrack, Backtrack, Accept] || asked(&t) != ["location"] {
        return Err(missing("S5 (location must be the first question)"));
    }

    Ok(vec![s1, s2, s3, s4, s5])
}

pub fn default_graph() -> Result<OrgGraph> {
    generate_graph(DEFAULT_NODES, DEFAULT_GRAPH_SEED)
}

// ─── Search state and estimators ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedVisit {
    pub id: u32,
    /// Hidden-attribute values observed at rejection time.
    pub profile: BTreeMap<Attribute, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub known: BTreeMap<Attribute, String>,
    pub hidden: Vec<Attribute>,
    pub candidates: BTreeSet<u32>,
    pub untried: BTreeSet<u32>,
    pub rejected: Vec<RejectedVisit>,
    pub last_visited: Option<u32>,
    pub turn: u32,
    pub budget: u32,
}

impl SearchState {
    pub fn initial(graph: &OrgGraph, scenario: &GraphScenario) -> Self {
        let candidates = graph.matching(&scenario.known);
        SearchState {
            known: scenario.known.clone(),
            hidden: Attribute::ALL
                .into_iter()
                .filter(|a| !scenario.known.contains_key(a))
                .collect(),
            untried: candidates.clone(),
            candidates,
            rejected: Vec::new(),
            last_visited: None,
            turn: 0,
            budget: scenario.budget,
        }
    }
}

pub fn compute_p_suff(state: &SearchState) -> Result<f64> {
    if state.candidates.is_empty() {
        return Err(Error::InconsistentState("empty candidate set".into()));
    }
    Ok(1.0 / state.candidates.len() as f64)
}

/// Structural correctness estimate for a node just visited: how typical its
/// hidden values are among the remaining peers, minus a penalty when it
/// resembles an earlier rejection.
pub fn estimate_p_corr(graph: &OrgGraph, visited: &PersonNode, state: &SearchState) -> Result<f64> {
    let rejected: BTreeSet<u32> = state.rejected.iter().map(|r| r.id).collect();
    let peers: Vec<&PersonNode> = state
        .candidates
        .iter()
        .filter(|id| **id != visited.id && !rejected.contains(id))
        .map(|id| graph.node(*id))
        .collect::<Result<_>>()?;
    let base = if peers.is_empty() || state.hidden.is_empty() {
        1.0
    } else {
        let total: f64 = state
            .hidden
            .iter()
            .map(|&a| peers.iter().filter(|p| p.get(a) == visited.get(a)).count() as f64 / peers.len() as f64)
            .sum();
        total / state.hidden.len() as f64
    };
    let overlap = state
        .rejected
        .iter()
        .map(|r| {
            if state.hidden.is_empty() {
                return 0.0;
            }
            let hits = state
                .hidden
                .iter()
                .filter(|a| r.profile.get(a).map(String::as_str) == Some(visited.get(**a)))
                .count();
            hits as f64 / state.hidden.len() as f64
        })
        .fold(0.0, f64::max);
    let penalty = if overlap >= 0.5 { 0.15 + 0.20 * overlap } else { 0.0 };
    Ok((base - penalty).clamp(P_CORR_MIN, P_CORR_MAX))
}

/// Removes a wrong node, plus every untried candidate whose observed hidden
/// values all equal its own. Returns the eliminated ids (excluding the
/// rejected node itself).
pub fn eliminate_candidates(graph: &OrgGraph, state: &mut SearchState, rejected: &PersonNode) -> Result<Vec<u32>> {
    let profile = rejected.profile(&state.hidden);
    state.candidates.remove(&rejected.id);
    state.untried.remove(&rejected.id);
    let mut gone = Vec::new();
    if !profile.is_empty() {
        for &id in &state.untried {
            if graph.node(id)?.profile(&state.hidden) == profile {
                gone.push(id);
            }
        }
    }
    for id in &gone {
        state.candidates.remove(id);
        state.untried.remove(id);
    }
    state.rejected.push(RejectedVisit {
        id: rejected.id,
        profile,
    });
    Ok(gone)
}

/// The hidden attribute whose answer leaves the fewest candidates in
/// expectation over the current candidates (sum of squared value counts);
/// ties go to the alphabetically first attribute name.
pub fn choose_clarify_attribute(graph: &OrgGraph, state: &SearchState) -> Result<Option<Attribute>> {
    let mut best: Option<(usize, &str, Attribute)> = None;
    for &a in &state.hidden {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &id in &state.candidates {
            *counts.entry(graph.node(id)?.get(a)).or_default() += 1;
        }
        let score: usize = counts.values().map(|c| c * c).sum();
        let key = (score, a.as_str(), a);
        if best.map_or(true, |b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    Ok(best.map(|b| b.2))
}

// ─── Policy ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphPolicyInput {
    pub p_suff: f64,
    pub p_corr: f64,
    pub just_traversed: bool,
    pub n_untried: usize,
    pub n_hidden: usize,
    /// Completed turns.
    pub turn: u32,
}

pub fn graph_policy(input: &GraphPolicyInput, tau_suff: f64, theta_corr: f64) -> ActionKind {
    if input.just_traversed {
        if input.p_corr >= theta_corr {
            return ActionKind::Accept;
        }
        if input.n_untried == 0 {
            return ActionKind::Accept;
        }
        if input.p_suff < tau_suff && input.turn > 2 {
            ActionKind::Clarify
        } else if input.n_untried > 0 {
            ActionKind::Backtrack
        } else {
            ActionKind::Clarify
        }
    } else if input.p_suff >= tau_suff || input.n_hidden <= 1 {
        ActionKind::Execute
    } else {
        ActionKind::Clarify
    }
}

/// Registry form of [`graph_policy`]. Signals `p_suff`, `p_corr`; flag
/// `just_traversed`; counters `n_untried`, `n_hidden`, `turn`; params
/// `tau_suff`, `theta_corr`.
pub struct GraphDcRule;

impl DecisionRule for GraphDcRule {
    fn offered(&self, _: &RuleParams, _: &DecisionContext) -> Vec<Action> {
        [ActionKind::Execute, ActionKind::Clarify, ActionKind::Backtrack, ActionKind::Accept]
            .into_iter()
            .map(Action::of_kind)
            .collect()
    }

    fn choose(&self, params: &RuleParams, ctx: &DecisionContext) -> Result<Action> {
        let input = GraphPolicyInput {
            p_suff: ctx.signal_value("p_suff")?,
            p_corr: ctx.signal_value("p_corr")?,
            just_traversed: ctx.flag("just_traversed"),
            n_untried: ctx.counter("n_untried")? as usize,
            n_hidden: ctx.counter("n_hidden")? as usize,
            turn: ctx.counter("turn")? as u32,
        };
        let tau = unit_param(params, "tau_suff", TAU_SUFF)?;
        let theta = unit_param(params, "theta_corr", THETA_CORR)?;
        Ok(Action::of_kind(graph_policy(&input, tau, theta)))
    }
}

// ─── Episodes ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMethod {
    Dc,
    Retry,
}

impl GraphMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphMethod::Dc => "dc",
            GraphMethod::Retry => "retry",
        }
    }
}

struct Visit {
    correct: bool,
    p_corr: f64,
    eliminated: Vec<u32>,
}

fn visit(graph: &OrgGraph, scenario: &GraphScenario, state: &mut SearchState, id: u32) -> Result<Visit> {
    let node = graph.node(id)?;
    let correct = id == scenario.target;
    let structural = estimate_p_corr(graph, node, state)?;
    state.last_visited = Some(id);
    state.untried.remove(&id);
    let mut eliminated = Vec::new();
    if !correct {
        eliminated = eliminate_candidates(graph, state, node)?;
        if eliminated.contains(&scenario.target) {
            log::debug!("{}: target {} eliminated by rejection of {id}", scenario.id, scenario.target);
        }
    }
    // The traversal reveals the verdict; a confirmed hit is as certain as
    // the estimator allows.
    let p_corr = if correct { P_CORR_MAX } else { structural };
    Ok(Visit {
        correct,
        p_corr,
        eliminated,
    })
}

/// Runs one episode. `dc` follows [`graph_policy`]; `retry` visits a node
/// every turn (forced decoy first, then seeded random picks) without
/// clarifying. The budget counts every action, including the final accept.
pub fn run_graph_episode(
    method: GraphMethod,
    graph: &OrgGraph,
    scenario: &GraphScenario,
    seed: u64,
) -> Result<EpisodeTrace> {
    run_graph_episode_with(method, graph, scenario, seed, &RuleParams::new())
}

/// [`run_graph_episode`] with explicit policy parameters (`tau_suff`,
/// `theta_corr`).
pub fn run_graph_episode_with(
    method: GraphMethod,
    graph: &OrgGraph,
    scenario: &GraphScenario,
    seed: u64,
    params: &RuleParams,
) -> Result<EpisodeTrace> {
    scenario.validate(graph)?;
    let mut trace = EpisodeTrace::new(scenario.id.clone(), method.as_str(), seed);
    let mut state = SearchState::initial(graph, scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forced = scenario.forced_first_visit;
    let mut p_corr = 1.0;
    let mut just_traversed = false;
    let mut history = Vec::new();
    let (mut wasted, mut clarifies, mut backtracks, mut eliminations, mut moves) = (0u32, 0u32, 0u32, 0u32, 0u32);

    for turn in 1..=scenario.budget {
        if state.candidates.is_empty() {
            // only reachable when duplicate profiles let elimination take the target
            log::debug!("{}: candidate set exhausted at turn {turn}", scenario.id);
            break;
        }
        let p_suff = compute_p_suff(&state)?;
        let ctx = DecisionContext::new()
            .with_signal(Signal::new("p_suff", p_suff, SignalSource::Oracle)?)
            .with_signal(Signal::new("p_corr", p_corr, SignalSource::Oracle)?)
            .with_flag("just_traversed", just_traversed)
            .with_counter("n_untried", state.untried.len() as u64)
            .with_counter("n_hidden", state.hidden.len() as u64)
            .with_counter("n_candidates", state.candidates.len() as u64)
            .with_counter("turn", u64::from(turn - 1))
            .with_counter("budget", u64::from(scenario.budget))
            .with_history(history.clone());
        let kind = match method {
            GraphMethod::Dc => builtin_rules().decide("graph_dc", params, &ctx)?.chosen.kind,
            GraphMethod::Retry => ActionKind::Execute,
        };

        let mut action = Action::of_kind(kind);
        let mut outcome = Outcome::new(true);
        let mut note = String::new();
        let mut done = false;
        match kind {
            ActionKind::Clarify => {
                clarifies += 1;
                moves += 1;
                just_traversed = false;
                match choose_clarify_attribute(graph, &state)? {
                    Some(attr) => {
                        let answer = graph.node(scenario.target)?.get(attr).to_string();
                        state.known.insert(attr, answer.clone());
                        state.hidden.retain(|a| *a != attr);
                        let keep = graph.matching(&state.known);
                        state.candidates.retain(|c| keep.contains(c));
                        state.untried.retain(|c| keep.contains(c));
                        action = action
                            .with("attribute", attr.as_str())
                            .with("question", format!("What is their {}?", attr.as_str()));
                        outcome = outcome.observe("answer", answer);
                    }
                    None => note = "nothing left to ask".into(),
                }
            }
            ActionKind::Execute | ActionKind::Backtrack => {
                moves += 1;
                if kind == ActionKind::Backtrack {
                    backtracks += 1;
                }
                let next = match forced.take().filter(|d| state.untried.contains(d)) {
                    Some(d) => d,
                    None if method == GraphMethod::Retry => {
                        let pool: Vec<u32> = state.untried.iter().copied().collect();
                        if pool.is_empty() {
                            return Err(Error::InconsistentState("no untried candidate to visit".into()));
                        }
                        pool[rng.gen_range(0..pool.len())]
                    }
                    None => *state
                        .untried
                        .iter()
                        .next()
                        .ok_or_else(|| Error::InconsistentState("no untried candidate to visit".into()))?,
                };
                let v = visit(graph, scenario, &mut state, next)?;
                if !v.correct {
                    wasted += 1;
                }
                if !v.eliminated.is_empty() {
                    eliminations += 1;
                }
                p_corr = v.p_corr;
                just_traversed = true;
                action = action.with("node", next);
                outcome = outcome
                    .observe("correct", v.correct)
                    .observe("p_corr", p_corr)
                    .observe("eliminated", v.eliminated.clone())
                    .observe("profile", json!(graph.node(next)?));
                if method == GraphMethod::Retry && v.correct {
                    trace.success = true;
                    done = true;
                }
            }
            ActionKind::Accept => {
                let node = state
                    .last_visited
                    .ok_or_else(|| Error::InconsistentState("accept before any visit".into()))?;
                action = action.with("node", node);
                trace.success = node == scenario.target;
                outcome = Outcome::new(trace.success);
                done = true;
            }
            other => return Err(Error::InconsistentState(format!("graph policy chose {other}"))),
        }
        outcome = outcome.observe("candidates", state.candidates.len() as u64);
        history.push(action.kind.as_str().to_string());
        push_turn(
            &mut trace,
            TurnRecord {
                turn,
                signals: BTreeMap::from([("p_corr".into(), ctx.signal_value("p_corr")?), ("p_suff".into(), p_suff)]),
                flags: ctx.flags.clone(),
                action,
                outcome,
                note,
            },
        )?;
        if done {
            break;
        }
    }

    trace.metrics = BTreeMap::from([
        ("turns".into(), f64::from(moves)),
        ("wasted".into(), f64::from(wasted)),
        ("clarify".into(), f64::from(clarifies)),
        ("backtrack".into(), f64::from(backtracks)),
        ("eliminations".into(), f64::from(eliminations)),
    ]);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub success_rate: f64,
    pub wasted_traversals: f64,
    pub clarify_count: f64,
    pub backtrack_count: f64,
}

pub fn graph_metrics(traces: &[EpisodeTrace]) -> Result<GraphMetrics> {
    if traces.is_empty() {
        return Err(Error::Precondition("no traces to aggregate".into()));
    }
    let n = traces.len() as f64;
    let mean = |m: &str| traces.iter().map(|t| t.metric(m).unwrap_or(0.0)).sum::<f64>() / n;
    Ok(GraphMetrics {
        success_rate: traces.iter().filter(|t| t.success).count() as f64 / n,
        wasted_traversals: mean("wasted"),
        clarify_count: mean("clarify"),
        backtrack_count: mean("backtrack"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(p_suff: f64, p_corr: f64, jt: bool, untried: usize, hidden: usize, turn: u32) -> GraphPolicyInput {
        GraphPolicyInput {
            p_suff,
            p_corr,
            just_traversed: jt,
            n_untried: untried,
            n_hidden: hidden,
            turn,
        }
    }

    #[test]
    fn policy_examples() {
        assert_eq!(graph_policy(&input(0.5, 0.9, true, 0, 1, 4), TAU_SUFF, THETA_CORR), ActionKind::Accept);
        assert_eq!(graph_policy(&input(0.5, 1.0, false, 2, 1, 2), TAU_SUFF, THETA_CORR), ActionKind::Execute);
        assert_eq!(graph_policy(&input(0.2, 1.0, false, 5, 1, 1), TAU_SUFF, THETA_CORR), ActionKind::Execute);
        assert_eq!(graph_policy(&input(0.1, 1.0, false, 10, 3, 0), TAU_SUFF, THETA_CORR), ActionKind::Clarify);
        assert_eq!(graph_policy(&input(0.1, 0.2, true, 5, 3, 3), TAU_SUFF, THETA_CORR), ActionKind::Clarify);
        assert_eq!(graph_policy(&input(0.1, 0.2, true, 5, 3, 2), TAU_SUFF, THETA_CORR), ActionKind::Backtrack);
    }

    #[test]
    fn p_suff_examples() {
        let mut st = SearchState {
            known: BTreeMap::new(),
            hidden: vec![],
            candidates: (0..13).collect(),
            untried: BTreeSet::new(),
            rejected: vec![],
            last_visited: None,
            turn: 0,
            budget: 5,
        };
        assert_eq!(crate::round_to(compute_p_suff(&st).unwrap(), 3), 0.077);
        st.candidates = (0..5).collect();
        assert_eq!(compute_p_suff(&st).unwrap(), 0.2);
        st.candidates = BTreeSet::from([4]);
        assert_eq!(compute_p_suff(&st).unwrap(), 1.0);
        st.candidates.clear();
        assert!(compute_p_suff(&st).is_err());
    }

    #[test]
    fn injected_subgraph() {
        let g = default_graph().unwrap();
        for n in &g.nodes[..10] {
            assert_eq!((n.department.as_str(), n.project.as_str(), n.role.as_str()), ("Engineering", "Alpha", "Manager"));
        }
        assert_eq!(g.nodes.len(), 200);
    }

    #[test]
    fn s5_decoy_p_corr_and_elimination() {
        let g = default_graph().unwrap();
        let mut st = SearchState {
            known: BTreeMap::new(),
            hidden: vec![Attribute::Level],
            candidates: BTreeSet::from([3, 4, 5, 6, 7]),
            untried: BTreeSet::from([3, 4, 5, 6, 7]),
            rejected: vec![],
            last_visited: None,
            turn: 2,
            budget: 5,
        };
        let d = g.node(3).unwrap();
        assert_eq!(estimate_p_corr(&g, d, &st).unwrap(), 0.25);
        let gone = eliminate_candidates(&g, &mut st, d).unwrap();
        assert_eq!(gone, vec![4]);
        assert_eq!(st.candidates.len(), 3);
    }

    #[test]
    fn p_corr_clamps() {
        let g = default_graph().unwrap();
        // D and E share every hidden value
        let st = SearchState {
            known: BTreeMap::new(),
            hidden: vec![Attribute::Level, Attribute::Location],
            candidates: BTreeSet::from([3, 4]),
            untried: BTreeSet::from([3, 4]),
            rejected: vec![],
            last_visited: None,
            turn: 0,
            budget: 5,
        };
        assert_eq!(estimate_p_corr(&g, g.node(3).unwrap(), &st).unwrap(), P_CORR_MAX);
    }

    #[test]
    fn dc_s1_and_s3() {
        let g = default_graph().unwrap();
        let sc = build_scenarios(&g).unwrap();
        let t = run_graph_episode(GraphMethod::Dc, &g, &sc[0], 0).unwrap();
        assert!(t.success);
        assert_eq!((t.metric("clarify"), t.metric("backtrack")), (Some(0.0), Some(0.0)));
        let t = run_graph_episode(GraphMethod::Dc, &g, &sc[2], 0).unwrap();
        let m = graph_metrics(&[t]).unwrap();
        assert_eq!((m.wasted_traversals, m.backtrack_count), (1.0, 1.0));
    }
}
