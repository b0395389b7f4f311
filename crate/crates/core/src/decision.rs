//! Decision points: candidate actions, the context a policy sees, and the
//! policies that map one to the other.
//!
//! A policy never mutates its context. Everything a rule reads is a named
//! signal, flag or counter on [`DecisionContext`], so a logged context is
//! enough to recompute the rule's output offline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Execute,
    Clarify,
    Backtrack,
    Accept,
    Stop,
    Expand,
    Custom,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Execute => "execute",
            Self::Clarify => "clarify",
            Self::Backtrack => "backtrack",
            Self::Accept => "accept",
            Self::Stop => "stop",
            Self::Expand => "expand",
            Self::Custom => "custom",
        }
    }

    /// Payload keys allowed for this kind. `None` means unrestricted.
    pub fn payload_schema(self) -> Option<&'static [&'static str]> {
        match self {
            Self::Execute => Some(&["node"]),
            Self::Clarify => Some(&["targets", "attribute", "question"]),
            Self::Backtrack => Some(&["node"]),
            Self::Accept => Some(&["node"]),
            Self::Stop => Some(&["k", "forced"]),
            Self::Expand => Some(&["k"]),
            Self::Custom => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub id: String,
    pub kind: ActionKind,
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
}

impl Action {
    pub fn new(id: impl Into<String>, kind: ActionKind) -> Self {
        Action {
            id: id.into(),
            kind,
            payload: BTreeMap::new(),
        }
    }

    /// An action whose id is its kind name.
    pub fn of_kind(kind: ActionKind) -> Self {
        Action::new(kind.as_str(), kind)
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn validate_payload(&self) -> Result<()> {
        if let Some(allowed) = self.kind.payload_schema() {
            for key in self.payload.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::config(
                        format!("action.{}.payload.{key}", self.id),
                        format!("key not allowed for kind `{}`", self.kind),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    Oracle,
    Lexical,
    External,
    Composite,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub name: String,
    pub value: f64,
    pub source: SignalSource,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, Value>,
}

impl Signal {
    /// Builds a signal, rejecting values outside [0, 1].
    pub fn new(name: impl Into<String>, value: f64, source: SignalSource) -> Result<Self> {
        let name = name.into();
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Precondition(format!(
                "signal `{name}` value {value} outside [0, 1]"
            )));
        }
        Ok(Signal {
            name,
            value,
            source,
            detail: BTreeMap::new(),
        })
    }

    /// Builds a signal, clamping out-of-range values into [0, 1] with a warning.
    /// NaN is still rejected.
    pub fn clamped(name: impl Into<String>, value: f64, source: SignalSource) -> Result<Self> {
        let name = name.into();
        if value.is_nan() {
            return Err(Error::Precondition(format!("signal `{name}` is NaN")));
        }
        let clamped = value.clamp(0.0, 1.0);
        if clamped != value {
            log::warn!("signal `{name}` value {value} clamped to {clamped}");
        }
        Signal::new(name, clamped, source)
    }

    pub fn with_detail(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }
}

/// What a policy sees at one turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    #[serde(default)]
    pub signals: BTreeMap<String, Signal>,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    #[serde(default)]
    pub history: Vec<String>,
}

impl DecisionContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_signal(mut self, signal: Signal) -> Self {
        self.signals.insert(signal.name.clone(), signal);
        self
    }

    pub fn with_flag(mut self, name: &str, value: bool) -> Self {
        self.flags.insert(name.to_string(), value);
        self
    }

    pub fn with_counter(mut self, name: &str, value: u64) -> Self {
        self.counters.insert(name.to_string(), value);
        self
    }

    pub fn with_history(mut self, history: Vec<String>) -> Self {
        self.history = history;
        self
    }

    pub fn signal(&self, name: &str) -> Result<&Signal> {
        self.signals
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("context has no signal `{name}`")))
    }

    pub fn signal_value(&self, name: &str) -> Result<f64> {
        self.signal(name).map(|s| s.value)
    }

    pub fn flag(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("context has no counter `{name}`")))
    }

    /// Checks signal ranges, `turn <= budget` and `history.len() == turn`
    /// where those counters are present.
    pub fn validate(&self) -> Result<()> {
        for s in self.signals.values() {
            if !(0.0..=1.0).contains(&s.value) {
                return Err(Error::InconsistentState(format!(
                    "signal `{}` = {} outside [0, 1]",
                    s.name, s.value
                )));
            }
        }
        if let Some(&turn) = self.counters.get("turn") {
            if let Some(&budget) = self.counters.get("budget") {
                if turn > budget {
                    return Err(Error::InconsistentState(format!(
                        "turn {turn} exceeds budget {budget}"
                    )));
                }
            }
            if self.history.len() as u64 != turn {
                return Err(Error::InconsistentState(format!(
                    "history has {} entries but turn is {turn}",
                    self.history.len()
                )));
            }
        }
        Ok(())
    }
}

// ─── Utility maximization ────────────────────────────────────────────────────

pub type Evaluator = Arc<dyn Fn(&Action, &DecisionContext) -> Result<f64> + Send + Sync>;
pub type Predicate = Arc<dyn Fn(&Action, &DecisionContext) -> bool + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    pub evaluator: String,
    pub weight: f64,
}

/// Reward, weighted costs and a feasibility predicate, all referenced by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub reward: String,
    #[serde(default)]
    pub costs: Vec<CostTerm>,
    #[serde(default = "default_feasibility")]
    pub feasibility: String,
}

fn default_feasibility() -> String {
    "all".to_string()
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.costs.iter().enumerate() {
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::config(
                    format!("costs[{i}].weight"),
                    format!("weight must be a finite non-negative number, got {}", c.weight),
                ));
            }
        }
        Ok(())
    }
}

/// Named reward/cost evaluators and feasibility predicates.
///
/// Besides explicitly registered names, a few parameterised forms resolve
/// on the fly:
///
/// | name               | value                                         |
/// |--------------------|-----------------------------------------------|
/// | `payload:<key>`    | numeric payload entry of the action           |
/// | `signal:<name>`    | value of a context signal                     |
/// | `counter:<name>`   | value of a context counter                    |
/// | `const:<x>`        | the constant `x`                              |
///
/// Predicates: `all`, `payload_true:<key>`, `flag:<name>`, `not_flag:<name>`.
#[derive(Clone, Default)]
pub struct EvaluatorRegistry {
    evaluators: HashMap<String, Evaluator>,
    predicates: HashMap<String, Predicate>,
}

impl EvaluatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_evaluator<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&Action, &DecisionContext) -> Result<f64> + Send + Sync + 'static,
    {
        self.evaluators.insert(name.to_string(), Arc::new(f));
    }

    pub fn register_predicate<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&Action, &DecisionContext) -> bool + Send + Sync + 'static,
    {
        self.predicates.insert(name.to_string(), Arc::new(f));
    }

    pub fn evaluate(&self, name: &str, action: &Action, ctx: &DecisionContext) -> Result<f64> {
        let fail = |message: String| Error::Evaluation {
            evaluator: name.to_string(),
            message,
        };
        let value = if let Some(f) = self.evaluators.get(name) {
            f(action, ctx).map_err(|e| match e {
                e @ Error::Evaluation { .. } => e,
                other => fail(other.to_string()),
            })?
        } else if let Some(key) = name.strip_prefix("payload:") {
            action
                .payload
                .get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| fail(format!("action `{}` has no numeric payload `{key}`", action.id)))?
        } else if let Some(sig) = name.strip_prefix("signal:") {
            ctx.signal_value(sig).map_err(|e| fail(e.to_string()))?
        } else if let Some(c) = name.strip_prefix("counter:") {
            ctx.counter(c).map_err(|e| fail(e.to_string()))? as f64
        } else if let Some(x) = name.strip_prefix("const:") {
            x.parse::<f64>().map_err(|e| fail(e.to_string()))?
        } else {
            return Err(fail("unknown evaluator".to_string()));
        };
        if !value.is_finite() {
            return Err(fail(format!("non-finite value {value}")));
        }
        Ok(value)
    }

    pub fn feasible(&self, name: &str, action: &Action, ctx: &DecisionContext) -> Result<bool> {
        if let Some(p) = self.predicates.get(name) {
            return Ok(p(action, ctx));
        }
        if name == "all" {
            Ok(true)
        } else if let Some(key) = name.strip_prefix("payload_true:") {
            Ok(action.payload.get(key).and_then(Value::as_bool).unwrap_or(false))
        } else if let Some(flag) = name.strip_prefix("flag:") {
            Ok(ctx.flag(flag))
        } else if let Some(flag) = name.strip_prefix("not_flag:") {
            Ok(!ctx.flag(flag))
        } else {
            Err(Error::config("feasibility", format!("unknown predicate `{name}`")))
        }
    }
}

/// `R(a, c) - sum_k lambda_k * C_k(a, c)`.
pub fn linear_utility(
    action: &Action,
    ctx: &DecisionContext,
    spec: &UtilitySpec,
    registry: &EvaluatorRegistry,
) -> Result<f64> {
    spec.validate()?;
    let reward = registry.evaluate(&spec.reward, action, ctx)?;
    let mut cost = 0.0;
    for term in &spec.costs {
        cost += term.weight * registry.evaluate(&term.evaluator, action, ctx)?;
    }
    Ok(reward - cost)
}

/// Feasible action with the highest linear utility. Ties go to the
/// lexicographically smallest action id.
pub fn utility_argmax(
    ctx: &DecisionContext,
    actions: &[Action],
    spec: &UtilitySpec,
    registry: &EvaluatorRegistry,
) -> Result<Action> {
    if actions.is_empty() {
        return Err(Error::Precondition("no actions offered".to_string()));
    }
    let mut best: Option<(&Action, f64)> = None;
    for action in actions {
        if !registry.feasible(&spec.feasibility, action, ctx)? {
            continue;
        }
        let u = linear_utility(action, ctx, spec, registry)?;
        best = match best {
            None => Some((action, u)),
            Some((b, bu)) if u > bu || (u == bu && action.id < b.id) => Some((action, u)),
            keep => keep,
        };
    }
    best.map(|(a, _)| a.clone()).ok_or(Error::NoFeasibleAction)
}

/// A utility decision problem as stored in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityProblem {
    pub actions: Vec<Action>,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub context: DecisionContext,
}

impl UtilityProblem {
    pub fn from_json(text: &str) -> Result<Self> {
        let problem: UtilityProblem = serde_json::from_str(text)?;
        problem.utility.validate()?;
        for a in &problem.actions {
            a.validate_payload()?;
        }
        Ok(problem)
    }

    pub fn solve(&self, registry: &EvaluatorRegistry) -> Result<Action> {
        utility_argmax(&self.context, &self.actions, &self.utility, registry)
    }
}

// ─── Threshold rule and rule registry ────────────────────────────────────────

/// Execute when the sufficiency signal reaches `tau`, clarify otherwise.
pub fn threshold_rule(p_suff: &Signal, tau: f64) -> Action {
    if p_suff.value >= tau {
        Action::of_kind(ActionKind::Execute)
    } else {
        Action::of_kind(ActionKind::Clarify)
    }
}

pub type RuleParams = BTreeMap<String, f64>;

pub fn param(params: &RuleParams, name: &str, default: f64) -> Result<f64> {
    let v = params.get(name).copied().unwrap_or(default);
    if !v.is_finite() {
        return Err(Error::config(name, "parameter must be finite"));
    }
    Ok(v)
}

pub fn unit_param(params: &RuleParams, name: &str, default: f64) -> Result<f64> {
    let v = param(params, name, default)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(name, format!("{v} outside [0, 1]")));
    }
    Ok(v)
}

/// A deterministic policy over a [`DecisionContext`].
pub trait DecisionRule: Send + Sync {
    /// Actions this rule may choose from in `ctx`.
    fn offered(&self, params: &RuleParams, ctx: &DecisionContext) -> Vec<Action>;

    fn choose(&self, params: &RuleParams, ctx: &DecisionContext) -> Result<Action>;
}

/// The plain sufficiency threshold. Reads signal `p_suff`, param `tau` (default 1.0).
pub struct ThresholdRule;

impl DecisionRule for ThresholdRule {
    fn offered(&self, _: &RuleParams, _: &DecisionContext) -> Vec<Action> {
        vec![
            Action::of_kind(ActionKind::Execute),
            Action::of_kind(ActionKind::Clarify),
        ]
    }

    fn choose(&self, params: &RuleParams, ctx: &DecisionContext) -> Result<Action> {
        let tau = unit_param(params, "tau", 1.0)?;
        Ok(threshold_rule(ctx.signal("p_suff")?, tau))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub context: DecisionContext,
    pub offered: Vec<Action>,
    pub chosen: Action,
    pub rule_id: String,
    pub params: RuleParams,
}

/// Immutable after construction; share it across episodes behind an `Arc`
/// or a reference.
#[derive(Clone)]
pub struct RuleRegistry {
    rules: BTreeMap<String, Arc<dyn DecisionRule>>,
}

impl RuleRegistry {
    pub fn empty() -> Self {
        RuleRegistry {
            rules: BTreeMap::new(),
        }
    }

    /// `threshold`, `calendar_dc`, `graph_dc` and `retrieval_threshold`.
    pub fn with_builtin_rules() -> Self {
        let mut r = Self::empty();
        r.register("threshold", ThresholdRule);
        r.register("calendar_dc", crate::calendar::CalendarDcRule);
        r.register("graph_dc", crate::graph::GraphDcRule);
        r.register("retrieval_threshold", crate::retrieval::RetrievalThresholdRule);
        r
    }

    pub fn register(&mut self, id: &str, rule: impl DecisionRule + 'static) {
        self.rules.insert(id.to_string(), Arc::new(rule));
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }

    pub fn decide(
        &self,
        rule_id: &str,
        params: &RuleParams,
        ctx: &DecisionContext,
    ) -> Result<DecisionRecord> {
        let rule = self
            .rules
            .get(rule_id)
            .ok_or_else(|| Error::config("rule_id", format!("unknown rule `{rule_id}`")))?;
        let offered = rule.offered(params, ctx);
        let chosen = rule.choose(params, ctx)?;
        if !offered.iter().any(|a| a.id == chosen.id) {
            return Err(Error::InconsistentState(format!(
                "rule `{rule_id}` chose `{}` outside its offered set",
                chosen.id
            )));
        }
        Ok(DecisionRecord {
            context: ctx.clone(),
            offered,
            chosen,
            rule_id: rule_id.to_string(),
            params: params.clone(),
        })
    }
}

impl Default for RuleRegistry {
    fn default() -> Self {
        Self::with_builtin_rules()
    }
}

/// Registry shared by the environments.
pub fn builtin_rules() -> &'static RuleRegistry {
    static REGISTRY: std::sync::OnceLock<RuleRegistry> = std::sync::OnceLock::new();
    REGISTRY.get_or_init(RuleRegistry::with_builtin_rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn routing() -> (Vec<Action>, UtilitySpec) {
        let actions = vec![
            Action::new("large", ActionKind::Custom)
                .with("quality", 0.9)
                .with("price", 0.5),
            Action::new("small", ActionKind::Custom)
                .with("quality", 0.6)
                .with("price", 0.1),
        ];
        let spec = UtilitySpec {
            reward: "payload:quality".into(),
            costs: vec![CostTerm {
                evaluator: "payload:price".into(),
                weight: 1.0,
            }],
            feasibility: "all".into(),
        };
        (actions, spec)
    }

    #[test]
    fn utility_without_costs_is_reward() {
        let spec = UtilitySpec {
            reward: "const:1.0".into(),
            costs: vec![],
            feasibility: "all".into(),
        };
        let a = Action::of_kind(ActionKind::Execute);
        let u = linear_utility(&a, &DecisionContext::new(), &spec, &EvaluatorRegistry::new()).unwrap();
        assert_eq!(u, 1.0);
    }

    #[test]
    fn utility_single_cost_term() {
        let spec = UtilitySpec {
            reward: "const:1.0".into(),
            costs: vec![CostTerm {
                evaluator: "const:0.5".into(),
                weight: 0.4,
            }],
            feasibility: "all".into(),
        };
        let a = Action::of_kind(ActionKind::Execute);
        let u = linear_utility(&a, &DecisionContext::new(), &spec, &EvaluatorRegistry::new()).unwrap();
        assert!((u - 0.8).abs() < 1e-12);
    }

    #[test]
    fn routing_demo_prefers_cheap_model() {
        let (actions, spec) = routing();
        let reg = EvaluatorRegistry::new();
        let ctx = DecisionContext::new();
        // brute force: 0.9 - 0.5 and 0.6 - 0.1
        let expected = [0.4, 0.5];
        for (a, e) in actions.iter().zip(expected) {
            let u = linear_utility(a, &ctx, &spec, &reg).unwrap();
            assert!((u - e).abs() < 1e-12, "{} -> {u}", a.id);
        }
        assert_eq!(utility_argmax(&ctx, &actions, &spec, &reg).unwrap().id, "small");
    }

    #[test]
    fn argmax_singleton_and_ties() {
        let reg = EvaluatorRegistry::new();
        let spec = UtilitySpec {
            reward: "const:0.3".into(),
            costs: vec![],
            feasibility: "all".into(),
        };
        let ctx = DecisionContext::new();
        let only = vec![Action::new("z", ActionKind::Custom)];
        assert_eq!(utility_argmax(&ctx, &only, &spec, &reg).unwrap().id, "z");
        let tied = vec![
            Action::new("b", ActionKind::Custom),
            Action::new("a", ActionKind::Custom),
        ];
        assert_eq!(utility_argmax(&ctx, &tied, &spec, &reg).unwrap().id, "a");
    }

    #[test]
    fn argmax_empty_feasible_set() {
        let (actions, mut spec) = routing();
        spec.feasibility = "payload_true:available".into();
        let err = utility_argmax(&DecisionContext::new(), &actions, &spec, &EvaluatorRegistry::new());
        assert!(matches!(err, Err(Error::NoFeasibleAction)));
    }

    #[test]
    fn evaluator_failure_is_tagged() {
        let (actions, mut spec) = routing();
        spec.reward = "payload:latency".into();
        let err = linear_utility(&actions[0], &DecisionContext::new(), &spec, &EvaluatorRegistry::new());
        assert!(matches!(err, Err(Error::Evaluation { ref evaluator, .. }) if evaluator == "payload:latency"));
    }

    #[test]
    fn negative_weight_rejected() {
        let (actions, mut spec) = routing();
        spec.costs[0].weight = -1.0;
        let err = linear_utility(&actions[0], &DecisionContext::new(), &spec, &EvaluatorRegistry::new());
        assert!(matches!(err, Err(Error::Config { ref field, .. }) if field == "costs[0].weight"));
    }

    #[test]
    fn threshold_examples() {
        let s = |v| Signal::new("p_suff", v, SignalSource::Oracle).unwrap();
        assert_eq!(threshold_rule(&s(1.0), 0.9).kind, ActionKind::Execute);
        assert_eq!(threshold_rule(&s(0.75), 1.0).kind, ActionKind::Clarify);
        assert_eq!(threshold_rule(&s(0.8), 0.8).kind, ActionKind::Execute);
    }

    #[test]
    fn decide_dispatches_and_rejects_unknown() {
        let reg = RuleRegistry::with_builtin_rules();
        let ctx = DecisionContext::new()
            .with_signal(Signal::new("p_suff", 1.0, SignalSource::Oracle).unwrap());
        let params = RuleParams::from([("tau".to_string(), 1.0)]);
        let rec = reg.decide("threshold", &params, &ctx).unwrap();
        assert_eq!(rec.chosen.kind, ActionKind::Execute);
        assert_eq!(rec.context, ctx);
        assert!(matches!(
            reg.decide("unknown", &params, &ctx),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn clamped_signal() {
        let s = Signal::clamped("x", 1.7, SignalSource::External).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(Signal::new("x", 1.7, SignalSource::External).is_err());
        assert!(Signal::clamped("x", f64::NAN, SignalSource::External).is_err());
    }

    #[test]
    fn context_validation() {
        let ctx = DecisionContext::new()
            .with_counter("turn", 2)
            .with_counter("budget", 6)
            .with_history(vec!["a".into(), "b".into()]);
        ctx.validate().unwrap();
        let bad = ctx.clone().with_counter("turn", 7);
        assert!(bad.validate().is_err());
        let bad = ctx.with_history(vec![]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn payload_schema() {
        let ok = Action::of_kind(ActionKind::Expand).with("k", 6);
        ok.validate_payload().unwrap();
        let bad = Action::of_kind(ActionKind::Expand).with("model", "x");
        assert!(bad.validate_payload().is_err());
    }
}
