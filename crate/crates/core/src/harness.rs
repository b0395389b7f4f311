//! Experiment configuration, seeded parallel runs and result tables.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{self, calendar_metrics, run_calendar_episode, CalendarConfig, CalendarMethod};
use crate::decision::RuleParams;
use crate::error::{Error, Result};
use crate::graph::{self, graph_metrics, run_graph_episode_with, GraphMethod};
use crate::report::{emit_report, Cell, Format, ReportTable};
use crate::retrieval::{
    self, load_corpus, prepare, run_retrieval_episode, trace_bucket, Bucket, BucketCounts, ControllerConfig,
    RetrievalMethod, SignalConfig,
};
use crate::trace::{save_traces, EpisodeTrace};

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "DCBENCH_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Calendar,
    Graph,
    Retrieval,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Calendar => "calendar",
            Experiment::Graph => "graph",
            Experiment::Retrieval => "retrieval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Calendar, Self::Graph, Self::Retrieval]
            .into_iter()
            .find(|e| e.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub tau_suff: f64,
    pub theta_corr: f64,
    pub nodes: usize,
    pub graph_seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            tau_suff: graph::TAU_SUFF,
            theta_corr: graph::THETA_CORR,
            nodes: graph::DEFAULT_NODES,
            graph_seed: graph::DEFAULT_GRAPH_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub controller: ControllerConfig,
    pub synth: BucketCounts,
    pub synth_seed: u64,
    pub oracle_confidence: f64,
    /// Passage and question JSONL files; synthetic data when absent.
    pub passages: Option<PathBuf>,
    pub questions: Option<PathBuf>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            controller: ControllerConfig::default(),
            synth: BucketCounts {
                easy: 50,
                medium: 50,
                hard: 50,
            },
            synth_seed: 0,
            oracle_confidence: 1.0,
            passages: None,
            questions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub format: Format,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            format: Format::Markdown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Scenario ids to run; all when empty.
    #[serde(default)]
    pub scenarios: Vec<String>,
    #[serde(default)]
    pub calendar: CalendarConfig,
    #[serde(default)]
    pub graph: GraphParams,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_method() -> String {
    "dc".into()
}

fn default_runs() -> usize {
    10
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, method: &str) -> Self {
        ExperimentConfig {
            experiment,
            method: method.into(),
            runs: default_runs(),
            base_seed: 0,
            scenarios: Vec::new(),
            calendar: CalendarConfig::default(),
            graph: GraphParams::default(),
            retrieval: RetrievalParams::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        match self.experiment {
            Experiment::Calendar => {
                self.calendar_method()?;
                self.calendar.validate().map_err(|e| prefix("calendar", e))?;
            }
            Experiment::Graph => {
                self.graph_method()?;
                for (name, v) in [("graph.tau_suff", self.graph.tau_suff), ("graph.theta_corr", self.graph.theta_corr)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::config(name, format!("{v} outside [0, 1]")));
                    }
                }
            }
            Experiment::Retrieval => {
                self.retrieval_method()?;
                self.retrieval
                    .controller
                    .validate()
                    .map_err(|e| prefix("retrieval.controller", e))?;
                if !(0.0..=1.0).contains(&self.retrieval.oracle_confidence) {
                    return Err(Error::config("retrieval.oracle_confidence", "outside [0, 1]"));
                }
                if self.retrieval.passages.is_some() != self.retrieval.questions.is_some() {
                    return Err(Error::config(
                        "retrieval.passages",
                        "passages and questions must be given together",
                    ));
                }
            }
        }
        Ok(())
    }

    fn calendar_method(&self) -> Result<CalendarMethod> {
        match self.method.as_str() {
            "dc" => Ok(CalendarMethod::Dc),
            "retry" => Ok(CalendarMethod::Retry),
            m => Err(Error::config("method", format!("unknown calendar method `{m}`"))),
        }
    }

    fn graph_method(&self) -> Result<GraphMethod> {
        match self.method.as_str() {
            "dc" => Ok(GraphMethod::Dc),
            "retry" => Ok(GraphMethod::Retry),
            m => Err(Error::config("method", format!("unknown graph method `{m}`"))),
        }
    }

    fn retrieval_method(&self) -> Result<RetrievalMethod> {
        RetrievalMethod::parse(&self.method)
            .ok_or_else(|| Error::config("method", format!("unknown retrieval method `{}`", self.method)))
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> Option<PathBuf> {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output.dir.clone())
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub traces: Vec<EpisodeTrace>,
    pub table: ReportTable,
}

fn tag_run<T>(run: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Run {
        run,
        source: Box::new(e),
    })
}

/// Runs `f(run_index, seed)` for every run in parallel; results come back
/// in run order.
fn par_runs<F>(runs: usize, base_seed: u64, f: F) -> Result<Vec<EpisodeTrace>>
where
    F: Fn(usize, u64) -> Result<EpisodeTrace> + Sync,
{
    let mut out: Vec<(usize, EpisodeTrace)> = (0..runs)
        .into_par_iter()
        .map(|i| tag_run(i, f(i, base_seed + i as u64)).map(|t| (i, t)))
        .collect::<Result<_>>()?;
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, t)| t).collect())
}

fn wanted(filter: &[String], id: &str) -> bool {
    filter.is_empty() || filter.iter().any(|s| s == id)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let traces = match config.experiment {
        Experiment::Calendar => {
            let method = config.calendar_method()?;
            let mut all = Vec::new();
            for s in calendar::generate_scenarios() {
                if !wanted(&config.scenarios, &s.id) {
                    continue;
                }
                all.extend(par_runs(config.runs, config.base_seed, |_, seed| {
                    run_calendar_episode(method, &s, &config.calendar, seed)
                })?);
            }
            all
        }
        Experiment::Graph => {
            let method = config.graph_method()?;
            let g = graph::generate_graph(config.graph.nodes, config.graph.graph_seed)?;
            let params = RuleParams::from([
                ("tau_suff".to_string(), config.graph.tau_suff),
                ("theta_corr".to_string(), config.graph.theta_corr),
            ]);
            let mut all = Vec::new();
            for s in graph::build_scenarios(&g)? {
                if !wanted(&config.scenarios, &s.id) {
                    continue;
                }
                all.extend(par_runs(config.runs, config.base_seed, |_, seed| {
                    run_graph_episode_with(method, &g, &s, seed, &params)
                })?);
            }
            all
        }
        Experiment::Retrieval => run_retrieval(config)?,
    };
    let table = table_from_traces(config.experiment, &traces)?;
    Ok(ExperimentResult { traces, table })
}

fn run_retrieval(config: &ExperimentConfig) -> Result<Vec<EpisodeTrace>> {
    let method = config.retrieval_method()?;
    let rp = &config.retrieval;
    let corpus = match (&rp.passages, &rp.questions) {
        (Some(p), Some(q)) => load_corpus(p, q)?,
        _ => retrieval::synthesize_corpus(rp.synth, rp.synth_seed)?,
    };
    let signals = SignalConfig {
        oracle_confidence: rp.oracle_confidence,
        ..SignalConfig::default()
    };
    let prepared = prepare(corpus, &signals)?;
    let mut out: Vec<(usize, EpisodeTrace)> = prepared
        .questions
        .par_iter()
        .zip(prepared.states.par_iter())
        .enumerate()
        .map(|(i, (q, st))| tag_run(i, run_retrieval_episode(method, q, st, &rp.controller)).map(|t| (i, t)))
        .collect::<Result<_>>()?;
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, t)| t).collect())
}

/// Groups traces by key, keeping first-seen order.
fn group_by<'a>(traces: &'a [EpisodeTrace], key: impl Fn(&EpisodeTrace) -> String) -> Vec<(String, Vec<EpisodeTrace>)> {
    let mut groups: Vec<(String, Vec<EpisodeTrace>)> = Vec::new();
    for t in traces {
        let k = key(t);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(t.clone()),
            None => groups.push((k, vec![t.clone()])),
        }
    }
    groups
}

/// Aggregates saved traces into the table for their environment.
pub fn table_from_traces(experiment: Experiment, traces: &[EpisodeTrace]) -> Result<ReportTable> {
    let method = traces.first().map(|t| t.method_id.clone()).unwrap_or_default();
    match experiment {
        Experiment::Calendar => {
            let mut t = ReportTable::new(
                format!("Calendar results by scenario ({method})"),
                &["Scenario", "k", "Success", "1st", "Wasted", "Clarif.", "Turns"],
            );
            for (id, group) in group_by(traces, |t| t.scenario_id.clone()) {
                let m = calendar_metrics(&group)?;
                let k = group[0].metric("k").unwrap_or(0.0) as i64;
                t.push(
                    id,
                    vec![
                        Cell::Int(k),
                        Cell::Percent(m.success_rate),
                        Cell::Percent(m.first_action_optimality),
                        Cell::Rate(m.wasted_executions),
                        Cell::Rate(m.clarifications),
                        Cell::Rate(m.avg_turns),
                    ],
                )?;
            }
            Ok(t)
        }
        Experiment::Graph => {
            let mut t = ReportTable::new(
                format!("Graph disambiguation by scenario ({method})"),
                &["Scenario", "Success", "Wasted", "Clarify", "Backtrack"],
            );
            let mut groups = group_by(traces, |t| t.scenario_id.clone());
            groups.sort_by(|a, b| a.0.cmp(&b.0));
            for (id, group) in groups {
                let m = graph_metrics(&group)?;
                t.push(
                    id,
                    vec![
                        Cell::Percent(m.success_rate),
                        Cell::Rate(m.wasted_traversals),
                        Cell::Rate(m.clarify_count),
                        Cell::Rate(m.backtrack_count),
                    ],
                )?;
            }
            Ok(t)
        }
        Experiment::Retrieval => {
            let mut t = ReportTable::new(
                format!("Retrieval control by bucket ({method})"),
                &["Bucket", "N", "Succ.", "RR"],
            );
            let mut groups = group_by(traces, |t| trace_bucket(t).to_string());
            groups.sort_by_key(|(b, _)| Bucket::parse(b).map_or(3, |b| b as usize));
            for (bucket, group) in groups {
                let n = group.len() as f64;
                let ok = group.iter().filter(|t| t.success).count() as f64;
                let rounds: f64 = group.iter().map(|t| t.metric("stop_round").unwrap_or(0.0)).sum();
                t.push(
                    bucket,
                    vec![Cell::Int(group.len() as i64), Cell::Percent(ok / n), Cell::Rate(rounds / n)],
                )?;
            }
            Ok(t)
        }
    }
}

/// Writes `traces.jsonl` and the report into `dir`; returns the report path.
pub fn write_outputs(dir: &Path, result: &ExperimentResult, format: Format) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    save_traces(dir.join("traces.jsonl"), &result.traces)?;
    let report = dir.join(format!("report.{}", format.extension()));
    std::fs::write(&report, emit_report(&result.table, format)).map_err(|e| Error::file(&report, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(r#"{"experiment": "calendar"}"#).unwrap();
        assert_eq!(c.calendar.budget, 6);
        assert_eq!(c.runs, 10);
        let g = parse_config(r#"{"experiment": "graph"}"#).unwrap();
        assert_eq!((g.graph.tau_suff, g.graph.theta_corr), (0.4, 0.5));
        let r = parse_config(r#"{"experiment": "retrieval", "method": "dc_composite"}"#).unwrap();
        assert_eq!((r.retrieval.controller.tau, r.retrieval.controller.alpha), (0.8, 0.4));
    }

    #[test]
    fn out_of_range_names_field() {
        let e = parse_config(r#"{"experiment": "retrieval", "method": "dc_llm", "retrieval": {"controller": {"tau": 1.5}}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("tau"), "{e}");
        assert!(matches!(load_config("/nonexistent/cfg.json"), Err(Error::File { .. })));
    }
}
