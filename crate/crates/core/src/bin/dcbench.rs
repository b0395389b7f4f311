use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dcbench::calendar;
use dcbench::graph;
use dcbench::harness::{
    load_config, run_experiment, table_from_traces, write_outputs, Experiment, ExperimentConfig,
};
use dcbench::report::{emit_report, Cell, Format, ReportTable};
use dcbench::retrieval::{self, BucketCounts};
use dcbench::trace::{attribute_calendar_failure, attribute_retrieval_failure, load_traces};
use dcbench::{Error, Result};

#[derive(Parser)]
#[command(name = "dcbench", version, about = "Decision-layer benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the calendar scenarios as JSON.
    GenScenarios {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the organisation graph and its S1-S5 scenarios.
    GenGraph {
        #[arg(long, default_value_t = graph::DEFAULT_GRAPH_SEED)]
        seed: u64,
        #[arg(long, default_value_t = graph::DEFAULT_NODES)]
        nodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus (passages.jsonl, questions.jsonl).
    SynthCorpus {
        /// Question counts per bucket: easy,medium,hard
        #[arg(long, default_value = "50,50,50")]
        counts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment from flags or a config file.
    Run(RunArgs),
    /// Replay saved retrieval traces over a (tau, alpha) grid.
    Sweep {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        tau_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.4")]
        alpha_grid: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        budget: u32,
        #[arg(long, value_enum, default_value_t = OutFormat::Md)]
        format: OutFormat,
    },
    /// Label each failed episode of a trace file.
    Attribute {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 2)]
        budget: u32,
    },
    /// Rebuild a results table from saved traces.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long, value_enum, default_value_t = OutFormat::Md)]
        format: OutFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Calendar,
    Graph,
    Retrieval,
}

impl From<EnvArg> for Experiment {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Calendar => Experiment::Calendar,
            EnvArg::Graph => Experiment::Graph,
            EnvArg::Retrieval => Experiment::Retrieval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Md,
    Csv,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Md => Format::Markdown,
            OutFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Environment; not needed with --config.
    #[arg(value_enum)]
    env: Option<EnvArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario id (repeatable).
    #[arg(long)]
    scenario: Vec<String>,
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Calendar: probability that a question drifts to a confirmed field.
    /// Any value above zero switches to drifting questions.
    #[arg(long)]
    drift_rate: Option<f64>,
    /// Calendar: extractor false-negative rate.
    #[arg(long)]
    noise_fn: Option<f64>,
    /// Synthetic bucket counts easy,medium,hard.
    #[arg(long, conflicts_with = "corpus")]
    synth: Option<String>,
    /// Directory holding passages.jsonl and questions.jsonl.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutFormat>,
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, a.env) {
        (Some(path), _) => load_config(path)?,
        (None, Some(env)) => {
            let exp = Experiment::from(env);
            let default_method = if exp == Experiment::Retrieval { "dc_composite" } else { "dc" };
            ExperimentConfig::new(exp, default_method)
        }
        (None, None) => return Err(Error::config("env", "give an environment or --config")),
    };
    if let Some(m) = &a.method {
        cfg.method = m.clone();
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
        cfg.retrieval.synth_seed = s;
    }
    if !a.scenario.is_empty() {
        cfg.scenarios = a.scenario.clone();
    }
    if let Some(b) = a.budget {
        cfg.calendar.budget = b;
    }
    if let Some(r) = a.drift_rate {
        cfg.calendar.drift_rate = r;
        if r > 0.0 {
            cfg.calendar.question_mode = calendar::QuestionMode::Drifting;
        }
    }
    if let Some(r) = a.noise_fn {
        cfg.calendar.false_negative_rate = r;
    }
    if let Some(t) = a.tau {
        cfg.retrieval.controller.tau = t;
    }
    if let Some(al) = a.alpha {
        cfg.retrieval.controller.alpha = al;
    }
    if let Some(s) = &a.synth {
        cfg.retrieval.synth = BucketCounts::parse(s)?;
    }
    if let Some(dir) = &a.corpus {
        cfg.retrieval.passages = Some(dir.join("passages.jsonl"));
        cfg.retrieval.questions = Some(dir.join("questions.jsonl"));
    }
    if let Some(o) = &a.out {
        cfg.output.dir = Some(o.clone());
    }
    if let Some(f) = a.format {
        cfg.output.format = f.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenarios { out } => {
            let scenarios = calendar::generate_scenarios();
            match out {
                Some(path) => write_json(&path, &scenarios)?,
                None => println!("{}", serde_json::to_string_pretty(&scenarios)?),
            }
        }
        Command::GenGraph { seed, nodes, out } => {
            ensure_dir(&out)?;
            let g = graph::generate_graph(nodes, seed)?;
            let scenarios = graph::build_scenarios(&g)?;
            write_json(&out.join("graph.json"), &g)?;
            write_json(&out.join("graph_scenarios.json"), &scenarios)?;
            println!("{} nodes, {} edges, {} scenarios", g.nodes.len(), g.edges.len(), scenarios.len());
        }
        Command::SynthCorpus { counts, seed, out } => {
            ensure_dir(&out)?;
            let c = retrieval::synthesize_corpus(BucketCounts::parse(&counts)?, seed)?;
            retrieval::write_jsonl(&out.join("passages.jsonl"), &c.passages)?;
            retrieval::write_jsonl(&out.join("questions.jsonl"), &c.questions)?;
            println!("{} passages, {} questions", c.passages.len(), c.questions.len());
        }
        Command::Run(args) => {
            let cfg = build_config(&args)?;
            let result = run_experiment(&cfg)?;
            match cfg.output_dir() {
                Some(dir) => {
                    let report = write_outputs(&dir, &result, cfg.output.format)?;
                    println!("{}", emit_report(&result.table, cfg.output.format));
                    log::info!("wrote {}", report.display());
                }
                None => print!("{}", emit_report(&result.table, cfg.output.format)),
            }
        }
        Command::Sweep {
            traces,
            tau_grid,
            alpha_grid,
            budget,
            format,
        } => {
            let traces = load_traces(&traces)?;
            let rows = retrieval::sweep(&traces, &tau_grid, &alpha_grid, budget)?;
            let mut t = ReportTable::new("Offline threshold sweep", &["Bucket", "alpha", "tau", "N", "Succ.", "RR"]);
            for r in rows {
                t.push(
                    r.bucket,
                    vec![
                        Cell::Text(format!("{:.1}", r.alpha)),
                        Cell::Text(format!("{:.2}", r.tau)),
                        Cell::Int(r.n as i64),
                        Cell::Percent(r.success),
                        Cell::Rate(r.avg_rounds),
                    ],
                )?;
            }
            print!("{}", emit_report(&t, format.into()));
        }
        Command::Attribute {
            traces,
            env,
            tau,
            budget,
        } => {
            let traces = load_traces(&traces)?;
            for t in traces.iter().filter(|t| !t.success) {
                let label = match env {
                    EnvArg::Retrieval => attribute_retrieval_failure(t, tau, budget)?,
                    EnvArg::Calendar => {
                        let s = calendar::find_scenario(&t.scenario_id)
                            .ok_or_else(|| Error::Data(format!("unknown calendar scenario `{}`", t.scenario_id)))?;
                        attribute_calendar_failure(t, &s)?
                    }
                    EnvArg::Graph => return Err(Error::config("env", "graph traces have no attribution rules")),
                };
                println!("{}\t{}\t{}", t.scenario_id, t.seed, label.category.as_str());
            }
        }
        Command::Report { traces, env, format } => {
            let traces = load_traces(&traces)?;
            let table = table_from_traces(env.into(), &traces)?;
            print!("{}", emit_report(&table, format.into()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
