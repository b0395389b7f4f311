//! Worked examples for the calendar, trace and retrieval operations, the
//! shipped demo configs, and the CLI.

use std::path::{Path, PathBuf};
use std::process::Command;

use dcbench::calendar::{
    calendar_metrics, dc_policy, execute_event, find_scenario, generate_question, generate_scenarios,
    initial_conversation, oracle_extract, run_calendar_episode, simulate_user, CalendarConfig, CalendarMethod,
    ExtractorReport, Field, Message, QuestionMode, Speaker,
};
use dcbench::decision::{ActionKind, EvaluatorRegistry, UtilityProblem};
use dcbench::harness::{load_config, run_experiment, Experiment};
use dcbench::retrieval::{
    build_bm25_index, controller_step, oracle_judge_signal, sweep, Bucket, ControllerConfig, Passage,
};
use dcbench::trace::{append_turn, load_traces, replay_threshold_controller, EpisodeTrace, Outcome, TurnRecord};
use dcbench::Error;

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

// ─── calendar ────────────────────────────────────────────────────────────────

#[test]
fn scenario_queries() {
    let s = generate_scenarios();
    assert_eq!(s.len(), 8);
    assert_eq!(
        find_scenario("k0").unwrap().initial_query,
        "Schedule a meeting with Jack on 2026-02-17 at 11:30 for 30 minutes."
    );
    assert_eq!(find_scenario("k4").unwrap().initial_query, "Schedule a meeting.");
}

#[test]
fn extraction_and_lock() {
    let s = find_scenario("k1_absent").unwrap();
    let mut conv = initial_conversation(&s);
    let r = oracle_extract(&conv, &s, &ExtractorReport::empty());
    assert!(approx(r.p_suff(), 0.75));
    assert_eq!(r.missing(), vec![Field::DurationMin]);

    let answer = simulate_user(&[Field::DurationMin], &s.private_facts);
    assert!(answer.text.contains("30 minutes"));
    conv.push(Message {
        speaker: Speaker::User,
        text: answer.text,
        mentions: answer.values,
        targets: Vec::new(),
    });
    let r2 = oracle_extract(&conv, &s, &r);
    assert!(approx(r2.p_suff(), 1.0));

    // A later scan that loses a field cannot unconfirm it.
    let locked = oracle_extract(&conv[..1], &s, &r2);
    assert!(approx(locked.p_suff(), 1.0));
}

#[test]
fn policy_branches() {
    assert_eq!(dc_policy(1.0, None, None), ActionKind::Execute);
    assert_eq!(dc_policy(0.75, Some(ActionKind::Clarify), Some(true)), ActionKind::Clarify);
    assert_eq!(dc_policy(1.0, Some(ActionKind::Execute), Some(false)), ActionKind::Clarify);
}

#[test]
fn question_modes() {
    let q = generate_question(&[Field::DurationMin], &[Field::Date], QuestionMode::Targeted, 0.0, 0).unwrap();
    assert_eq!(q.targets, vec![Field::DurationMin]);

    let all = Field::OMISSION_ORDER.to_vec();
    let q = generate_question(&all, &[], QuestionMode::Targeted, 0.0, 0).unwrap();
    assert_eq!(q.targets.len(), 4);

    let q = generate_question(&[Field::DurationMin], &[Field::Date], QuestionMode::Drifting, 1.0, 7).unwrap();
    assert!(q.targets.contains(&Field::Date));
    assert!(!q.targets.contains(&Field::DurationMin));

    assert!(matches!(
        generate_question(&[], &[], QuestionMode::Targeted, 0.0, 0),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn user_answers_truth_even_when_vague() {
    let s = find_scenario("k1_unresolvable").unwrap();
    let a = simulate_user(&[Field::Date], &s.private_facts);
    assert!(a.text.contains("2026-02-17"));
    assert!(simulate_user(&[], &s.private_facts).values.is_empty());
}

#[test]
fn execution_nulls_and_vague_copies() {
    let s = find_scenario("k1_absent").unwrap();
    let conv = initial_conversation(&s);
    let r = oracle_extract(&conv, &s, &ExtractorReport::empty());
    let ex = execute_event(&r, &conv, &s.private_facts);
    assert!(ex.event.duration_min.is_none());
    assert!(!ex.valid);

    // A report that wrongly confirms a vague attendee string copies it verbatim.
    let mut conv = initial_conversation(&find_scenario("k0").unwrap());
    conv[0].mentions.insert(Field::Attendees, "the usual team".into());
    let full = ExtractorReport {
        fields: Field::OMISSION_ORDER.into_iter().map(|f| (f, true)).collect(),
    };
    let ex = execute_event(&full, &conv, &s.private_facts);
    assert_eq!(ex.event.attendees, Some(vec!["the usual team".to_string()]));
    assert!(!ex.valid);
}

#[test]
fn episode_rows() {
    let cfg = CalendarConfig::default();
    let k0 = run_calendar_episode(CalendarMethod::Dc, &find_scenario("k0").unwrap(), &cfg, 0).unwrap();
    assert!(k0.success);
    assert_eq!(k0.turns.len(), 1);

    let k2 = run_calendar_episode(CalendarMethod::Dc, &find_scenario("k2_absent").unwrap(), &cfg, 0).unwrap();
    assert!(k2.success);
    assert_eq!(k2.turns.len(), 2);
    assert_eq!(k2.metric("wasted"), Some(0.0));
    assert_eq!(k2.metric("clarifications"), Some(1.0));

    let retry = run_calendar_episode(CalendarMethod::Retry, &find_scenario("k1_absent").unwrap(), &cfg, 0).unwrap();
    assert!(!retry.success);
    assert_eq!(retry.turns.len(), 6);
    assert_eq!(retry.metric("wasted"), Some(6.0));

    let m = calendar_metrics(&[retry]).unwrap();
    assert!(approx(m.first_action_optimality, 0.0));
    let m = calendar_metrics(&[k0]).unwrap();
    assert!(approx(m.first_action_optimality, 1.0));
    assert!(calendar_metrics(&[]).is_err());
}

// ─── traces ──────────────────────────────────────────────────────────────────

fn turn(n: u32) -> TurnRecord {
    TurnRecord {
        turn: n,
        signals: Default::default(),
        flags: Default::default(),
        action: dcbench::decision::Action::of_kind(ActionKind::Clarify),
        outcome: Outcome::new(true),
        note: String::new(),
    }
}

#[test]
fn append_sequencing() {
    let t = append_turn(EpisodeTrace::new("s", "m", 0), turn(1)).unwrap();
    assert_eq!(t.turns.len(), 1);
    let t2 = append_turn(t.clone(), turn(2)).unwrap();
    assert_eq!(t2.turns.len(), 2);
    assert!(matches!(append_turn(t, turn(3)), Err(Error::Sequencing { .. })));
}

// ─── retrieval ───────────────────────────────────────────────────────────────

fn passage(id: &str, text: &str) -> Passage {
    Passage {
        id: id.into(),
        text: text.into(),
        source_question_id: None,
    }
}

#[test]
fn bm25_examples() {
    let idx = build_bm25_index(vec![
        passage("p1", "the red fox jumps"),
        passage("p2", "a blue whale sings"),
        passage("p3", "green trees grow tall"),
    ])
    .unwrap();
    assert_eq!(idx.rank("a blue whale sings")[0].0.id, "p2");
    let none = idx.rank("zebra");
    assert!(none.iter().all(|(_, s)| *s == 0.0));
    assert_eq!(none.iter().map(|(p, _)| p.id.as_str()).collect::<Vec<_>>(), ["p1", "p2", "p3"]);
    assert!(build_bm25_index(Vec::new()).is_err());
}

#[test]
fn buckets_from_rank() {
    assert_eq!(Bucket::from_rank(1), Bucket::Easy);
    assert_eq!(Bucket::from_rank(5), Bucket::Medium);
    assert_eq!(Bucket::from_rank(50), Bucket::Hard);
}

#[test]
fn judge_mapping() {
    let v = |gold: &str, c: f64| oracle_judge_signal(gold, &["Paris is in France"], c).unwrap().value;
    assert!(approx(v("paris", 1.0), 1.0));
    assert!(approx(v("Berlin", 1.0), 0.0));
    assert!(approx(v("Berlin", 0.9), 0.1));
}

#[test]
fn controller_examples() {
    let cfg = ControllerConfig::default();
    assert_eq!(controller_step(0.9, 0, &cfg).unwrap().kind, ActionKind::Stop);
    assert_eq!(controller_step(0.1, 2, &cfg).unwrap().kind, ActionKind::Stop);
    let expand = controller_step(0.5, 0, &cfg).unwrap();
    assert_eq!(expand.kind, ActionKind::Expand);
}

#[test]
fn fixture_sweep_rows() {
    let traces = load_traces(manifest("fixtures/sweep_traces.jsonl")).unwrap();
    assert_eq!(traces.len(), 150);
    let rows = sweep(&traces, &[0.5, 0.9], &[0.4], 2).unwrap();
    let medium = |tau: f64| {
        rows.iter()
            .find(|r| r.bucket == "medium" && approx(r.tau, tau))
            .unwrap()
            .success
    };
    assert!(approx(medium(0.5), 0.78));
    assert!(approx(medium(0.9), 0.92));

    for t in &traces {
        assert_eq!(replay_threshold_controller(t, 0.0, 0.4, 2).unwrap().rounds, 0);
        assert_eq!(replay_threshold_controller(t, 1.01, 0.4, 2).unwrap().rounds, 2);
    }
}

// ─── demo configs and harness ────────────────────────────────────────────────

#[test]
fn utility_demo_configs() {
    let reg = EvaluatorRegistry::new();
    for (file, want) in [("configs/routing.json", "small"), ("configs/inference_scaling.json", "samples_04")] {
        let text = std::fs::read_to_string(manifest(file)).unwrap();
        let chosen = UtilityProblem::from_json(&text).unwrap().solve(&reg).unwrap();
        assert_eq!(chosen.id, want, "{file}");
    }
}

#[test]
fn experiment_configs_load_and_shape_tables() {
    for (file, rows) in [("configs/calendar.json", 8), ("configs/graph.json", 5), ("configs/retrieval.json", 3)] {
        let mut cfg = load_config(manifest(file)).unwrap();
        cfg.runs = cfg.runs.min(2);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.table.rows.len(), rows, "{file}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"experiment":"retrieval","method":"dc_llm","retrieval":{"controller":{"tau":1.5}}}"#)
        .unwrap();
    let e = load_config(&p).unwrap_err().to_string();
    assert!(e.contains("tau"), "{e}");
    assert!(load_config(dir.path().join("missing.json")).is_err());

    let ok = dir.path().join("ok.json");
    std::fs::write(&ok, r#"{"experiment":"calendar"}"#).unwrap();
    let cfg = load_config(&ok).unwrap();
    assert_eq!(cfg.experiment, Experiment::Calendar);
    assert_eq!(cfg.runs, 10);
    assert_eq!(cfg.calendar.budget, 6);
}

#[test]
fn results_ignore_thread_count() {
    let cfg = load_config(manifest("configs/calendar.json")).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_experiment(&cfg)).unwrap();
    let b = four.install(|| run_experiment(&cfg)).unwrap();
    assert_eq!(
        serde_json::to_string(&a.traces).unwrap(),
        serde_json::to_string(&b.traces).unwrap()
    );
}

// ─── CLI ─────────────────────────────────────────────────────────────────────

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcbench"))
}

#[test]
fn cli_run_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["run", "--config"])
        .arg(manifest("configs/graph.json"))
        .env("DCBENCH_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_some());

    let out = cli()
        .args(["sweep", "--traces"])
        .arg(manifest("fixtures/sweep_traces.jsonl"))
        .args(["--tau-grid", "0.9", "--format", "csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("medium"), "{text}");

    let bad = cli().args(["run", "retrieval", "--tau", "1.5"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("tau"));
}
