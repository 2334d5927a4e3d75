mod common;

use std::collections::BTreeSet;

use common::{fixture_source, fixture_spec, parse, with_interaction, Session};
use xpflow_core::events::EventKind;
use xpflow_core::executor::{estimate_experiment_cost, ExecError, ReportStatus, RunStatus, TaskStatus};
use xpflow_core::interaction::{Involvement, NoResponder, Response, ScriptedResponder};
use xpflow_core::knowledge::{LineageQuery, Redundancy};
use xpflow_core::model::Verdict;

fn supervisor_every(k: usize) -> xpflow_core::ExperimentSpec {
    with_interaction(&format!(
        "interaction {{\n    checkpoint after {k} configurations role supervisor cost 1 min;\n    budget 100 min;\n  }}"
    ))
}

#[test]
fn supervisor_prune_after_five_leaves_five_runs() {
    let mut answers = ScriptedResponder::new([Response::Prune {
        configs: vec![5, 6, 7, 8],
    }]);
    let report = Session::new().run(&supervisor_every(5), &mut answers);
    assert_eq!(report.runs.len(), 5);
    let ran: BTreeSet<usize> = report.runs.iter().map(|r| r.configuration.ordinal).collect();
    assert_eq!(ran, (0..5).collect());
    assert_eq!(report.pruned.len(), 4);
    assert_eq!(report.budget.used_min, 1.0);
}

#[test]
fn pruning_a_config_that_already_ran_is_rejected() {
    let mut answers = ScriptedResponder::new([Response::Prune { configs: vec![0] }]);
    let report = Session::new().run(&supervisor_every(5), &mut answers);
    assert_eq!(report.runs.len(), 9);
    let first = &report.interactions[0];
    assert!(first.error.as_deref().unwrap().contains('0'), "{first:?}");
    assert_eq!(first.charged_min, 0.0);
}

#[test]
fn abort_stops_scheduling() {
    let mut answers = ScriptedResponder::new([Response::Abort]);
    let report = Session::new().run(&supervisor_every(3), &mut answers);
    assert_eq!(report.status, ReportStatus::AbortedByUser);
    assert_eq!(report.runs.len(), 3);
}

#[test]
fn prioritize_reorders_pending_work() {
    let mut answers = ScriptedResponder::new([Response::Prioritize { configs: vec![8, 7] }]);
    let report = Session::new().run(&supervisor_every(1), &mut answers);
    let order: Vec<usize> = report.runs.iter().map(|r| r.configuration.ordinal).collect();
    assert_eq!(order, [0, 8, 7, 1, 2, 3, 4, 5, 6]);
}

#[test]
fn failed_task_skips_downstream_and_excludes_run() {
    let src = fixture_source("experiment.xp").replace(r#""sh stubs/train.sh cnn""#, r#""sh stubs/fail.sh""#);
    let mut s = Session::new();
    let report = s.run(&parse(&src), &mut NoResponder);
    assert_eq!(report.runs.len(), 9);
    let failed: Vec<_> = report.runs.iter().filter(|r| r.status == RunStatus::Failed).collect();
    assert_eq!(failed.len(), 3);
    for r in &failed {
        let statuses: Vec<TaskStatus> = r.tasks.iter().map(|t| t.status).collect();
        assert_eq!(
            statuses,
            [TaskStatus::Ok, TaskStatus::Ok, TaskStatus::Ok, TaskStatus::Failed, TaskStatus::Skipped]
        );
        assert!(r.metric("accuracy").is_none());
        let log = s.store.path().join("runs/predictive_maintenance").join(&r.run_id).join("train_model/log.txt");
        assert!(std::fs::read_to_string(log).unwrap().contains("simulated failure"));
    }
    // best surviving row of the table: rnn at lr 0.01
    assert_eq!(report.winner.unwrap().value, 0.83);
    // failed runs are never served from cache
    let again = s.run(&parse(&src), &mut NoResponder);
    assert_eq!(again.spawned_processes, 3 * 4);
}

#[test]
fn hard_constraint_excludes_winner() {
    let src = fixture_source("experiment.xp").replace("latency_ms <= 50", "latency_ms <= 30");
    let report = Session::new().run(&parse(&src), &mut NoResponder);
    let cnn = report
        .runs
        .iter()
        .find(|r| r.configuration.label().contains("cnn"))
        .unwrap();
    assert_eq!(cnn.verdicts[0].verdict, Verdict::Violated);
    assert_eq!(report.winner.unwrap().value, 0.83);

    let src = fixture_source("experiment.xp").replace("latency_ms <= 50", "latency_ms <= 5");
    let report = Session::new().run(&parse(&src), &mut NoResponder);
    assert_eq!(report.status, ReportStatus::NoFeasibleConfiguration);
    assert!(report.winner.is_none());
}

#[test]
fn parallel_workers_match_sequential_results() {
    let seq = Session::new().run(&fixture_spec(), &mut NoResponder);
    let mut par_session = Session::with_options(tempfile::tempdir().unwrap(), |o| o.workers = 3);
    let par = par_session.run(&fixture_spec(), &mut NoResponder);
    let table = |r: &xpflow_core::executor::ExperimentReport| {
        let mut v: Vec<(usize, Option<f64>)> = r
            .runs
            .iter()
            .map(|x| (x.configuration.ordinal, x.metric("accuracy")))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    };
    assert_eq!(table(&seq), table(&par));
    assert_eq!(seq.winner.unwrap().ordinal, par.winner.unwrap().ordinal);
}

#[test]
fn missing_dataset_is_reported_before_running() {
    let src = fixture_source("experiment.xp").replace("data/sensors.csv", "data/absent.csv");
    let mut s = Session::new();
    let err = s
        .executor
        .run_experiment(&parse(&src), &mut s.kr, &mut NoResponder, &s.events)
        .unwrap_err();
    assert!(matches!(err, ExecError::MissingInput { ref reference, .. } if reference == "data/absent.csv"));
    assert_eq!(s.executor.spawned_processes(), 0);
}

#[test]
fn invalid_spec_is_rejected() {
    let src = fixture_source("experiment.xp").replace("intent maximize accuracy", "intent maximize recall");
    let mut s = Session::new();
    let err = s
        .executor
        .run_experiment(&parse(&src), &mut s.kr, &mut NoResponder, &s.events)
        .unwrap_err();
    assert!(matches!(err, ExecError::InvalidSpec(ref m) if m.contains("recall")));
}

#[test]
fn events_follow_the_run() {
    let mut s = Session::new();
    s.run(&supervisor_every(4), &mut ScriptedResponder::new([Response::Continue]));
    let events = s.events.since(0);
    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..events.len() as u64).collect::<Vec<_>>());
    let count = |k: EventKind| events.iter().filter(|e| e.kind == k).count();
    assert_eq!(count(EventKind::RunStarted), 9);
    assert_eq!(count(EventKind::RunFinished), 9);
    // the second checkpoint finds the script exhausted and goes unanswered
    assert_eq!(count(EventKind::PromptOpened), 2);
    assert_eq!(count(EventKind::PromptResolved), 2);
    assert_eq!(events.last().unwrap().kind, EventKind::ExperimentFinished);
    let opened = events.iter().position(|e| e.kind == EventKind::PromptOpened).unwrap();
    assert_eq!(events[opened + 1].kind, EventKind::PromptResolved);
    assert_eq!(events[opened].payload["pending"].as_array().unwrap().len(), 5);
}

#[test]
fn report_is_written_next_to_runs() {
    let mut s = Session::new();
    let report = s.run(&fixture_spec(), &mut NoResponder);
    let path = s.store.path().join("runs/predictive_maintenance/report.json");
    let on_disk: xpflow_core::executor::ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    for r in &report.runs {
        for t in &r.tasks {
            for rel in t.outputs.values() {
                assert!(s.store.path().join(rel).exists(), "{rel}");
            }
        }
    }
}

#[test]
fn manual_validation_task_records_user_valid() {
    let src = fixture_source("experiment.xp")
        .replace(
            "    read_data -> add_padding",
            "    task review manual;\n    evaluate_model -> review;\n    read_data -> add_padding",
        )
        .replace("metric latency_ms task", "metric user_valid task(review);\n    metric latency_ms task")
        .replace("constraints {", "constraints {\n    metric user_valid >= 1;")
        .replace("  monitor {", "  interaction {\n    budget 5 min;\n  }\n  monitor {");
    let spec = parse(&src);
    let mut answers = ScriptedResponder::new([
        Response::Validate { valid: false, note: Some("looks off".into()) },
        Response::Validate { valid: true, note: None },
    ]);
    let mut s = Session::new();
    let report = s.run(&spec, &mut answers);
    let valid: Vec<Option<f64>> = report.runs.iter().map(|r| r.metric("user_valid")).collect();
    assert_eq!(valid[0], Some(0.0));
    assert_eq!(valid[1], Some(1.0));
    // later prompts go unanswered, cost nothing and leave validity unknown
    assert!(valid[2..].iter().all(Option::is_none), "{valid:?}");
    assert_eq!(report.budget.used_min, 2.0);
    let unanswered = report
        .interactions
        .iter()
        .filter(|i| i.involvement == Involvement::Involve && i.response.is_none())
        .count();
    assert_eq!(unanswered, 7);
    // unknown validity never counts as approval
    let winner = report.winner.unwrap();
    assert_eq!(winner.ordinal, report.runs[1].configuration.ordinal);
    let user = s.executor.options().user.clone();
    assert_eq!(s.kr.profile_for(&user).history.values().flatten().count(), 2);
}

#[test]
fn lineage_and_redundancy_after_fixture() {
    let mut s = Session::new();
    let report = s.run(&fixture_spec(), &mut NoResponder);
    assert_eq!(s.kr.lineage(&LineageQuery::Experiment("predictive_maintenance".into())).len(), 9);
    let fp = report.runs[3].fingerprint.clone();
    assert_eq!(
        s.kr.detect_redundant(&fp),
        Redundancy::RedundantExact(report.runs[3].run_id.clone())
    );

    let mut renamed = fixture_spec();
    renamed.name = "pm_again".into();
    let again = s.run(&renamed, &mut NoResponder);
    assert_eq!(again.spawned_processes, 0);
    assert_eq!(s.kr.lineage(&LineageQuery::Fingerprint(fp)).len(), 1);
    assert_eq!(s.kr.lineage(&LineageQuery::Experiment("pm_again".into())).len(), 9);

    let digest = report.runs[0].input_digests["data/sensors.csv"].clone();
    assert_eq!(s.kr.lineage(&LineageQuery::Dataset(digest)).len(), 9);
    assert!(s.kr.lineage(&LineageQuery::Dataset("0".repeat(64))).is_empty());
}

#[test]
fn new_dataset_content_is_not_redundant() {
    let data = tempfile::tempdir().unwrap();
    std::fs::write(data.path().join("other.csv"), "timestamp,vibration\n0,0.5\n1,0.6\n").unwrap();
    let path = data.path().join("other.csv");
    let src = fixture_source("experiment.xp").replace("data/sensors.csv", path.to_str().unwrap());
    let mut s = Session::new();
    let original = s.run(&fixture_spec(), &mut NoResponder);
    let mut spec = parse(&src);
    spec.name = "pm_other_data".into();
    let report = s.run(&spec, &mut NoResponder);
    assert_eq!(report.spawned_processes, 9 * 5);
    assert_ne!(report.runs[0].fingerprint, original.runs[0].fingerprint);
}

#[test]
fn cost_estimate_from_history() {
    let mut s = Session::new();
    let spec = fixture_spec();
    let before = estimate_experiment_cost(&spec, &s.kr).unwrap();
    assert!(before.total.is_none());
    let report = s.run(&spec, &mut NoResponder);
    let est = estimate_experiment_cost(&spec, &s.kr).unwrap();
    let total = est.total.unwrap();
    let actual: f64 = report.runs.iter().map(|r| r.cost.wall_s).sum();
    assert!((total.wall_s - actual).abs() < 1e-9, "{} vs {actual}", total.wall_s);
}

#[test]
fn history_pruning_drops_bottom_half() {
    let store = tempfile::tempdir().unwrap();
    let mut s = Session::with_options(store, |o| o.prune_history = true);
    let spec = fixture_spec();
    s.run(&spec, &mut NoResponder);
    let mut next = spec.clone();
    next.name = "pm_followup".into();
    let report = s.run(&next, &mut NoResponder);
    assert_eq!(report.pruned.len(), 4);
    assert_eq!(report.runs.len(), 5);
    assert!(report.runs.iter().all(|r| r.metric("accuracy").unwrap() >= 0.80));
}

#[test]
fn slow_task_times_out() {
    let src = fixture_source("experiment.xp").replace(r#""sh stubs/train.sh cnn""#, r#""sleep 30; :""#);
    let mut s = Session::with_options(tempfile::tempdir().unwrap(), |o| {
        o.task_timeout_s = Some(1);
        o.workers = 3;
    });
    let start = std::time::Instant::now();
    let report = s.run(&parse(&src), &mut NoResponder);
    assert!(start.elapsed() < std::time::Duration::from_secs(10));
    let timed_out = report
        .runs
        .iter()
        .filter(|r| r.tasks.iter().any(|t| t.status == TaskStatus::TimedOut))
        .count();
    assert_eq!(timed_out, 3);
}
