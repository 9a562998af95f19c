mod support;

use std::fs;

use tabletalk_core::agents::BackendSpec;
use tabletalk_core::bench::{episode_path, read_summary, run_bench, write_summary, BenchConfig, BenchError, Condition};
use tabletalk_core::dialog::{metrics_from_events, ProtocolParams};
use tabletalk_core::world::TaskId;

use support::*;

fn config(task: TaskId, condition: Condition, seeds: u64, policy: &str, dir: &std::path::Path) -> BenchConfig {
    BenchConfig::new(task, condition, 0..seeds, BackendSpec::scripted(policy)).with_out_dir(dir)
}

#[test]
fn summary_recomputes_from_raw_logs() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle_bench(4, dir.path());
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn rerun_resumes_without_executing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TaskId::StackOrder, Condition::Dialog, 4, "oracle", dir.path());
    let first = run_bench(&cfg).unwrap();
    assert!(first.iter().all(|e| !e.resumed && e.error.is_none()));
    let ep_dir = cfg.episode_dir().unwrap();
    let before: Vec<Vec<u8>> = (0..4).map(|s| fs::read(episode_path(&ep_dir, s)).unwrap()).collect();

    let second = run_bench(&cfg).unwrap();
    assert!(second.iter().all(|e| e.resumed));
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.events, b.events);
    }
    let after: Vec<Vec<u8>> = (0..4).map(|s| fs::read(episode_path(&ep_dir, s)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn unfinished_log_is_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TaskId::SortBlocks, Condition::Dialog, 2, "oracle", dir.path());
    let first = run_bench(&cfg).unwrap();
    let path = episode_path(&cfg.episode_dir().unwrap(), 1);
    let text = fs::read_to_string(&path).unwrap();
    let head: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&path, head).unwrap();
    fs::write(path.with_extension("jsonl.partial"), "garbage").unwrap();

    let second = run_bench(&cfg).unwrap();
    assert!(second[0].resumed);
    assert!(!second[1].resumed);
    assert_eq!(second[1].metrics, first[1].metrics);
    let kinds = |evs: &[tabletalk_core::dialog::Event]| evs.iter().map(|e| e.kind.clone()).collect::<Vec<_>>();
    assert_eq!(kinds(&second[1].events), kinds(&first[1].events));
    assert!(!path.with_extension("jsonl.partial").exists());
}

#[test]
fn separate_runs_write_identical_summaries() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        for task in TaskId::ALL {
            run_bench(&config(task, Condition::Dialog, 3, "fuzzer:5", dir)).unwrap();
        }
        write_summary(dir).unwrap();
    }
    let (sa, sb) = (fs::read(a.path().join("summary.csv")).unwrap(), fs::read(b.path().join("summary.csv")).unwrap());
    assert_eq!(sa, sb);
    assert_eq!(read_summary(&a.path().join("summary.csv")).unwrap().len(), 3);
}

#[test]
fn no_feedback_condition_halves_attempts_and_doubles_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(TaskId::SortBlocks, Condition::NoFeedback, 2, "always_invalid", dir.path());
    cfg.params = ProtocolParams { t: 2, ..ProtocolParams::for_task(TaskId::SortBlocks) };
    for e in run_bench(&cfg).unwrap() {
        let m = e.metrics.unwrap();
        assert_eq!(m.rounds, 4);
        assert_eq!(m.attempts_per_round, vec![1; 4]);
        assert_eq!(m.mean_replans, 1.0);
        assert_eq!(metrics_from_events(&e.events), m);
    }
    let rows = write_summary(dir.path()).unwrap();
    assert_eq!(rows[0].condition, "no_feedback");
    assert_eq!(rows[0].success_rate, 0.0);
    assert_eq!(rows[0].mean_steps, None);
}

#[test]
fn central_condition_uses_one_planner() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TaskId::PackBoxes, Condition::Central, 2, "oracle", dir.path());
    for e in run_bench(&cfg).unwrap() {
        assert!(e.metrics.unwrap().success);
        let speakers: Vec<&str> = e
            .events
            .iter()
            .filter(|ev| ev.kind == "message")
            .filter_map(|ev| ev.payload["speaker"].as_str())
            .collect();
        assert!(!speakers.is_empty() && speakers.iter().all(|s| *s == "Planner"));
    }
}

#[test]
fn bad_backend_or_workers_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TaskId::SortBlocks, Condition::Dialog, 2, "telepathy", dir.path());
    assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
    let mut cfg = config(TaskId::SortBlocks, Condition::Dialog, 2, "oracle", dir.path());
    cfg.workers = 0;
    assert!(matches!(run_bench(&cfg), Err(BenchError::Config(_))));
}
