use std::fs;
use std::path::Path;

use calfs::harness::{self, HarnessError, RunMetrics};
use calfs::topology::Zone;
use calfs::ExperimentConfig;
use tempfile::TempDir;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn parse_line(err: HarnessError) -> usize {
    match err {
        HarnessError::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other}"),
    }
}

/// A 6-ring with Byzantine 3, driven from a JSON config that writes all
/// three artifacts.
fn ring_config(dir: &Path) -> ExperimentConfig {
    let graph = write(dir, "ring.txt", "# six-ring\n6 0 3\n0 1\n1 2\n2 3\n3 4\n4 5\n5 0\n");
    let json = format!(
        r#"{{
  "graph": {{ "file": {graph:?} }},
  "initial": {{ "kind": "random", "seed": 4 }},
  "scheduler": {{ "kind": "randomized", "seed": 7 }},
  "adversary": {{ "kind": "random_writer", "seed": 11 }},
  "outputs": {{
    "trace": {trace:?},
    "zones": {zones:?},
    "metrics": {metrics:?}
  }}
}}"#,
        trace = dir.join("trace.jsonl"),
        zones = dir.join("zones.json"),
        metrics = dir.join("metrics.json"),
    );
    ExperimentConfig::from_json_file(&write(dir, "config.json", &json)).unwrap()
}

#[test]
fn artifacts_round_trip_through_replay() {
    let dir = TempDir::new().unwrap();
    let config = ring_config(dir.path());
    assert_eq!(config.zone, Zone::SbStar);
    let result = harness::run_experiment(&config).unwrap();
    assert_eq!(result.trace.topo.byzantine().len(), 1);

    let stored: RunMetrics = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(stored, result.metrics);
    assert_eq!(harness::replay(&dir.path().join("trace.jsonl")).unwrap(), result.metrics);

    let (trace, zone) = harness::read_trace(&dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(zone, Zone::SbStar);
    assert_eq!(trace, result.trace);

    let zones: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("zones.json")).unwrap()).unwrap();
    assert!(zones.is_object());
}

#[test]
fn edge_list_errors_carry_line_numbers() {
    let dir = TempDir::new().unwrap();
    let graph = write(dir.path(), "bad.txt", "3 0\n0 1\n\n1 x\n");
    let config = ExperimentConfig::new(
        harness::GraphSource::File(graph),
        calfs::scheduler::SchedulerKind::CentralRandom,
        calfs::adversary::AdversaryKind::Silent,
    );
    assert_eq!(parse_line(config.topology().unwrap_err()), 4);
}

#[test]
fn config_syntax_errors_carry_line_numbers() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "c.json", "{\n  \"graph\": {\"file\": \"g.txt\"},\n  oops\n}\n");
    assert_eq!(parse_line(ExperimentConfig::from_json_file(&p).unwrap_err()), 3);
}

#[test]
fn tampered_trace_is_rejected_at_the_bad_line() {
    let dir = TempDir::new().unwrap();
    let config = ring_config(dir.path());
    let result = harness::run_experiment(&config).unwrap();
    assert!(result.trace.steps.len() >= 3);
    let path = dir.path().join("trace.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();

    // Renumber step 1: the reader expects consecutive indices.
    let mut renumbered = lines.clone();
    renumbered[2] = renumbered[2].replacen("\"step\":1", "\"step\":5", 1);
    let p = write(dir.path(), "renumbered.jsonl", &renumbered.join("\n"));
    assert_eq!(parse_line(harness::read_trace(&p).unwrap_err()), 3);

    // Drop step 0 entirely.
    lines.remove(1);
    let p = write(dir.path(), "gap.jsonl", &lines.join("\n"));
    assert_eq!(parse_line(harness::read_trace(&p).unwrap_err()), 2);

    let p = write(dir.path(), "junk.jsonl", &format!("{}\nnot json\n", text.lines().next().unwrap()));
    assert_eq!(parse_line(harness::read_trace(&p).unwrap_err()), 2);

    let p = write(dir.path(), "empty.jsonl", "");
    assert_eq!(parse_line(harness::read_trace(&p).unwrap_err()), 1);
}

#[test]
fn initial_configuration_from_file() {
    let dir = TempDir::new().unwrap();
    let states = r#"[{"parent": null, "height": 0}, {"parent": 0, "height": 5}, {"parent": null, "height": 2}]"#;
    let init = write(dir.path(), "init.json", states);
    let graph = write(dir.path(), "path.txt", "3 0\n0 1\n1 2\n");
    let json = format!(
        r#"{{"graph": {{"file": {graph:?}}}, "initial": {{"kind": "file", "path": {init:?}}},
            "scheduler": {{"kind": "round_robin"}}, "adversary": {{"kind": "silent"}}, "zone": "SB"}}"#
    );
    let config = ExperimentConfig::from_json_file(&write(dir.path(), "c.json", &json)).unwrap();
    let r = harness::run_experiment(&config).unwrap();
    assert_eq!(r.trace.initial().states[1].height, 5);
    let heights: Vec<u32> = r.trace.last().states.iter().map(|s| s.height).collect();
    assert_eq!(heights, vec![0, 1, 2]);
    assert_eq!(r.metrics.bound_respected, None);

    // A parent that is not a neighbor is rejected before running.
    let bad = write(dir.path(), "bad.json", r#"[{"parent": null, "height": 0}, {"parent": 0, "height": 1}, {"parent": 0, "height": 2}]"#);
    let mut c = config.clone();
    c.initial = harness::InitialSpec::File { path: bad };
    assert!(matches!(harness::run_experiment(&c), Err(HarnessError::InvalidField { field: "initial", .. })));
}
