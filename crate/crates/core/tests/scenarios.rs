use osckv::harness::{run_scenario, KeyStatus, OpResult, RunReport, Scenario};
use osckv::placement::Key;
use serde_json::{json, Value};

fn scenario(v: Value) -> Scenario {
    Scenario::from_json(&v.to_string()).expect("valid scenario")
}

fn run(v: Value) -> RunReport {
    let r = run_scenario(&scenario(v));
    assert!(r.passed(), "{:#?}\n{:?}", r.failures, r.outcome);
    r
}

fn put(step: u64, rank: u32, key: &str, value: &str) -> Value {
    json!({"step": step, "rank": rank, "action": {"put": {"key": key, "value": value}}})
}

/// First trace index at or after `from` whose op and outcome match.
fn find(trace: &[Value], from: usize, op: &str, outcome: Option<&str>) -> Option<usize> {
    trace[from..]
        .iter()
        .position(|e| e["op"] == op && outcome.is_none_or(|o| e["outcome"] == o))
        .map(|i| i + from)
}

fn events(r: &RunReport) -> Vec<Value> {
    r.trace_jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn failure_free_puts_and_deletes_end_consistent() {
    let r = run(json!({
        "schema": "osckv.scenario.v1",
        "config": {"world_size": 4, "replica_count": 1},
        "schedule": [
            put(5, 0, "0:0", "alpha"),
            put(5, 1, "1:0", "beta"),
            {"step": 40, "rank": 1, "action": {"delete": {"key": "1:0"}}},
            put(60, 2, "2:0", "gamma"),
            {"step": 90, "rank": 3, "action": {"put": {"key": "3:0", "size": 300}}}
        ],
        "expect": {"values": {"0:0": "alpha", "1:0": null, "2:0": "gamma"}}
    }));
    assert!(r.audit.consistent());
    assert_eq!(r.audit.records.len(), 4);
    assert!(r.audit.records.iter().all(|a| a.copies.len() == 2));
    let big = r.audit.records.iter().find(|a| a.key == Key::new(3, 0)).unwrap();
    assert_eq!(big.header, 300);
    assert!(r.recoveries.is_empty());
}

#[test]
fn killed_replica_holder_goes_through_the_whole_recovery() {
    // key 0:0 lives on ranks 1 and 3; rank 3 dies while rank 0 keeps writing
    let mut schedule: Vec<Value> = (0..20).map(|i| put(10 + 20 * i, 0, "0:0", &format!("v{i}"))).collect();
    schedule.push(json!({"step": 105, "action": {"kill": 3}}));
    let r = run(json!({
        "schema": "osckv.scenario.v1",
        "config": {"world_size": 4, "replica_count": 1},
        "schedule": schedule,
        "expect": {"values": {"0:0": "v19"}, "lost": [3]}
    }));
    let t = events(&r);
    let mut at = find(&t, 0, "failure_detected", None).expect("failure detected");
    for (op, outcome) in [
        ("revoke", None),
        ("comm_shrink", None),
        ("recovery", Some("rebuilt")),
        ("restore", Some("ok")),
        ("txn_mode", Some("exit")),
    ] {
        at = find(&t, at, op, outcome).unwrap_or_else(|| panic!("no {op} after index {at}"));
    }
    assert_eq!(r.lost.len(), 1);
    let dropped = r.audit.records.iter().find(|a| a.key == Key::new(3, 0)).unwrap();
    assert_eq!(dropped.status, KeyStatus::Dropped);
    let rec = r.audit.records.iter().find(|a| a.key == Key::new(0, 0)).unwrap();
    assert_eq!(rec.copies.len(), 2);
    assert!(rec.consistent);
}

#[test]
fn same_seed_gives_identical_traces() {
    let v = json!({
        "schema": "osckv.scenario.v1",
        "seed": 7,
        "config": {"world_size": 5, "replica_count": 2, "cas_mode": true},
        "schedule": [
            put(3, 0, "1:0", "x"),
            put(3, 2, "1:0", "y"),
            {"step": 20, "rank": 4, "action": {"txn": {"ops": [
                {"guard": {"key": "1:0", "expect": "y"}},
                {"write": {"key": "2:0", "value": "z"}}
            ]}}},
            {"step": 25, "action": {"kill": 3}}
        ],
        "expect": {"allow_errors": true}
    });
    let a = run_scenario(&scenario(v.clone()));
    let b = run_scenario(&scenario(v));
    assert!(!a.trace_jsonl.is_empty());
    assert_eq!(a.trace_jsonl, b.trace_jsonl);
    assert_eq!(a.audit, b.audit);
}

#[test]
fn interrupted_put_is_retried_as_a_transaction() {
    // ranks 1, 2, 3 hold 0:0; rank 1 (the master) dies while rank 0 writes
    let r = run(json!({
        "schema": "osckv.scenario.v1",
        "config": {"world_size": 5, "replica_count": 2},
        "schedule": [
            {"step": 5, "rank": 0, "action": {"put": {"key": "0:0", "size": 2000}}},
            {"step": 8, "action": {"kill": 1}}
        ]
    }));
    let op = &r.ops[0];
    assert_eq!(op.result, OpResult::Done);
    assert_eq!(op.interruptions, 1);
    let rec = r.audit.records.iter().find(|a| a.key == Key::new(0, 0)).unwrap();
    assert_eq!(rec.header, 2000);
    assert_eq!(rec.copies.len(), 3);
}

#[test]
fn audit_is_line_delimited_json() {
    let r = run(json!({
        "schema": "osckv.scenario.v1",
        "config": {"world_size": 4, "replica_count": 1},
        "schedule": [put(1, 0, "0:0", "a")]
    }));
    let lines: Vec<Value> = r.audit.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["key"], "0:0");
    assert_eq!(lines[0]["header"], 1);
    assert_eq!(lines[0]["digest"], osckv::harness::audit::digest(b"a"));
}

#[test]
fn wrong_expectation_fails_the_run() {
    let r = run_scenario(&scenario(json!({
        "schema": "osckv.scenario.v1",
        "config": {"world_size": 4, "replica_count": 1},
        "schedule": [put(1, 0, "0:0", "a")],
        "expect": {"values": {"0:0": "b"}}
    })));
    assert_eq!(r.failures.len(), 1, "{:?}", r.failures);
}
