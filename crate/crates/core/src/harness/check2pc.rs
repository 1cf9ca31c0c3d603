//! Exhaustive single-failure injection against transaction mode.
//!
//! Each configuration first loses its highest rank, which puts the store
//! into transaction mode. One submitter then runs a fixed list of
//! transactions while a second rank is killed, once per run, at every step
//! of a failure-free reference run. Every run is audited: copies must agree,
//! the final state must be a sequential application of the transactions the
//! submitter saw commit (plus any whose outcome it never learned), and each
//! outcome must reach the submitter once.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::audit::{Audit, KeyStatus};
use crate::placement::{Key, PlacementConfig};
use crate::store::{spawn_process, Layout, Phase, Store, StoreConfig, StoreError};
use crate::transport::{Fidelity, Rank, RunOutcome, Sim, TraceEvent, TransportConfig};
use crate::txn::{apply_sequential, AbortReason, TxnOp, TxnOutcome};

/// Step at which the highest rank dies, well after the initial puts.
const FIRST_KILL: u64 = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub max_p: usize,
    pub max_r: usize,
    pub keys: usize,
    pub backups: usize,
    /// Off = the negative control: the coordinator keeps its log to itself.
    pub log_to_backups: bool,
    pub fidelity: Fidelity,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { max_p: 5, max_r: 2, keys: 3, backups: 2, log_to_backups: true, fidelity: Fidelity::Spec, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub world_size: usize,
    pub replicas: usize,
    pub victim: u32,
    pub step: u64,
    pub point: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub runs: u64,
    /// Runs that ended in `CoordinatorExhausted`; a defined degradation.
    pub exhausted: u64,
    /// Runs per injection point.
    pub points: BTreeMap<String, u64>,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn count(&self, kind: &str) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

fn keys(n: usize) -> Vec<Key> {
    (0..n as u32).map(|o| Key::new(o, 0)).collect()
}

fn initial(k: Key) -> Vec<u8> {
    format!("init-{}", k.owner).into_bytes()
}

/// The fixed transaction list: a multi-key write, a guarded update that
/// depends on it, and one that always aborts.
pub fn transactions(n: usize) -> Vec<Vec<TxnOp>> {
    let k = keys(n);
    let (a, b, c) = (k[0], k[1 % n], k[n - 1]);
    vec![
        vec![TxnOp::Write(a, b"t1-a".to_vec()), TxnOp::Write(c, b"t1-c".to_vec())],
        vec![TxnOp::Guard(a, Some(b"t1-a".to_vec())), TxnOp::Read(b), TxnOp::Write(a, b"t2-a".to_vec()), TxnOp::Delete(b)],
        vec![TxnOp::Read(c), TxnOp::Guard(a, Some(b"never".to_vec())), TxnOp::Write(b, b"t3-b".to_vec())],
    ]
}

#[derive(Default)]
struct Record {
    outcomes: Vec<TxnOutcome>,
    fatal: Vec<(Rank, StoreError)>,
    layouts: BTreeMap<Rank, Layout>,
}

struct Run {
    sim: Sim,
    outcome: RunOutcome,
    rec: Record,
}

async fn leave(store: &Store) -> Result<(), StoreError> {
    if store.phase() == Phase::TransactionMode {
        store.exit_transaction_mode().await?;
    }
    Ok(())
}

async fn process(store: Store, submitter: Rank, n: usize, rec: Rc<RefCell<Record>>) -> Result<(), StoreError> {
    let me = store.rank();
    if let Some(k) = keys(n).into_iter().find(|k| k.owner == me) {
        store.put(k, &initial(k)).await?;
    }
    // wait for the first failure
    loop {
        match store.barrier().await {
            Ok(()) => {}
            Err(e) if e.needs_recovery() => break,
            Err(e) => return Err(e),
        }
    }
    store.recover().await?;
    if me == submitter {
        for ops in transactions(n) {
            let out = store.submit_transaction(ops).await?;
            rec.borrow_mut().outcomes.push(out);
        }
    }
    leave(&store).await?;
    loop {
        match store.barrier().await {
            Ok(()) => return Ok(()),
            Err(e) if e.needs_recovery() => {
                store.recover().await?;
                leave(&store).await?;
            }
            Err(e) => return Err(e),
        }
    }
}

fn store_config(p: usize, r: usize, cc: &CheckConfig) -> StoreConfig {
    StoreConfig {
        placement: PlacementConfig { world_size: p, replica_count: r, slots_per_owner: 1 },
        backups: cc.backups,
        log_to_backups: cc.log_to_backups,
        fidelity: cc.fidelity,
        seed: cc.seed,
        ..StoreConfig::default()
    }
}

fn execute(cfg: &StoreConfig, n: usize, kill: Option<(Rank, u64)>) -> Run {
    let p = cfg.placement.world_size;
    let mut sim = Sim::new(p, TransportConfig { fidelity: cfg.fidelity, ..TransportConfig::default() });
    let rec: Rc<RefCell<Record>> = Rc::default();
    let submitter = Rank(p as u32 - 2);
    for r in 0..p as u32 {
        let rec = rec.clone();
        spawn_process(&mut sim, Rank(r), cfg.clone(), move |store| async move {
            let store = match store {
                Ok(s) => s,
                Err(e) => return rec.borrow_mut().fatal.push((Rank(r), e)),
            };
            let res = process(store.clone(), submitter, n, rec.clone()).await;
            let mut rec = rec.borrow_mut();
            if let Err(e) = res {
                rec.fatal.push((Rank(r), e));
            }
            rec.layouts.insert(Rank(r), store.layout());
        });
    }
    sim.inject_failure(Rank(p as u32 - 1), FIRST_KILL).expect("first kill");
    if let Some((victim, at)) = kill {
        sim.inject_failure(victim, at).expect("second kill");
    }
    let outcome = sim.run(200_000);
    let rec = std::mem::take(&mut *rec.borrow_mut());
    Run { sim, outcome, rec }
}

/// Injection-point boundaries of one transaction in the reference run.
struct Phases {
    submit: u64,
    log: u64,
    acked: u64,
    commit: u64,
    committed: u64,
}

fn phases(trace: &[TraceEvent], coordinator: u32, submitter: u32) -> Vec<Phases> {
    let first = |from: u64, pred: &dyn Fn(&TraceEvent) -> bool| {
        trace.iter().find(|e| e.step >= from && pred(e)).map(|e| e.step).unwrap_or(u64::MAX)
    };
    let log_send = |e: &TraceEvent| {
        e.rank == coordinator && e.op == "ctl_send" && e.detail.as_deref() == Some("TxnLogUpdate")
    };
    let mut out = Vec::new();
    for s in trace.iter().filter(|e| e.rank == submitter && e.op == "txn_submit") {
        let commit = first(s.step, &|e| e.rank == coordinator && e.op == "put");
        // without backup logging nothing is sent before the commit
        let log = first(s.step, &log_send).min(commit);
        let acked = trace
            .iter()
            .filter(|e| e.step >= log && e.step < commit && e.op == "ctl_send" && e.detail.as_deref() == Some("TxnLogAck"))
            .map(|e| e.step + 1)
            .max()
            .unwrap_or(log);
        let committed = first(commit, &log_send);
        out.push(Phases { submit: s.step, log, acked, commit, committed });
    }
    out
}

fn point(phases: &[Phases], step: u64) -> String {
    let Some(first) = phases.first() else {
        return "none".into();
    };
    if step < first.submit {
        return "recovery".into();
    }
    let (i, ph) = phases.iter().enumerate().rev().find(|(_, p)| p.submit <= step).expect("after first submit");
    let name = if step < ph.log {
        "before_prepare"
    } else if step < ph.acked {
        "during_logging"
    } else if step < ph.commit {
        "between_prepare_and_commit"
    } else if step <= ph.committed {
        "mid_commit"
    } else {
        "after_commit"
    };
    format!("t{}:{name}", i + 1)
}

/// Whether the final values can be produced by applying the transactions
/// in order, where those without a reported outcome may or may not apply.
fn history_matches(
    n: usize,
    reported: &[TxnOutcome],
    dropped: &BTreeSet<Key>,
    finals: &BTreeMap<Key, Option<Vec<u8>>>,
) -> Result<(), String> {
    let txns = transactions(n);
    let mut states: Vec<BTreeMap<Key, Vec<u8>>> =
        vec![keys(n).into_iter().filter(|k| !dropped.contains(k)).map(|k| (k, initial(k))).collect()];
    for (i, ops) in txns.iter().enumerate() {
        let visible: Vec<TxnOp> = ops.iter().filter(|o| !dropped.contains(&o.key())).cloned().collect();
        let mut next = Vec::new();
        for st in &states {
            match reported.get(i) {
                Some(TxnOutcome::Committed { reads }) => {
                    let mut s = st.clone();
                    match apply_sequential(&mut s, &visible) {
                        TxnOutcome::Committed { reads: got } if dropped.is_empty() && got != *reads => {}
                        TxnOutcome::Committed { .. } => next.push(s),
                        TxnOutcome::Aborted(_) => {}
                    }
                }
                Some(TxnOutcome::Aborted(AbortReason::GuardFailed(k))) if !dropped.contains(k) => {
                    let mut s = st.clone();
                    if matches!(apply_sequential(&mut s, &visible), TxnOutcome::Aborted(_)) {
                        next.push(st.clone());
                    }
                }
                Some(TxnOutcome::Aborted(_)) => next.push(st.clone()),
                None => {
                    let mut s = st.clone();
                    apply_sequential(&mut s, &visible);
                    next.push(s);
                    next.push(st.clone());
                }
            }
        }
        if next.is_empty() {
            return Err(format!("reported outcome of t{} contradicts every history", i + 1));
        }
        states = next;
    }
    let got: BTreeMap<Key, Vec<u8>> = finals.iter().filter_map(|(k, v)| v.clone().map(|v| (*k, v))).collect();
    if states.contains(&got) {
        Ok(())
    } else {
        Err(format!("final state {} matches no sequential history", show(&got)))
    }
}

fn show(state: &BTreeMap<Key, Vec<u8>>) -> String {
    let parts: Vec<String> = state.iter().map(|(k, v)| format!("{k}={}", String::from_utf8_lossy(v))).collect();
    format!("{{{}}}", parts.join(", "))
}

/// Checks one run; returns (kind, detail) pairs, or `None` for an
/// exhausted coordinator set.
fn verify(cfg: &StoreConfig, n: usize, run: &Run) -> Option<Vec<(&'static str, String)>> {
    let p = cfg.placement.world_size;
    if run.rec.fatal.iter().any(|(_, e)| *e == StoreError::CoordinatorExhausted) {
        return None;
    }
    let mut bad = Vec::new();
    if !matches!(run.outcome, RunOutcome::Completed { .. }) {
        bad.push(("liveness", format!("{:?}", run.outcome)));
        return Some(bad);
    }
    for (r, e) in &run.rec.fatal {
        bad.push(("error", format!("rank {r}: {e}")));
    }
    let Some(layout) = run.rec.layouts.iter().find(|(r, _)| run.sim.alive(**r)).map(|(_, l)| l) else {
        bad.push(("liveness", "no surviving rank".into()));
        return Some(bad);
    };
    let audit = Audit::take(&run.sim, layout, cfg);
    let tracked: BTreeSet<Key> = keys(n).into_iter().collect();
    let mut dropped = BTreeSet::new();
    for rec in audit.records.iter().filter(|a| tracked.contains(&a.key)) {
        match rec.status {
            KeyStatus::Present if !rec.consistent => bad.push(("atomicity", format!("key {} has diverging copies", rec.key))),
            KeyStatus::Present => {}
            KeyStatus::Dropped | KeyStatus::DataLoss => {
                dropped.insert(rec.key);
            }
        }
    }
    let finals: BTreeMap<Key, Option<Vec<u8>>> =
        audit.values.iter().filter(|(k, _)| tracked.contains(k)).map(|(k, v)| (*k, v.clone())).collect();
    if let Err(e) = history_matches(n, &run.rec.outcomes, &dropped, &finals) {
        bad.push(("atomicity", e));
    }
    // exactly one outcome per transaction at a surviving submitter
    let submitter = Rank(p as u32 - 2);
    let trace = run.sim.trace();
    let delivered = trace.iter_op("txn_outcome").filter(|e| e.rank == submitter.0).count();
    let submitted = trace.iter_op("txn_submit").filter(|e| e.rank == submitter.0).count();
    if delivered != run.rec.outcomes.len() {
        bad.push(("exactly_once", format!("{delivered} outcome deliveries for {} results", run.rec.outcomes.len())));
    }
    if run.sim.alive(submitter) && delivered != submitted {
        bad.push(("exactly_once", format!("{submitted} submissions but {delivered} outcomes")));
    }
    Some(bad)
}

/// Runs the whole enumeration.
pub fn check_2pc(cc: &CheckConfig) -> CheckReport {
    let mut report = CheckReport::default();
    for p in 4..=cc.max_p.max(4) {
        for r in 1..=cc.max_r.min(p - 2) {
            let cfg = store_config(p, r, cc);
            // owners of the tracked keys never include the first victim
            let n = cc.keys.clamp(1, p - 1);
            let base = execute(&cfg, n, None);
            let events: Vec<TraceEvent> = base.sim.trace().iter().cloned().collect();
            let end = match base.outcome {
                RunOutcome::Completed { steps } => steps,
                ref other => panic!("reference run at P={p} R={r} did not complete: {other:?}"),
            };
            let submitter = p as u32 - 2;
            let ph = phases(&events, 0, submitter);
            let start = ph.first().map(|x| x.submit).unwrap_or(FIRST_KILL + 1);
            for victim in 0..p as u32 - 1 {
                for step in start..=end {
                    let run = execute(&cfg, n, Some((Rank(victim), step)));
                    report.runs += 1;
                    let at = point(&ph, step);
                    *report.points.entry(at.clone()).or_default() += 1;
                    match verify(&cfg, n, &run) {
                        None => report.exhausted += 1,
                        Some(bad) => report.violations.extend(bad.into_iter().map(|(kind, detail)| Violation {
                            world_size: p,
                            replicas: r,
                            victim,
                            step,
                            point: at.clone(),
                            kind: kind.into(),
                            detail,
                        })),
                    }
                }
            }
        }
    }
    report
}
