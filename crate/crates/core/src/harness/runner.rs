//! Runs a scenario: one store process per rank follows its part of the
//! schedule, joins recovery whenever a failure surfaces, and finally meets
//! the others in a barrier. The report carries the audit and every check
//! that failed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::audit::{Audit, KeyStatus};
use super::scenario::{put_value, Action, Scenario};
use crate::placement::Key;
use crate::recovery::RecoveryReport;
use crate::store::{spawn_process, Layout, Phase, Store, StoreError};
use crate::transport::{yield_now, HangCounts, Rank, RunOutcome, Sim, TransportConfig};
use crate::txn::{TxnOp, TxnOutcome};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpResult {
    Done,
    Read(Option<Vec<u8>>),
    Txn(TxnOutcome),
    /// A failure cut the operation short; its writes may or may not have
    /// landed.
    Interrupted(String),
    /// Refused without touching any copy.
    Rejected(String),
}

impl OpResult {
    fn acked(&self) -> bool {
        matches!(self, OpResult::Done | OpResult::Txn(TxnOutcome::Committed { .. }))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub rank: Rank,
    pub action: String,
    pub start: u64,
    pub end: u64,
    /// Values the operation writes if it takes effect; `None` = empty.
    pub writes: Vec<(Key, Option<Vec<u8>>)>,
    pub result: OpResult,
    /// Failures that interrupted earlier attempts.
    pub interruptions: u32,
}

#[derive(Default)]
struct Recorder {
    ops: Vec<OpRecord>,
    layouts: BTreeMap<Rank, (Layout, Vec<RecoveryReport>)>,
    fatal: Vec<(Rank, String)>,
}

type Shared = Rc<RefCell<Recorder>>;

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub hangs: HangCounts,
    pub audit: Audit,
    pub ops: Vec<OpRecord>,
    /// Recovery rounds as seen by the lowest surviving rank.
    pub recoveries: Vec<RecoveryReport>,
    pub lost: Vec<Rank>,
    pub fatal: Vec<(Rank, String)>,
    pub concurrent_writers: u64,
    pub trace_jsonl: String,
    /// Human-readable description of every failed check.
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// What the operation would write, if anything.
fn writes_of(action: &Action, value: &Option<Vec<u8>>) -> Vec<(Key, Option<Vec<u8>>)> {
    match action {
        Action::Put { key, .. } => vec![(*key, value.clone().filter(|v| !v.is_empty()))],
        Action::Delete { key } => vec![(*key, None)],
        Action::Txn { ops } => ops
            .iter()
            .filter_map(|o| match o.to_txn_op() {
                TxnOp::Write(k, v) => Some((k, Some(v).filter(|v| !v.is_empty()))),
                TxnOp::Delete(k) => Some((k, None)),
                _ => None,
            })
            .collect(),
        Action::Get { .. } | Action::Kill(_) => Vec::new(),
    }
}

struct RankRunner {
    store: Store,
    retry: bool,
    rec: Shared,
}

impl RankRunner {
    async fn attempt(&self, action: &Action, value: &Option<Vec<u8>>) -> Result<OpResult, StoreError> {
        let s = &self.store;
        match action {
            Action::Put { key, .. } => s.put(*key, value.as_deref().unwrap_or_default()).await.map(|_| OpResult::Done),
            Action::Delete { key } => s.delete(*key).await.map(|_| OpResult::Done),
            Action::Get { key } => s.get(*key).await.map(OpResult::Read),
            Action::Txn { ops } => {
                s.cas_transaction(ops.iter().map(|o| o.to_txn_op()).collect()).await.map(OpResult::Txn)
            }
            Action::Kill(_) => unreachable!("kills are injected by the scheduler"),
        }
    }

    /// The same action as a transaction-mode submission.
    async fn attempt_txn(&self, action: &Action, value: &Option<Vec<u8>>) -> Result<OpResult, StoreError> {
        let ops = match action {
            Action::Put { key, .. } => vec![TxnOp::Write(*key, value.clone().unwrap_or_default())],
            Action::Delete { key } => vec![TxnOp::Delete(*key)],
            Action::Get { key } => vec![TxnOp::Read(*key)],
            Action::Txn { ops } => ops.iter().map(|o| o.to_txn_op()).collect(),
            Action::Kill(_) => unreachable!("kills are injected by the scheduler"),
        };
        let outcome = self.store.submit_transaction(ops).await?;
        Ok(match (action, outcome) {
            (Action::Get { .. }, TxnOutcome::Committed { mut reads }) => OpResult::Read(reads.pop().flatten()),
            (Action::Put { .. } | Action::Delete { .. }, TxnOutcome::Committed { .. }) => OpResult::Done,
            (_, outcome) => OpResult::Txn(outcome),
        })
    }

    async fn leave_txn_mode(&self) -> Result<(), StoreError> {
        if self.store.phase() == Phase::TransactionMode {
            self.store.exit_transaction_mode().await?;
        }
        Ok(())
    }

    fn detected(&self, cause: &StoreError) {
        if let StoreError::FailureDetected(r) = cause {
            self.store.ep().note("failure_detected", "recover", Some(r.to_string()));
        }
    }

    /// Recovery for a rank with nothing in flight.
    async fn settle(&self, cause: &StoreError) -> Result<(), StoreError> {
        self.detected(cause);
        self.store.recover().await?;
        self.leave_txn_mode().await
    }

    /// Runs one action, recovering from failures. The second value is a
    /// fatal error that ends this rank's schedule.
    async fn perform(&self, action: &Action, value: &Option<Vec<u8>>) -> (OpResult, u32, Option<StoreError>) {
        let mut res = self.attempt(action, value).await;
        let mut interruptions = 0;
        loop {
            let err = match res {
                Ok(r) => return (r, interruptions, None),
                Err(e) if !e.needs_recovery() => return (OpResult::Rejected(e.to_string()), interruptions, None),
                Err(e) => e,
            };
            interruptions += 1;
            let cut = OpResult::Interrupted(err.to_string());
            self.detected(&err);
            if let Err(f) = self.store.recover().await {
                return (cut, interruptions, Some(f));
            }
            if !self.retry {
                return (cut, interruptions, self.leave_txn_mode().await.err());
            }
            if self.store.phase() == Phase::TransactionMode {
                let r = self.attempt_txn(action, value).await;
                let left = self.leave_txn_mode().await.err();
                return match r {
                    Ok(r) => (r, interruptions, left),
                    Err(e) => (OpResult::Interrupted(e.to_string()), interruptions, left.or(Some(e))),
                };
            }
            res = self.attempt(action, value).await;
        }
    }

    async fn idle_until(&self, step: u64) -> Result<(), StoreError> {
        let ep = self.store.ep();
        while ep.step() < step {
            if let Err(e) = self.store.check_not_revoked() {
                self.settle(&e).await?;
                continue;
            }
            ep.mark_progress();
            yield_now().await;
        }
        Ok(())
    }

    async fn finalize(&self) -> Result<(), StoreError> {
        loop {
            match self.store.barrier().await {
                Ok(()) => return Ok(()),
                Err(e) if e.needs_recovery() => self.settle(&e).await?,
                Err(e) => return Err(e),
            }
        }
    }

    async fn run(self, seed: u64, actions: Vec<(u64, Action)>) {
        let ep = self.store.ep().clone();
        let me = self.store.rank();
        let mut fatal = None;
        for (step, action) in actions {
            if let Err(e) = self.idle_until(step).await {
                fatal = Some(e);
                break;
            }
            let value = match &action {
                Action::Put { value, size, .. } => Some(put_value(seed, me, step, value, *size)),
                _ => None,
            };
            let start = ep.step();
            let (result, interruptions, f) = self.perform(&action, &value).await;
            self.rec.borrow_mut().ops.push(OpRecord {
                rank: me,
                action: action.name().to_string(),
                start,
                end: ep.step(),
                writes: writes_of(&action, &value),
                result,
                interruptions,
            });
            if f.is_some() {
                fatal = f;
                break;
            }
        }
        if fatal.is_none() {
            fatal = self.finalize().await.err();
        }
        let mut rec = self.rec.borrow_mut();
        if let Some(e) = fatal {
            rec.fatal.push((me, e.to_string()));
        }
        rec.layouts.insert(me, (self.store.layout(), self.store.recovery_reports()));
    }
}

/// Runs `sc` to completion and checks every assertion it states.
pub fn run_scenario(sc: &Scenario) -> RunReport {
    let mut cfg = sc.config.clone();
    cfg.seed = sc.seed;
    let p = cfg.placement.world_size;
    let transport = TransportConfig { fidelity: cfg.fidelity, ..sc.transport.clone() };
    let mut sim = Sim::new(p, transport);
    let rec: Shared = Rc::default();
    for r in 0..p as u32 {
        let rank = Rank(r);
        let actions = sc.actions_of(rank);
        let (rec, retry, seed) = (rec.clone(), sc.retry_interrupted, sc.seed);
        spawn_process(&mut sim, rank, cfg.clone(), move |store| async move {
            match store {
                Ok(store) => RankRunner { store, retry, rec }.run(seed, actions).await,
                Err(e) => rec.borrow_mut().fatal.push((rank, e.to_string())),
            }
        });
    }
    for (rank, at) in sc.kills() {
        sim.inject_failure(rank, at).expect("validated kill schedule");
    }
    let outcome = sim.run(sc.max_steps);
    let rec = std::mem::take(&mut *rec.borrow_mut());

    // the lowest rank still alive speaks for the final layout
    let chosen = rec.layouts.iter().find(|(r, _)| sim.alive(**r)).or_else(|| rec.layouts.iter().next());
    let (audit, recoveries) = match chosen {
        Some((_, (layout, reports))) => (Audit::take(&sim, layout, &cfg), reports.clone()),
        None => (Audit::default(), Vec::new()),
    };
    let lost: Vec<Rank> = recoveries.iter().flat_map(|r| r.lost.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut report = RunReport {
        outcome,
        hangs: sim.hangs(),
        audit,
        ops: rec.ops,
        recoveries,
        lost,
        fatal: rec.fatal,
        concurrent_writers: sim.concurrent_writers(),
        trace_jsonl: sim.trace().to_jsonl(),
        failures: Vec::new(),
    };
    report.failures = check(sc, &report);
    report
}

/// Values a key may legally hold at the end: the last acknowledged write,
/// plus any interrupted write that ended after it.
pub fn admissible(ops: &[OpRecord]) -> BTreeMap<Key, Vec<Option<Vec<u8>>>> {
    let mut acked: BTreeMap<Key, (u64, Option<Vec<u8>>)> = BTreeMap::new();
    let mut cut: BTreeMap<Key, Vec<(u64, Option<Vec<u8>>)>> = BTreeMap::new();
    for op in ops {
        for (k, v) in &op.writes {
            if op.result.acked() {
                if acked.get(k).is_none_or(|(end, _)| op.end >= *end) {
                    acked.insert(*k, (op.end, v.clone()));
                }
            } else if matches!(op.result, OpResult::Interrupted(_)) {
                cut.entry(*k).or_default().push((op.end, v.clone()));
            }
        }
    }
    let keys: BTreeSet<Key> = acked.keys().chain(cut.keys()).copied().collect();
    keys.into_iter()
        .map(|k| {
            let (since, base) = acked.get(&k).cloned().unwrap_or((0, None));
            let mut vals = vec![base];
            for (end, v) in cut.get(&k).into_iter().flatten() {
                if *end > since && !vals.contains(v) {
                    vals.push(v.clone());
                }
            }
            (k, vals)
        })
        .collect()
}

fn check(sc: &Scenario, r: &RunReport) -> Vec<String> {
    let mut fails = Vec::new();
    let want = sc.expect.outcome.as_deref().unwrap_or("completed");
    let got = match &r.outcome {
        RunOutcome::Completed { .. } => "completed",
        RunOutcome::Deadlock { .. } => "deadlock",
        RunOutcome::StepLimit { .. } => "step_limit",
    };
    if got != want {
        fails.push(format!("outcome {got} ({:?}), expected {want}", r.outcome));
    }
    let hangs = sc.expect.hangs.unwrap_or_default();
    if (r.hangs.expected, r.hangs.unexpected) != (hangs.expected, hangs.unexpected) {
        fails.push(format!(
            "hangs: {} expected + {} unexpected, scenario allows {} + {}",
            r.hangs.expected, r.hangs.unexpected, hangs.expected, hangs.unexpected
        ));
    }
    if sc.expect.consistent.unwrap_or(true) {
        for rec in r.audit.records.iter().filter(|a| !a.consistent) {
            fails.push(format!("key {} has diverging copies", rec.key));
        }
    }
    if !sc.config.cas_mode && r.concurrent_writers > 0 {
        fails.push(format!("{} overlapping write epochs on one copy block", r.concurrent_writers));
    }
    if let Some(lost) = &sc.expect.lost {
        let got: Vec<u32> = r.lost.iter().map(|x| x.0).collect();
        if &got != lost {
            fails.push(format!("lost ranks {got:?}, expected {lost:?}"));
        }
    }
    for (key, want) in &sc.expect.values {
        let want = want.as_ref().map(|s| s.as_bytes().to_vec());
        match r.audit.values.get(key) {
            Some(got) if *got == want => {}
            got => fails.push(format!("key {key} holds {}, expected {}", show(got.cloned().flatten()), show(want))),
        }
    }
    // every present key ends on an admissible value
    let allowed = admissible(&r.ops);
    for rec in r.audit.records.iter().filter(|a| a.status == KeyStatus::Present && a.consistent) {
        let got = r.audit.values.get(&rec.key).cloned().flatten();
        let ok = match allowed.get(&rec.key) {
            Some(vals) => vals.contains(&got),
            None => got.is_none(),
        };
        if !ok {
            fails.push(format!("key {} holds {}, which no write left there", rec.key, show(got)));
        }
    }
    if !sc.expect.allow_errors {
        for (rank, e) in &r.fatal {
            fails.push(format!("rank {rank} stopped: {e}"));
        }
        for op in &r.ops {
            let bad = match &op.result {
                OpResult::Rejected(e) => Some(e),
                OpResult::Interrupted(e) if sc.retry_interrupted => Some(e),
                _ => None,
            };
            if let Some(e) = bad {
                fails.push(format!("{} by rank {} at step {}: {e}", op.action, op.rank, op.start));
            }
        }
    }
    fails
}

fn show(v: Option<Vec<u8>>) -> String {
    match v {
        None => "nothing".to_string(),
        Some(b) => match String::from_utf8(b) {
            Ok(s) if s.len() <= 32 => format!("{s:?}"),
            Ok(s) => format!("{} bytes", s.len()),
            Err(e) => format!("{} bytes", e.as_bytes().len()),
        },
    }
}
