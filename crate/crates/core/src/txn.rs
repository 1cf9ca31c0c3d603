//! Transaction mode: a two-phase commit with a single coordinator (rank 0
//! of the current generation) and backup coordinators that receive the
//! coordinator's log over the control channel.
//!
//! The coordinator holds exclusive locks on every data block for the whole
//! mode, so "prepare" only evaluates guards and reads; it then logs its
//! decision at every live backup before touching any copy.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::placement::Key;
use crate::store::{Phase, Store, StoreError};
use crate::transport::{CtlMessage, Envelope, Rank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId {
    pub submitter: Rank,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxnOp {
    Read(Key),
    Write(Key, Vec<u8>),
    Delete(Key),
    /// Abort unless the stored value equals this one (`None` = empty).
    Guard(Key, Option<Vec<u8>>),
}

impl TxnOp {
    pub fn key(&self) -> Key {
        match self {
            TxnOp::Read(k) | TxnOp::Write(k, _) | TxnOp::Delete(k) | TxnOp::Guard(k, _) => *k,
        }
    }

    pub fn is_write(&self) -> bool {
        matches!(self, TxnOp::Write(..) | TxnOp::Delete(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxnPhase {
    Received,
    Prepared,
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    GuardFailed(Key),
    /// The key has no copy in the current world.
    Unavailable(Key),
    /// An entry lock stayed with a live holder (CAS mode).
    Busy(Key),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Pending,
    Commit,
    Abort(AbortReason),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnRecord {
    pub id: TxnId,
    pub ops: Vec<TxnOp>,
    pub phase: TxnPhase,
    pub decision: Decision,
    /// Values seen by the `Read` ops, in op order (pre-transaction state).
    pub reads: Vec<Option<Vec<u8>>>,
}

impl TxnRecord {
    pub fn new(id: TxnId, ops: Vec<TxnOp>) -> Self {
        Self { id, ops, phase: TxnPhase::Received, decision: Decision::Pending, reads: Vec::new() }
    }

    pub fn outcome(&self) -> Option<TxnOutcome> {
        match (&self.phase, &self.decision) {
            (TxnPhase::Committed, _) => Some(TxnOutcome::Committed { reads: self.reads.clone() }),
            (TxnPhase::Aborted, Decision::Abort(r)) => Some(TxnOutcome::Aborted(r.clone())),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxnOutcome {
    Committed { reads: Vec<Option<Vec<u8>>> },
    Aborted(AbortReason),
}

/// One update shipped from the coordinator to its backups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogEntry {
    Txn(TxnRecord),
    /// Every key's holders now carry the winning value for this generation.
    RestoreDone { generation: u64 },
}

/// A coordinator's (or backup's) transaction log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TxnLog {
    pub records: BTreeMap<TxnId, TxnRecord>,
    /// Transaction ids in the order the coordinator first logged them.
    pub order: Vec<TxnId>,
    pub restore_done: Option<u64>,
}

pub type SharedLog = Rc<RefCell<TxnLog>>;

impl TxnLog {
    pub fn shared() -> SharedLog {
        Rc::new(RefCell::new(TxnLog::default()))
    }

    pub fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Txn(rec) => {
                let id = rec.id;
                match self.records.get_mut(&id) {
                    Some(old) if old.phase >= rec.phase => {}
                    Some(old) => *old = rec,
                    None => {
                        self.order.push(id);
                        self.records.insert(id, rec);
                    }
                }
            }
            LogEntry::RestoreDone { generation } => {
                self.restore_done = Some(self.restore_done.map_or(generation, |g| g.max(generation)));
            }
        }
    }

    /// Records in coordinator order.
    pub fn ordered(&self) -> impl Iterator<Item = &TxnRecord> {
        self.order.iter().map(|id| &self.records[id])
    }
}

/// Evaluates `ops` against `state` the way the coordinator does: guards and
/// reads see the pre-transaction state, writes apply in op order.
pub fn apply_sequential(
    state: &mut BTreeMap<Key, Vec<u8>>,
    ops: &[TxnOp],
) -> TxnOutcome {
    let mut reads = Vec::new();
    for op in ops {
        match op {
            TxnOp::Guard(k, expect) => {
                if state.get(k) != expect.as_ref() {
                    return TxnOutcome::Aborted(AbortReason::GuardFailed(*k));
                }
            }
            TxnOp::Read(k) => reads.push(state.get(k).cloned()),
            _ => {}
        }
    }
    for op in ops {
        match op {
            TxnOp::Write(k, v) if !v.is_empty() => {
                state.insert(*k, v.clone());
            }
            TxnOp::Write(k, _) | TxnOp::Delete(k) => {
                state.remove(k);
            }
            _ => {}
        }
    }
    TxnOutcome::Committed { reads }
}

/// Coordinator-side bookkeeping for one transaction-mode round.
#[derive(Clone, Debug, Default)]
pub(crate) struct CoordState {
    pub backups: Vec<Rank>,
    /// Blocks this coordinator locked: (window index, key, rank).
    pub locked: Vec<(Key, usize, Rank)>,
    pub ticket: u64,
}

/// Interval, in steps, between liveness probes while waiting on a peer.
pub(crate) fn probe_due(waited: u64, interval: u64) -> bool {
    waited > 0 && waited % interval.max(1) == 0
}

impl Store {
    /// Submits a transaction and waits for its outcome. Transparently
    /// follows coordinator failovers (re-entering recovery as needed) and
    /// resubmits under the same id, which the coordinator deduplicates.
    pub async fn submit_transaction(&self, ops: Vec<TxnOp>) -> Result<TxnOutcome, StoreError> {
        let id = self.next_txn_id();
        let record = TxnRecord::new(id, ops);
        self.ep().note("txn_submit", "issued", Some(format!("{}/{}", id.submitter, id.seq)));
        let limit = self.config().backups + 1;
        let mut attempts = 0usize;
        loop {
            if self.phase() != Phase::TransactionMode {
                return Err(StoreError::NotInTransactionMode);
            }
            attempts += 1;
            if attempts > limit + 1 {
                return Err(StoreError::CoordinatorExhausted);
            }
            let coordinator = self.coordinator();
            let result = if coordinator == self.rank() {
                self.serve(record.clone()).await
            } else {
                self.submit_remote(coordinator, &record).await
            };
            match result {
                Ok(outcome) => {
                    self.ep().note("txn_outcome", outcome_label(&outcome), Some(format!("{}/{}", id.submitter, id.seq)));
                    return Ok(outcome);
                }
                Err(e) if e.needs_recovery() => {
                    self.recover().await?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn submit_remote(&self, coordinator: Rank, record: &TxnRecord) -> Result<TxnOutcome, StoreError> {
        let ep = self.ep();
        ep.ctl_send(coordinator, CtlMessage::TxnSubmit(record.clone()))
            .await
            .map_err(|e| StoreError::from_osc(e, Some(coordinator)))?;
        let id = record.id;
        let mut waited = 0u64;
        loop {
            let got = ep.inbox_take(|env| matches!(&env.msg, CtlMessage::TxnOutcome { id: i, .. } if *i == id));
            if let Some(Envelope { msg: CtlMessage::TxnOutcome { outcome, .. }, .. }) = got {
                // a resubmission may have produced a second copy
                while ep.inbox_take(|env| matches!(&env.msg, CtlMessage::TxnOutcome { id: i, .. } if *i == id)).is_some() {}
                return Ok(outcome);
            }
            self.check_not_revoked()?;
            if probe_due(waited, self.config().probe_interval) {
                self.ping(coordinator).await?;
            } else {
                ep.set_waiting("txn_outcome");
                crate::transport::yield_now().await;
            }
            waited += 1;
        }
    }

    /// Runs one transaction to completion at the coordinator and replies to
    /// a remote submitter. A resubmitted id gets the logged outcome again.
    pub(crate) async fn serve(&self, record: TxnRecord) -> Result<TxnOutcome, StoreError> {
        let id = record.id;
        let outcome = self.execute(record).await?;
        if id.submitter != self.rank() {
            // a dead submitter simply never hears back
            let _ = self
                .ep()
                .ctl_send(id.submitter, CtlMessage::TxnOutcome { id, outcome: outcome.clone() })
                .await;
        }
        Ok(outcome)
    }

    async fn execute(&self, mut record: TxnRecord) -> Result<TxnOutcome, StoreError> {
        let logged = self.log().borrow().records.get(&record.id).cloned();
        if let Some(done) = logged.as_ref().and_then(TxnRecord::outcome) {
            return Ok(done);
        }
        if let Some(prev) = logged.filter(|r| r.phase == TxnPhase::Prepared) {
            record = prev;
        } else {
            self.prepare(&mut record).await?;
        }
        self.finish(record).await
    }

    /// Guards and reads against the master copies, then the decision is
    /// logged at every live backup.
    async fn prepare(&self, record: &mut TxnRecord) -> Result<(), StoreError> {
        let mut reads = Vec::new();
        let mut decision = Decision::Commit;
        let mut current: BTreeMap<Key, Option<Vec<u8>>> = BTreeMap::new();
        for op in &record.ops {
            let key = op.key();
            if !self.key_available(key) {
                decision = Decision::Abort(AbortReason::Unavailable(key));
                break;
            }
            if matches!(op, TxnOp::Guard(..) | TxnOp::Read(_)) && !current.contains_key(&key) {
                let v = self.coordinator_read(key).await?;
                current.insert(key, v);
            }
            match op {
                TxnOp::Guard(k, expect) if current[k] != *expect => {
                    decision = Decision::Abort(AbortReason::GuardFailed(*k));
                    break;
                }
                TxnOp::Read(k) => reads.push(current[k].clone()),
                _ => {}
            }
        }
        record.phase = TxnPhase::Prepared;
        record.reads = if decision == Decision::Commit { reads } else { Vec::new() };
        record.decision = decision;
        self.log_entry(LogEntry::Txn(record.clone()), true).await
    }

    pub(crate) async fn finish(&self, mut record: TxnRecord) -> Result<TxnOutcome, StoreError> {
        if record.decision == Decision::Commit {
            for op in record.ops.clone() {
                match op {
                    TxnOp::Write(k, v) => self.coordinator_write(k, Some(v.as_slice())).await?,
                    TxnOp::Delete(k) => self.coordinator_write(k, None).await?,
                    _ => {}
                }
            }
            record.phase = TxnPhase::Committed;
        } else {
            record.phase = TxnPhase::Aborted;
        }
        self.log_entry(LogEntry::Txn(record.clone()), false).await?;
        Ok(record.outcome().expect("final phase"))
    }

    /// Appends to the local log and ships the entry to the backups. With
    /// `wait`, returns only once every live backup acknowledged it.
    pub(crate) async fn log_entry(&self, entry: LogEntry, wait: bool) -> Result<(), StoreError> {
        self.log().borrow_mut().apply(entry.clone());
        if !self.config().log_to_backups {
            return Ok(());
        }
        let ticket = self.next_ticket();
        let backups = self.backups();
        let mut waiting = Vec::new();
        for b in backups {
            let msg = CtlMessage::TxnLogUpdate { ticket, entry: entry.clone() };
            match self.ep().ctl_send(b, msg).await {
                Ok(()) => waiting.push(b),
                Err(_) => self.drop_backup(b),
            }
        }
        if !wait {
            return Ok(());
        }
        let ep = self.ep();
        let mut waited = 0u64;
        while !waiting.is_empty() {
            while let Some(env) =
                ep.inbox_take(|env| matches!(env.msg, CtlMessage::TxnLogAck { ticket: t } if t == ticket))
            {
                waiting.retain(|b| *b != env.from);
            }
            if waiting.is_empty() {
                break;
            }
            self.check_not_revoked()?;
            if probe_due(waited, self.config().probe_interval) {
                let mut still = Vec::new();
                for b in waiting {
                    match self.ping(b).await {
                        Ok(()) => still.push(b),
                        Err(_) => self.drop_backup(b),
                    }
                }
                waiting = still;
            } else {
                ep.set_waiting("txn_log_ack");
                crate::transport::yield_now().await;
            }
            waited += 1;
        }
        Ok(())
    }

    /// Serves queued submissions once; returns whether one was handled.
    pub(crate) async fn serve_queued(&self) -> Result<bool, StoreError> {
        let got = self.ep().inbox_take(|env| matches!(env.msg, CtlMessage::TxnSubmit(_)));
        let Some(Envelope { msg: CtlMessage::TxnSubmit(record), .. }) = got else {
            return Ok(false);
        };
        self.serve(record).await?;
        Ok(true)
    }

    /// Leaves transaction mode. Collective: every live rank must call it.
    /// Failures during the exit trigger another recovery round, after which
    /// the exit is retried.
    pub async fn exit_transaction_mode(&self) -> Result<(), StoreError> {
        if self.phase() != Phase::TransactionMode {
            return Err(StoreError::NotInTransactionMode);
        }
        loop {
            let attempt = if self.coordinator() == self.rank() {
                self.coordinator_exit().await
            } else {
                self.participant_exit().await
            };
            match attempt {
                Ok(()) => {
                    self.set_phase(Phase::Normal);
                    self.mark_restored();
                    *self.inner.txn_generation.borrow_mut() = None;
                    self.ep().note("txn_mode", "exit", None);
                    return Ok(());
                }
                Err(e) if e.needs_recovery() => {
                    self.recover().await?;
                    if self.phase() != Phase::TransactionMode {
                        return Ok(());
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn participant_exit(&self) -> Result<(), StoreError> {
        let coordinator = self.coordinator();
        self.ep()
            .ctl_send(coordinator, CtlMessage::ExitReady)
            .await
            .map_err(|e| StoreError::from_osc(e, Some(coordinator)))?;
        self.barrier().await
    }

    async fn coordinator_exit(&self) -> Result<(), StoreError> {
        let ep = self.ep();
        let me = self.rank();
        let mut pending: Vec<Rank> =
            self.layout_generation().live_ranks.into_iter().filter(|r| *r != me).collect();
        let mut waited = 0u64;
        while !pending.is_empty() {
            if self.serve_queued().await? {
                continue;
            }
            while let Some(env) = ep.inbox_take(|env| matches!(env.msg, CtlMessage::ExitReady)) {
                pending.retain(|r| *r != env.from);
            }
            if pending.is_empty() {
                break;
            }
            self.check_not_revoked()?;
            if probe_due(waited, self.config().probe_interval) {
                let mut still = Vec::new();
                for r in pending {
                    // a dead participant makes the barrier below fail, which
                    // starts the next recovery round
                    if self.ping(r).await.is_ok() {
                        still.push(r);
                    }
                }
                pending = still;
            } else {
                ep.set_waiting("exit_ready");
                crate::transport::yield_now().await;
            }
            waited += 1;
        }
        self.release_coordinator_locks().await?;
        self.barrier().await
    }
}

fn outcome_label(o: &TxnOutcome) -> &'static str {
    match o {
        TxnOutcome::Committed { .. } => "committed",
        TxnOutcome::Aborted(_) => "aborted",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(o: u32) -> Key {
        Key::new(o, 0)
    }

    #[test]
    fn sequential_reads_see_pre_state() {
        let mut st = BTreeMap::from([(k(0), b"old".to_vec())]);
        let out = apply_sequential(&mut st, &[TxnOp::Read(k(0)), TxnOp::Write(k(0), b"new".to_vec())]);
        assert_eq!(out, TxnOutcome::Committed { reads: vec![Some(b"old".to_vec())] });
        assert_eq!(st[&k(0)], b"new".to_vec());
    }

    #[test]
    fn failed_guard_changes_nothing() {
        let mut st = BTreeMap::from([(k(0), b"Y".to_vec())]);
        let out = apply_sequential(&mut st, &[TxnOp::Guard(k(0), Some(b"X".to_vec())), TxnOp::Delete(k(0))]);
        assert_eq!(out, TxnOutcome::Aborted(AbortReason::GuardFailed(k(0))));
        assert_eq!(st.len(), 1);
    }

    #[test]
    fn log_phases_are_monotone() {
        let id = TxnId { submitter: Rank(1), seq: 0 };
        let mut log = TxnLog::default();
        let mut rec = TxnRecord::new(id, vec![]);
        rec.phase = TxnPhase::Committed;
        log.apply(LogEntry::Txn(rec.clone()));
        let mut stale = rec.clone();
        stale.phase = TxnPhase::Prepared;
        log.apply(LogEntry::Txn(stale));
        assert_eq!(log.records[&id].phase, TxnPhase::Committed);
        assert_eq!(log.order, vec![id]);
        log.apply(LogEntry::RestoreDone { generation: 3 });
        log.apply(LogEntry::RestoreDone { generation: 2 });
        assert_eq!(log.restore_done, Some(3));
    }
}
