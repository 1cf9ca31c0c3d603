//! Entry locks built from compare-and-swap on a cell in each key's master
//! block. A dead holder's lock is taken over by the next contender, so a
//! failure never strands a lock and no mode switch is needed: puts, gets
//! and transactions all run under the same entry locks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::{self, Liveness};
use crate::placement::Key;
use crate::store::{Phase, Store, StoreError, LOCK_CELL, UNLOCKED};
use crate::transport::Rank;
use crate::txn::{AbortReason, TxnOp, TxnOutcome};

/// Upper bound of the randomized wait between two lock rounds, in steps.
const BACKOFF_STEPS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockOutcome {
    Acquired,
    /// The previous holder was dead and its lock was taken over.
    AcquiredAfterForce(Rank),
}

impl Store {
    fn require_cas(&self) -> Result<(), StoreError> {
        if self.config().cas_mode && self.phase() == Phase::Normal {
            Ok(())
        } else {
            Err(StoreError::ModeViolation)
        }
    }

    async fn cas_cell(&self, key: Key, expected: i64, desired: i64) -> Result<i64, StoreError> {
        let kl = self.key_layout(key)?;
        let (win, master) = (kl.windows[0], kl.holders[0]);
        self.guarded(master, || async {
            self.ep()
                .compare_and_swap(win, master, LOCK_CELL, expected, desired)
                .await
                .map_err(|e| StoreError::from_osc(e, Some(master)))
        })
        .await
    }

    /// Acquires the entry lock of `key`, taking it over if its holder died.
    /// Gives up with `Busy` after `cas_retry_limit` rounds against a live
    /// holder.
    pub async fn lock_entry(&self, key: Key) -> Result<LockOutcome, StoreError> {
        self.require_cas()?;
        let me = i64::from(self.rank().0);
        let mut rounds = 0u32;
        loop {
            let prior = self.cas_cell(key, UNLOCKED, me).await?;
            if prior == UNLOCKED || prior == me {
                return Ok(LockOutcome::Acquired);
            }
            let holder = Rank(prior as u32);
            if detector::ping(self.ep(), holder).await == Liveness::Failed {
                if self.cas_cell(key, prior, me).await? == prior {
                    self.ep().note("cas_lock", "forced", Some(format!("{key} from {holder}")));
                    return Ok(LockOutcome::AcquiredAfterForce(holder));
                }
                continue;
            }
            rounds += 1;
            if rounds >= self.config().cas_retry_limit {
                self.ep().note("cas_lock", "busy", Some(format!("{key} held by {holder}")));
                return Err(StoreError::Busy(key));
            }
            let delay = self.backoff(BACKOFF_STEPS);
            self.ep().sleep(delay).await;
        }
    }

    /// Releases the entry lock. `NotHolder` means the lock was taken over and
    /// the caller's critical section no longer counts.
    pub async fn unlock_entry(&self, key: Key) -> Result<(), StoreError> {
        self.require_cas()?;
        let me = i64::from(self.rank().0);
        if self.cas_cell(key, me, UNLOCKED).await? == me {
            Ok(())
        } else {
            Err(StoreError::NotHolder(key))
        }
    }

    /// Runs `body` under the entry lock of `key`.
    async fn locked<T, F, Fut>(&self, key: Key, body: F) -> Result<T, StoreError>
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<T, StoreError>>,
    {
        self.lock_entry(key).await?;
        let out = body().await;
        match out {
            Err(e) if e.needs_recovery() => Err(e),
            out => {
                self.unlock_entry(key).await?;
                out
            }
        }
    }

    pub async fn cas_store_put(&self, key: Key, value: &[u8]) -> Result<(), StoreError> {
        self.locked(key, || self.write_all(key, Some(value), false, "store_put")).await
    }

    pub async fn cas_store_delete(&self, key: Key) -> Result<(), StoreError> {
        self.locked(key, || self.write_all(key, None, false, "store_delete")).await
    }

    pub async fn cas_store_get(&self, key: Key) -> Result<Option<Vec<u8>>, StoreError> {
        self.locked(key, || self.read_any(key, false)).await
    }

    /// A transaction under entry locks, taken in ascending key order and
    /// released in reverse. Reads and guards see the state before the
    /// transaction's own writes.
    pub async fn cas_transaction(&self, ops: Vec<TxnOp>) -> Result<TxnOutcome, StoreError> {
        self.require_cas()?;
        let keys: BTreeSet<Key> = ops.iter().map(TxnOp::key).collect();
        if let Some(k) = keys.iter().find(|k| !self.key_available(**k)) {
            return Ok(TxnOutcome::Aborted(AbortReason::Unavailable(*k)));
        }
        let mut held = Vec::new();
        for k in &keys {
            match self.lock_entry(*k).await {
                Ok(_) => held.push(*k),
                Err(StoreError::Busy(b)) => {
                    self.release_all(&held).await?;
                    return Ok(TxnOutcome::Aborted(AbortReason::Busy(b)));
                }
                Err(e) => return Err(e),
            }
        }
        let outcome = self.cas_apply(&ops).await;
        match outcome {
            Err(e) if e.needs_recovery() => Err(e),
            outcome => {
                self.release_all(&held).await?;
                outcome
            }
        }
    }

    async fn cas_apply(&self, ops: &[TxnOp]) -> Result<TxnOutcome, StoreError> {
        let mut current: BTreeMap<Key, Option<Vec<u8>>> = BTreeMap::new();
        let mut reads = Vec::new();
        for op in ops {
            let key = op.key();
            if matches!(op, TxnOp::Guard(..) | TxnOp::Read(_)) && !current.contains_key(&key) {
                let v = self.read_any(key, false).await?;
                current.insert(key, v);
            }
            match op {
                TxnOp::Guard(k, expect) if current[k] != *expect => {
                    return Ok(TxnOutcome::Aborted(AbortReason::GuardFailed(*k)));
                }
                TxnOp::Read(k) => reads.push(current[k].clone()),
                _ => {}
            }
        }
        for op in ops {
            match op {
                TxnOp::Write(k, v) => self.write_all(*k, Some(v), false, "txn_write").await?,
                TxnOp::Delete(k) => self.write_all(*k, None, false, "txn_write").await?,
                _ => {}
            }
        }
        Ok(TxnOutcome::Committed { reads })
    }

    async fn release_all(&self, held: &[Key]) -> Result<(), StoreError> {
        for k in held.iter().rev() {
            self.unlock_entry(*k).await?;
        }
        Ok(())
    }
}
