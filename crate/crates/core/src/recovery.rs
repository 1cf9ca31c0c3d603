//! Global recovery: revoke every store window, shrink the world, agree on
//! who was lost, rebuild the windows over the survivors (reusing surviving
//! blocks as they are) and restore every key's copies from its winning
//! source. Without CAS mode the round ends in transaction mode.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::placement::{Key, Move};
use crate::store::{BlockRole, Phase, Store, StoreError, Transition};
use crate::transport::{BlockSpec, BufferId, Rank, WorldGeneration, HEADER_BYTES};
use crate::txn::{LogEntry, TxnPhase};

/// Outcome of one recovery round, as seen by every survivor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Id of the generation the round produced.
    pub generation: u64,
    pub survivors: Vec<Rank>,
    pub lost: Vec<Rank>,
    /// Whether the previous holders were known to carry the winning values.
    pub restored_known: bool,
    pub moves: Vec<Move>,
    pub data_loss: Vec<Key>,
    /// Keys of lost owners; they leave the store.
    pub dropped: Vec<Key>,
}

impl Store {
    /// Runs recovery rounds until one completes. Collective over the live
    /// ranks: every rank joins as soon as it sees a failure or a revoked
    /// window.
    pub async fn recover(&self) -> Result<RecoveryReport, StoreError> {
        loop {
            match self.recovery_round().await {
                Ok(report) => return Ok(report),
                Err(e) if e.needs_recovery() => {
                    self.ep().note("recovery", "restart", Some(e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Whether this rank knows the current holders carry the winning values.
    fn restore_known(&self) -> bool {
        let layout = self.inner.layout.borrow();
        layout.restored || self.log().borrow().restore_done == Some(layout.generation.id)
    }

    async fn recovery_round(&self) -> Result<RecoveryReport, StoreError> {
        let ep = self.ep();
        let osc = |e| StoreError::from_osc(e, None);

        self.set_phase(Phase::Revoking);
        for win in self.inner.layout.borrow().windows() {
            // windows of a round that never finished may already be gone
            let _ = ep.revoke(win).await;
        }

        self.set_phase(Phase::Shrinking);
        let generation = ep.comm_shrink().await.map_err(osc)?;
        let p = ep.world_size();
        let mut bits = generation.bitmap(p + 1);
        // extra bit: "I do not know that the last restore finished"
        bits.set(p, !self.restore_known());
        let agreed = ep.comm_agree(bits).await.map_err(osc)?;
        let old = self.layout_generation();
        let lost: BTreeSet<Rank> = old.live_ranks.iter().copied().filter(|r| !agreed.contains(r.index())).collect();
        let restored_known = !agreed.contains(p);
        ep.note(
            "recovery",
            "agreed",
            Some(format!("generation {} lost {:?}", generation.id, lost.iter().map(|r| r.0).collect::<Vec<_>>())),
        );

        if let Some(prev) = self.inner.txn_generation.borrow().clone() {
            let guardians: Vec<Rank> =
                (0..=self.config().backups as u32).filter_map(|i| prev.rank_at(i)).collect();
            if guardians.iter().all(|r| !generation.contains(*r)) {
                self.set_phase(Phase::TransactionMode);
                ep.note("recovery", "coordinator_exhausted", None);
                return Err(StoreError::CoordinatorExhausted);
            }
        }

        self.set_phase(Phase::Rebuilding);
        let transition =
            self.inner.layout.borrow().next(&lost, &generation, restored_known, self.config().placement.replica_count);
        self.rebuild(&transition).await?;
        self.open_lifetime_epochs().await?;

        let report = RecoveryReport {
            generation: generation.id,
            survivors: generation.live_ranks.clone(),
            lost: lost.into_iter().collect(),
            restored_known,
            moves: transition.plan.moves.clone(),
            data_loss: transition.plan.data_loss.clone(),
            dropped: transition.plan.dropped.clone(),
        };
        self.inner.reports.borrow_mut().push(report.clone());
        ep.note(
            "recovery",
            "rebuilt",
            Some(format!("{} moves, {} lost keys", report.moves.len(), report.data_loss.len())),
        );

        if self.config().cas_mode {
            if self.coordinator() == self.rank() {
                self.restore_copies().await?;
            }
            self.barrier().await?;
            self.mark_restored();
            self.set_phase(Phase::Normal);
            ep.note("recovery", "done", None);
        } else {
            self.enter_transaction_mode(&generation).await?;
        }
        Ok(report)
    }

    /// Frees every old window and creates the new ones, handing surviving
    /// blocks to the new windows unchanged.
    async fn rebuild(&self, t: &Transition) -> Result<(), StoreError> {
        let ep = self.ep();
        let me = self.rank();
        let osc = |e| StoreError::from_osc(e, None);
        let old = self.layout();
        let mut old_bufs: BTreeMap<(Key, usize), BufferId> = BTreeMap::new();
        for (key, kl) in &old.keys {
            for (j, win) in kl.windows.iter().enumerate() {
                if let Ok(buf) = ep.local_block(*win) {
                    old_bufs.insert((*key, j), buf);
                }
            }
        }
        for win in old.windows() {
            ep.win_free(win).await.map_err(osc)?;
        }
        self.inner.capacities.borrow_mut().clear();

        let mut layout = t.layout.clone();
        let mut kept = BTreeSet::new();
        for (key, kl) in layout.keys.iter_mut() {
            for j in 0..kl.holders.len() {
                let fresh = if kl.holders[j] == me { self.config().holder_capacity() } else { HEADER_BYTES };
                let spec = match t.role(*key, j, me) {
                    BlockRole::ReuseHolder { old } | BlockRole::KeepSource { old } => match old_bufs.get(&(*key, old)) {
                        Some(buf) => {
                            kept.insert(*buf);
                            BlockSpec::Reuse(*buf)
                        }
                        None => BlockSpec::Fresh(fresh),
                    },
                    BlockRole::FreshHolder | BlockRole::Placeholder => BlockSpec::Fresh(fresh),
                };
                let win = ep.win_create(spec).await.map_err(osc)?;
                self.prepare_window(win, kl.holders[j])?;
                if t.role(*key, j, kl.holders[j]) == BlockRole::FreshHolder {
                    self.inner.capacities.borrow_mut().insert((win, kl.holders[j]), self.config().holder_capacity());
                }
                kl.windows.push(win);
            }
        }
        for buf in old_bufs.values().filter(|b| !kept.contains(*b)) {
            ep.release_buffer(*buf);
        }
        *self.inner.layout.borrow_mut() = layout;
        Ok(())
    }

    /// Copies each key's winning value (its first source) to all holders.
    pub(crate) async fn restore_copies(&self) -> Result<(), StoreError> {
        let layout = self.layout();
        for (key, kl) in &layout.keys {
            let Some(&(src, sj)) = kl.sources.first() else {
                continue;
            };
            let win = kl.windows[sj];
            let value = self
                .guarded(src, || async {
                    let v = self.get_value(win, src).await?;
                    self.ep().flush(win, src).await.map_err(|e| StoreError::from_osc(e, Some(src)))?;
                    Ok(v)
                })
                .await?;
            for (j, holder) in kl.holders.iter().enumerate() {
                if (*holder, j) != (src, sj) {
                    self.write_copy(kl.windows[j], *holder, value.as_deref(), false).await?;
                }
            }
            self.ep().note("restore", "ok", Some(key.to_string()));
        }
        Ok(())
    }

    async fn enter_transaction_mode(&self, generation: &WorldGeneration) -> Result<(), StoreError> {
        self.set_phase(Phase::TransactionMode);
        *self.inner.txn_generation.borrow_mut() = Some(generation.clone());
        {
            let mut coord = self.inner.coord.borrow_mut();
            coord.backups = (1..=self.config().backups as u32).filter_map(|i| generation.rank_at(i)).collect();
            coord.locked.clear();
        }
        if self.coordinator() == self.rank() {
            self.coordinator_enter(generation.id).await?;
        }
        Ok(())
    }

    /// Locks every data block, hands the log on to the backups, restores
    /// the copies and finishes transactions a failed coordinator left
    /// prepared.
    async fn coordinator_enter(&self, generation: u64) -> Result<(), StoreError> {
        self.ep().note("txn_coordinator", "enter", Some(format!("backups {:?}", self.backups())));
        if !self.lifetime_epoch() {
            let layout = self.layout();
            for (key, kl) in &layout.keys {
                for (j, r) in kl.data_blocks() {
                    let win = kl.windows[j];
                    self.guarded(r, || async {
                        self.ep()
                            .lock(win, r, crate::transport::LockMode::Exclusive, crate::transport::Assertion::None)
                            .await
                            .map_err(|e| StoreError::from_osc(e, Some(r)))
                    })
                    .await?;
                    self.inner.coord.borrow_mut().locked.push((*key, j, r));
                }
            }
        }
        let records: Vec<_> = self.log().borrow().ordered().cloned().collect();
        for rec in &records {
            self.log_entry(LogEntry::Txn(rec.clone()), false).await?;
        }
        self.restore_copies().await?;
        self.log_entry(LogEntry::RestoreDone { generation }, true).await?;
        for rec in records.into_iter().filter(|r| r.phase == TxnPhase::Prepared) {
            self.ep().note("txn_failover", "complete", Some(format!("{}/{}", rec.id.submitter, rec.id.seq)));
            self.finish(rec).await?;
        }
        Ok(())
    }

    pub(crate) async fn coordinator_read(&self, key: Key) -> Result<Option<Vec<u8>>, StoreError> {
        let kl = self.key_layout(key)?;
        let (win, master) = (kl.windows[0], kl.holders[0]);
        self.guarded(master, || async {
            let v = self.get_value(win, master).await?;
            self.ep().flush(win, master).await.map_err(|e| StoreError::from_osc(e, Some(master)))?;
            Ok(v)
        })
        .await
    }

    /// Writes every copy of `key`. A key whose owner was lost after the
    /// commit decision has nowhere to go and is skipped.
    pub(crate) async fn coordinator_write(&self, key: Key, value: Option<&[u8]>) -> Result<(), StoreError> {
        if !self.key_available(key) {
            self.ep().note("txn_write", "skipped", Some(key.to_string()));
            return Ok(());
        }
        self.write_all(key, value, false, "txn_write").await
    }

    pub(crate) async fn release_coordinator_locks(&self) -> Result<(), StoreError> {
        let locked = std::mem::take(&mut self.inner.coord.borrow_mut().locked);
        let layout = self.layout();
        for (key, j, r) in locked {
            let Some(win) = layout.keys.get(&key).map(|kl| kl.windows[j]) else {
                continue;
            };
            self.guarded(r, || async {
                self.ep().unlock(win, r).await.map_err(|e| StoreError::from_osc(e, Some(r)))
            })
            .await?;
        }
        Ok(())
    }
}
