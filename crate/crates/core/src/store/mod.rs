//! The store API: collective initialization, replicated put/get/delete in
//! normal mode, and on-demand enlargement of remote blocks.
//!
//! Every key has one window per copy. The copy holder exposes a data block
//! (size header followed by the payload); every other rank exposes an
//! 8-byte placeholder. In CAS mode bytes 8..16 of each holder block carry the
//! entry lock cell and the payload starts at 16.

mod layout;

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::future::Future;
use std::rc::Rc;

use fixedbitset::FixedBitSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use layout::{BlockRole, KeyLayout, Layout, Origin, Transition};

use crate::detector::{self, run_helper, Liveness};
use crate::placement::{Key, PlacementConfig, PlacementError};
use crate::recovery::RecoveryReport;
use crate::transport::{
    Assertion, BlockSpec, CtlMessage, Endpoint, Fidelity, LockMode, OscError, Rank, Sim, TaskKind,
    WindowId, WorldGeneration, HEADER_BYTES,
};
use crate::txn::{probe_due, CoordState, SharedLog, TxnId, TxnLog};

/// Offset of the CAS lock cell inside a holder block.
pub const LOCK_CELL: usize = 8;
/// Lock cell value meaning "free".
pub const UNLOCKED: i64 = -1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochDiscipline {
    /// Exclusive lock/unlock around each copy's put and flush.
    #[default]
    LockPerCopy,
    /// One `lock_all(nocheck)` per window, held for the store's lifetime.
    LockAllNocheck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    #[serde(flatten)]
    pub placement: PlacementConfig,
    /// Bytes per holder block, size header included.
    pub initial_capacity: usize,
    pub fidelity: Fidelity,
    pub ping_enabled: bool,
    pub cas_mode: bool,
    pub epoch: EpochDiscipline,
    /// Backup coordinators in transaction mode.
    pub backups: usize,
    /// Lock rounds against a live holder before `Busy`.
    pub cas_retry_limit: u32,
    /// Off only for the negative control of the 2PC checker.
    pub log_to_backups: bool,
    /// Steps between liveness probes while waiting on a peer.
    pub probe_interval: u64,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            placement: PlacementConfig { world_size: 4, replica_count: 1, slots_per_owner: 1 },
            initial_capacity: 64,
            fidelity: Fidelity::Spec,
            ping_enabled: true,
            cas_mode: false,
            epoch: EpochDiscipline::LockPerCopy,
            backups: 2,
            cas_retry_limit: 64,
            log_to_backups: true,
            probe_interval: 16,
            seed: 0,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        self.placement.validate()?;
        if self.initial_capacity < HEADER_BYTES {
            return Err(StoreError::InvalidConfig(format!(
                "initial_capacity {} is below the {HEADER_BYTES}-byte header",
                self.initial_capacity
            )));
        }
        Ok(())
    }

    /// Where the payload starts inside a holder block.
    pub fn value_offset(&self) -> usize {
        if self.cas_mode {
            HEADER_BYTES + 8
        } else {
            HEADER_BYTES
        }
    }

    /// Capacity of a freshly allocated holder block.
    pub fn holder_capacity(&self) -> usize {
        self.initial_capacity + self.value_offset() - HEADER_BYTES
    }

    fn fingerprint(&self) -> u32 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u32::from_le_bytes(digest[..4].try_into().expect("4 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("failure of rank {0} detected")]
    FailureDetected(Rank),
    #[error("store windows were revoked")]
    Revoked,
    #[error("call on rank {target:?} hung for {steps} steps")]
    Hang { target: Option<Rank>, steps: u64 },
    #[error("operation not allowed in the current phase")]
    ModeViolation,
    #[error("not in transaction mode")]
    NotInTransactionMode,
    #[error("block enlargement needs the control channel helper (ping disabled)")]
    UnsupportedWithoutHelper,
    #[error("invalid store configuration: {0}")]
    InvalidConfig(String),
    #[error("ranks passed different store configurations")]
    ConfigMismatch,
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("entry {0} stayed locked by a live holder")]
    Busy(Key),
    #[error("entry {0} is not locked by this rank")]
    NotHolder(Key),
    #[error("coordinator and all backups were lost")]
    CoordinatorExhausted,
    #[error("key {0} has no copies in the current world")]
    UnknownKey(Key),
    #[error(transparent)]
    Transport(OscError),
}

impl StoreError {
    /// Errors after which the caller has to run recovery.
    pub fn needs_recovery(&self) -> bool {
        matches!(self, StoreError::FailureDetected(_) | StoreError::Revoked | StoreError::Hang { .. })
    }

    pub fn from_osc(e: OscError, target: Option<Rank>) -> Self {
        match e {
            OscError::ProcFailed(r) => StoreError::FailureDetected(r),
            OscError::Revoked => StoreError::Revoked,
            OscError::SimulatedHang(steps) => StoreError::Hang { target, steps },
            other => StoreError::Transport(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Normal,
    Revoking,
    Shrinking,
    Rebuilding,
    TransactionMode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Normal => "normal",
            Phase::Revoking => "revoking",
            Phase::Shrinking => "shrinking",
            Phase::Rebuilding => "rebuilding",
            Phase::TransactionMode => "transaction_mode",
        };
        f.write_str(s)
    }
}

pub(crate) struct Inner {
    pub ep: Endpoint,
    pub cfg: StoreConfig,
    pub log: SharedLog,
    pub phase: Cell<Phase>,
    pub layout: RefCell<Layout>,
    /// Known capacities of remote holder blocks.
    pub capacities: RefCell<BTreeMap<(WindowId, Rank), usize>>,
    pub txn_seq: Cell<u64>,
    pub coord: RefCell<CoordState>,
    /// Generation whose coordinator and backups hold the live transaction log.
    pub txn_generation: RefCell<Option<WorldGeneration>>,
    pub reports: RefCell<Vec<RecoveryReport>>,
    pub rng: RefCell<ChaCha8Rng>,
}

/// One process's handle on the store. Cheap to clone.
#[derive(Clone)]
pub struct Store {
    pub(crate) inner: Rc<Inner>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store").field("rank", &self.rank()).field("phase", &self.phase()).finish()
    }
}

impl Store {
    /// Collective creation of every key's windows. All live ranks must call
    /// it with the same configuration.
    pub async fn init(ep: Endpoint, cfg: StoreConfig, log: SharedLog) -> Result<Store, StoreError> {
        let fp = cfg.fingerprint();
        let mut bits = FixedBitSet::with_capacity(64);
        for i in 0..32 {
            bits.set(if fp >> i & 1 == 1 { i } else { 32 + i }, true);
        }
        let agreed = ep.comm_agree(bits).await.map_err(|e| StoreError::from_osc(e, None))?;
        if agreed.count_ones(..) != 32 {
            ep.note("store_init", "config_mismatch", None);
            return Err(StoreError::ConfigMismatch);
        }
        cfg.validate()?;

        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(ep.rank().0) << 32));
        let store = Store {
            inner: Rc::new(Inner {
                layout: RefCell::new(Layout::initial(&cfg.placement)),
                ep,
                cfg,
                log,
                phase: Cell::new(Phase::Normal),
                capacities: RefCell::new(BTreeMap::new()),
                txn_seq: Cell::new(0),
                coord: RefCell::new(CoordState::default()),
                txn_generation: RefCell::new(None),
                reports: RefCell::new(Vec::new()),
                rng: RefCell::new(rng),
            }),
        };
        let me = store.rank();
        let keys: Vec<(Key, Vec<Rank>)> =
            store.inner.layout.borrow().keys.iter().map(|(k, kl)| (*k, kl.holders.clone())).collect();
        for (key, holders) in keys {
            let mut windows = Vec::with_capacity(holders.len());
            for holder in &holders {
                let size = if *holder == me { store.config().holder_capacity() } else { HEADER_BYTES };
                let win = store.ep().win_create(BlockSpec::Fresh(size)).await.map_err(|e| StoreError::from_osc(e, None))?;
                store.prepare_window(win, *holder)?;
                store.inner.capacities.borrow_mut().insert((win, *holder), store.config().holder_capacity());
                windows.push(win);
            }
            store.inner.layout.borrow_mut().keys.get_mut(&key).expect("layout key").windows = windows;
        }
        store.open_lifetime_epochs().await?;
        if store.config().cas_mode {
            store.barrier().await?;
        }
        store.ep().note("store_init", "ok", Some(format!("{} windows", store.inner.layout.borrow().windows().len())));
        Ok(store)
    }

    /// Local setup of a freshly created window: seeds the capacity cache
    /// and, in CAS mode, frees the lock cell of this rank's holder block.
    pub(crate) fn prepare_window(&self, win: WindowId, holder: Rank) -> Result<(), StoreError> {
        if holder != self.rank() {
            return Ok(());
        }
        let buf = self.ep().local_block(win).map_err(StoreError::Transport)?;
        if self.config().cas_mode {
            self.ep().write_buffer(buf, LOCK_CELL, &UNLOCKED.to_le_bytes()).map_err(StoreError::Transport)?;
        }
        Ok(())
    }

    /// In CAS mode, or under the lock-all discipline, one epoch per window
    /// for the window's whole lifetime.
    pub(crate) async fn open_lifetime_epochs(&self) -> Result<(), StoreError> {
        if !self.lifetime_epoch() {
            return Ok(());
        }
        for win in self.inner.layout.borrow().windows() {
            self.ep().lock_all(win, Assertion::NoCheck).await.map_err(|e| StoreError::from_osc(e, None))?;
        }
        Ok(())
    }

    pub(crate) fn lifetime_epoch(&self) -> bool {
        self.config().cas_mode || self.config().epoch == EpochDiscipline::LockAllNocheck
    }

    // ------------------------------------------------------------------
    // accessors
    // ------------------------------------------------------------------

    pub fn ep(&self) -> &Endpoint {
        &self.inner.ep
    }

    pub fn config(&self) -> &StoreConfig {
        &self.inner.cfg
    }

    pub fn rank(&self) -> Rank {
        self.inner.ep.rank()
    }

    pub fn phase(&self) -> Phase {
        self.inner.phase.get()
    }

    pub(crate) fn set_phase(&self, phase: Phase) {
        if self.inner.phase.replace(phase) != phase {
            self.ep().note("phase", &phase.to_string(), None);
        }
    }

    pub fn log(&self) -> &SharedLog {
        &self.inner.log
    }

    /// A snapshot of the current key layout.
    pub fn layout(&self) -> Layout {
        self.inner.layout.borrow().clone()
    }

    pub fn layout_generation(&self) -> WorldGeneration {
        self.inner.layout.borrow().generation.clone()
    }

    pub(crate) fn mark_restored(&self) {
        self.inner.layout.borrow_mut().mark_restored();
    }

    /// Recovery rounds this process took part in.
    pub fn recovery_reports(&self) -> Vec<RecoveryReport> {
        self.inner.reports.borrow().clone()
    }

    /// Transaction-mode coordinator: rank 0 of the current generation.
    pub fn coordinator(&self) -> Rank {
        self.inner.layout.borrow().generation.rank_at(0).expect("non-empty generation")
    }

    /// Backup coordinators of the current transaction-mode round.
    pub fn backups(&self) -> Vec<Rank> {
        self.inner.coord.borrow().backups.clone()
    }

    pub(crate) fn drop_backup(&self, rank: Rank) {
        self.inner.coord.borrow_mut().backups.retain(|b| *b != rank);
        self.ep().note("txn_backup", "dropped", Some(rank.to_string()));
    }

    pub(crate) fn next_txn_id(&self) -> TxnId {
        let seq = self.inner.txn_seq.get();
        self.inner.txn_seq.set(seq + 1);
        TxnId { submitter: self.rank(), seq }
    }

    pub(crate) fn next_ticket(&self) -> u64 {
        let mut c = self.inner.coord.borrow_mut();
        c.ticket += 1;
        c.ticket
    }

    pub(crate) fn key_layout(&self, key: Key) -> Result<KeyLayout, StoreError> {
        self.inner.layout.borrow().keys.get(&key).cloned().ok_or(StoreError::UnknownKey(key))
    }

    pub(crate) fn key_available(&self, key: Key) -> bool {
        self.inner.layout.borrow().keys.contains_key(&key)
    }

    // ------------------------------------------------------------------
    // control channel helpers
    // ------------------------------------------------------------------

    pub(crate) async fn ping(&self, target: Rank) -> Result<(), StoreError> {
        match detector::ping(self.ep(), target).await {
            Liveness::Alive => Ok(()),
            Liveness::Failed => {
                self.ep().note("failure_detected", "ping", Some(target.to_string()));
                Err(StoreError::FailureDetected(target))
            }
        }
    }

    /// Fails with `Revoked` once any current window was revoked. Blocking
    /// waits call this so a revoke interrupts them.
    pub(crate) fn check_not_revoked(&self) -> Result<(), StoreError> {
        let layout = self.inner.layout.borrow();
        let revoked = layout.keys.values().flat_map(|kl| kl.windows.iter()).any(|w| self.ep().is_revoked(*w));
        if revoked {
            Err(StoreError::Revoked)
        } else {
            Ok(())
        }
    }

    /// Barrier over the live ranks; a dead peer makes it fail.
    pub async fn barrier(&self) -> Result<(), StoreError> {
        self.ep().barrier().await.map_err(|e| StoreError::from_osc(e, None))
    }

    // ------------------------------------------------------------------
    // normal mode
    // ------------------------------------------------------------------

    /// Writes `value` to every copy of `key`, master first. Returns once all
    /// copies were flushed.
    pub async fn put(&self, key: Key, value: &[u8]) -> Result<(), StoreError> {
        if self.config().cas_mode {
            return self.cas_store_put(key, value).await;
        }
        self.require_normal()?;
        self.write_all(key, Some(value), !self.lifetime_epoch(), "store_put").await
    }

    /// Empties `key` (size header 0 at every copy).
    pub async fn delete(&self, key: Key) -> Result<(), StoreError> {
        if self.config().cas_mode {
            return self.cas_store_delete(key).await;
        }
        self.require_normal()?;
        self.write_all(key, None, !self.lifetime_epoch(), "store_delete").await
    }

    /// Reads `key` from its master copy, falling back to replicas in copy
    /// order. `None` means empty.
    pub async fn get(&self, key: Key) -> Result<Option<Vec<u8>>, StoreError> {
        if self.config().cas_mode {
            return self.cas_store_get(key).await;
        }
        self.require_normal()?;
        self.read_any(key, !self.lifetime_epoch()).await
    }

    fn require_normal(&self) -> Result<(), StoreError> {
        match self.phase() {
            Phase::Normal => Ok(()),
            _ => Err(StoreError::ModeViolation),
        }
    }

    pub(crate) async fn write_all(
        &self,
        key: Key,
        value: Option<&[u8]>,
        lock: bool,
        op: &str,
    ) -> Result<(), StoreError> {
        let kl = self.key_layout(key)?;
        for (j, holder) in kl.holders.iter().enumerate() {
            if let Err(e) = self.write_copy(kl.windows[j], *holder, value, lock).await {
                self.ep().note(op, "failed", Some(format!("{key} copy {j}: {e}")));
                return Err(e);
            }
        }
        self.ep().note(op, "ok", Some(key.to_string()));
        Ok(())
    }

    pub(crate) async fn read_any(&self, key: Key, lock: bool) -> Result<Option<Vec<u8>>, StoreError> {
        let kl = self.key_layout(key)?;
        let mut last = StoreError::UnknownKey(key);
        for (j, holder) in kl.holders.iter().enumerate() {
            match self.read_copy(kl.windows[j], *holder, lock).await {
                Ok(v) => return Ok(v),
                Err(StoreError::FailureDetected(r)) => last = StoreError::FailureDetected(r),
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    /// Runs `body` with the ping guard when pinging is enabled.
    pub(crate) async fn guarded<T, F, Fut>(&self, target: Rank, body: F) -> Result<T, StoreError>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<T, StoreError>>,
    {
        if !self.config().ping_enabled {
            return body().await;
        }
        match detector::guarded_osc(self.ep(), target, body).await {
            detector::Guarded::FailureDetected(r) => {
                self.ep().note("failure_detected", "ping", Some(r.to_string()));
                Err(StoreError::FailureDetected(r))
            }
            detector::Guarded::Issued(r) => r,
        }
    }

    /// One copy: (ping) → (lock) → put → flush → (unlock).
    pub(crate) async fn write_copy(
        &self,
        win: WindowId,
        target: Rank,
        value: Option<&[u8]>,
        lock: bool,
    ) -> Result<(), StoreError> {
        self.guarded(target, || async {
            let ep = self.ep();
            let osc = |e| StoreError::from_osc(e, Some(target));
            if lock {
                ep.lock(win, target, LockMode::Exclusive, Assertion::None).await.map_err(osc)?;
            }
            self.put_value(win, target, value).await?;
            ep.flush(win, target).await.map_err(osc)?;
            if lock {
                ep.unlock(win, target).await.map_err(osc)?;
            }
            Ok(())
        })
        .await
    }

    /// Stages header and payload, enlarging the target block when needed.
    async fn put_value(&self, win: WindowId, target: Rank, value: Option<&[u8]>) -> Result<(), StoreError> {
        let payload = value.unwrap_or(&[]);
        let header = (payload.len() as u64).to_le_bytes();
        let offset = self.config().value_offset();
        let needed = offset + payload.len();
        loop {
            let staged = if self.config().cas_mode {
                match self.ep().put(win, target, 0, &header).await {
                    Ok(()) => self.ep().put(win, target, offset, payload).await,
                    Err(e) => Err(e),
                }
            } else {
                let mut bytes = Vec::with_capacity(needed);
                bytes.extend_from_slice(&header);
                bytes.extend_from_slice(payload);
                self.ep().put(win, target, 0, &bytes).await
            };
            match staged {
                Ok(()) => return Ok(()),
                Err(OscError::OutOfRange { capacity, .. }) if capacity < needed => {
                    self.inner.capacities.borrow_mut().insert((win, target), capacity);
                    self.ensure_block_capacity(win, target, needed).await?;
                }
                Err(e) => return Err(StoreError::from_osc(e, Some(target))),
            }
        }
    }

    pub(crate) async fn read_copy(&self, win: WindowId, target: Rank, lock: bool) -> Result<Option<Vec<u8>>, StoreError> {
        self.guarded(target, || async {
            let ep = self.ep();
            let osc = |e| StoreError::from_osc(e, Some(target));
            if lock {
                ep.lock(win, target, LockMode::Shared, Assertion::None).await.map_err(osc)?;
            }
            let value = self.get_value(win, target).await?;
            ep.flush(win, target).await.map_err(osc)?;
            if lock {
                ep.unlock(win, target).await.map_err(osc)?;
            }
            Ok(value)
        })
        .await
    }

    /// Header then payload of one block, inside an open epoch.
    pub(crate) async fn get_value(&self, win: WindowId, target: Rank) -> Result<Option<Vec<u8>>, StoreError> {
        let osc = |e| StoreError::from_osc(e, Some(target));
        let header = self.ep().get(win, target, 0, HEADER_BYTES).await.map_err(osc)?;
        let size = u64::from_le_bytes(header.try_into().expect("8-byte header")) as usize;
        if size == 0 {
            return Ok(None);
        }
        let payload = self.ep().get(win, target, self.config().value_offset(), size).await.map_err(osc)?;
        Ok(Some(payload))
    }

    /// Makes copy `copy` of `key` hold at least `needed` bytes.
    pub async fn ensure_capacity(&self, key: Key, copy: usize, needed: usize) -> Result<(), StoreError> {
        let kl = self.key_layout(key)?;
        let (win, target) = match (kl.windows.get(copy), kl.holders.get(copy)) {
            (Some(w), Some(h)) => (*w, *h),
            _ => return Err(StoreError::UnknownKey(key)),
        };
        self.ensure_block_capacity(win, target, needed).await
    }

    /// Asks the target's helper to grow its block and waits for the ack.
    pub(crate) async fn ensure_block_capacity(&self, win: WindowId, target: Rank, needed: usize) -> Result<(), StoreError> {
        if !self.config().ping_enabled {
            return Err(StoreError::UnsupportedWithoutHelper);
        }
        if self.inner.capacities.borrow().get(&(win, target)).is_some_and(|c| *c >= needed) {
            return Ok(());
        }
        let ep = self.ep();
        ep.ctl_send(target, CtlMessage::EnlargeRequest { win, capacity: needed })
            .await
            .map_err(|e| StoreError::from_osc(e, Some(target)))?;
        let mut waited = 0u64;
        loop {
            let ack = ep.inbox_take(|env| {
                env.from == target && matches!(env.msg, CtlMessage::EnlargeAck { win: w, .. } if w == win)
            });
            if let Some(env) = ack {
                if let CtlMessage::EnlargeAck { capacity, .. } = env.msg {
                    self.inner.capacities.borrow_mut().insert((win, target), capacity);
                    ep.note("enlarge", "ok", Some(format!("{win} at {target}: {capacity}")));
                    return Ok(());
                }
            }
            self.check_not_revoked()?;
            if probe_due(waited, self.config().probe_interval) {
                self.ping(target).await?;
            } else {
                ep.set_waiting("enlarge_ack");
                crate::transport::yield_now().await;
            }
            waited += 1;
        }
    }

    /// Draws a backoff delay in `1..=bound` steps from the store's seeded RNG.
    pub(crate) fn backoff(&self, bound: u64) -> u64 {
        use rand::Rng;
        self.inner.rng.borrow_mut().gen_range(1..=bound.max(1))
    }
}

/// Spawns a process: its helper task and a main task that initializes the
/// store and runs `body`. The helper keeps serving peers after `body`
/// returns unless `body` shuts it down.
pub fn spawn_process<F, Fut>(sim: &mut Sim, rank: Rank, cfg: StoreConfig, body: F)
where
    F: FnOnce(Result<Store, StoreError>) -> Fut + 'static,
    Fut: Future<Output = ()> + 'static,
{
    let log = TxnLog::shared();
    let helper = sim.helper_endpoint(rank);
    sim.spawn(rank, TaskKind::Helper, run_helper(helper, log.clone()));
    let ep = sim.endpoint(rank);
    sim.spawn(rank, TaskKind::Main, async move {
        body(Store::init(ep, cfg, log).await).await;
    });
}
