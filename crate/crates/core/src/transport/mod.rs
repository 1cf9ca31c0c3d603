//! Deterministic simulation of a one-sided communication layer with
//! ULFM-style failure reporting.
//!
//! Every logical process owns an [`Endpoint`] per task. Operations are `async`
//! and complete in simulated steps driven by [`Sim`]; each call occupies at
//! least one step of its task.

mod cost;
mod sched;
mod trace;
pub(crate) mod world;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

pub use cost::{cost_to_f64, format_cost, Cost, CostModel, Decimal, ParseDecimalError};
pub use sched::{InjectError, RunOutcome, Sim};
pub use trace::{TaskKind, Trace, TraceEvent};
pub use world::{HangCounts, LockState};

use crate::txn::{LogEntry, TxnId, TxnOutcome, TxnRecord};
use world::{Attempt, CollKind, CollResult, Contribution, TaskStatus, World};

/// Bytes reserved at the start of every block for the value-size header.
pub const HEADER_BYTES: usize = 8;

/// A process identity. Ranks are always the *original* rank assigned at
/// start-up; [`WorldGeneration`] translates them to post-shrink numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rank(pub u32);

impl Rank {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WindowId(pub u64);

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Handle to a process-local memory buffer that can back window blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BufferId(pub u64);

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// How one-sided operations behave once their target has died.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fidelity {
    /// Failures are reported as `ProcFailed`, as the fault-tolerance
    /// extension promises.
    #[default]
    #[serde(rename = "spec")]
    Spec,
    /// One-sided calls against a dead target never return; the simulator
    /// surfaces them as `SimulatedHang` after `t_hang` steps.
    #[serde(rename = "real-osc")]
    RealOsc,
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fidelity::Spec => "spec",
            Fidelity::RealOsc => "real-osc",
        })
    }
}

impl std::str::FromStr for Fidelity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spec" => Ok(Fidelity::Spec),
            "real-osc" => Ok(Fidelity::RealOsc),
            other => Err(format!("unknown fidelity {other:?} (expected spec or real-osc)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub fidelity: Fidelity,
    /// Dead-caused wait steps before a blocked call becomes `SimulatedHang`.
    pub t_hang: u64,
    /// Steps without main-task progress before the run is declared deadlocked.
    pub stall_limit: u64,
    /// Under "real-osc", let data operations on a dead rank's block succeed
    /// (some implementations keep the memory reachable).
    pub dead_block_access: bool,
    pub cost: CostModel,
    pub record_trace: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            fidelity: Fidelity::Spec,
            t_hang: 1000,
            stall_limit: 5000,
            dead_block_access: false,
            cost: CostModel::default(),
            record_trace: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockMode {
    Exclusive,
    Shared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assertion {
    #[default]
    None,
    /// The caller guarantees exclusion; no conflict checking happens.
    NoCheck,
}

/// Local contribution of one rank to `win_create`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// Allocate a zeroed buffer of this many bytes.
    Fresh(usize),
    /// Expose an existing local buffer unchanged.
    Reuse(BufferId),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum OscError {
    #[error("process {0} failed")]
    ProcFailed(Rank),
    #[error("window revoked")]
    Revoked,
    #[error("call did not return within {0} steps")]
    SimulatedHang(u64),
    #[error("access [{offset}, {offset}+{len}) exceeds block capacity {capacity}")]
    OutOfRange { offset: usize, len: usize, capacity: usize },
    #[error("no access epoch open for this target")]
    NoEpoch,
    #[error("an access epoch is already open for this target")]
    DoubleEpoch,
    #[error("unknown window {0}")]
    UnknownWindow(WindowId),
    #[error("unknown buffer {0}")]
    UnknownBuffer(BufferId),
    #[error("block of {0} bytes is smaller than the size header")]
    BlockTooSmall(usize),
    #[error("offset {0} is not 8-byte aligned")]
    Misaligned(usize),
    #[error("{0} is not supported")]
    Unsupported(&'static str),
    #[error("collective mismatch: peers are in {expected}, caller entered {found}")]
    CollectiveMismatch { expected: &'static str, found: &'static str },
    #[error("rank {0} has no block in this window")]
    NotMember(Rank),
    #[error("the helper task may not issue one-sided operations")]
    HelperForbidden,
}

pub type TransportResult<T> = Result<T, OscError>;

/// Control-channel payloads. Delivery is FIFO per sender.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CtlMessage {
    Ping,
    EnlargeRequest { win: WindowId, capacity: usize },
    EnlargeAck { win: WindowId, capacity: usize },
    TxnSubmit(TxnRecord),
    /// Coordinator log shipping; `ticket` is echoed by the ack.
    TxnLogUpdate { ticket: u64, entry: LogEntry },
    TxnLogAck { ticket: u64 },
    TxnOutcome { id: TxnId, outcome: TxnOutcome },
    ExitReady,
    Shutdown,
}

impl CtlMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            CtlMessage::Ping => "Ping",
            CtlMessage::EnlargeRequest { .. } => "EnlargeRequest",
            CtlMessage::EnlargeAck { .. } => "EnlargeAck",
            CtlMessage::TxnSubmit(_) => "TxnSubmit",
            CtlMessage::TxnLogUpdate { .. } => "TxnLogUpdate",
            CtlMessage::TxnLogAck { .. } => "TxnLogAck",
            CtlMessage::TxnOutcome { .. } => "TxnOutcome",
            CtlMessage::ExitReady => "ExitReady",
            CtlMessage::Shutdown => "Shutdown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub from: Rank,
    pub msg: CtlMessage,
}

/// Membership of one communicator generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldGeneration {
    pub id: u64,
    /// Original ranks, ascending. Position is the rank within this generation.
    pub live_ranks: Vec<Rank>,
}

impl WorldGeneration {
    pub fn new(id: u64, mut live_ranks: Vec<Rank>) -> Self {
        live_ranks.sort();
        live_ranks.dedup();
        Self { id, live_ranks }
    }

    pub fn size(&self) -> usize {
        self.live_ranks.len()
    }

    /// Original rank → rank within this generation.
    pub fn translate(&self, original: Rank) -> Option<u32> {
        self.live_ranks.binary_search(&original).ok().map(|i| i as u32)
    }

    /// Rank within this generation → original rank.
    pub fn rank_at(&self, new_rank: u32) -> Option<Rank> {
        self.live_ranks.get(new_rank as usize).copied()
    }

    pub fn contains(&self, original: Rank) -> bool {
        self.translate(original).is_some()
    }

    pub fn bitmap(&self, world_size: usize) -> FixedBitSet {
        let mut bits = FixedBitSet::with_capacity(world_size);
        for r in &self.live_ranks {
            bits.insert(r.index());
        }
        bits
    }
}

/// Yields to the scheduler exactly once.
struct Tick(bool);

impl Future for Tick {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.0 {
            Poll::Ready(())
        } else {
            self.0 = true;
            Poll::Pending
        }
    }
}

/// Gives up the rest of the current step.
pub async fn yield_now() {
    Tick(false).await
}

/// A task's handle on the transport.
#[derive(Clone)]
pub struct Endpoint {
    world: Rc<RefCell<World>>,
    rank: Rank,
    task: TaskKind,
    /// `(target, step)` of the ping that licensed the current one-sided call.
    guard: Rc<Cell<Option<(Rank, u64)>>>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("rank", &self.rank).field("task", &self.task).finish()
    }
}

/// Which cost a completed operation is charged.
#[derive(Clone, Copy)]
enum Charge {
    Free,
    Transfer(usize),
    Flush,
    Ping,
    Ctl,
}

impl Endpoint {
    pub(crate) fn new(world: Rc<RefCell<World>>, rank: Rank, task: TaskKind) -> Self {
        Self { world, rank, task, guard: Rc::new(Cell::new(None)) }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn step(&self) -> u64 {
        self.world.borrow().step
    }

    pub fn world_size(&self) -> usize {
        self.world.borrow().procs.len()
    }

    pub fn fidelity(&self) -> Fidelity {
        self.world.borrow().cfg.fidelity
    }

    /// The communicator generation this process currently belongs to.
    pub fn generation(&self) -> WorldGeneration {
        let w = self.world.borrow();
        w.generations[w.procs[self.rank.index()].generation as usize].clone()
    }

    /// Simulated cost this process (both tasks) has accumulated so far.
    pub fn cost(&self) -> Cost {
        self.world.borrow().procs[self.rank.index()].cost
    }

    pub(crate) fn set_guard(&self, guard: Option<(Rank, u64)>) {
        self.guard.set(guard);
    }

    /// Appends a free-form record to the trace.
    pub fn note(&self, op: &str, outcome: &str, detail: Option<String>) {
        self.world.borrow_mut().emit(self.rank, self.task, op, None, None, outcome.to_string(), detail);
    }

    fn forbid_helper(&self) -> TransportResult<()> {
        if self.task == TaskKind::Helper {
            Err(OscError::HelperForbidden)
        } else {
            Ok(())
        }
    }

    fn charge(&self, w: &mut World, c: Charge) {
        let m = &w.cfg.cost;
        let amount = match c {
            Charge::Free => return,
            Charge::Transfer(bytes) => m.transfer(bytes),
            Charge::Flush => m.gamma,
            Charge::Ping => m.delta,
            Charge::Ctl => m.alpha,
        };
        w.procs[self.rank.index()].cost += amount;
    }

    /// Retries `attempt` once per step until it completes, turning waits on
    /// a dead rank into `SimulatedHang` after `t_hang` steps.
    async fn drive<T>(
        &self,
        op: &'static str,
        target: Option<Rank>,
        win: Option<WindowId>,
        detail: Option<&'static str>,
        charge: Charge,
        progress: bool,
        mut attempt: impl FnMut(&mut World) -> Attempt<T>,
    ) -> TransportResult<T> {
        let mut dead_wait = 0u64;
        loop {
            let outcome = {
                let mut w = self.world.borrow_mut();
                match attempt(&mut w) {
                    Attempt::Done(r) => {
                        if r.is_ok() {
                            self.charge(&mut w, charge);
                        }
                        if progress && self.task == TaskKind::Main {
                            w.last_progress = w.step;
                        }
                        w.procs[self.rank.index()].status = TaskStatus::Running;
                        let text = match &r {
                            Ok(_) => "ok".to_string(),
                            Err(e) => e.to_string(),
                        };
                        w.emit(self.rank, self.task, op, target, win, text, detail.map(str::to_string));
                        Some(r)
                    }
                    Attempt::Blocked { on_dead } => {
                        w.procs[self.rank.index()].status = TaskStatus::Blocked(op);
                        match on_dead {
                            Some(dead) => {
                                dead_wait += 1;
                                if dead_wait >= w.cfg.t_hang {
                                    let t_hang = w.cfg.t_hang;
                                    let expected = match self.guard.get() {
                                        Some((g, ping_step)) => {
                                            g == dead && w.died_at(dead).is_some_and(|d| d > ping_step)
                                        }
                                        None => false,
                                    };
                                    if expected {
                                        w.hangs.expected += 1;
                                    } else {
                                        w.hangs.unexpected += 1;
                                    }
                                    w.procs[self.rank.index()].status = TaskStatus::Running;
                                    let detail = format!(
                                        "waiting on dead rank {dead}; {}",
                                        if expected { "expected" } else { "unexpected" }
                                    );
                                    w.emit(self.rank, self.task, op, target, win, "hang".into(), Some(detail));
                                    Some(Err(OscError::SimulatedHang(t_hang)))
                                } else {
                                    None
                                }
                            }
                            None => None,
                        }
                    }
                }
            };
            yield_now().await;
            if let Some(r) = outcome {
                return r;
            }
        }
    }

    // ------------------------------------------------------------------
    // one-sided operations
    // ------------------------------------------------------------------

    pub async fn put(&self, win: WindowId, target: Rank, offset: usize, data: &[u8]) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("put", Some(target), Some(win), None, Charge::Transfer(data.len()), true, |w| {
            w.put(me, win, target, offset, data)
        })
        .await
    }

    pub async fn get(&self, win: WindowId, target: Rank, offset: usize, len: usize) -> TransportResult<Vec<u8>> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("get", Some(target), Some(win), None, Charge::Transfer(len), true, |w| {
            w.get(me, win, target, offset, len)
        })
        .await
    }

    pub async fn flush(&self, win: WindowId, target: Rank) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("flush", Some(target), Some(win), None, Charge::Flush, true, |w| w.flush(me, win, target))
            .await
    }

    /// Atomically replaces the 8-byte little-endian cell at `offset` with
    /// `desired` if it equals `expected`; returns the prior value.
    pub async fn compare_and_swap(
        &self,
        win: WindowId,
        target: Rank,
        offset: usize,
        expected: i64,
        desired: i64,
    ) -> TransportResult<i64> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("cas", Some(target), Some(win), None, Charge::Transfer(8), true, |w| {
            w.compare_and_swap(me, win, target, offset, expected, desired)
        })
        .await
    }

    pub async fn lock(&self, win: WindowId, target: Rank, mode: LockMode, assertion: Assertion) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("lock", Some(target), Some(win), None, Charge::Free, true, |w| {
            w.lock(me, win, target, mode, assertion)
        })
        .await
    }

    pub async fn unlock(&self, win: WindowId, target: Rank) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("unlock", Some(target), Some(win), None, Charge::Free, true, |w| w.unlock(me, win, target))
            .await
    }

    pub async fn lock_all(&self, win: WindowId, assertion: Assertion) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("lock_all", None, Some(win), None, Charge::Free, true, |w| w.lock_all(me, win, assertion))
            .await
    }

    pub async fn unlock_all(&self, win: WindowId) -> TransportResult<()> {
        self.forbid_helper()?;
        let me = self.rank;
        self.drive("unlock_all", None, Some(win), None, Charge::Free, true, |w| w.unlock_all(me, win)).await
    }

    /// Poisons the window for every rank. Idempotent.
    pub async fn revoke(&self, win: WindowId) -> TransportResult<()> {
        self.forbid_helper()?;
        self.drive("revoke", None, Some(win), None, Charge::Free, true, |w| w.revoke(win)).await
    }

    /// Active-target synchronization is not modeled.
    pub async fn fence(&self, win: WindowId) -> TransportResult<()> {
        self.drive("fence", None, Some(win), None, Charge::Free, false, |_| {
            Attempt::Done(Err(OscError::Unsupported("fence")))
        })
        .await
    }

    // ------------------------------------------------------------------
    // collectives
    // ------------------------------------------------------------------

    async fn collective(&self, kind: CollKind, contribution: Contribution) -> TransportResult<CollResult> {
        self.forbid_helper()?;
        let me = self.rank;
        let arrival = self.world.borrow_mut().arrive(me, kind, contribution);
        let key = match arrival {
            Ok(key) => key,
            Err(e) => {
                return self
                    .drive(kind.name(), None, None, None, Charge::Free, true, |_| Attempt::Done(Err(e.clone())))
                    .await
            }
        };
        self.drive(kind.name(), None, None, None, Charge::Free, true, |w| w.try_complete(key)).await
    }

    /// Collectively creates a window with one block per live rank.
    pub async fn win_create(&self, block: BlockSpec) -> TransportResult<WindowId> {
        self.forbid_helper()?;
        let buf = self.world.borrow_mut().block_spec_buffer(self.rank, block);
        let buf = match buf {
            Ok(b) => b,
            Err(e) => {
                return self
                    .drive("win_create", None, None, None, Charge::Free, true, |_| Attempt::Done(Err(e.clone())))
                    .await
            }
        };
        match self.collective(CollKind::WinCreate, Contribution::WinCreate(buf)).await? {
            CollResult::Window(id) => Ok(id),
            other => unreachable!("win_create produced {other:?}"),
        }
    }

    /// Collectively destroys a window. Backing buffers stay allocated.
    pub async fn win_free(&self, win: WindowId) -> TransportResult<()> {
        self.collective(CollKind::WinFree, Contribution::WinFree(win)).await.map(|_| ())
    }

    /// Builds the next generation from the ranks alive when the call completes.
    pub async fn comm_shrink(&self) -> TransportResult<WorldGeneration> {
        match self.collective(CollKind::Shrink, Contribution::Shrink).await? {
            CollResult::Generation(id) => {
                let mut w = self.world.borrow_mut();
                let p = &mut w.procs[self.rank.index()];
                p.generation = id;
                p.coll_seq = 0;
                Ok(w.generations[id as usize].clone())
            }
            other => unreachable!("comm_shrink produced {other:?}"),
        }
    }

    /// Fault-tolerant agreement: every caller receives the AND of all
    /// contributions of live participants.
    pub async fn comm_agree(&self, flags: FixedBitSet) -> TransportResult<FixedBitSet> {
        match self.collective(CollKind::Agree, Contribution::Agree(flags)).await? {
            CollResult::Flags(bits) => Ok(bits),
            other => unreachable!("comm_agree produced {other:?}"),
        }
    }

    /// Plain barrier. Not fault tolerant: fails with `ProcFailed` if any
    /// member of the generation is dead.
    pub async fn barrier(&self) -> TransportResult<()> {
        self.collective(CollKind::Barrier, Contribution::Barrier).await.map(|_| ())
    }

    // ------------------------------------------------------------------
    // control channel
    // ------------------------------------------------------------------

    /// Two-sided send; the only call that reports a dead peer reliably in
    /// every fidelity mode.
    pub async fn ctl_send(&self, target: Rank, msg: CtlMessage) -> TransportResult<()> {
        let me = self.rank;
        let (op, charge) = match msg {
            CtlMessage::Ping => ("ping", Charge::Ping),
            _ => ("ctl_send", Charge::Ctl),
        };
        let detail = (op == "ctl_send").then(|| msg.kind());
        let mut msg = Some(msg);
        self.drive(op, Some(target), None, detail, charge, false, |w| {
            w.ctl_send(me, target, msg.take().expect("sent once"))
        })
        .await
    }

    /// Sends without giving up the step. Used by the helper task, which
    /// answers requests in the same step it drains them.
    pub fn ctl_send_now(&self, target: Rank, msg: CtlMessage) -> TransportResult<()> {
        let mut w = self.world.borrow_mut();
        let kind = msg.kind();
        let r = match w.ctl_send(self.rank, target, msg) {
            Attempt::Done(r) => r,
            Attempt::Blocked { .. } => unreachable!("sends never block"),
        };
        if r.is_ok() {
            self.charge(&mut w, Charge::Ctl);
        }
        let text = match &r {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        w.emit(self.rank, self.task, "ctl_send", Some(target), None, text, Some(kind.to_string()));
        r
    }

    /// Nonblocking receive from this process's mailbox (any source).
    pub fn ctl_poll(&self) -> Option<Envelope> {
        self.world.borrow_mut().procs[self.rank.index()].mailbox.pop_front()
    }

    /// Hands a message to the main task of this process.
    pub(crate) fn inbox_push(&self, env: Envelope) {
        self.world.borrow_mut().procs[self.rank.index()].inbox.push_back(env);
    }

    /// Takes the first message in the main task's inbox matching `pred`.
    pub(crate) fn inbox_take(&self, mut pred: impl FnMut(&Envelope) -> bool) -> Option<Envelope> {
        let mut w = self.world.borrow_mut();
        let inbox = &mut w.procs[self.rank.index()].inbox;
        let pos = inbox.iter().position(&mut pred)?;
        inbox.remove(pos)
    }

    /// Waits `steps` steps without issuing anything.
    pub async fn sleep(&self, steps: u64) {
        self.world.borrow_mut().procs[self.rank.index()].status = TaskStatus::Sleeping;
        for _ in 0..steps.max(1) {
            yield_now().await;
        }
        self.world.borrow_mut().procs[self.rank.index()].status = TaskStatus::Running;
    }

    /// Marks that the main task is idle-waiting (for stall reporting).
    pub(crate) fn set_waiting(&self, what: &'static str) {
        self.world.borrow_mut().procs[self.rank.index()].status = TaskStatus::Blocked(what);
    }

    pub(crate) fn mark_progress(&self) {
        let mut w = self.world.borrow_mut();
        w.last_progress = w.step;
    }

    // ------------------------------------------------------------------
    // local memory
    // ------------------------------------------------------------------

    pub fn alloc_buffer(&self, capacity: usize) -> BufferId {
        self.world.borrow_mut().alloc(self.rank, capacity)
    }

    pub fn release_buffer(&self, buf: BufferId) {
        self.world.borrow_mut().procs[self.rank.index()].memory.remove(&buf);
    }

    pub fn buffer_len(&self, buf: BufferId) -> Option<usize> {
        self.world.borrow().buffer(self.rank, buf).map(Vec::len)
    }

    /// Grows a local buffer to at least `capacity` bytes, zero-filling.
    pub fn grow_buffer(&self, buf: BufferId, capacity: usize) -> TransportResult<usize> {
        let mut w = self.world.borrow_mut();
        let mem = w.buffer_mut(self.rank, buf).ok_or(OscError::UnknownBuffer(buf))?;
        if mem.len() < capacity {
            mem.resize(capacity, 0);
        }
        Ok(mem.len())
    }

    pub fn read_buffer(&self, buf: BufferId) -> Option<Vec<u8>> {
        self.world.borrow().buffer(self.rank, buf).cloned()
    }

    pub fn write_buffer(&self, buf: BufferId, offset: usize, data: &[u8]) -> TransportResult<()> {
        let mut w = self.world.borrow_mut();
        let mem = w.buffer_mut(self.rank, buf).ok_or(OscError::UnknownBuffer(buf))?;
        let capacity = mem.len();
        let end = offset.checked_add(data.len()).filter(|e| *e <= capacity);
        let Some(end) = end else {
            return Err(OscError::OutOfRange { offset, len: data.len(), capacity });
        };
        mem[offset..end].copy_from_slice(data);
        Ok(())
    }

    /// Whether `win` has been revoked. Blocking waits on the control channel
    /// poll this, the way a revoke interrupts pending receives.
    pub fn is_revoked(&self, win: WindowId) -> bool {
        self.world.borrow().windows.get(&win).is_some_and(|w| w.revoked)
    }

    /// The buffer backing this rank's own block of `win`. Local access stays
    /// legal after revocation.
    pub fn local_block(&self, win: WindowId) -> TransportResult<BufferId> {
        self.world.borrow().block_buffer(win, self.rank)
    }
}

#[cfg(test)]
mod tests;
