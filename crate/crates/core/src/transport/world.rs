//! Shared simulator state and the synchronous semantics of every transport
//! operation. Each operation is an *attempt*: it either completes in the
//! current step or reports that the caller is blocked.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use fixedbitset::FixedBitSet;

use super::cost::Cost;
use super::trace::{TaskKind, Trace, TraceEvent};
use super::{
    Assertion, BlockSpec, BufferId, Envelope, Fidelity, LockMode, OscError, Rank,
    TransportConfig, TransportResult, WindowId, WorldGeneration, HEADER_BYTES,
};

pub(crate) enum Attempt<T> {
    Done(TransportResult<T>),
    /// Not complete this step. `on_dead` names the dead rank the caller is
    /// waiting on, if any; only such waits are bounded by `t_hang`.
    Blocked { on_dead: Option<Rank> },
}

use Attempt::{Blocked, Done};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LockState {
    Free,
    Exclusive(Rank),
    Shared(BTreeSet<Rank>),
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub buffer: BufferId,
    pub lock: LockState,
}

#[derive(Clone, Debug)]
pub(crate) struct Window {
    pub blocks: BTreeMap<Rank, Block>,
    pub revoked: bool,
    /// Per-target epochs: (origin, target) -> whether the epoch took the lock.
    pub epochs: BTreeMap<(Rank, Rank), bool>,
    /// Window-wide epochs from `lock_all`: origin -> whether shared locks were taken.
    pub lock_all: BTreeMap<Rank, bool>,
    pub pending: BTreeMap<(Rank, Rank), Vec<(usize, Vec<u8>)>>,
}

impl Window {
    fn has_epoch(&self, origin: Rank, target: Rank) -> bool {
        self.lock_all.contains_key(&origin) || self.epochs.contains_key(&(origin, target))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TaskStatus {
    Running,
    Blocked(&'static str),
    Sleeping,
    Done,
}

#[derive(Debug)]
pub(crate) struct Proc {
    pub alive: bool,
    pub died_at: Option<u64>,
    pub mailbox: VecDeque<Envelope>,
    /// Messages the helper forwarded to the main task.
    pub inbox: VecDeque<Envelope>,
    pub memory: BTreeMap<BufferId, Vec<u8>>,
    pub next_buffer: u64,
    pub generation: u64,
    pub coll_seq: u64,
    pub cost: Cost,
    pub status: TaskStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum CollKind {
    WinCreate,
    WinFree,
    Shrink,
    Agree,
    Barrier,
}

impl CollKind {
    pub fn name(self) -> &'static str {
        match self {
            CollKind::WinCreate => "win_create",
            CollKind::WinFree => "win_free",
            CollKind::Shrink => "comm_shrink",
            CollKind::Agree => "comm_agree",
            CollKind::Barrier => "barrier",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Contribution {
    WinCreate(BufferId),
    WinFree(WindowId),
    Shrink,
    Agree(FixedBitSet),
    Barrier,
}

#[derive(Clone, Debug)]
pub(crate) enum CollResult {
    Window(WindowId),
    Freed,
    Generation(u64),
    Flags(FixedBitSet),
    Barrier,
}

#[derive(Debug)]
struct Rendezvous {
    kind: CollKind,
    arrived: BTreeMap<Rank, Contribution>,
    result: Option<TransportResult<CollResult>>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct HangCounts {
    /// Hangs caused by a target dying after a successful guarding ping.
    pub expected: u64,
    pub unexpected: u64,
}

pub(crate) struct World {
    pub step: u64,
    pub cfg: TransportConfig,
    pub procs: Vec<Proc>,
    pub windows: BTreeMap<WindowId, Window>,
    next_window: u64,
    pub generations: Vec<WorldGeneration>,
    collectives: BTreeMap<(u64, u64), Rendezvous>,
    pub kills: BTreeMap<u64, Vec<Rank>>,
    pub trace: Trace,
    pub last_progress: u64,
    pub hangs: HangCounts,
    pub concurrent_writers: u64,
}

impl World {
    pub fn new(world_size: usize, cfg: TransportConfig) -> Self {
        let procs = (0..world_size)
            .map(|_| Proc {
                alive: true,
                died_at: None,
                mailbox: VecDeque::new(),
                inbox: VecDeque::new(),
                memory: BTreeMap::new(),
                next_buffer: 0,
                generation: 0,
                coll_seq: 0,
                cost: Cost::from_integer(0),
                status: TaskStatus::Running,
            })
            .collect();
        let gen0 = WorldGeneration::new(0, (0..world_size as u32).map(Rank).collect());
        let trace = Trace { events: Vec::new(), enabled: cfg.record_trace };
        Self {
            step: 0,
            cfg,
            procs,
            windows: BTreeMap::new(),
            next_window: 0,
            generations: vec![gen0],
            collectives: BTreeMap::new(),
            kills: BTreeMap::new(),
            trace,
            last_progress: 0,
            hangs: HangCounts::default(),
            concurrent_writers: 0,
        }
    }

    pub fn alive(&self, r: Rank) -> bool {
        self.procs.get(r.index()).is_some_and(|p| p.alive)
    }

    pub fn died_at(&self, r: Rank) -> Option<u64> {
        self.procs.get(r.index()).and_then(|p| p.died_at)
    }

    pub fn emit(
        &mut self,
        rank: Rank,
        task: TaskKind,
        op: &str,
        target: Option<Rank>,
        win: Option<WindowId>,
        outcome: String,
        detail: Option<String>,
    ) {
        if !self.trace.enabled {
            return;
        }
        self.trace.push(TraceEvent {
            step: self.step,
            rank: rank.0,
            task,
            op: op.to_string(),
            target: target.map(|t| t.0),
            win: win.map(|w| w.0),
            outcome,
            detail,
        });
    }

    pub fn kill(&mut self, r: Rank) {
        let step = self.step;
        let p = &mut self.procs[r.index()];
        if !p.alive {
            return;
        }
        p.alive = false;
        p.died_at = Some(step);
        p.mailbox.clear();
        p.inbox.clear();
        p.status = TaskStatus::Done;
        self.emit(r, TaskKind::Sim, "kill", None, None, "dead".into(), None);
    }

    // ------------------------------------------------------------------
    // local memory
    // ------------------------------------------------------------------

    pub fn alloc(&mut self, owner: Rank, capacity: usize) -> BufferId {
        let p = &mut self.procs[owner.index()];
        let id = BufferId(p.next_buffer);
        p.next_buffer += 1;
        p.memory.insert(id, vec![0; capacity]);
        id
    }

    pub fn buffer(&self, owner: Rank, buf: BufferId) -> Option<&Vec<u8>> {
        self.procs.get(owner.index())?.memory.get(&buf)
    }

    pub fn buffer_mut(&mut self, owner: Rank, buf: BufferId) -> Option<&mut Vec<u8>> {
        self.procs.get_mut(owner.index())?.memory.get_mut(&buf)
    }

    pub fn block_buffer(&self, win: WindowId, rank: Rank) -> TransportResult<BufferId> {
        let w = self.windows.get(&win).ok_or(OscError::UnknownWindow(win))?;
        w.blocks.get(&rank).map(|b| b.buffer).ok_or(OscError::NotMember(rank))
    }

    fn block_bytes_mut(&mut self, win: WindowId, target: Rank) -> Option<&mut Vec<u8>> {
        let buf = self.windows.get(&win)?.blocks.get(&target)?.buffer;
        self.buffer_mut(target, buf)
    }

    fn block_capacity(&self, win: WindowId, target: Rank) -> Option<usize> {
        let buf = self.windows.get(&win)?.blocks.get(&target)?.buffer;
        self.buffer(target, buf).map(Vec::len)
    }

    // ------------------------------------------------------------------
    // one-sided operations
    // ------------------------------------------------------------------

    /// Common admission checks. `Ok(None)` means proceed against a live
    /// target; `Ok(Some(attempt))` short-circuits.
    fn admit<T>(&self, origin: Rank, win: WindowId, target: Rank, need_epoch: bool) -> Option<Attempt<T>> {
        let Some(w) = self.windows.get(&win) else {
            return Some(Done(Err(OscError::UnknownWindow(win))));
        };
        if w.revoked {
            return Some(Done(Err(OscError::Revoked)));
        }
        if need_epoch && !w.has_epoch(origin, target) {
            return Some(Done(Err(OscError::NoEpoch)));
        }
        if !w.blocks.contains_key(&target) && self.alive(target) {
            return Some(Done(Err(OscError::NotMember(target))));
        }
        None
    }

    fn dead_target<T>(&self, target: Rank) -> Attempt<T> {
        match self.cfg.fidelity {
            Fidelity::Spec => Done(Err(OscError::ProcFailed(target))),
            Fidelity::RealOsc => Blocked { on_dead: Some(target) },
        }
    }

    fn check_range(&self, win: WindowId, target: Rank, offset: usize, len: usize) -> TransportResult<()> {
        let capacity = self.block_capacity(win, target).unwrap_or(0);
        if offset.checked_add(len).is_none_or(|end| end > capacity) {
            return Err(OscError::OutOfRange { offset, len, capacity });
        }
        Ok(())
    }

    pub fn put(&mut self, origin: Rank, win: WindowId, target: Rank, offset: usize, data: &[u8]) -> Attempt<()> {
        if let Some(a) = self.admit(origin, win, target, true) {
            return a;
        }
        let target_alive = self.alive(target);
        if !target_alive {
            match self.cfg.fidelity {
                // completion (and the error) is reported by the next flush
                Fidelity::Spec => {}
                Fidelity::RealOsc if self.cfg.dead_block_access => {}
                Fidelity::RealOsc => return Blocked { on_dead: Some(target) },
            }
        }
        if let Err(e) = self.check_range(win, target, offset, data.len()) {
            return Done(Err(e));
        }
        let alive: Vec<bool> = self.procs.iter().map(|p| p.alive).collect();
        let w = self.windows.get_mut(&win).expect("admitted");
        let others_writing = w
            .pending
            .iter()
            .any(|(&(o, t), ops)| t == target && o != origin && alive[o.index()] && !ops.is_empty());
        if others_writing {
            self.concurrent_writers += 1;
        }
        w.pending.entry((origin, target)).or_default().push((offset, data.to_vec()));
        Done(Ok(()))
    }

    pub fn get(&mut self, origin: Rank, win: WindowId, target: Rank, offset: usize, len: usize) -> Attempt<Vec<u8>> {
        if let Some(a) = self.admit(origin, win, target, true) {
            return a;
        }
        if !self.alive(target) && self.cfg.fidelity == Fidelity::RealOsc && !self.cfg.dead_block_access {
            return Blocked { on_dead: Some(target) };
        }
        if let Err(e) = self.check_range(win, target, offset, len) {
            return Done(Err(e));
        }
        // For a dead target under "spec" this is stale memory; the caller's
        // next flush reports the failure.
        let buf = self.windows[&win].blocks.get(&target).map(|b| b.buffer);
        let bytes = buf
            .and_then(|b| self.buffer(target, b))
            .map(|m| m[offset..offset + len].to_vec())
            .unwrap_or_else(|| vec![0; len]);
        Done(Ok(bytes))
    }

    fn apply_pending(&mut self, origin: Rank, win: WindowId, target: Rank) {
        let ops = self
            .windows
            .get_mut(&win)
            .and_then(|w| w.pending.remove(&(origin, target)))
            .unwrap_or_default();
        if let Some(mem) = self.block_bytes_mut(win, target) {
            for (offset, data) in ops {
                mem[offset..offset + data.len()].copy_from_slice(&data);
            }
        }
    }

    fn discard_pending(&mut self, origin: Rank, win: WindowId, target: Rank) {
        if let Some(w) = self.windows.get_mut(&win) {
            w.pending.remove(&(origin, target));
        }
    }

    pub fn flush(&mut self, origin: Rank, win: WindowId, target: Rank) -> Attempt<()> {
        if let Some(a) = self.admit(origin, win, target, true) {
            if matches!(a, Done(Err(OscError::Revoked))) {
                self.discard_pending(origin, win, target);
            }
            return a;
        }
        if !self.alive(target) {
            if self.cfg.fidelity == Fidelity::RealOsc && self.cfg.dead_block_access {
                self.apply_pending(origin, win, target);
                return Done(Ok(()));
            }
            if self.cfg.fidelity == Fidelity::Spec {
                self.discard_pending(origin, win, target);
            }
            return self.dead_target(target);
        }
        self.apply_pending(origin, win, target);
        Done(Ok(()))
    }

    pub fn compare_and_swap(
        &mut self,
        origin: Rank,
        win: WindowId,
        target: Rank,
        offset: usize,
        expected: i64,
        desired: i64,
    ) -> Attempt<i64> {
        if let Some(a) = self.admit(origin, win, target, true) {
            return a;
        }
        if offset % 8 != 0 {
            return Done(Err(OscError::Misaligned(offset)));
        }
        if !self.alive(target) {
            if !(self.cfg.fidelity == Fidelity::RealOsc && self.cfg.dead_block_access) {
                return self.dead_target(target);
            }
        }
        if let Err(e) = self.check_range(win, target, offset, 8) {
            return Done(Err(e));
        }
        let mem = self.block_bytes_mut(win, target).expect("range checked");
        let cell: [u8; 8] = mem[offset..offset + 8].try_into().expect("8 bytes");
        let prior = i64::from_le_bytes(cell);
        if prior == expected {
            mem[offset..offset + 8].copy_from_slice(&desired.to_le_bytes());
        }
        Done(Ok(prior))
    }

    pub fn lock(&mut self, origin: Rank, win: WindowId, target: Rank, mode: LockMode, assertion: Assertion) -> Attempt<()> {
        if let Some(a) = self.admit(origin, win, target, false) {
            return a;
        }
        {
            let w = &self.windows[&win];
            if w.has_epoch(origin, target) {
                return Done(Err(OscError::DoubleEpoch));
            }
        }
        if !self.alive(target) {
            return self.dead_target(target);
        }
        if assertion == Assertion::NoCheck {
            let w = self.windows.get_mut(&win).expect("admitted");
            w.epochs.insert((origin, target), false);
            return Done(Ok(()));
        }
        let alive: Vec<bool> = self.procs.iter().map(|p| p.alive).collect();
        let w = self.windows.get_mut(&win).expect("admitted");
        let block = w.blocks.get_mut(&target).expect("admitted");
        let granted = match (&mut block.lock, mode) {
            (LockState::Free, LockMode::Exclusive) => {
                block.lock = LockState::Exclusive(origin);
                true
            }
            (LockState::Free, LockMode::Shared) => {
                block.lock = LockState::Shared(BTreeSet::from([origin]));
                true
            }
            (LockState::Shared(set), LockMode::Shared) => {
                set.insert(origin);
                true
            }
            _ => false,
        };
        if granted {
            w.epochs.insert((origin, target), true);
            return Done(Ok(()));
        }
        let on_dead = match &block.lock {
            LockState::Exclusive(h) => Some(*h).filter(|h| !alive[h.index()]),
            LockState::Shared(set) => set.iter().copied().find(|h| !alive[h.index()]),
            LockState::Free => None,
        };
        Blocked { on_dead }
    }

    fn release(block: &mut Block, origin: Rank) {
        match &mut block.lock {
            LockState::Exclusive(h) if *h == origin => block.lock = LockState::Free,
            LockState::Shared(set) => {
                set.remove(&origin);
                if set.is_empty() {
                    block.lock = LockState::Free;
                }
            }
            _ => {}
        }
    }

    pub fn unlock(&mut self, origin: Rank, win: WindowId, target: Rank) -> Attempt<()> {
        if let Some(a) = self.admit(origin, win, target, false) {
            return a;
        }
        if !self.windows[&win].epochs.contains_key(&(origin, target)) {
            return Done(Err(OscError::NoEpoch));
        }
        if !self.alive(target) && self.cfg.fidelity == Fidelity::RealOsc && !self.cfg.dead_block_access {
            return Blocked { on_dead: Some(target) };
        }
        let target_alive = self.alive(target);
        if target_alive || self.cfg.dead_block_access {
            self.apply_pending(origin, win, target);
        } else {
            self.discard_pending(origin, win, target);
        }
        let w = self.windows.get_mut(&win).expect("admitted");
        if w.epochs.remove(&(origin, target)) == Some(true) {
            if let Some(block) = w.blocks.get_mut(&target) {
                Self::release(block, origin);
            }
        }
        if target_alive || self.cfg.dead_block_access {
            Done(Ok(()))
        } else {
            Done(Err(OscError::ProcFailed(target)))
        }
    }

    pub fn lock_all(&mut self, origin: Rank, win: WindowId, assertion: Assertion) -> Attempt<()> {
        let Some(w) = self.windows.get(&win) else {
            return Done(Err(OscError::UnknownWindow(win)));
        };
        if w.revoked {
            return Done(Err(OscError::Revoked));
        }
        if w.lock_all.contains_key(&origin) || w.epochs.keys().any(|(o, _)| *o == origin) {
            return Done(Err(OscError::DoubleEpoch));
        }
        if assertion == Assertion::NoCheck {
            self.windows.get_mut(&win).expect("checked").lock_all.insert(origin, false);
            return Done(Ok(()));
        }
        let targets: Vec<Rank> = w.blocks.keys().copied().collect();
        if let Some(&dead) = targets.iter().find(|t| !self.alive(**t)) {
            return self.dead_target(dead);
        }
        for t in &targets {
            if let LockState::Exclusive(h) = w.blocks[t].lock {
                let on_dead = (!self.alive(h)).then_some(h);
                return Blocked { on_dead };
            }
        }
        let w = self.windows.get_mut(&win).expect("checked");
        for block in w.blocks.values_mut() {
            match &mut block.lock {
                LockState::Shared(set) => {
                    set.insert(origin);
                }
                other => *other = LockState::Shared(BTreeSet::from([origin])),
            }
        }
        w.lock_all.insert(origin, true);
        Done(Ok(()))
    }

    pub fn unlock_all(&mut self, origin: Rank, win: WindowId) -> Attempt<()> {
        let Some(w) = self.windows.get(&win) else {
            return Done(Err(OscError::UnknownWindow(win)));
        };
        if w.revoked {
            return Done(Err(OscError::Revoked));
        }
        if !w.lock_all.contains_key(&origin) {
            return Done(Err(OscError::NoEpoch));
        }
        let targets: Vec<Rank> = w
            .pending
            .keys()
            .filter(|(o, _)| *o == origin)
            .map(|(_, t)| *t)
            .collect();
        if self.cfg.fidelity == Fidelity::RealOsc && !self.cfg.dead_block_access {
            if let Some(&dead) = targets.iter().find(|t| !self.alive(**t)) {
                return Blocked { on_dead: Some(dead) };
            }
        }
        let mut failed = None;
        for t in targets {
            if self.alive(t) || self.cfg.dead_block_access {
                self.apply_pending(origin, win, t);
            } else {
                self.discard_pending(origin, win, t);
                failed.get_or_insert(t);
            }
        }
        let w = self.windows.get_mut(&win).expect("checked");
        if w.lock_all.remove(&origin) == Some(true) {
            for block in w.blocks.values_mut() {
                Self::release(block, origin);
            }
        }
        match failed {
            Some(t) => Done(Err(OscError::ProcFailed(t))),
            None => Done(Ok(())),
        }
    }

    pub fn revoke(&mut self, win: WindowId) -> Attempt<()> {
        let Some(w) = self.windows.get_mut(&win) else {
            return Done(Err(OscError::UnknownWindow(win)));
        };
        w.revoked = true;
        w.pending.clear();
        Done(Ok(()))
    }

    pub fn ctl_send(&mut self, origin: Rank, target: Rank, msg: super::CtlMessage) -> Attempt<()> {
        if !self.alive(target) {
            return Done(Err(OscError::ProcFailed(target)));
        }
        self.procs[target.index()].mailbox.push_back(Envelope { from: origin, msg });
        Done(Ok(()))
    }

    // ------------------------------------------------------------------
    // collectives
    // ------------------------------------------------------------------

    /// Registers `origin` at its next collective slot in its current generation.
    ///
    /// A rank that sits in a plain barrier while its peers have moved on to
    /// recovery must not stay out of step with them: when the kinds disagree
    /// and a member of the generation is dead, the barrier side fails with
    /// `ProcFailed` and the recovery side skips the barrier's slot.
    pub fn arrive(&mut self, origin: Rank, kind: CollKind, contribution: Contribution) -> TransportResult<(u64, u64)> {
        loop {
            let p = &self.procs[origin.index()];
            let key = (p.generation, p.coll_seq);
            let dead = self.generations[key.0 as usize]
                .live_ranks
                .iter()
                .copied()
                .find(|m| !self.alive(*m));
            let rv = self.collectives.entry(key).or_insert_with(|| Rendezvous {
                kind,
                arrived: BTreeMap::new(),
                result: None,
            });
            if rv.kind == kind {
                rv.arrived.insert(origin, contribution);
                self.procs[origin.index()].coll_seq += 1;
                return Ok(key);
            }
            let mismatch = OscError::CollectiveMismatch { expected: rv.kind.name(), found: kind.name() };
            let Some(dead) = dead else {
                return Err(mismatch);
            };
            if kind == CollKind::Barrier {
                return Err(OscError::ProcFailed(dead));
            }
            if rv.kind != CollKind::Barrier || matches!(rv.result, Some(Ok(_))) {
                return Err(mismatch);
            }
            rv.result.get_or_insert(Err(OscError::ProcFailed(dead)));
            self.procs[origin.index()].coll_seq += 1;
        }
    }

    pub fn try_complete(&mut self, key: (u64, u64)) -> Attempt<CollResult> {
        let members = self.generations[key.0 as usize].live_ranks.clone();
        let rv = self.collectives.get(&key).expect("arrived");
        if let Some(r) = &rv.result {
            return Done(r.clone());
        }
        let kind = rv.kind;
        if kind == CollKind::Barrier {
            if let Some(dead) = members.iter().find(|m| !self.alive(**m)) {
                let r = Err(OscError::ProcFailed(*dead));
                self.collectives.get_mut(&key).expect("arrived").result = Some(r.clone());
                return Done(r);
            }
        }
        let live: Vec<Rank> = members.iter().copied().filter(|m| self.alive(*m)).collect();
        if !live.iter().all(|m| rv.arrived.contains_key(m)) {
            return Blocked { on_dead: None };
        }
        let contributions: Vec<(Rank, Contribution)> = live
            .iter()
            .map(|m| (*m, rv.arrived[m].clone()))
            .collect();
        let result = match kind {
            CollKind::Barrier => Ok(CollResult::Barrier),
            CollKind::Agree => {
                let mut acc: Option<FixedBitSet> = None;
                for (_, c) in &contributions {
                    if let Contribution::Agree(bits) = c {
                        acc = Some(match acc {
                            None => bits.clone(),
                            Some(mut a) => {
                                a.grow(bits.len());
                                let mut b = bits.clone();
                                b.grow(a.len());
                                a.intersect_with(&b);
                                a
                            }
                        });
                    }
                }
                Ok(CollResult::Flags(acc.unwrap_or_default()))
            }
            CollKind::Shrink => {
                let id = self.generations.len() as u64;
                self.generations.push(WorldGeneration::new(id, live.clone()));
                Ok(CollResult::Generation(id))
            }
            CollKind::WinCreate => {
                let id = WindowId(self.next_window);
                self.next_window += 1;
                let blocks = contributions
                    .iter()
                    .map(|(r, c)| match c {
                        Contribution::WinCreate(buf) => {
                            (*r, Block { buffer: *buf, lock: LockState::Free })
                        }
                        _ => unreachable!("kind checked on arrival"),
                    })
                    .collect();
                self.windows.insert(
                    id,
                    Window {
                        blocks,
                        revoked: false,
                        epochs: BTreeMap::new(),
                        lock_all: BTreeMap::new(),
                        pending: BTreeMap::new(),
                    },
                );
                Ok(CollResult::Window(id))
            }
            CollKind::WinFree => {
                let mut target = None;
                let mut mismatch = false;
                for (_, c) in &contributions {
                    if let Contribution::WinFree(w) = c {
                        match target {
                            None => target = Some(*w),
                            Some(t) if t != *w => mismatch = true,
                            _ => {}
                        }
                    }
                }
                match target {
                    Some(w) if !mismatch => {
                        self.windows.remove(&w);
                        Ok(CollResult::Freed)
                    }
                    Some(w) => Err(OscError::UnknownWindow(w)),
                    None => Ok(CollResult::Freed),
                }
            }
        };
        self.collectives.get_mut(&key).expect("arrived").result = Some(result.clone());
        Done(result)
    }

    pub fn block_spec_buffer(&mut self, origin: Rank, spec: BlockSpec) -> TransportResult<BufferId> {
        match spec {
            BlockSpec::Fresh(cap) if cap < HEADER_BYTES => Err(OscError::BlockTooSmall(cap)),
            BlockSpec::Fresh(cap) => Ok(self.alloc(origin, cap)),
            BlockSpec::Reuse(buf) => match self.buffer(origin, buf) {
                None => Err(OscError::UnknownBuffer(buf)),
                Some(m) if m.len() < HEADER_BYTES => Err(OscError::BlockTooSmall(m.len())),
                Some(_) => Ok(buf),
            },
        }
    }
}
