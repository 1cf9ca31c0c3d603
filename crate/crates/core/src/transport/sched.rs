//! The step-driven executor.
//!
//! Each step first applies scheduled failures, then polls every live
//! process in ascending rank order, main task before helper. A task performs
//! at most one transport operation per poll.

use std::cell::{Ref, RefCell};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use super::cost::Cost;
use super::trace::{TaskKind, Trace};
use super::world::{HangCounts, LockState, TaskStatus, World};
use super::{BufferId, Endpoint, Rank, TransportConfig, WindowId, WorldGeneration};

type Task = Pin<Box<dyn Future<Output = ()>>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    /// Every live process's main task returned. Helpers are daemons and may
    /// still be running.
    Completed { steps: u64 },
    /// No main task made progress for `stall_limit` steps.
    Deadlock { step: u64, blocked: Vec<(Rank, String)> },
    StepLimit { step: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum InjectError {
    #[error("rank {0} already has a failure scheduled")]
    DuplicateFailure(Rank),
    #[error("step {at} is not in the future (current step {now})")]
    PastStep { at: u64, now: u64 },
    #[error("rank {0} does not exist")]
    UnknownRank(Rank),
}

pub struct Sim {
    world: Rc<RefCell<World>>,
    endpoints: Vec<[Endpoint; 2]>,
    tasks: Vec<[Option<Task>; 2]>,
}

impl Sim {
    pub fn new(world_size: usize, cfg: TransportConfig) -> Self {
        let world = Rc::new(RefCell::new(World::new(world_size, cfg)));
        let endpoints = (0..world_size as u32)
            .map(|r| {
                [
                    Endpoint::new(world.clone(), Rank(r), TaskKind::Main),
                    Endpoint::new(world.clone(), Rank(r), TaskKind::Helper),
                ]
            })
            .collect();
        let tasks = (0..world_size).map(|_| [None, None]).collect();
        Self { world, endpoints, tasks }
    }

    pub fn world_size(&self) -> usize {
        self.endpoints.len()
    }

    /// The main-task endpoint of `rank`.
    pub fn endpoint(&self, rank: Rank) -> Endpoint {
        self.endpoints[rank.index()][0].clone()
    }

    pub fn helper_endpoint(&self, rank: Rank) -> Endpoint {
        self.endpoints[rank.index()][1].clone()
    }

    pub fn spawn(&mut self, rank: Rank, task: TaskKind, fut: impl Future<Output = ()> + 'static) {
        let slot = match task {
            TaskKind::Main => 0,
            TaskKind::Helper => 1,
            TaskKind::Sim => panic!("the scheduler does not run tasks of its own"),
        };
        self.tasks[rank.index()][slot] = Some(Box::pin(fut));
    }

    /// Schedules `rank` to fail at the start of step `at_step`.
    pub fn inject_failure(&mut self, rank: Rank, at_step: u64) -> Result<(), InjectError> {
        let mut w = self.world.borrow_mut();
        if rank.index() >= w.procs.len() {
            return Err(InjectError::UnknownRank(rank));
        }
        if w.kills.values().flatten().any(|r| *r == rank) || !w.procs[rank.index()].alive {
            return Err(InjectError::DuplicateFailure(rank));
        }
        if at_step < w.step {
            return Err(InjectError::PastStep { at: at_step, now: w.step });
        }
        w.kills.entry(at_step).or_default().push(rank);
        Ok(())
    }

    pub fn run(&mut self, max_steps: u64) -> RunOutcome {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            let step = self.world.borrow().step;
            if step >= max_steps {
                return RunOutcome::StepLimit { step };
            }
            let doomed = self.world.borrow_mut().kills.remove(&step).unwrap_or_default();
            for r in doomed {
                self.world.borrow_mut().kill(r);
                self.tasks[r.index()] = [None, None];
            }
            for r in 0..self.tasks.len() {
                for slot in 0..2 {
                    if !self.world.borrow().procs[r].alive {
                        break;
                    }
                    let Some(task) = self.tasks[r][slot].as_mut() else {
                        continue;
                    };
                    if let Poll::Ready(()) = task.as_mut().poll(&mut cx) {
                        self.tasks[r][slot] = None;
                        if slot == 0 {
                            self.world.borrow_mut().procs[r].status = TaskStatus::Done;
                        }
                    }
                }
            }
            let mut w = self.world.borrow_mut();
            w.step += 1;
            if self.tasks.iter().all(|t| t[0].is_none()) {
                return RunOutcome::Completed { steps: w.step };
            }
            if w.step - w.last_progress > w.cfg.stall_limit {
                let blocked = w
                    .procs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.alive)
                    .filter_map(|(i, p)| match p.status {
                        TaskStatus::Blocked(op) => Some((Rank(i as u32), op.to_string())),
                        TaskStatus::Sleeping => Some((Rank(i as u32), "sleep".to_string())),
                        TaskStatus::Running | TaskStatus::Done => None,
                    })
                    .collect();
                let step = w.step;
                w.emit(Rank(0), TaskKind::Sim, "deadlock", None, None, "stalled".into(), None);
                return RunOutcome::Deadlock { step, blocked };
            }
        }
    }

    // ------------------------------------------------------------------
    // inspection
    // ------------------------------------------------------------------

    pub fn step(&self) -> u64 {
        self.world.borrow().step
    }

    pub fn trace(&self) -> Ref<'_, Trace> {
        Ref::map(self.world.borrow(), |w| &w.trace)
    }

    pub fn hangs(&self) -> HangCounts {
        self.world.borrow().hangs
    }

    /// Accumulated simulated cost of `rank`'s operations.
    pub fn cost(&self, rank: Rank) -> Cost {
        self.world.borrow().procs[rank.index()].cost
    }

    /// Puts staged while another live origin had unflushed puts to the same block.
    pub fn concurrent_writers(&self) -> u64 {
        self.world.borrow().concurrent_writers
    }

    pub fn alive(&self, rank: Rank) -> bool {
        self.world.borrow().alive(rank)
    }

    pub fn died_at(&self, rank: Rank) -> Option<u64> {
        self.world.borrow().died_at(rank)
    }

    pub fn latest_generation(&self) -> WorldGeneration {
        self.world.borrow().generations.last().expect("generation 0 exists").clone()
    }

    pub fn window_ids(&self) -> Vec<WindowId> {
        self.world.borrow().windows.keys().copied().collect()
    }

    pub fn window_revoked(&self, win: WindowId) -> Option<bool> {
        self.world.borrow().windows.get(&win).map(|w| w.revoked)
    }

    pub fn window_members(&self, win: WindowId) -> Vec<Rank> {
        self.world.borrow().windows.get(&win).map(|w| w.blocks.keys().copied().collect()).unwrap_or_default()
    }

    pub fn window_lock(&self, win: WindowId, rank: Rank) -> Option<LockState> {
        self.world.borrow().windows.get(&win)?.blocks.get(&rank).map(|b| b.lock.clone())
    }

    /// Bytes of `rank`'s block in `win`, regardless of liveness.
    pub fn window_block(&self, win: WindowId, rank: Rank) -> Option<Vec<u8>> {
        let w = self.world.borrow();
        let buf = w.windows.get(&win)?.blocks.get(&rank)?.buffer;
        w.buffer(rank, buf).cloned()
    }

    pub fn window_buffer(&self, win: WindowId, rank: Rank) -> Option<BufferId> {
        self.world.borrow().windows.get(&win)?.blocks.get(&rank).map(|b| b.buffer)
    }

    pub fn buffer(&self, rank: Rank, buf: BufferId) -> Option<Vec<u8>> {
        self.world.borrow().buffer(rank, buf).cloned()
    }

    pub fn buffer_count(&self, rank: Rank) -> usize {
        self.world.borrow().procs[rank.index()].memory.len()
    }
}
