//! Failure detection by pinging over the control channel before each
//! one-sided access, and the per-process helper task that answers the
//! control channel.

use crate::transport::{yield_now, CtlMessage, Endpoint, Envelope, Rank};
use crate::txn::SharedLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Liveness {
    Alive,
    Failed,
}

/// Fire-and-forget liveness probe: the target is alive iff the send
/// succeeded. There is no reply.
pub async fn ping(ep: &Endpoint, target: Rank) -> Liveness {
    match ep.ctl_send(target, CtlMessage::Ping).await {
        Ok(()) => Liveness::Alive,
        Err(_) => Liveness::Failed,
    }
}

/// Result of a guarded call: either the guard tripped and nothing was
/// issued, or the call's own result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Guarded<T> {
    FailureDetected(Rank),
    Issued(T),
}

/// Pings `target` and runs `call` only if the ping succeeded. While the call
/// runs, the endpoint remembers the ping so a hang on `target` can be told
/// apart from an unguarded one.
pub async fn guarded_osc<T, F, Fut>(ep: &Endpoint, target: Rank, call: F) -> Guarded<T>
where
    F: FnOnce() -> Fut,
    Fut: std::future::Future<Output = T>,
{
    let at = ep.step();
    if ping(ep, target).await == Liveness::Failed {
        return Guarded::FailureDetected(target);
    }
    ep.set_guard(Some((target, at)));
    let out = call().await;
    ep.set_guard(None);
    Guarded::Issued(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HelperStep {
    pub handled: usize,
    pub shutdown: bool,
}

/// Drains the mailbox once. Pings need no action (their delivery already
/// proved liveness), enlargement requests grow the local block and are
/// acknowledged, log updates are appended and acknowledged; everything else
/// is handed to the main task.
pub fn helper_step(ep: &Endpoint, log: &SharedLog) -> HelperStep {
    let mut step = HelperStep::default();
    while let Some(Envelope { from, msg }) = ep.ctl_poll() {
        step.handled += 1;
        match msg {
            CtlMessage::Ping => {}
            CtlMessage::EnlargeRequest { win, capacity } => {
                let Ok(buf) = ep.local_block(win) else {
                    continue;
                };
                let current = ep.buffer_len(buf).unwrap_or(0);
                let wanted = if capacity <= current { current } else { capacity.max(2 * current) };
                if let Ok(grown) = ep.grow_buffer(buf, wanted) {
                    let _ = ep.ctl_send_now(from, CtlMessage::EnlargeAck { win, capacity: grown });
                }
            }
            CtlMessage::TxnLogUpdate { ticket, entry } => {
                log.borrow_mut().apply(entry);
                let _ = ep.ctl_send_now(from, CtlMessage::TxnLogAck { ticket });
            }
            CtlMessage::Shutdown => {
                step.shutdown = true;
                break;
            }
            other => ep.inbox_push(Envelope { from, msg: other }),
        }
    }
    step
}

/// The helper task body: one drain per step until told to shut down.
pub async fn run_helper(ep: Endpoint, log: SharedLog) {
    loop {
        if helper_step(&ep, &log).shutdown {
            return;
        }
        yield_now().await;
    }
}


#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::rc::Rc;

    use super::*;
    use crate::transport::{
        Assertion, BlockSpec, Fidelity, HangCounts, OscError, RunOutcome, Sim, TaskKind, TransportConfig,
        TransportResult, WindowId,
    };
    use crate::txn::TxnLog;

    type Slot<T> = Rc<RefCell<Option<T>>>;

    /// Both ranks of a two-process world create a 64-byte window; rank 0 then
    /// runs `body` inside a lock-all epoch and rank 1 idles for a while.
    fn two_ranks<T, F, Fut>(cfg: TransportConfig, kill: Option<u64>, body: F) -> (Sim, Slot<T>)
    where
        T: 'static,
        F: FnOnce(Endpoint, WindowId) -> Fut + 'static,
        Fut: std::future::Future<Output = TransportResult<T>> + 'static,
    {
        let mut sim = Sim::new(2, cfg);
        let out: Slot<T> = Rc::default();
        let (ep0, ep1, sink) = (sim.endpoint(Rank(0)), sim.endpoint(Rank(1)), out.clone());
        sim.spawn(Rank(0), TaskKind::Main, async move {
            let win = ep0.win_create(BlockSpec::Fresh(64)).await.unwrap();
            ep0.lock_all(win, Assertion::NoCheck).await.unwrap();
            *sink.borrow_mut() = Some(body(ep0, win).await.unwrap());
        });
        sim.spawn(Rank(1), TaskKind::Main, async move {
            ep1.win_create(BlockSpec::Fresh(64)).await.unwrap();
            ep1.sleep(100).await;
        });
        if let Some(at) = kill {
            sim.inject_failure(Rank(1), at).unwrap();
        }
        sim.run(5000);
        (sim, out)
    }

    fn count(sim: &Sim, op: &str) -> usize {
        sim.trace().events.iter().filter(|e| e.rank == 0 && e.op == op).count()
    }

    #[test]
    fn ping_tells_live_from_dead() {
        let (_, out) = two_ranks(TransportConfig::default(), Some(5), |ep, _| async move {
            let before = ping(&ep, Rank(0)).await;
            ep.sleep(20).await;
            Ok((before, ping(&ep, Rank(1)).await))
        });
        assert_eq!(out.take(), Some((Liveness::Alive, Liveness::Failed)));
    }

    #[test]
    fn guard_on_a_dead_target_issues_nothing() {
        let (sim, out) = two_ranks(TransportConfig::default(), Some(5), |ep, win| async move {
            ep.sleep(20).await;
            Ok(guarded_osc(&ep, Rank(1), || ep.put(win, Rank(1), 8, b"x")).await)
        });
        assert_eq!(out.take(), Some(Guarded::FailureDetected(Rank(1))));
        assert_eq!(count(&sim, "put"), 0);
    }

    #[test]
    fn guard_on_a_live_target_changes_nothing() {
        let (_, out) = two_ranks(TransportConfig::default(), None, |ep, win| async move {
            ep.put(win, Rank(1), 8, b"abc").await?;
            ep.flush(win, Rank(1)).await?;
            let plain = ep.get(win, Rank(1), 8, 3).await;
            let guarded = guarded_osc(&ep, Rank(1), || ep.get(win, Rank(1), 8, 3)).await;
            Ok((plain, guarded))
        });
        let (plain, guarded) = out.take().unwrap();
        assert_eq!(plain, Ok(b"abc".to_vec()));
        assert_eq!(guarded, Guarded::Issued(plain));
    }

    #[test]
    fn every_guarded_call_pings_once() {
        let (sim, out) = two_ranks(TransportConfig::default(), None, |ep, win| async move {
            for i in 0..1000u64 {
                let bytes = i.to_le_bytes();
                let r = guarded_osc(&ep, Rank(1), || ep.put(win, Rank(1), 8, &bytes)).await;
                assert_eq!(r, Guarded::Issued(Ok(())));
            }
            Ok(())
        });
        assert_eq!(out.take(), Some(()));
        assert_eq!(count(&sim, "ping"), 1000);
        assert_eq!(count(&sim, "put"), 1000);
    }

    #[test]
    fn death_between_ping_and_call_is_an_expected_hang() {
        let cfg = TransportConfig { fidelity: Fidelity::RealOsc, ..TransportConfig::default() };
        let (sim, out) = two_ranks(cfg, Some(53), |ep, win| async move {
            ep.sleep(50 - ep.step()).await;
            let r = guarded_osc(&ep, Rank(1), || async {
                ep.sleep(5).await;
                ep.put(win, Rank(1), 8, b"late").await
            })
            .await;
            Ok(r)
        });
        let ping_step = sim.trace().events.iter().find(|e| e.rank == 0 && e.op == "ping").unwrap().step;
        assert!(ping_step < 53);
        assert_eq!(out.take(), Some(Guarded::Issued(Err(OscError::SimulatedHang(1000)))));
        assert_eq!(sim.hangs(), HangCounts { expected: 1, unexpected: 0 });
    }

    #[test]
    fn helper_drains_pings() {
        let sim = Sim::new(2, TransportConfig::default());
        let log = TxnLog::shared();
        let helper = sim.helper_endpoint(Rank(1));
        assert_eq!(helper_step(&helper, &log), HelperStep::default());
        let ep0 = sim.endpoint(Rank(0));
        ep0.ctl_send_now(Rank(1), CtlMessage::Ping).unwrap();
        ep0.ctl_send_now(Rank(1), CtlMessage::Ping).unwrap();
        assert_eq!(helper_step(&helper, &log), HelperStep { handled: 2, shutdown: false });
        assert_eq!(helper_step(&helper, &log).handled, 0);
    }

    #[test]
    fn helper_grows_a_block_and_acknowledges() {
        let mut sim = Sim::new(2, TransportConfig::default());
        let win: Slot<WindowId> = Rc::default();
        for r in 0..2 {
            let (ep, sink) = (sim.endpoint(Rank(r)), win.clone());
            sim.spawn(Rank(r), TaskKind::Main, async move {
                let w = ep.win_create(BlockSpec::Fresh(64)).await.unwrap();
                *sink.borrow_mut() = Some(w);
            });
        }
        assert!(matches!(sim.run(100), RunOutcome::Completed { .. }));
        let win = win.take().unwrap();
        let (ep0, ep1) = (sim.endpoint(Rank(0)), sim.endpoint(Rank(1)));
        let buf = ep1.local_block(win).unwrap();
        ep1.write_buffer(buf, 8, b"kept").unwrap();
        ep0.ctl_send_now(Rank(1), CtlMessage::EnlargeRequest { win, capacity: 128 }).unwrap();
        let step = helper_step(&sim.helper_endpoint(Rank(1)), &TxnLog::shared());
        assert_eq!(step.handled, 1);
        let block = sim.window_block(win, Rank(1)).unwrap();
        assert_eq!(block.len(), 128);
        assert_eq!(&block[8..12], b"kept");
        assert_eq!(
            ep0.ctl_poll(),
            Some(Envelope { from: Rank(1), msg: CtlMessage::EnlargeAck { win, capacity: 128 } })
        );
    }
}
