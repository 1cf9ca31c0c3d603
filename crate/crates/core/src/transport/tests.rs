use std::cell::RefCell;
use std::future::Future;
use std::rc::Rc;

use fixedbitset::FixedBitSet;
use proptest::prelude::*;

use super::*;

type Slot<T> = Rc<RefCell<Option<T>>>;

fn spawn<T, F, Fut>(sim: &mut Sim, rank: u32, f: F) -> Slot<T>
where
    T: 'static,
    F: FnOnce(Endpoint) -> Fut,
    Fut: Future<Output = T> + 'static,
{
    let out: Slot<T> = Rc::new(RefCell::new(None));
    let fut = f(sim.endpoint(Rank(rank)));
    let sink = out.clone();
    sim.spawn(Rank(rank), TaskKind::Main, async move {
        let v = fut.await;
        *sink.borrow_mut() = Some(v);
    });
    out
}

fn take<T>(slot: &Slot<T>) -> T {
    slot.borrow_mut().take().expect("task finished")
}

fn spec() -> TransportConfig {
    TransportConfig::default()
}

fn real_osc() -> TransportConfig {
    TransportConfig { fidelity: Fidelity::RealOsc, ..TransportConfig::default() }
}

/// Every rank creates one window with `cap` bytes, then runs `body`.
fn with_window<T, F, Fut>(sim: &mut Sim, cap: usize, body: F) -> Vec<Slot<TransportResult<T>>>
where
    T: 'static,
    F: Fn(Endpoint, WindowId) -> Fut + Clone + 'static,
    Fut: Future<Output = TransportResult<T>> + 'static,
{
    (0..sim.world_size() as u32)
        .map(|r| {
            let body = body.clone();
            spawn(sim, r, move |ep| async move {
                let win = ep.win_create(BlockSpec::Fresh(cap)).await?;
                body(ep, win).await
            })
        })
        .collect()
}

#[test]
fn win_create_allocates_zeroed_blocks() {
    let mut sim = Sim::new(4, spec());
    let slots = with_window(&mut sim, 64, |_, win| async move { Ok(win) });
    assert!(matches!(sim.run(100), RunOutcome::Completed { .. }));
    let wins: Vec<WindowId> = slots.iter().map(|s| take(s).unwrap()).collect();
    assert!(wins.iter().all(|w| *w == wins[0]));
    assert_eq!(sim.window_members(wins[0]).len(), 4);
    for r in 0..4 {
        assert_eq!(sim.window_block(wins[0], Rank(r)).unwrap(), vec![0u8; 64]);
    }
}

#[test]
fn win_create_rejects_blocks_below_header() {
    let mut sim = Sim::new(1, spec());
    let s = spawn(&mut sim, 0, |ep| async move { ep.win_create(BlockSpec::Fresh(4)).await });
    sim.run(10);
    assert_eq!(take(&s), Err(OscError::BlockTooSmall(4)));
}

#[test]
fn put_then_flush_is_visible() {
    let mut sim = Sim::new(2, spec());
    let data: Vec<u8> = (1..=16).collect();
    let d = data.clone();
    let slots = with_window(&mut sim, 64, move |ep, win| {
        let d = d.clone();
        async move {
            if ep.rank() == Rank(0) {
                ep.lock(win, Rank(1), LockMode::Exclusive, Assertion::None).await?;
                ep.put(win, Rank(1), 0, &d).await?;
                ep.flush(win, Rank(1)).await?;
                ep.unlock(win, Rank(1)).await?;
            }
            Ok(win)
        }
    });
    sim.run(100);
    let win = take(&slots[0]).unwrap();
    assert_eq!(&sim.window_block(win, Rank(1)).unwrap()[..16], &data[..]);
}

#[test]
fn put_beyond_capacity_writes_nothing() {
    let mut sim = Sim::new(2, spec());
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() == Rank(0) {
            ep.lock(win, Rank(1), LockMode::Exclusive, Assertion::None).await?;
            let r = ep.put(win, Rank(1), 8, &[7u8; 9]).await;
            ep.flush(win, Rank(1)).await?;
            ep.unlock(win, Rank(1)).await?;
            r?;
        }
        Ok(win)
    });
    sim.run(100);
    assert_eq!(take(&slots[0]), Err(OscError::OutOfRange { offset: 8, len: 9, capacity: 16 }));
    let win = take(&slots[1]).unwrap();
    assert_eq!(sim.window_block(win, Rank(1)).unwrap(), vec![0u8; 16]);
}

#[test]
fn real_osc_put_to_dead_target_hangs() {
    let mut sim = Sim::new(2, real_osc());
    sim.inject_failure(Rank(1), 5).unwrap();
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() == Rank(0) {
            ep.lock_all(win, Assertion::NoCheck).await?;
            ep.sleep(10).await;
            ep.put(win, Rank(1), 0, &[1]).await?;
        }
        Ok(())
    });
    sim.run(5000);
    assert_eq!(take(&slots[0]), Err(OscError::SimulatedHang(1000)));
    assert_eq!(sim.hangs(), HangCounts { expected: 0, unexpected: 1 });
}

#[test]
fn get_semantics() {
    let mut sim = Sim::new(3, spec());
    sim.inject_failure(Rank(2), 10).unwrap();
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() != Rank(0) {
            return Ok(vec![]);
        }
        ep.lock_all(win, Assertion::NoCheck).await?;
        let fresh = ep.get(win, Rank(1), 0, 8).await?;
        ep.put(win, Rank(1), 0, b"abcdefgh").await?;
        ep.flush(win, Rank(1)).await?;
        let written = ep.get(win, Rank(1), 0, 8).await?;
        ep.sleep(20).await;
        ep.get(win, Rank(2), 0, 8).await?;
        let after_dead = ep.flush(win, Rank(2)).await;
        Ok(vec![fresh, written, format!("{after_dead:?}").into_bytes()])
    });
    sim.run(1000);
    let out = take(&slots[0]).unwrap();
    assert_eq!(out[0], vec![0u8; 8]);
    assert_eq!(out[1], b"abcdefgh".to_vec());
    assert_eq!(String::from_utf8(out[2].clone()).unwrap(), "Err(ProcFailed(Rank(2)))");
}

#[test]
fn compare_and_swap_examples() {
    let mut sim = Sim::new(2, spec());
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() != Rank(0) {
            return Ok(vec![]);
        }
        ep.lock_all(win, Assertion::NoCheck).await?;
        ep.put(win, Rank(1), 8, &(-1i64).to_le_bytes()).await?;
        ep.flush(win, Rank(1)).await?;
        let first = ep.compare_and_swap(win, Rank(1), 8, -1, 5).await?;
        let second = ep.compare_and_swap(win, Rank(1), 8, -1, 7).await?;
        let stored = ep.get(win, Rank(1), 8, 8).await?;
        let misaligned = ep.compare_and_swap(win, Rank(1), 4, 0, 1).await;
        assert_eq!(misaligned, Err(OscError::Misaligned(4)));
        Ok(vec![first, second, i64::from_le_bytes(stored.try_into().unwrap())])
    });
    sim.run(100);
    assert_eq!(take(&slots[0]).unwrap(), vec![-1, 5, 5]);
}

/// Two ranks race a CAS on one cell; for every pair of issue steps exactly
/// one wins, and on a tie the lower rank wins.
#[test]
fn cas_two_rank_interleavings() {
    for d0 in 0..4u64 {
        for d1 in 0..4u64 {
            let mut sim = Sim::new(3, spec());
            let slots = with_window(&mut sim, 16, move |ep, win| async move {
                if ep.rank() == Rank(2) {
                    return Ok(None);
                }
                ep.lock_all(win, Assertion::NoCheck).await?;
                ep.sleep(if ep.rank() == Rank(0) { d0 + 1 } else { d1 + 1 }).await;
                let me = ep.rank().0 as i64;
                // the cell starts at 0, which plays the role of "free"
                Ok(Some(ep.compare_and_swap(win, Rank(2), 0, 0, me + 10).await?))
            });
            sim.run(100);
            let p0 = take(&slots[0]).unwrap().unwrap();
            let p1 = take(&slots[1]).unwrap().unwrap();
            let won = [p0 == 0, p1 == 0];
            assert_eq!(won.iter().filter(|w| **w).count(), 1, "d0={d0} d1={d1}");
            let expect_winner = if d0 <= d1 { 0 } else { 1 };
            assert!(won[expect_winner], "d0={d0} d1={d1}");
            let loser = if won[0] { p1 } else { p0 };
            assert_eq!(loser, 10 + expect_winner as i64);
        }
    }
}

#[test]
fn flush_applies_in_issue_order_and_reports_dead_target() {
    let mut sim = Sim::new(3, spec());
    sim.inject_failure(Rank(2), 12).unwrap();
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() != Rank(0) {
            return Ok(None);
        }
        ep.flush(win, Rank(1)).await.expect_err("no epoch yet");
        ep.lock_all(win, Assertion::NoCheck).await?;
        ep.flush(win, Rank(1)).await?;
        ep.put(win, Rank(1), 0, b"AAAA").await?;
        ep.put(win, Rank(1), 2, b"BBBB").await?;
        ep.flush(win, Rank(1)).await?;
        ep.put(win, Rank(2), 0, b"CC").await?;
        ep.sleep(10).await;
        Ok(Some(ep.flush(win, Rank(2)).await))
    });
    sim.run(100);
    assert_eq!(take(&slots[0]).unwrap(), Some(Err(OscError::ProcFailed(Rank(2)))));
    let win = sim.window_ids()[0];
    assert_eq!(&sim.window_block(win, Rank(1)).unwrap()[..6], b"AABBBB");
    assert_eq!(&sim.window_block(win, Rank(2)).unwrap()[..2], &[0, 0]);
}

#[test]
fn lock_held_by_dead_rank_hangs_contender() {
    for cfg in [spec(), real_osc()] {
        let mut sim = Sim::new(3, cfg);
        sim.inject_failure(Rank(0), 8).unwrap();
        let slots = with_window(&mut sim, 16, |ep, win| async move {
            match ep.rank().0 {
                0 => {
                    ep.lock(win, Rank(2), LockMode::Exclusive, Assertion::None).await?;
                    ep.sleep(100).await;
                    Ok(())
                }
                1 => {
                    ep.sleep(20).await;
                    ep.lock(win, Rank(2), LockMode::Exclusive, Assertion::None).await
                }
                _ => Ok(()),
            }
        });
        sim.run(5000);
        assert_eq!(take(&slots[1]), Err(OscError::SimulatedHang(1000)));
    }
}

#[test]
fn shared_locks_coexist() {
    let mut sim = Sim::new(4, spec());
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() != Rank(3) {
            ep.lock(win, Rank(3), LockMode::Shared, Assertion::None).await?;
        }
        ep.sleep(5).await;
        Ok(win)
    });
    sim.run(100);
    let win = take(&slots[0]).unwrap();
    let expected: std::collections::BTreeSet<Rank> = [Rank(0), Rank(1), Rank(2)].into();
    assert_eq!(sim.window_lock(win, Rank(3)), Some(LockState::Shared(expected)));
}

#[test]
fn lock_all_epoch_errors() {
    let mut sim = Sim::new(2, spec());
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        let no_epoch = ep.unlock_all(win).await;
        ep.lock_all(win, Assertion::NoCheck).await?;
        let twice = ep.lock_all(win, Assertion::NoCheck).await;
        ep.put(win, Rank(1 - ep.rank().0), 0, &[ep.rank().0 as u8 + 1]).await?;
        ep.flush(win, Rank(1 - ep.rank().0)).await?;
        ep.unlock_all(win).await?;
        Ok((no_epoch, twice))
    });
    sim.run(100);
    for s in &slots {
        assert_eq!(take(s).unwrap(), (Err(OscError::NoEpoch), Err(OscError::DoubleEpoch)));
    }
}

#[test]
fn revoke_poisons_window_and_wakes_blocked_lockers() {
    let mut sim = Sim::new(3, spec());
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        match ep.rank().0 {
            0 => {
                ep.lock(win, Rank(2), LockMode::Exclusive, Assertion::None).await?;
                ep.sleep(30).await;
                Ok(vec![])
            }
            1 => {
                ep.sleep(5).await;
                let blocked = ep.lock(win, Rank(2), LockMode::Exclusive, Assertion::None).await;
                let put = ep.put(win, Rank(0), 0, &[1]).await;
                Ok(vec![blocked, put])
            }
            _ => {
                ep.sleep(10).await;
                let a = ep.revoke(win).await;
                let b = ep.revoke(win).await;
                Ok(vec![a, b])
            }
        }
    });
    sim.run(200);
    assert_eq!(take(&slots[1]).unwrap(), vec![Err(OscError::Revoked), Err(OscError::Revoked)]);
    assert_eq!(take(&slots[2]).unwrap(), vec![Ok(()), Ok(())]);
}

#[test]
fn win_free_succeeds_despite_dead_lock_holder() {
    let mut sim = Sim::new(3, spec());
    sim.inject_failure(Rank(0), 6).unwrap();
    let slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() == Rank(0) {
            ep.lock(win, Rank(1), LockMode::Exclusive, Assertion::None).await?;
            ep.sleep(50).await;
        }
        ep.sleep(10).await;
        ep.win_free(win).await?;
        ep.win_free(WindowId(999)).await.map(|_| win)
    });
    sim.run(200);
    assert!(take(&slots[1]).is_ok());
    assert!(sim.window_ids().is_empty());
}

#[test]
fn partial_collective_is_a_deadlock() {
    let cfg = TransportConfig { stall_limit: 50, ..spec() };
    let mut sim = Sim::new(3, cfg);
    let _slots = with_window(&mut sim, 16, |ep, win| async move {
        if ep.rank() != Rank(2) {
            ep.win_free(win).await?;
        }
        Ok(())
    });
    let out = sim.run(10_000);
    let RunOutcome::Deadlock { blocked, .. } = out else { panic!("expected deadlock, got {out:?}") };
    assert_eq!(blocked, vec![(Rank(0), "win_free".into()), (Rank(1), "win_free".into())]);
}

#[test]
fn shrink_renumbers_survivors() {
    let mut sim = Sim::new(4, spec());
    sim.inject_failure(Rank(2), 0).unwrap();
    let slots: Vec<_> = (0..4)
        .map(|r| spawn(&mut sim, r, |ep| async move { ep.comm_shrink().await }))
        .collect();
    sim.run(100);
    let g = take(&slots[0]).unwrap();
    assert_eq!(g.live_ranks, vec![Rank(0), Rank(1), Rank(3)]);
    assert_eq!(g.translate(Rank(3)), Some(2));
    assert_eq!(g.translate(Rank(2)), None);
    assert_eq!(take(&slots[3]).unwrap(), g);
}

#[test]
fn shrink_without_failures_is_identity_with_new_id() {
    let mut sim = Sim::new(3, spec());
    let slots: Vec<_> = (0..3)
        .map(|r| spawn(&mut sim, r, |ep| async move { ep.comm_shrink().await }))
        .collect();
    sim.run(100);
    let g = take(&slots[1]).unwrap();
    assert_eq!(g.id, 1);
    assert_eq!(g.live_ranks, vec![Rank(0), Rank(1), Rank(2)]);
}

#[test]
fn shrink_observes_failures_until_completion() {
    let mut sim = Sim::new(4, spec());
    sim.inject_failure(Rank(1), 0).unwrap();
    sim.inject_failure(Rank(2), 5).unwrap();
    let slots: Vec<_> = (0..4)
        .map(|r| {
            spawn(&mut sim, r, move |ep| async move {
                if r == 3 {
                    ep.sleep(10).await;
                }
                ep.comm_shrink().await
            })
        })
        .collect();
    sim.run(100);
    assert_eq!(take(&slots[0]).unwrap().live_ranks, vec![Rank(0), Rank(3)]);
}

#[test]
fn agree_is_bitwise_and() {
    let contributions = [0b11u32, 0b01, 0b01];
    let mut sim = Sim::new(3, spec());
    let slots: Vec<_> = (0..3)
        .map(|r| {
            spawn(&mut sim, r, move |ep| async move {
                let mut bits = FixedBitSet::with_capacity(2);
                for b in 0..2 {
                    bits.set(b, contributions[r as usize] >> b & 1 == 1);
                }
                ep.comm_agree(bits).await
            })
        })
        .collect();
    sim.run(100);
    for s in &slots {
        assert_eq!(take(s).unwrap().ones().collect::<Vec<_>>(), vec![0]);
    }

    let mut sim = Sim::new(1, spec());
    let s = spawn(&mut sim, 0, |ep| async move {
        ep.comm_agree(FixedBitSet::with_capacity_and_blocks(8, [0b1010])).await
    });
    sim.run(10);
    assert_eq!(take(&s).unwrap().ones().collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn agree_on_liveness_matches_failure_schedule() {
    let mut sim = Sim::new(5, spec());
    sim.inject_failure(Rank(1), 0).unwrap();
    sim.inject_failure(Rank(4), 3).unwrap();
    let slots: Vec<_> = (0..5)
        .map(|r| {
            spawn(&mut sim, r, move |ep| async move {
                ep.sleep(5).await;
                let g = ep.comm_shrink().await?;
                ep.comm_agree(g.bitmap(ep.world_size())).await
            })
        })
        .collect();
    sim.run(100);
    let agreed: Vec<usize> = take(&slots[0]).unwrap().ones().collect();
    let truth: Vec<usize> = (0..5).filter(|r| sim.alive(Rank(*r as u32))).collect();
    assert_eq!(agreed, truth);
}

#[test]
fn control_channel() {
    let mut sim = Sim::new(3, real_osc());
    sim.inject_failure(Rank(2), 1).unwrap();
    let a = spawn(&mut sim, 0, |ep| async move {
        let live = ep.ctl_send(Rank(1), CtlMessage::Ping).await;
        ep.sleep(3).await;
        let dead = ep.ctl_send(Rank(2), CtlMessage::Ping).await;
        (live, dead)
    });
    let b = spawn(&mut sim, 1, |ep| async move {
        ep.sleep(2).await;
        ep.ctl_poll()
    });
    sim.run(100);
    assert_eq!(take(&a), (Ok(()), Err(OscError::ProcFailed(Rank(2)))));
    assert_eq!(take(&b), Some(Envelope { from: Rank(0), msg: CtlMessage::Ping }));
}

#[test]
fn message_to_rank_that_dies_before_handling_is_dropped() {
    let mut sim = Sim::new(2, spec());
    sim.inject_failure(Rank(1), 3).unwrap();
    let a = spawn(&mut sim, 0, |ep| async move { ep.ctl_send(Rank(1), CtlMessage::Ping).await });
    let _b = spawn(&mut sim, 1, |ep| async move {
        ep.sleep(10).await;
        ep.ctl_poll()
    });
    sim.run(100);
    assert_eq!(take(&a), Ok(()));
    assert_eq!(_b.borrow().as_ref(), None);
}

#[test]
fn inject_failure_validation() {
    let mut sim = Sim::new(2, spec());
    sim.inject_failure(Rank(1), 100).unwrap();
    assert_eq!(sim.inject_failure(Rank(1), 200), Err(InjectError::DuplicateFailure(Rank(1))));
    assert_eq!(sim.inject_failure(Rank(5), 200), Err(InjectError::UnknownRank(Rank(5))));
    let s = spawn(&mut sim, 1, |ep| async move {
        for _ in 0..200 {
            yield_now().await;
        }
        ep.step()
    });
    sim.run(1000);
    assert!(s.borrow().is_none());
    assert_eq!(sim.died_at(Rank(1)), Some(100));
    assert_eq!(sim.inject_failure(Rank(0), 1), Err(InjectError::PastStep { at: 1, now: sim.step() }));
}

#[test]
fn helper_may_not_issue_one_sided_calls() {
    let mut sim = Sim::new(1, spec());
    let helper = sim.helper_endpoint(Rank(0));
    let out: Slot<TransportResult<()>> = Rc::new(RefCell::new(None));
    let sink = out.clone();
    sim.spawn(Rank(0), TaskKind::Helper, async move {
        *sink.borrow_mut() = Some(helper.put(WindowId(0), Rank(0), 0, &[1]).await);
    });
    sim.run(10);
    assert_eq!(take(&out), Err(OscError::HelperForbidden));
}

#[test]
fn fence_is_unsupported() {
    let mut sim = Sim::new(1, spec());
    let s = with_window(&mut sim, 8, |ep, win| async move { ep.fence(win).await });
    sim.run(10);
    assert_eq!(take(&s[0]), Err(OscError::Unsupported("fence")));
}

/// Windows re-created over a shrunken world from reused buffers keep their
/// bytes.
#[test]
fn recreate_after_shrink_preserves_reused_buffers() {
    let mut sim = Sim::new(4, spec());
    sim.inject_failure(Rank(2), 20).unwrap();
    let slots = with_window(&mut sim, 32, |ep, win| async move {
        let me = ep.rank().0 as u8;
        let buf = ep.local_block(win)?;
        ep.write_buffer(buf, 0, &[me + 1; 32])?;
        let before = ep.read_buffer(buf).unwrap();
        ep.sleep(30).await;
        ep.revoke(win).await?;
        ep.comm_shrink().await?;
        ep.win_free(win).await?;
        let new = ep.win_create(BlockSpec::Reuse(buf)).await?;
        Ok((new, before))
    });
    sim.run(500);
    let (new, before0) = take(&slots[0]).unwrap();
    assert_eq!(sim.window_members(new), vec![Rank(0), Rank(1), Rank(3)]);
    assert_eq!(sim.window_block(new, Rank(0)).unwrap(), before0);
    assert_eq!(sim.window_block(new, Rank(3)).unwrap(), vec![4u8; 32]);
}

/// A barrier participant stays in step with peers that went on to shrink.
#[test]
fn failed_barrier_lines_up_with_shrink() {
    let mut sim = Sim::new(3, spec());
    sim.inject_failure(Rank(2), 4).unwrap();
    let slots: Vec<_> = (0..3)
        .map(|r| {
            spawn(&mut sim, r, move |ep| async move {
                if r == 0 {
                    if let Err(e) = ep.barrier().await {
                        assert_eq!(e, OscError::ProcFailed(Rank(2)));
                    }
                } else {
                    ep.sleep(10).await;
                }
                ep.comm_shrink().await
            })
        })
        .collect();
    assert!(matches!(sim.run(200), RunOutcome::Completed { .. }));
    assert_eq!(take(&slots[0]).unwrap(), take(&slots[1]).unwrap());
}

#[test]
fn identical_runs_produce_identical_traces() {
    let run = || {
        let mut sim = Sim::new(3, spec());
        sim.inject_failure(Rank(2), 9).unwrap();
        let _ = with_window(&mut sim, 32, |ep, win| async move {
            ep.lock_all(win, Assertion::NoCheck).await?;
            for t in 0..3 {
                ep.put(win, Rank(t), 0, &[ep.rank().0 as u8]).await?;
                let _ = ep.flush(win, Rank(t)).await;
            }
            Ok(())
        });
        sim.run(1000);
        let t = sim.trace().to_jsonl();
        t
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

proptest! {
    /// After a flush, the target block equals the issue-order application
    /// of the origin's puts.
    #[test]
    fn flush_matches_sequential_application(
        ops in prop::collection::vec((0usize..24, prop::collection::vec(any::<u8>(), 0..8)), 1..12)
    ) {
        let mut expected = vec![0u8; 32];
        for (off, data) in &ops {
            expected[*off..off + data.len()].copy_from_slice(data);
        }
        let mut sim = Sim::new(2, spec());
        let o = ops.clone();
        let _ = with_window(&mut sim, 32, move |ep, win| {
            let o = o.clone();
            async move {
                if ep.rank() == Rank(0) {
                    ep.lock(win, Rank(1), LockMode::Exclusive, Assertion::None).await?;
                    for (off, data) in &o {
                        ep.put(win, Rank(1), *off, data).await?;
                    }
                    ep.flush(win, Rank(1)).await?;
                    ep.unlock(win, Rank(1)).await?;
                }
                Ok(())
            }
        });
        sim.run(1000);
        let win = sim.window_ids()[0];
        prop_assert_eq!(sim.window_block(win, Rank(1)).unwrap(), expected);
    }

    #[test]
    fn shrink_translation_is_order_preserving_bijection(dead in prop::collection::btree_set(0u32..8, 0..7)) {
        let g = WorldGeneration::new(1, (0..8).map(Rank).filter(|r| !dead.contains(&r.0)).collect());
        let mut prev = None;
        for (i, r) in g.live_ranks.iter().enumerate() {
            prop_assert_eq!(g.translate(*r), Some(i as u32));
            prop_assert_eq!(g.rank_at(i as u32), Some(*r));
            if let Some(p) = prev {
                prop_assert!(p < *r);
            }
            prev = Some(*r);
        }
        for d in &dead {
            prop_assert_eq!(g.translate(Rank(*d)), None);
        }
    }
}
