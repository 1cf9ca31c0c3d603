//! Shared setup for the store-level integration tests.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::future::Future;
use std::rc::Rc;

use osckv::placement::{Key, PlacementConfig};
use osckv::store::{spawn_process, Layout, Store, StoreConfig};
use osckv::transport::{Fidelity, Rank, RunOutcome, Sim, TransportConfig};

pub fn cfg(p: usize, r: usize) -> StoreConfig {
    StoreConfig {
        placement: PlacementConfig { world_size: p, replica_count: r, slots_per_owner: 1 },
        ..StoreConfig::default()
    }
}

pub fn cas_cfg(p: usize, r: usize) -> StoreConfig {
    StoreConfig { cas_mode: true, ..cfg(p, r) }
}

/// What each rank's body returned, by rank.
pub type Results<T> = Rc<RefCell<BTreeMap<u32, T>>>;

pub struct Run<T> {
    pub sim: Sim,
    pub outcome: RunOutcome,
    pub results: BTreeMap<u32, T>,
}

impl<T> Run<T> {
    pub fn completed(&self) -> bool {
        matches!(self.outcome, RunOutcome::Completed { .. })
    }
}

/// Runs `body` on every rank with a fresh store. Kills are (rank, step).
pub fn run<T, F, Fut>(cfg: StoreConfig, kills: &[(u32, u64)], body: F) -> Run<T>
where
    T: 'static,
    F: Fn(Store) -> Fut + Clone + 'static,
    Fut: Future<Output = T> + 'static,
{
    let p = cfg.placement.world_size;
    let transport = TransportConfig { fidelity: cfg.fidelity, ..TransportConfig::default() };
    let mut sim = Sim::new(p, transport);
    let results: Results<T> = Rc::default();
    for r in 0..p as u32 {
        let (body, sink) = (body.clone(), results.clone());
        spawn_process(&mut sim, Rank(r), cfg.clone(), move |s| async move {
            let out = body(s.expect("store init")).await;
            sink.borrow_mut().insert(r, out);
        });
    }
    for &(r, at) in kills {
        sim.inject_failure(Rank(r), at).unwrap();
    }
    let outcome = sim.run(200_000);
    let results = std::mem::take(&mut *results.borrow_mut());
    Run { sim, outcome, results }
}

/// Idles until the world step reaches `step`.
pub async fn wait_until(s: &Store, step: u64) {
    let now = s.ep().step();
    if now < step {
        s.ep().sleep(step - now).await;
    }
}

/// (header, payload) of every copy of `key`.
pub fn copies(sim: &Sim, layout: &Layout, key: Key, value_offset: usize) -> Vec<(u64, Vec<u8>)> {
    let kl = &layout.keys[&key];
    kl.holders
        .iter()
        .zip(&kl.windows)
        .map(|(h, w)| {
            let b = sim.window_block(*w, *h).expect("live block");
            let n = u64::from_le_bytes(b[..8].try_into().unwrap());
            (n, b[value_offset..value_offset + n as usize].to_vec())
        })
        .collect()
}

pub fn real_osc(mut c: StoreConfig) -> StoreConfig {
    c.fidelity = Fidelity::RealOsc;
    c
}
