//! Put latency under the deterministic cost model.
//!
//! Rank 0 writes one value per (replica count, size) pair and the cost its
//! process accumulates during the put is reported. Blocks start large enough
//! for the value and a warm-up put runs first, so neither enlargement nor
//! first-touch effects enter the measurement.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::placement::{Key, PlacementConfig};
use crate::store::{spawn_process, StoreConfig};
use crate::transport::{format_cost, Cost, CostModel, Fidelity, Rank, RunOutcome, Sim, TransportConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    #[default]
    Normal,
    Cas,
}

impl std::str::FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(BenchMode::Normal),
            "cas" => Ok(BenchMode::Cas),
            other => Err(format!("unknown mode {other:?} (expected normal or cas)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub replicas: Vec<usize>,
    pub mode: BenchMode,
    pub ping: bool,
    pub cost: CostModel,
    /// Measured puts per cell; all must cost the same.
    pub reps: usize,
    pub fidelity: Fidelity,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0, 64, 1024, 4096],
            replicas: vec![0, 1, 2, 4, 6],
            mode: BenchMode::Normal,
            ping: true,
            cost: CostModel::default(),
            reps: 3,
            fidelity: Fidelity::Spec,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub ping: bool,
    pub replicas: usize,
    pub world_size: usize,
    pub size: usize,
    /// Cost of each measured put.
    pub samples: Vec<Cost>,
}

impl BenchRow {
    pub fn latency(&self) -> Cost {
        self.samples[0]
    }

    /// Every sample costs the same.
    pub fn stable(&self) -> bool {
        self.samples.windows(2).all(|w| w[0] == w[1])
    }
}

fn measure(cfg: &BenchConfig, replicas: usize, size: usize) -> BenchRow {
    let p = replicas + 2;
    let store_cfg = StoreConfig {
        placement: PlacementConfig { world_size: p, replica_count: replicas, slots_per_owner: 1 },
        ping_enabled: cfg.ping,
        cas_mode: cfg.mode == BenchMode::Cas,
        fidelity: cfg.fidelity,
        seed: cfg.seed,
        // without the helper blocks cannot grow, so size them up front
        initial_capacity: (size + crate::transport::HEADER_BYTES).max(StoreConfig::default().initial_capacity),
        ..StoreConfig::default()
    };
    let mut sim = Sim::new(p, TransportConfig { fidelity: cfg.fidelity, cost: cfg.cost.clone(), record_trace: false, ..TransportConfig::default() });
    let samples: Rc<RefCell<Vec<Cost>>> = Rc::default();
    let reps = cfg.reps.max(1);
    for r in 0..p as u32 {
        let samples = samples.clone();
        spawn_process(&mut sim, Rank(r), store_cfg.clone(), move |store| async move {
            let store = store.expect("bench store initializes");
            if r == 0 {
                let key = Key::new(0, 0);
                let value = vec![0xA5u8; size];
                store.put(key, &value).await.expect("warm-up put");
                for _ in 0..reps {
                    let before = store.ep().cost();
                    store.put(key, &value).await.expect("measured put");
                    samples.borrow_mut().push(store.ep().cost() - before);
                }
            }
        });
    }
    let out = sim.run(1_000_000);
    assert!(matches!(out, RunOutcome::Completed { .. }), "bench run stopped: {out:?}");
    let samples = samples.borrow().clone();
    BenchRow { mode: cfg.mode, ping: cfg.ping, replicas, world_size: p, size, samples }
}

/// One row per (replica count, size), replica counts outermost.
pub fn bench_put(cfg: &BenchConfig) -> Vec<BenchRow> {
    cfg.replicas.iter().flat_map(|&r| cfg.sizes.iter().map(move |&s| (r, s))).map(|(r, s)| measure(cfg, r, s)).collect()
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mode,ping,replicas,world_size,size,latency\n");
    for r in rows {
        let mode = match r.mode {
            BenchMode::Normal => "normal",
            BenchMode::Cas => "cas",
        };
        let ping = if r.ping { "on" } else { "off" };
        writeln!(out, "{mode},{ping},{},{},{},{}", r.replicas, r.world_size, r.size, format_cost(&r.latency()))
            .expect("writing to a String cannot fail");
    }
    out
}
