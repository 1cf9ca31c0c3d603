//! Which blocks of which windows hold each key, per world generation.
//!
//! Every rank computes the same layout from the same inputs, so layouts
//! never have to be exchanged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::placement::{copies_in, plan_from_sources, Key, PlacementConfig, ReplacementPlan};
use crate::transport::{Rank, WindowId, WorldGeneration};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLayout {
    /// Copy holders, master first. Window `j` belongs to copy `j`.
    pub holders: Vec<Rank>,
    pub windows: Vec<WindowId>,
    /// Blocks known to hold a valid value, as (rank, window index), most
    /// authoritative first. Equal to the holders once a restore finished.
    pub sources: Vec<(Rank, usize)>,
    /// No valid copy survived the last shrink.
    pub data_loss: bool,
}

impl KeyLayout {
    /// Every block whose contents matter: holders and remaining sources.
    pub fn data_blocks(&self) -> Vec<(usize, Rank)> {
        let mut blocks: Vec<(usize, Rank)> = self.holders.iter().copied().enumerate().collect();
        for &(r, j) in &self.sources {
            if !blocks.contains(&(j, r)) {
                blocks.push((j, r));
            }
        }
        blocks
    }

    fn holder_sources(&self) -> Vec<(Rank, usize)> {
        self.holders.iter().enumerate().map(|(j, h)| (*h, j)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub generation: WorldGeneration,
    pub keys: BTreeMap<Key, KeyLayout>,
    /// This rank knows that every key's holders carry the winning value.
    pub restored: bool,
}

/// Where a surviving source block goes in the next layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Origin {
    pub rank: Rank,
    /// Window index of the block in the previous layout.
    pub old: usize,
    /// Window index it is exposed in afterwards.
    pub new: usize,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub layout: Layout,
    pub plan: ReplacementPlan,
    pub origins: BTreeMap<Key, Vec<Origin>>,
}

impl Transition {
    /// Role of `me` in window `j` of `key`.
    pub fn role(&self, key: Key, j: usize, me: Rank) -> BlockRole {
        let kl = &self.layout.keys[&key];
        let mine = self.origins.get(&key).and_then(|o| o.iter().find(|o| o.rank == me));
        match (kl.holders.get(j) == Some(&me), mine) {
            (true, Some(o)) => BlockRole::ReuseHolder { old: o.old },
            (true, None) => BlockRole::FreshHolder,
            (false, Some(o)) if o.new == j => BlockRole::KeepSource { old: o.old },
            _ => BlockRole::Placeholder,
        }
    }
}

/// What one rank contributes to a window during (re)creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    /// Holder block with no prior data: fresh zeroed holder capacity.
    FreshHolder,
    /// Holder block reusing this rank's surviving copy from window `old`.
    ReuseHolder { old: usize },
    /// Non-holder block that keeps a surviving copy from window `old`.
    KeepSource { old: usize },
    Placeholder,
}

impl Layout {
    pub fn initial(cfg: &PlacementConfig) -> Self {
        let generation = WorldGeneration::new(0, (0..cfg.world_size as u32).map(Rank).collect());
        let keys = cfg
            .keys()
            .map(|k| {
                let holders = copies_in(k, &generation, cfg.replica_count).unwrap_or_default();
                let sources = holders.iter().enumerate().map(|(j, h)| (*h, j)).collect();
                (k, KeyLayout { holders, windows: Vec::new(), sources, data_loss: false })
            })
            .collect();
        Self { generation, keys, restored: true }
    }

    /// Layout of the next generation. `restored` says whether the current
    /// holders are known to carry the winning values; otherwise the current
    /// sources stay authoritative.
    pub fn next(
        &self,
        lost: &BTreeSet<Rank>,
        new_gen: &WorldGeneration,
        restored: bool,
        replicas: usize,
    ) -> Transition {
        let old_sources: BTreeMap<Key, Vec<(Rank, usize)>> = self
            .keys
            .iter()
            .map(|(k, kl)| {
                let s = if restored { kl.holder_sources() } else { kl.sources.clone() };
                (*k, s.into_iter().filter(|(r, _)| !lost.contains(r)).collect())
            })
            .collect();
        let ranks_only: BTreeMap<Key, Vec<Rank>> =
            old_sources.iter().map(|(k, s)| (*k, s.iter().map(|(r, _)| *r).collect())).collect();
        let plan = plan_from_sources(&ranks_only, lost, new_gen, replicas);
        let mut keys = BTreeMap::new();
        let mut origins = BTreeMap::new();
        for (k, surviving) in old_sources {
            if plan.dropped.contains(&k) || plan.unplaceable.contains(&k) {
                continue;
            }
            // a key without surviving copies may not fit the new world either
            let Some(holders) = copies_in(k, new_gen, replicas) else {
                continue;
            };
            let n = holders.len();
            let moved: Vec<Origin> = surviving
                .iter()
                .map(|&(rank, old)| {
                    let new = holders.iter().position(|h| *h == rank).unwrap_or(old.min(n - 1));
                    Origin { rank, old, new }
                })
                .collect();
            let sources = moved.iter().map(|o| (o.rank, o.new)).collect::<Vec<_>>();
            let data_loss = sources.is_empty();
            keys.insert(k, KeyLayout { holders, windows: Vec::new(), sources, data_loss });
            origins.insert(k, moved);
        }
        let layout = Layout { generation: new_gen.clone(), keys, restored: false };
        Transition { layout, plan, origins }
    }

    /// Marks holders as the only valid sources (after a completed restore).
    pub fn mark_restored(&mut self) {
        for kl in self.keys.values_mut() {
            kl.sources = kl.holder_sources();
        }
        self.restored = true;
    }

    pub fn windows(&self) -> Vec<WindowId> {
        self.keys.values().flat_map(|kl| kl.windows.iter().copied()).collect()
    }
}
