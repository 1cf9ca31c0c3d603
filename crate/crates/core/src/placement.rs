//! Where each key's copies live, before and after a shrink.
//!
//! Copies are computed in the rank numbering of a [`WorldGeneration`] and
//! then mapped back to original ranks, so the same rule serves the initial
//! world and every shrunken one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::transport::{Rank, WorldGeneration};

/// A store key: the rank that owns it and a slot number below
/// `slots_per_owner`. Written as `"owner:slot"` in text formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub owner: Rank,
    pub slot: u32,
}

impl Key {
    pub fn new(owner: u32, slot: u32) -> Self {
        Self { owner: Rank(owner), slot }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.owner.0, self.slot)
    }
}

impl Serialize for Key {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("key {s:?} is not of the form owner:slot");
        let (o, sl) = s.split_once(':').ok_or_else(bad)?;
        Ok(Key::new(o.trim().parse().map_err(|_| bad())?, sl.trim().parse().map_err(|_| bad())?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub world_size: usize,
    pub replica_count: usize,
    #[serde(default = "one_slot")]
    pub slots_per_owner: u32,
}

fn one_slot() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("{replicas} replicas need at least {} processes, world has {world_size}", replicas + 2)]
    InsufficientWorld { world_size: usize, replicas: usize },
    #[error("key {0} is outside the key universe")]
    UnknownKey(Key),
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.world_size < self.replica_count + 2 {
            return Err(PlacementError::InsufficientWorld {
                world_size: self.world_size,
                replicas: self.replica_count,
            });
        }
        Ok(())
    }

    /// Every key, ordered by (owner, slot).
    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        (0..self.world_size as u32).flat_map(move |o| (0..self.slots_per_owner).map(move |s| Key::new(o, s)))
    }

    pub fn contains(&self, key: Key) -> bool {
        key.owner.index() < self.world_size && key.slot < self.slots_per_owner
    }

    /// Number of windows the store creates: one per key copy.
    pub fn window_count(&self) -> usize {
        self.world_size * self.slots_per_owner as usize * (self.replica_count + 1)
    }
}

/// Replica count usable in a world of `world_size` processes. Shrinking
/// below `R + 2` processes keeps as many replicas as still fit; a lone
/// survivor can hold no remote copy at all.
pub fn effective_replicas(world_size: usize, replicas: usize) -> Option<usize> {
    (world_size >= 2).then(|| replicas.min(world_size - 2))
}

/// Copy holders of a key owned by `owner`, as positions in a world of `p`
/// processes: master first, then `r` replicas spread by a fixed stride.
pub fn copy_positions(owner: usize, p: usize, r: usize) -> Vec<usize> {
    debug_assert!(p >= r + 2 && owner < p);
    let stride = (p / (r + 1)).max(1);
    let mut chosen = Vec::with_capacity(r + 1);
    chosen.push((owner + 1) % p);
    for i in 1..=r {
        let mut c = (owner + 1 + i * stride) % p;
        while c == owner || chosen.contains(&c) {
            c = (c + 1) % p;
        }
        chosen.push(c);
    }
    chosen
}

/// Copy holders of `key` in the initial world, master first.
pub fn copies_of(key: Key, cfg: &PlacementConfig) -> Result<Vec<Rank>, PlacementError> {
    cfg.validate()?;
    if !cfg.contains(key) {
        return Err(PlacementError::UnknownKey(key));
    }
    Ok(copy_positions(key.owner.index(), cfg.world_size, cfg.replica_count)
        .into_iter()
        .map(|i| Rank(i as u32))
        .collect())
}

/// Copy holders of `key` within `generation`, in original ranks. `None`
/// when the owner is not a member or the generation is too small.
pub fn copies_in(key: Key, generation: &WorldGeneration, replicas: usize) -> Option<Vec<Rank>> {
    let owner = generation.translate(key.owner)? as usize;
    let r = effective_replicas(generation.size(), replicas)?;
    Some(
        copy_positions(owner, generation.size(), r)
            .into_iter()
            .map(|i| generation.rank_at(i as u32).expect("position within generation"))
            .collect(),
    )
}

/// Writing one copy of a key during restore.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Move {
    pub key: Key,
    /// Copy index in the new placement.
    pub copy: usize,
    pub source: Rank,
    pub destination: Rank,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub moves: Vec<Move>,
    /// Keys none of whose copies survived.
    pub data_loss: Vec<Key>,
    /// Keys whose owner is gone; they are not carried into the new world.
    pub dropped: Vec<Key>,
    /// Keys of surviving owners that cannot be placed in the new world.
    pub unplaceable: Vec<Key>,
}

/// Plan for a general source map: `sources[key]` lists the ranks holding a
/// valid copy, in priority order. The first surviving source is the one
/// copied from.
pub fn plan_from_sources(
    sources: &BTreeMap<Key, Vec<Rank>>,
    lost: &BTreeSet<Rank>,
    new_gen: &WorldGeneration,
    replicas: usize,
) -> ReplacementPlan {
    let mut plan = ReplacementPlan::default();
    for (&key, holders) in sources {
        if lost.contains(&key.owner) || !new_gen.contains(key.owner) {
            plan.dropped.push(key);
            continue;
        }
        let surviving: Vec<Rank> = holders.iter().copied().filter(|h| !lost.contains(h)).collect();
        let Some(&winner) = surviving.first() else {
            plan.data_loss.push(key);
            continue;
        };
        let Some(new_copies) = copies_in(key, new_gen, replicas) else {
            plan.unplaceable.push(key);
            continue;
        };
        for (copy, destination) in new_copies.into_iter().enumerate() {
            if !surviving.contains(&destination) {
                plan.moves.push(Move { key, copy, source: winner, destination });
            }
        }
    }
    plan
}

/// Plan after losing `lost`, starting from the placement of `old_gen`.
pub fn replacement_plan(
    lost: &BTreeSet<Rank>,
    old_gen: &WorldGeneration,
    new_gen: &WorldGeneration,
    cfg: &PlacementConfig,
) -> ReplacementPlan {
    let sources: BTreeMap<Key, Vec<Rank>> = cfg
        .keys()
        .filter(|k| old_gen.contains(k.owner))
        .map(|k| (k, copies_in(k, old_gen, cfg.replica_count).unwrap_or_default()))
        .collect();
    plan_from_sources(&sources, lost, new_gen, cfg.replica_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(p: usize, r: usize, slots: u32) -> PlacementConfig {
        PlacementConfig { world_size: p, replica_count: r, slots_per_owner: slots }
    }

    fn gen_without(id: u64, p: u32, dead: &[u32]) -> WorldGeneration {
        WorldGeneration::new(id, (0..p).filter(|r| !dead.contains(r)).map(Rank).collect())
    }

    #[test]
    fn stride_example() {
        // stride = 8 / 3 = 2: master 4, then 3+1+2 = 6, then 3+1+4 = 8 -> 0
        let got = copies_of(Key::new(3, 0), &cfg(8, 2, 1)).unwrap();
        assert_eq!(got, vec![Rank(4), Rank(6), Rank(0)]);
    }

    #[test]
    fn too_small_world() {
        assert_eq!(
            copies_of(Key::new(0, 0), &cfg(3, 2, 1)),
            Err(PlacementError::InsufficientWorld { world_size: 3, replicas: 2 })
        );
    }

    #[test]
    fn smallest_world() {
        assert_eq!(copies_of(Key::new(0, 0), &cfg(2, 0, 1)).unwrap(), vec![Rank(1)]);
    }

    #[test]
    fn collisions_advance_linearly() {
        // P=4, R=2: stride 1. owner 2 -> master 3, then 2+1+1=4->0, 2+1+2=5->1.
        assert_eq!(copy_positions(2, 4, 2), vec![3, 0, 1]);
        // P=5, R=3: stride 1. owner 4 -> 0, 1, 2, 3.
        assert_eq!(copy_positions(4, 5, 3), vec![0, 1, 2, 3]);
        // P=7, R=2: stride 2. owner 5 -> 6, 5+1+2=8->1, 5+1+4=10->3.
        assert_eq!(copy_positions(5, 7, 2), vec![6, 1, 3]);
    }

    /// Brute-force check of every owner for a spread of legal configurations.
    #[test]
    fn copies_are_distinct_and_remote() {
        for p in 2..=41 {
            for r in 0..=p - 2 {
                for owner in 0..p {
                    let c = copy_positions(owner, p, r);
                    assert_eq!(c.len(), r + 1);
                    assert!(!c.contains(&owner));
                    let set: BTreeSet<_> = c.iter().collect();
                    assert_eq!(set.len(), r + 1, "p={p} r={r} owner={owner}");
                    assert_eq!(c[0], (owner + 1) % p);
                }
            }
        }
    }

    #[test]
    fn spread_is_balanced() {
        for p in 2..=41 {
            for r in 0..=(p - 2).min(6) {
                let mut load = vec![0usize; p];
                for owner in 0..p {
                    for c in copy_positions(owner, p, r) {
                        load[c] += 1;
                    }
                }
                let (lo, hi) = (load.iter().min().unwrap(), load.iter().max().unwrap());
                assert!(hi - lo <= r + 1, "p={p} r={r} load={load:?}");
            }
        }
    }

    #[test]
    fn no_loss_no_moves() {
        let g = gen_without(0, 6, &[]);
        let plan = replacement_plan(&BTreeSet::new(), &g, &g, &cfg(6, 2, 2));
        assert_eq!(plan, ReplacementPlan::default());
    }

    #[test]
    fn plan_restores_full_copy_count() {
        let c = cfg(4, 1, 1);
        let old = gen_without(0, 4, &[]);
        // some rank that holds a replica
        let lost_rank = (0..4u32)
            .find(|r| {
                c.keys().any(|k| copies_of(k, &c).unwrap()[1] == Rank(*r))
            })
            .unwrap();
        let lost = BTreeSet::from([Rank(lost_rank)]);
        let new = gen_without(1, 4, &[lost_rank]);
        let plan = replacement_plan(&lost, &old, &new, &c);
        assert_eq!(plan.dropped, vec![Key::new(lost_rank, 0)]);
        assert!(plan.data_loss.is_empty());
        for k in c.keys().filter(|k| k.owner.0 != lost_rank) {
            let survivors: Vec<Rank> =
                copies_of(k, &c).unwrap().into_iter().filter(|h| !lost.contains(h)).collect();
            let new_copies = copies_in(k, &new, 1).unwrap();
            let in_place = new_copies.iter().filter(|d| survivors.contains(d)).count();
            let moved = plan.moves.iter().filter(|m| m.key == k).count();
            assert_eq!(in_place + moved, 2, "key {k}");
            for m in plan.moves.iter().filter(|m| m.key == k) {
                assert_eq!(m.source, survivors[0]);
                assert_eq!(new_copies[m.copy], m.destination);
            }
        }
    }

    #[test]
    fn losing_every_copy_is_data_loss() {
        let c = cfg(5, 1, 1);
        let old = gen_without(0, 5, &[]);
        let k = Key::new(0, 0);
        let holders = copies_of(k, &c).unwrap();
        let lost: BTreeSet<Rank> = holders.iter().copied().collect();
        let dead: Vec<u32> = holders.iter().map(|r| r.0).collect();
        let new = gen_without(1, 5, &dead);
        let plan = replacement_plan(&lost, &old, &new, &c);
        assert!(plan.data_loss.contains(&k));
        assert!(!plan.moves.iter().any(|m| m.key == k));
    }

    #[test]
    fn tiny_worlds_clamp_replicas() {
        assert_eq!(effective_replicas(1, 2), None);
        assert_eq!(effective_replicas(3, 2), Some(1));
        assert_eq!(effective_replicas(9, 2), Some(2));
    }

    proptest! {
        #[test]
        fn replacement_closure(p in 4usize..12, r in 0usize..3, dead in prop::collection::btree_set(0u32..12, 0..3)) {
            prop_assume!(p >= r + 2);
            let dead: BTreeSet<u32> = dead.into_iter().filter(|d| (*d as usize) < p).collect();
            let c = cfg(p, r, 2);
            let old = gen_without(0, p as u32, &[]);
            let dead_v: Vec<u32> = dead.iter().copied().collect();
            let new = gen_without(1, p as u32, &dead_v);
            let lost: BTreeSet<Rank> = dead.iter().map(|d| Rank(*d)).collect();
            let plan = replacement_plan(&lost, &old, &new, &c);
            let r_eff = effective_replicas(new.size(), r);
            for k in c.keys() {
                let survivors: Vec<Rank> = copies_of(k, &c).unwrap().into_iter().filter(|h| !lost.contains(h)).collect();
                if lost.contains(&k.owner) {
                    prop_assert!(plan.dropped.contains(&k));
                } else if survivors.is_empty() {
                    prop_assert!(plan.data_loss.contains(&k));
                } else if let Some(r_eff) = r_eff {
                    let new_copies = copies_in(k, &new, r).unwrap();
                    prop_assert_eq!(new_copies.len(), r_eff + 1);
                    let mut restored: BTreeSet<Rank> = new_copies.iter().copied().filter(|d| survivors.contains(d)).collect();
                    for m in plan.moves.iter().filter(|m| m.key == k) {
                        prop_assert!(survivors.contains(&m.source));
                        prop_assert!(restored.insert(m.destination));
                    }
                    prop_assert_eq!(restored.len(), r_eff + 1);
                    prop_assert!(!restored.contains(&k.owner));
                }
            }
        }
    }
}
