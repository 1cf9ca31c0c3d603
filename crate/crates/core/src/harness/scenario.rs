//! Scenario files: a store configuration, a per-rank action schedule with
//! failure injection, and the assertions a run must satisfy.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::placement::Key;
use crate::store::StoreConfig;
use crate::transport::{Rank, TransportConfig};
use crate::txn::TxnOp;

pub const SCHEMA: &str = "osckv.scenario.v1";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema {found:?} (expected {SCHEMA:?})")]
    Schema { found: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    pub config: StoreConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// Re-run an action a failure interrupted, once recovery finished.
    #[serde(default = "yes")]
    pub retry_interrupted: bool,
    #[serde(default)]
    pub schedule: Vec<Scheduled>,
    #[serde(default)]
    pub expect: Expect,
}

fn default_max_steps() -> u64 {
    2_000_000
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheduled {
    /// Earliest step at which the action starts (kills: the exact step).
    pub step: u64,
    /// Issuing rank; not used by `kill`.
    #[serde(default)]
    pub rank: Option<u32>,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Action {
    Put {
        key: Key,
        /// UTF-8 value; alternatively `size` pseudo-random bytes.
        #[serde(default)]
        value: Option<String>,
        #[serde(default)]
        size: Option<usize>,
    },
    Get {
        key: Key,
    },
    Delete {
        key: Key,
    },
    Txn {
        ops: Vec<ScenarioOp>,
    },
    Kill(u32),
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Put { .. } => "put",
            Action::Get { .. } => "get",
            Action::Delete { .. } => "delete",
            Action::Txn { .. } => "txn",
            Action::Kill(_) => "kill",
        }
    }

    pub fn key(&self) -> Option<Key> {
        match self {
            Action::Put { key, .. } | Action::Get { key } | Action::Delete { key } => Some(*key),
            Action::Txn { .. } | Action::Kill(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ScenarioOp {
    Read(Key),
    Write { key: Key, value: String },
    Delete(Key),
    /// `expect: null` guards on an empty entry.
    Guard { key: Key, expect: Option<String> },
}

impl ScenarioOp {
    pub fn to_txn_op(&self) -> TxnOp {
        match self {
            ScenarioOp::Read(k) => TxnOp::Read(*k),
            ScenarioOp::Write { key, value } => TxnOp::Write(*key, value.as_bytes().to_vec()),
            ScenarioOp::Delete(k) => TxnOp::Delete(*k),
            ScenarioOp::Guard { key, expect } => TxnOp::Guard(*key, expect.as_ref().map(|v| v.as_bytes().to_vec())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Every audited key has identical copies (default true).
    #[serde(default)]
    pub consistent: Option<bool>,
    /// Final value per key; `null` = empty.
    #[serde(default)]
    pub values: BTreeMap<Key, Option<String>>,
    /// Exact hang counts. Without this, any hang fails the run.
    #[serde(default)]
    pub hangs: Option<ExpectHangs>,
    /// Ranks lost over the whole run.
    #[serde(default)]
    pub lost: Option<Vec<u32>>,
    /// Action errors the store could not recover from are tolerated.
    #[serde(default)]
    pub allow_errors: bool,
    /// `completed` (default) or `deadlock`.
    #[serde(default)]
    pub outcome: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectHangs {
    pub expected: u64,
    pub unexpected: u64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.schema != SCHEMA {
            return Err(ScenarioError::Schema { found: self.schema.clone() });
        }
        self.config.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let p = self.config.placement.world_size as u32;
        let mut last: BTreeMap<u32, u64> = BTreeMap::new();
        let mut killed = BTreeSet::new();
        for (i, s) in self.schedule.iter().enumerate() {
            if let Action::Kill(r) = s.action {
                if r >= p {
                    return bad(format!("entry {i}: kill of unknown rank {r}"));
                }
                if !killed.insert(r) {
                    return bad(format!("entry {i}: rank {r} is killed twice"));
                }
                continue;
            }
            let Some(rank) = s.rank else {
                return bad(format!("entry {i}: {} needs a rank", s.action.name()));
            };
            if rank >= p {
                return bad(format!("entry {i}: unknown rank {rank}"));
            }
            if let Some(prev) = last.insert(rank, s.step) {
                if s.step <= prev {
                    return bad(format!("entry {i}: steps of rank {rank} must increase"));
                }
            }
            let keys: Vec<Key> = match &s.action {
                Action::Txn { ops } => ops.iter().map(|o| o.to_txn_op().key()).collect(),
                a => a.key().into_iter().collect(),
            };
            for k in keys {
                if !self.config.placement.contains(k) {
                    return bad(format!("entry {i}: key {k} is outside the key universe"));
                }
            }
            match &s.action {
                Action::Put { value, size, .. } if value.is_some() == size.is_some() => {
                    return bad(format!("entry {i}: put needs exactly one of value and size"));
                }
                Action::Put { key, .. } | Action::Delete { key } if !self.config.cas_mode && key.owner.0 != rank => {
                    return bad(format!("entry {i}: rank {rank} is not the writer of {key}"));
                }
                Action::Txn { .. } if !self.config.cas_mode => {
                    return bad(format!("entry {i}: transactions need CAS mode or transaction mode"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Schedule entries of one rank, in order.
    pub fn actions_of(&self, rank: Rank) -> Vec<(u64, Action)> {
        self.schedule
            .iter()
            .filter(|s| s.rank == Some(rank.0) && !matches!(s.action, Action::Kill(_)))
            .map(|s| (s.step, s.action.clone()))
            .collect()
    }

    pub fn kills(&self) -> Vec<(Rank, u64)> {
        self.schedule
            .iter()
            .filter_map(|s| match s.action {
                Action::Kill(r) => Some((Rank(r), s.step)),
                _ => None,
            })
            .collect()
    }
}

/// The bytes a `put` stores. Sized puts draw from a stream keyed by the
/// scenario seed, the rank and the step, so reruns reproduce them.
pub fn put_value(seed: u64, rank: Rank, step: u64, value: &Option<String>, size: Option<usize>) -> Vec<u8> {
    match (value, size) {
        (Some(v), _) => v.as_bytes().to_vec(),
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(rank.0) << 40) ^ step.rotate_left(17));
            let mut bytes = vec![0u8; n];
            rng.fill_bytes(&mut bytes);
            bytes
        }
        (None, None) => Vec::new(),
    }
}
