//! Final-state audit: one record per key with every copy's header and
//! payload digest, read straight from the simulated memory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::placement::Key;
use crate::store::{Layout, StoreConfig};
use crate::transport::{Sim, HEADER_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Present,
    /// The owner was lost; the key left the store.
    Dropped,
    /// No copy survived.
    DataLoss,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyAudit {
    pub rank: u32,
    pub header: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub key: Key,
    pub status: KeyStatus,
    pub copies: Vec<CopyAudit>,
    /// Master copy's header (value size).
    pub header: u64,
    /// SHA-256 of the master copy's payload, hex.
    pub digest: String,
    pub consistent: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    pub records: Vec<AuditRecord>,
    /// Master payload per present key; `None` = empty.
    pub values: BTreeMap<Key, Option<Vec<u8>>>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits a holder block into (header, payload). A block too short for its
/// header yields the whole tail it has.
fn decode(block: &[u8], value_offset: usize) -> (u64, Vec<u8>) {
    if block.len() < HEADER_BYTES {
        return (0, Vec::new());
    }
    let header = u64::from_le_bytes(block[..HEADER_BYTES].try_into().expect("8 bytes"));
    let start = value_offset.min(block.len());
    let end = (value_offset + header as usize).min(block.len());
    (header, block[start..end].to_vec())
}

impl Audit {
    /// Audits `layout` against the memory of `sim`. Keys of `cfg` missing
    /// from the layout are reported as dropped.
    pub fn take(sim: &Sim, layout: &Layout, cfg: &StoreConfig) -> Self {
        let mut audit = Audit::default();
        for key in cfg.placement.keys() {
            let Some(kl) = layout.keys.get(&key) else {
                audit.records.push(AuditRecord {
                    key,
                    status: KeyStatus::Dropped,
                    copies: Vec::new(),
                    header: 0,
                    digest: digest(&[]),
                    consistent: true,
                });
                continue;
            };
            let mut copies = Vec::new();
            let mut payloads = Vec::new();
            for (j, holder) in kl.holders.iter().enumerate() {
                let block = kl.windows.get(j).and_then(|w| sim.window_block(*w, *holder)).unwrap_or_default();
                let (header, payload) = decode(&block, cfg.value_offset());
                copies.push(CopyAudit { rank: holder.0, header, digest: digest(&payload) });
                payloads.push((header, payload));
            }
            let consistent = payloads.windows(2).all(|w| w[0] == w[1]);
            let (header, payload) = payloads.first().cloned().unwrap_or_default();
            let status = if kl.data_loss { KeyStatus::DataLoss } else { KeyStatus::Present };
            if status == KeyStatus::Present {
                audit.values.insert(key, (header > 0).then(|| payload.clone()));
            }
            audit.records.push(AuditRecord { key, status, copies, header, digest: digest(&payload), consistent });
        }
        audit
    }

    pub fn consistent(&self) -> bool {
        self.records.iter().all(|r| r.consistent)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("audit record serializes"));
            out.push('\n');
        }
        out
    }
}
