//! A replicated in-memory key-value store over a simulated one-sided
//! communication layer, with failure detection, shrink-and-rebuild recovery,
//! a two-phase-commit transaction mode and a compare-and-swap lock variant.

pub mod cas_lock;
pub mod detector;
pub mod harness;
pub mod placement;
pub mod recovery;
pub mod store;
pub mod transport;
pub mod txn;
