//! The osckv book. Each chapter is pulled in as the docs of an empty module
//! so `cargo test --doc` runs every code sample in it.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/placement.md")]
pub mod placement {}
#[doc = include_str!("../../../book/src/transport.md")]
pub mod transport {}
#[doc = include_str!("../../../book/src/detection.md")]
pub mod detection {}
#[doc = include_str!("../../../book/src/store.md")]
pub mod store {}
#[doc = include_str!("../../../book/src/recovery.md")]
pub mod recovery {}
#[doc = include_str!("../../../book/src/transactions.md")]
pub mod transactions {}
#[doc = include_str!("../../../book/src/cas_lock.md")]
pub mod cas_lock {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
