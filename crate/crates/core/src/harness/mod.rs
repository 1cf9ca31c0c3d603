//! Scenario-driven harness: scripted workloads with failure injection,
//! final-state audits, the exhaustive 2PC checker and the put benchmark.

pub mod audit;
pub mod bench;
pub mod check2pc;
pub mod runner;
pub mod scenario;

pub use bench::{bench_put, BenchConfig, BenchMode, BenchRow};
pub use check2pc::{check_2pc, CheckConfig, CheckReport, Violation};
pub use audit::{Audit, AuditRecord, KeyStatus};
pub use runner::{admissible, run_scenario, OpRecord, OpResult, RunReport};
pub use scenario::{Action, Expect, ExpectHangs, Scenario, ScenarioError, ScenarioOp, Scheduled, SCHEMA};
