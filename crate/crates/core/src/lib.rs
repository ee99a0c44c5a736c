//! Deterministic simulation of multi-site compute fabrics.
//!
//! The crate models sites joined by network links, content-addressed object
//! stores, a shared metadata repository with leased claims, several batch
//! execution backends and a task-execution-service layer with a routing
//! gateway. A workflow runner drives those pieces through a discrete-event
//! engine and emits an append-only provenance log that can be replayed and
//! checked independently.

pub mod executors;
pub mod metadata_repo;
pub mod metrics;
pub mod provenance;
pub mod replay;
pub mod scenario;
#[cfg(feature = "server")]
pub mod server;
pub mod simnet;
pub mod storage;
pub mod tes_layer;
pub mod types;
pub mod wire;
pub mod workflow;
