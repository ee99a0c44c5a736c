//! Task-execution-service layer: per-site nodes that accept task documents,
//! and a gateway that fronts any set of services as a reverse proxy with
//! data-locality routing and health tracking.
//!
//! Both sides implement [`TesService`], so a gateway can front another
//! gateway. Nodes do not execute anything themselves: they queue
//! [`NodeCommand`]s for whatever runtime drives them (the simulator or the
//! live server) and receive state updates back.

mod gateway;
mod node;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Command, DataRef, ResourceRequest, SiteId, TaskState};

pub use gateway::{CostModel, Gateway, DEFAULT_HEALTH_TIMEOUT_S, NodeRegistryEntry, RouteCandidate, RoutingDecision, RoutingPolicy};
pub use node::{NodeCommand, TesNode};

/// Fixed page size of `list_tasks`.
pub const LIST_PAGE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TesError {
    #[error("malformed task: {0}")]
    MalformedSpec(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is already terminal")]
    AlreadyTerminal(String),
    #[error("no healthy node")]
    NoHealthyNode,
    #[error("unknown node `{0}`")]
    UnknownNode(SiteId),
    #[error("node unreachable: {0}")]
    NodeUnreachable(String),
}

impl TesError {
    pub fn status(&self) -> u16 {
        match self {
            TesError::MalformedSpec(_) => 400,
            TesError::UnknownTask(_) | TesError::UnknownNode(_) => 404,
            TesError::AlreadyTerminal(_) => 409,
            TesError::NoHealthyNode => 503,
            TesError::NodeUnreachable(_) => 502,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TesLog {
    pub event: String,
    pub at: f64,
}

pub const GATEWAY_LOG_PREFIX: &str = "gateway:";

/// Body of `POST /v1/tasks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TesCreateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub command: Command,
    #[serde(default)]
    pub inputs: Vec<DataRef>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub resources: ResourceRequest,
    #[serde(default = "crate::types::one")]
    pub node_count: u32,
    #[serde(default = "crate::types::one")]
    pub executor_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TesTaskDoc {
    pub id: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub command: Command,
    pub inputs: Vec<DataRef>,
    pub outputs: Vec<DataRef>,
    pub resources: ResourceRequest,
    pub node_count: u32,
    pub executor_count: u32,
    pub logs: Vec<TesLog>,
    pub creation_time: f64,
    /// Set by a gateway when the owning node could not be reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale: Option<bool>,
}

impl TesTaskDoc {
    /// The document with every gateway-added log entry and flag removed.
    pub fn without_gateway_entries(&self) -> TesTaskDoc {
        let mut d = self.clone();
        d.logs.retain(|l| !l.event.starts_with(GATEWAY_LOG_PREFIX));
        d.stale = None;
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Node,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceInfo {
    pub name: String,
    pub kind: ServiceKind,
    pub sites: Vec<SiteId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum View {
    Minimal,
    Full,
}

/// The task wire contract shared by nodes and gateways.
pub trait TesService: Send {
    fn service_info(&self) -> ServiceInfo;
    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError>;
    fn get_task(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError>;
    fn list_tasks(&mut self, now: f64) -> Result<Vec<TesTaskDoc>, TesError>;
    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError>;

    /// Routing decisions made since the last call, including those of
    /// nested gateways.
    fn drain_decisions(&mut self) -> Vec<RoutingDecision> {
        Vec::new()
    }

    /// Advances health bookkeeping to `now`.
    fn tick(&mut self, _now: f64) {}
}

/// A node shared between a gateway and the runtime that executes its tasks.
pub type SharedNode = Arc<Mutex<TesNode>>;

impl<T: TesService> TesService for Arc<Mutex<T>> {
    fn service_info(&self) -> ServiceInfo {
        self.lock().unwrap().service_info()
    }
    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError> {
        self.lock().unwrap().create_task(req, now)
    }
    fn get_task(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError> {
        self.lock().unwrap().get_task(id, now)
    }
    fn list_tasks(&mut self, now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        self.lock().unwrap().list_tasks(now)
    }
    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError> {
        self.lock().unwrap().cancel_task(id, now)
    }
    fn drain_decisions(&mut self) -> Vec<RoutingDecision> {
        self.lock().unwrap().drain_decisions()
    }
    fn tick(&mut self, now: f64) {
        self.lock().unwrap().tick(now)
    }
}

impl<T: TesService + ?Sized> TesService for Box<T> {
    fn service_info(&self) -> ServiceInfo {
        (**self).service_info()
    }
    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError> {
        (**self).create_task(req, now)
    }
    fn get_task(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError> {
        (**self).get_task(id, now)
    }
    fn list_tasks(&mut self, now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        (**self).list_tasks(now)
    }
    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError> {
        (**self).cancel_task(id, now)
    }
    fn drain_decisions(&mut self) -> Vec<RoutingDecision> {
        (**self).drain_decisions()
    }
    fn tick(&mut self, now: f64) {
        (**self).tick(now)
    }
}
