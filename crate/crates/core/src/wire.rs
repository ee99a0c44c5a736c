//! Transport-independent HTTP surface of the services. The same endpoints
//! answer in-process calls (tests, simulation) and the live server, so one
//! set of contract fixtures covers both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::metadata_repo::{BatchTag, MetadataRepo, RepoError};
use crate::storage::{digest, synthetic_content};
use crate::tes_layer::{
    NodeCommand, ServiceInfo, TesCreateRequest, TesError, TesNode, TesService, TesTaskDoc,
};
use crate::types::{DataRef, LifecycleEvent, ObjectId, SiteId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub method: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

impl WireRequest {
    pub fn get(path: impl Into<String>) -> Self {
        WireRequest {
            method: "GET".into(),
            path: path.into(),
            body: None,
        }
    }

    pub fn post(path: impl Into<String>, body: Value) -> Self {
        WireRequest {
            method: "POST".into(),
            path: path.into(),
            body: Some(body),
        }
    }

    fn split(&self) -> (&str, BTreeMap<&str, &str>) {
        let (path, query) = self.path.split_once('?').unwrap_or((&self.path, ""));
        let params = query
            .split('&')
            .filter(|p| !p.is_empty())
            .map(|p| p.split_once('=').unwrap_or((p, "")))
            .collect();
        (path, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub status: u16,
    pub body: Value,
}

impl WireResponse {
    pub fn ok(body: Value) -> Self {
        WireResponse { status: 200, body }
    }

    pub fn error(status: u16, message: impl std::fmt::Display) -> Self {
        WireResponse {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn not_found(req: &WireRequest) -> Self {
        Self::error(404, format!("no route for {} {}", req.method, req.path))
    }
}

/// Anything that answers wire requests at a point in time.
pub trait Endpoint: Send {
    fn handle(&mut self, req: &WireRequest, now: f64) -> WireResponse;
}

fn body<T: for<'de> Deserialize<'de>>(req: &WireRequest) -> Result<T, WireResponse> {
    let v = req.body.clone().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| WireResponse::error(400, format!("bad request body: {e}")))
}

fn tes_error(e: TesError) -> WireResponse {
    WireResponse::error(e.status(), e)
}

fn minimal(doc: &TesTaskDoc) -> Value {
    json!({ "id": doc.id, "state": doc.state })
}

fn render(doc: &TesTaskDoc, params: &BTreeMap<&str, &str>) -> Value {
    if params.get("view") == Some(&"MINIMAL") {
        minimal(doc)
    } else {
        serde_json::to_value(doc).expect("task doc serializes")
    }
}

/// Routes the TES subset onto any [`TesService`].
pub struct TesEndpoint<S> {
    pub service: S,
}

impl<S: TesService> TesEndpoint<S> {
    pub fn new(service: S) -> Self {
        TesEndpoint { service }
    }
}

impl<S: TesService> Endpoint for TesEndpoint<S> {
    fn handle(&mut self, req: &WireRequest, now: f64) -> WireResponse {
        self.service.tick(now);
        let (path, params) = req.split();
        let rest = path.strip_prefix("/v1/");
        match (req.method.as_str(), rest) {
            ("GET", Some("service-info")) => {
                let info: ServiceInfo = self.service.service_info();
                WireResponse::ok(serde_json::to_value(info).expect("info serializes"))
            }
            ("POST", Some("tasks")) => {
                let create: TesCreateRequest = match body(req) {
                    Ok(c) => c,
                    Err(r) => return r,
                };
                match self.service.create_task(create, now) {
                    Ok(id) => WireResponse::ok(json!({ "id": id })),
                    Err(e) => tes_error(e),
                }
            }
            ("GET", Some("tasks")) => match self.service.list_tasks(now) {
                Ok(docs) => {
                    let tasks: Vec<Value> = docs.iter().map(|d| render(d, &params)).collect();
                    WireResponse::ok(json!({ "tasks": tasks }))
                }
                Err(e) => tes_error(e),
            },
            ("POST", Some(r)) if r.starts_with("tasks/") && r.ends_with(":cancel") => {
                let id = &r["tasks/".len()..r.len() - ":cancel".len()];
                match self.service.cancel_task(id, now) {
                    Ok(()) => WireResponse::ok(json!({})),
                    Err(e) => tes_error(e),
                }
            }
            ("GET", Some(r)) if r.starts_with("tasks/") => match self.service.get_task(&r["tasks/".len()..], now) {
                Ok(doc) => WireResponse::ok(render(&doc, &params)),
                Err(e) => tes_error(e),
            },
            _ => WireResponse::not_found(req),
        }
    }
}

/// A node plus a trivial executor: every task starts as soon as it is
/// queued and finishes `duration_s` later on the caller's clock.
#[derive(Debug, Clone)]
pub struct NodeRuntime {
    node: TesNode,
    running: BTreeMap<String, (f64, DataRef)>,
}

impl NodeRuntime {
    pub fn new(node: TesNode) -> Self {
        NodeRuntime {
            node,
            running: BTreeMap::new(),
        }
    }

    pub fn node(&self) -> &TesNode {
        &self.node
    }

    pub fn node_mut(&mut self) -> &mut TesNode {
        &mut self.node
    }

    fn advance(&mut self, now: f64) {
        for c in self.node.take_commands() {
            match c {
                NodeCommand::Start { id, spec } => {
                    self.node.record_event(&id, LifecycleEvent::StartInit, now, vec![]);
                    self.node.record_event(&id, LifecycleEvent::StartRun, now, vec![]);
                    let size = spec.command.output_size_bytes;
                    let out = DataRef {
                        object_id: digest(&synthetic_content(&spec.command.output_key, size)),
                        size_bytes: size,
                        home_site: self.node.site().clone(),
                    };
                    self.running.insert(id, (now + spec.command.duration_s, out));
                }
                NodeCommand::Cancel { id } => {
                    self.running.remove(&id);
                }
            }
        }
        let done: Vec<String> = self
            .running
            .iter()
            .filter(|(_, (at, _))| *at <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in done {
            let (_, out) = self.running.remove(&id).expect("listed above");
            self.node.record_event(&id, LifecycleEvent::FinishOk, now, vec![out]);
        }
    }
}

impl TesService for NodeRuntime {
    fn service_info(&self) -> ServiceInfo {
        self.node.service_info()
    }

    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError> {
        self.advance(now);
        let id = self.node.create_task(req, now)?;
        self.advance(now);
        Ok(id)
    }

    fn get_task(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError> {
        self.advance(now);
        self.node.get_task(id, now)
    }

    fn list_tasks(&mut self, now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        self.advance(now);
        self.node.list_tasks(now)
    }

    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError> {
        self.advance(now);
        self.node.cancel_task(id, now)?;
        self.advance(now);
        Ok(())
    }

    fn tick(&mut self, now: f64) {
        self.advance(now);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    batch_id: String,
    input: DataRef,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaimBody {
    site: SiteId,
    expected_version: u64,
    lease_s: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportBody {
    site: SiteId,
    tag: BatchTag,
    #[serde(default)]
    output: Option<ObjectId>,
    #[serde(default)]
    renew_s: Option<f64>,
}

fn repo_error(e: RepoError) -> WireResponse {
    let status = match &e {
        RepoError::DuplicateBatch(_) | RepoError::Conflict(_) => 409,
        RepoError::UnknownBatch(_) => 404,
        RepoError::NotClaimant { .. } => 403,
        RepoError::IllegalTag { .. } => 422,
        RepoError::LeaseExpired(_) => 410,
        RepoError::InvalidLease => 400,
    };
    let mut r = WireResponse::error(status, &e);
    if let RepoError::Conflict(current) = e {
        r.body["current"] = serde_json::to_value(*current).expect("record serializes");
    }
    r
}

fn record(rec: impl Serialize) -> WireResponse {
    WireResponse::ok(serde_json::to_value(rec).expect("record serializes"))
}

/// Metadata repository over the wire. Expired leases are swept before
/// every request.
#[derive(Debug, Clone)]
pub struct RepoEndpoint {
    pub repo: MetadataRepo,
}

impl RepoEndpoint {
    pub fn new(repo: MetadataRepo) -> Self {
        RepoEndpoint { repo }
    }
}

impl Endpoint for RepoEndpoint {
    fn handle(&mut self, req: &WireRequest, now: f64) -> WireResponse {
        self.repo.expire_leases(now);
        let (path, params) = req.split();
        let rest = path.strip_prefix("/v1/");
        match (req.method.as_str(), rest) {
            ("POST", Some("batches")) => match body::<RegisterBody>(req) {
                Ok(b) => self.repo.register_batch(&b.batch_id, b.input).map_or_else(repo_error, record),
                Err(r) => r,
            },
            ("GET", Some("batches")) => {
                let tag = match params.get("tag").map(|t| serde_json::from_value::<BatchTag>(json!(t))) {
                    None => None,
                    Some(Ok(t)) => Some(t),
                    Some(Err(_)) => return WireResponse::error(400, "unknown tag"),
                };
                WireResponse::ok(json!({ "batches": self.repo.list(tag) }))
            }
            ("POST", Some(r)) if r.starts_with("batches/") && r.ends_with(":claim") => {
                let id = &r["batches/".len()..r.len() - ":claim".len()];
                match body::<ClaimBody>(req) {
                    Ok(b) => self
                        .repo
                        .claim(id, &b.site, b.expected_version, b.lease_s, now)
                        .map_or_else(repo_error, record),
                    Err(r) => r,
                }
            }
            ("POST", Some(r)) if r.starts_with("batches/") && r.ends_with(":report") => {
                let id = &r["batches/".len()..r.len() - ":report".len()];
                match body::<ReportBody>(req) {
                    Ok(b) => self
                        .repo
                        .report(id, &b.site, b.tag, b.output, b.renew_s, now)
                        .map_or_else(repo_error, record),
                    Err(r) => r,
                }
            }
            ("GET", Some(r)) if r.starts_with("batches/") => match self.repo.get(&r["batches/".len()..]) {
                Some(rec) => record(rec),
                None => repo_error(RepoError::UnknownBatch(r["batches/".len()..].to_string())),
            },
            _ => WireResponse::not_found(req),
        }
    }
}

/// Request/response fixtures shared by the in-process and live contract
/// tests.
pub mod contract {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Step {
        pub request: WireRequest,
        pub status: u16,
        /// Partial match: only the listed fields are compared, and `"*"`
        /// accepts any non-null value.
        #[serde(default)]
        pub expect: Option<Value>,
        /// Variables captured from the response body by JSON pointer.
        #[serde(default)]
        pub save: BTreeMap<String, String>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Fixture {
        pub name: String,
        /// `node`, `gateway`, `gateway-chain` or `repo`.
        pub component: String,
        pub steps: Vec<Step>,
    }

    /// True iff `actual` contains everything in `expected`.
    pub fn matches(expected: &Value, actual: &Value) -> bool {
        match (expected, actual) {
            (Value::String(s), a) if s == "*" => !a.is_null(),
            (Value::Object(e), Value::Object(a)) => e.iter().all(|(k, v)| a.get(k).is_some_and(|av| matches(v, av))),
            (Value::Array(e), Value::Array(a)) => e.len() == a.len() && e.iter().zip(a).all(|(x, y)| matches(x, y)),
            (e, a) => e == a,
        }
    }

    fn substitute(v: &Value, vars: &BTreeMap<String, Value>) -> Value {
        match v {
            Value::String(s) => {
                if let Some(name) = s.strip_prefix("{{").and_then(|r| r.strip_suffix("}}")) {
                    if let Some(val) = vars.get(name) {
                        return val.clone();
                    }
                }
                Value::String(fill(s, vars))
            }
            Value::Array(a) => Value::Array(a.iter().map(|x| substitute(x, vars)).collect()),
            Value::Object(o) => Value::Object(o.iter().map(|(k, x)| (k.clone(), substitute(x, vars))).collect()),
            other => other.clone(),
        }
    }

    fn fill(s: &str, vars: &BTreeMap<String, Value>) -> String {
        let mut out = s.to_string();
        for (k, v) in vars {
            let text = match v {
                Value::String(t) => t.clone(),
                other => other.to_string(),
            };
            out = out.replace(&format!("{{{{{k}}}}}"), &text);
        }
        out
    }

    /// Plays a fixture against `call`, returning the first mismatch.
    pub fn run_fixture(
        fixture: &Fixture,
        mut call: impl FnMut(&WireRequest) -> WireResponse,
    ) -> Result<Vec<WireResponse>, String> {
        let mut vars: BTreeMap<String, Value> = BTreeMap::new();
        let mut seen = Vec::new();
        for (i, step) in fixture.steps.iter().enumerate() {
            let req = WireRequest {
                method: step.request.method.clone(),
                path: fill(&step.request.path, &vars),
                body: step.request.body.as_ref().map(|b| substitute(b, &vars)),
            };
            let resp = call(&req);
            let here = || format!("{} step {i} ({} {})", fixture.name, req.method, req.path);
            if resp.status != step.status {
                return Err(format!("{}: status {} != {}: {}", here(), resp.status, step.status, resp.body));
            }
            if let Some(e) = &step.expect {
                let e = substitute(e, &vars);
                if !matches(&e, &resp.body) {
                    return Err(format!("{}: body {} does not match {}", here(), resp.body, e));
                }
            }
            for (name, pointer) in &step.save {
                let v = resp
                    .body
                    .pointer(pointer)
                    .ok_or_else(|| format!("{}: nothing at {pointer}", here()))?;
                vars.insert(name.clone(), v.clone());
            }
            seen.push(resp);
        }
        Ok(seen)
    }
}

#[cfg(test)]
mod tests {
    use super::contract::matches;
    use super::*;

    fn node() -> TesEndpoint<NodeRuntime> {
        TesEndpoint::new(NodeRuntime::new(TesNode::new("a".into(), ["a".into()])))
    }

    fn create(duration: f64) -> Value {
        json!({ "command": { "duration_s": duration, "output_key": "k", "output_size_bytes": 3 } })
    }

    #[test]
    fn partial_matching() {
        assert!(matches(&json!({"a": 1}), &json!({"a": 1, "b": 2})));
        assert!(matches(&json!({"a": "*"}), &json!({"a": [1]})));
        assert!(!matches(&json!({"a": "*"}), &json!({"a": null})));
        assert!(!matches(&json!([1]), &json!([1, 2])));
    }

    #[test]
    fn node_lifecycle_over_the_wire() {
        let mut ep = node();
        let r = ep.handle(&WireRequest::post("/v1/tasks", create(5.0)), 0.0);
        let id = r.body["id"].as_str().unwrap().to_string();
        let r = ep.handle(&WireRequest::get(format!("/v1/tasks/{id}?view=MINIMAL")), 1.0);
        assert_eq!(r.body, json!({"id": id, "state": "RUNNING"}));
        let r = ep.handle(&WireRequest::get(format!("/v1/tasks/{id}")), 5.0);
        assert_eq!(r.body["state"], "COMPLETE");
        assert_eq!(r.body["outputs"][0]["size_bytes"], 3);
        let r = ep.handle(&WireRequest::post(format!("/v1/tasks/{id}:cancel"), json!({})), 6.0);
        assert_eq!(r.status, 409);
        assert_eq!(ep.handle(&WireRequest::get("/v1/nope"), 0.0).status, 404);
    }

    #[test]
    fn repo_conflict_carries_current_record() {
        let mut ep = RepoEndpoint::new(MetadataRepo::new(2));
        let input = json!({"object_id": "x", "size_bytes": 1, "home_site": "a"});
        let r = ep.handle(&WireRequest::post("/v1/batches", json!({"batch_id": "b0", "input": input})), 0.0);
        assert_eq!(r.status, 200);
        let claim = |site: &str| json!({"site": site, "expected_version": 1, "lease_s": 10.0});
        assert_eq!(ep.handle(&WireRequest::post("/v1/batches/b0:claim", claim("a")), 0.0).status, 200);
        let r = ep.handle(&WireRequest::post("/v1/batches/b0:claim", claim("b")), 1.0);
        assert_eq!(r.status, 409);
        assert_eq!(r.body["current"]["claimant"], "a");
        // the sweep before each request returns the batch after expiry
        let r = ep.handle(&WireRequest::get("/v1/batches?tag=UNPROCESSED"), 10.0);
        assert_eq!(r.body["batches"].as_array().unwrap().len(), 1);
    }
}
