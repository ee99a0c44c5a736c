//! Browser demo: scenario timelines, gateway routing and overflow placement.
//!
//! Every operation takes and returns JSON text. The plain functions are
//! usable from Rust; the `wasm_*` exports wrap them for JavaScript.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use hybridmesh::executors::{Backend, BackendDescriptor, BackendKind, PartitionSpec};
use hybridmesh::scenario::ScenarioConfig;
use hybridmesh::tes_layer::{Gateway, RoutingPolicy, TesNode};
use hybridmesh::types::{Command, DataRef, ObjectId, ResourceRequest, SiteId, TaskSpec, TaskValidator};
use hybridmesh::workflow::{run_scenario, timeline};

/// Runs a scenario and returns its summary plus per-site running counts.
pub fn scenario_timeline(toml: &str) -> Result<String, String> {
    let cfg = ScenarioConfig::parse(toml)
        .and_then(ScenarioConfig::resolve)
        .map_err(|e| e.to_string())?;
    let outcome = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let sites: Vec<SiteId> = cfg.sites.iter().filter(|s| s.compute).map(|s| s.id.clone()).collect();
    let (rows, _) = timeline(&outcome.log, &sites);
    let r = &outcome.report;
    let rows: Vec<_> = rows.iter().map(|r| json!({"time": r.time, "running": r.running})).collect();
    let slots: Vec<u32> = cfg.sites.iter().filter(|s| s.compute).map(|s| s.slots).collect();
    Ok(json!({
        "mode": r.mode,
        "status": r.status.as_str(),
        "makespan_s": r.makespan_s,
        "bytes_transferred": r.bytes_transferred_total,
        "retries": r.retries,
        "sites": sites,
        "slots": slots,
        "rows": rows,
    })
    .to_string())
}

#[derive(Deserialize)]
struct RouteInput {
    site: String,
    bytes: u64,
}

#[derive(Deserialize)]
struct RouteRequest {
    nodes: Vec<String>,
    #[serde(default)]
    down: Vec<String>,
    inputs: Vec<RouteInput>,
    #[serde(default)]
    random: bool,
    #[serde(default)]
    seed: u64,
}

/// Routes one task with the given inputs through a gateway over `nodes`.
/// Nodes listed in `down` miss their heartbeat and are skipped.
pub fn route_task(request: &str) -> Result<String, String> {
    let req: RouteRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let sites: Vec<SiteId> = req.nodes.iter().map(|n| SiteId::from(n.as_str())).collect();
    let policy = if req.random {
        RoutingPolicy::UniformRandom(ChaCha8Rng::seed_from_u64(req.seed))
    } else {
        RoutingPolicy::Locality(Default::default())
    };
    let timeout = 3.0;
    let mut gw = Gateway::new("gateway", timeout, policy);
    for s in &sites {
        gw.register(Box::new(TesNode::new(s.clone(), sites.clone())), s.0.clone(), 0.0);
    }
    let now = timeout + 1.0;
    for s in sites.iter().filter(|s| !req.down.contains(&s.0)) {
        gw.heartbeat(s, now).map_err(|e| e.to_string())?;
    }
    gw.refresh(now);
    let inputs: Vec<DataRef> = req
        .inputs
        .iter()
        .enumerate()
        .map(|(i, x)| DataRef {
            object_id: ObjectId(format!("input-{i}")),
            size_bytes: x.bytes,
            home_site: SiteId::from(x.site.as_str()),
        })
        .collect();
    let d = gw.route(&inputs, now).map_err(|e| e.to_string())?;
    let alternatives: Vec<_> = d
        .alternatives
        .iter()
        .map(|c| json!({"node": c.node, "remote_bytes": c.cost_bytes_remote}))
        .collect();
    Ok(json!({
        "chosen": d.chosen_node,
        "remote_bytes": d.cost_bytes_remote,
        "alternatives": alternatives,
    })
    .to_string())
}

#[derive(Deserialize)]
struct OverflowTask {
    id: String,
    #[serde(default = "one")]
    cpu: u32,
    #[serde(default = "one")]
    nodes: u32,
    #[serde(default = "one")]
    executors: u32,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct OverflowRequest {
    primary_slots: u32,
    secondary_slots: u32,
    #[serde(default)]
    secondary_max_cpu: Option<u32>,
    #[serde(default)]
    offload_cap: Option<u32>,
    tasks: Vec<OverflowTask>,
}

#[derive(Serialize)]
struct PlacementRow {
    id: String,
    placement: String,
    partition: Option<String>,
}

/// Submits `tasks` in order to an idle overflow router and reports where
/// each one lands. Nothing completes, so later tasks see earlier ones.
pub fn overflow_placement(request: &str) -> Result<String, String> {
    let req: OverflowRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let (primary, secondary) = (SiteId::from("primary"), SiteId::from("secondary"));
    let mut router = Backend::from_descriptor(&BackendDescriptor {
        id: "router".into(),
        kind: BackendKind::OverflowRouter,
        site: primary.clone(),
        slots: req.primary_slots,
        partitions: vec![PartitionSpec {
            name: "secondary".into(),
            site: secondary.clone(),
            slots: req.secondary_slots,
            max_cpu_cores: req.secondary_max_cpu,
            max_ram_gb: None,
        }],
        offload_cap: req.offload_cap,
    })
    .map_err(|e| e.to_string())?;
    let mut validator = TaskValidator::new([primary, secondary]);
    let up = |_: &SiteId| true;
    let mut rows = Vec::new();
    for t in req.tasks {
        let spec = TaskSpec {
            id: t.id.clone(),
            command: Command {
                duration_s: 1.0,
                output_key: t.id.clone(),
                output_size_bytes: 0,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
            resources: ResourceRequest {
                cpu_cores: t.cpu,
                ..Default::default()
            },
            node_count: t.nodes,
            executor_count: t.executors,
            partition_hint: None,
        };
        let task = validator.validate(spec).map_err(|e| e.to_string())?;
        let placement = router.submit(task, 0.0, &up).map_err(|e| e.to_string())?;
        let started = router.dispatch(&up);
        rows.push(PlacementRow {
            id: t.id,
            placement: serde_json::to_value(placement)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            partition: started.into_iter().next().map(|s| s.partition),
        });
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = scenarioTimeline)]
pub fn wasm_scenario_timeline(toml: &str) -> Result<String, JsValue> {
    scenario_timeline(toml).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = routeTask)]
pub fn wasm_route_task(request: &str) -> Result<String, JsValue> {
    route_task(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = overflowPlacement)]
pub fn wasm_overflow_placement(request: &str) -> Result<String, JsValue> {
    overflow_placement(request).map_err(|e| JsValue::from_str(&e))
}
