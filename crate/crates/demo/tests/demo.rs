use hybridmesh_demo::{overflow_placement, route_task, scenario_timeline};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

const SCENARIO: &str = r#"
seed = 3

[[sites]]
id = "a"
slots = 2

[[sites]]
id = "b"
slots = 1

[[links]]
from = "a"
to = "b"
bandwidth_gbps = 8.0
latency_s = 0.01

[workflow]
mode = "manual"
batch_count = 6
batch_size_bytes = 100_000_000
output_size_bytes = 1_000_000
map_duration_s = 20.0
gather_duration_s = 5.0
"#;

#[test]
fn timeline_never_exceeds_slots() {
    let v = parse(&scenario_timeline(SCENARIO).unwrap());
    assert_eq!(v["status"], "succeeded");
    let slots: Vec<u64> = v["slots"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()).collect();
    assert_eq!(slots, [2, 1]);
    let rows = v["rows"].as_array().unwrap();
    assert!(rows.len() > 2);
    for r in rows {
        for (n, cap) in r["running"].as_array().unwrap().iter().zip(&slots) {
            assert!(n.as_u64().unwrap() <= *cap);
        }
    }
    let last = rows.last().unwrap()["running"].as_array().unwrap();
    assert!(last.iter().all(|n| n == 0));
}

#[test]
fn timeline_rejects_bad_config() {
    assert!(scenario_timeline("seed = 1").is_err());
}

#[test]
fn routing_follows_the_data() {
    let req = r#"{"nodes":["a","b","c"],"inputs":[{"site":"b","bytes":500},{"site":"c","bytes":100}]}"#;
    let v = parse(&route_task(req).unwrap());
    assert_eq!(v["chosen"], "b");
    assert_eq!(v["remote_bytes"], 100);
    assert_eq!(v["alternatives"].as_array().unwrap().len(), 3);
}

#[test]
fn routing_skips_down_nodes() {
    let req = r#"{"nodes":["a","b"],"down":["b"],"inputs":[{"site":"b","bytes":500}]}"#;
    let v = parse(&route_task(req).unwrap());
    assert_eq!(v["chosen"], "a");
    assert_eq!(v["remote_bytes"], 500);
    let all_down = r#"{"nodes":["a"],"down":["a"],"inputs":[]}"#;
    assert!(route_task(all_down).is_err());
}

#[test]
fn overflow_fills_primary_then_offloads_eligible_tasks() {
    let req = r#"{
        "primary_slots": 1, "secondary_slots": 2,
        "tasks": [
            {"id": "t1"},
            {"id": "t2"},
            {"id": "t3", "nodes": 2},
            {"id": "t4", "executors": 3},
            {"id": "t5"},
            {"id": "t6"}
        ]
    }"#;
    let rows = parse(&overflow_placement(req).unwrap());
    let got: Vec<(&str, &str, Option<&str>)> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["id"].as_str().unwrap(), r["placement"].as_str().unwrap(), r["partition"].as_str()))
        .collect();
    assert_eq!(
        got,
        [
            ("t1", "primary", Some("primary")),
            ("t2", "offloaded", Some("secondary")),
            ("t3", "queued_primary", None),
            ("t4", "queued_primary", None),
            ("t5", "offloaded", Some("secondary")),
            ("t6", "offloaded", None),
        ]
    );
}

#[test]
fn overflow_respects_offload_cap_and_size() {
    let req = r#"{
        "primary_slots": 1, "secondary_slots": 4, "secondary_max_cpu": 4, "offload_cap": 1,
        "tasks": [{"id": "first"}, {"id": "big", "cpu": 8}, {"id": "small"}, {"id": "next"}]
    }"#;
    let rows = parse(&overflow_placement(req).unwrap());
    let placements: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["placement"].as_str().unwrap()).collect();
    assert_eq!(placements, ["primary", "queued_primary", "offloaded", "queued_primary"]);
}

#[test]
fn page_scenario_runs_in_every_mode() {
    let page = include_str!("../www/index.html");
    let start = page.find(r#"<textarea id="scenario" rows="16">"#).unwrap();
    let body = &page[start..];
    let text = &body[body.find('>').unwrap() + 1..body.find("</textarea>").unwrap()];
    for mode in ["manual", "federated", "gateway", "overlay"] {
        let toml = text.replace(r#"mode = "federated""#, &format!(r#"mode = "{mode}""#));
        let v = parse(&scenario_timeline(&toml).unwrap());
        assert_eq!(v["status"], "succeeded", "{mode}");
    }
}
