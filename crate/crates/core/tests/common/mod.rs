#![allow(dead_code)]

use hybridmesh::scenario::{LinkSpec, ScenarioConfig};
use hybridmesh::simnet::SiteDescriptor;
use hybridmesh::types::SiteId;
use hybridmesh::workflow::{Mode, WorkflowSpec};

pub fn site(id: &str, slots: u32) -> SiteDescriptor {
    SiteDescriptor {
        id: SiteId::from(id),
        slots,
        partition: id.to_string(),
        preemptible: false,
        compute: true,
        reliability: vec![],
    }
}

pub fn storage_site(id: &str) -> SiteDescriptor {
    SiteDescriptor {
        compute: false,
        ..site(id, 1)
    }
}

/// Fully meshed scenario, every link 8 Gbps with 10 ms latency.
pub fn mesh(sites: Vec<SiteDescriptor>, mode: Mode, batch_count: u32, seed: u64) -> ScenarioConfig {
    let mut links = Vec::new();
    for (i, a) in sites.iter().enumerate() {
        for b in &sites[i + 1..] {
            links.push(LinkSpec {
                from: a.id.clone(),
                to: b.id.clone(),
                bandwidth_gbps: 8.0,
                latency_s: 0.01,
                symmetric: true,
            });
        }
    }
    let toml = format!(
        "seed = {seed}\n[workflow]\nmode = \"{}\"\nbatch_count = {batch_count}\nbatch_size_bytes = 100000000\nmap_duration_s = 10.0\ngather_duration_s = 2.0\n",
        mode.as_str()
    );
    let mut cfg = ScenarioConfig::parse(&format!("sites = []\n{toml}")).expect("template parses");
    cfg.sites = sites;
    cfg.links = links;
    cfg
}

pub fn workflow(cfg: &mut ScenarioConfig) -> &mut WorkflowSpec {
    &mut cfg.workflow
}

/// Federated scenario with 2-8 workers, 50-200 batches and random outages.
pub fn random_federated(seed: u64) -> ScenarioConfig {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let mut sites: Vec<SiteDescriptor> = (0..n)
        .map(|i| site(&format!("w{i}"), rng.random_range(1..=4)))
        .collect();
    sites.push(storage_site("store"));
    let mode = if rng.random_bool(0.3) {
        Mode::FederatedController
    } else {
        Mode::Federated
    };
    let batches = rng.random_range(50..=200);
    let mut cfg = mesh(sites, mode, batches, seed);
    cfg.workflow.input_sites = vec!["store".into()];
    cfg.workflow.map_duration_s = rng.random_range(2.0..20.0);
    cfg.jitter = rng.random_range(0.0..0.5);
    cfg.max_retries = 2;
    for i in 0..n {
        if rng.random_bool(0.35) {
            let down: f64 = rng.random_range(0.0..60.0);
            let up = rng.random_bool(0.7).then(|| down + rng.random_range(1.0..80.0));
            cfg.failures.push(hybridmesh::scenario::FailureSpec {
                site: SiteId::from(format!("w{i}").as_str()),
                down_at: Some(down),
                up_at: up,
                preempt_at: None,
            });
        }
    }
    cfg
}

pub mod wire {
    use std::path::Path;

    use hybridmesh::metadata_repo::MetadataRepo;
    use hybridmesh::tes_layer::{CostModel, Gateway, RoutingPolicy, TesNode, TesService};
    use hybridmesh::types::SiteId;
    use hybridmesh::wire::contract::Fixture;
    use hybridmesh::wire::{Endpoint, NodeRuntime, RepoEndpoint, TesEndpoint, WireRequest, WireResponse};

    pub fn fixtures() -> Vec<Fixture> {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wire");
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .expect("fixture dir")
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).expect("fixture parses"))
            .collect()
    }

    fn sites() -> Vec<SiteId> {
        vec!["a".into(), "b".into()]
    }

    fn node(site: &str) -> NodeRuntime {
        NodeRuntime::new(TesNode::new(site.into(), sites()))
    }

    fn gateway(name: &str, children: Vec<Box<dyn TesService>>) -> Gateway {
        let mut g = Gateway::new(name, 3.0, RoutingPolicy::Locality(CostModel::RemoteBytes));
        for c in children {
            g.register(c, "in-process", 0.0);
        }
        g
    }

    /// In-process endpoint for a fixture's component.
    pub fn simulated(component: &str) -> Box<dyn Endpoint> {
        let nodes = || -> Vec<Box<dyn TesService>> { vec![Box::new(node("a")), Box::new(node("b"))] };
        match component {
            "node" => Box::new(TesEndpoint::new(node("a"))),
            "repo" => Box::new(RepoEndpoint::new(MetadataRepo::new(2))),
            "gateway" => Box::new(TesEndpoint::new(gateway("gw", nodes()))),
            "gateway-chain" => {
                let inner = gateway("inner", nodes());
                Box::new(TesEndpoint::new(gateway("outer", vec![Box::new(inner)])))
            }
            other => panic!("unknown component {other}"),
        }
    }

    /// Plays requests against the simulated component on a clock that
    /// advances 10 ms per request.
    pub fn sim_caller(component: &str) -> impl FnMut(&WireRequest) -> WireResponse {
        let mut ep = simulated(component);
        let mut now = 0.0;
        move |req| {
            now += 0.01;
            ep.handle(req, now)
        }
    }

    /// Drops wall-clock fields, which differ between served and simulated runs.
    pub fn strip_times(v: &serde_json::Value) -> serde_json::Value {
        use serde_json::Value;
        match v {
            Value::Object(o) => Value::Object(
                o.iter()
                    .filter(|(k, _)| !matches!(k.as_str(), "at" | "creation_time" | "lease_expiry" | "error"))
                    .map(|(k, x)| (k.clone(), strip_times(x)))
                    .collect(),
            ),
            Value::Array(a) => Value::Array(a.iter().map(strip_times).collect()),
            other => other.clone(),
        }
    }

    #[cfg(feature = "server")]
    pub mod live {
        use std::time::Duration;

        use hybridmesh::server::{spawn, LiveServer, LiveService, WireClient};
        use hybridmesh::tes_layer::{CostModel, RoutingPolicy};
        use hybridmesh::wire::{WireRequest, WireResponse};

        const BEAT: Duration = Duration::from_millis(200);

        fn up(service: LiveService) -> LiveServer {
            spawn(service, "127.0.0.1:0").expect("bind ephemeral port")
        }

        fn gw(name: &str, upstreams: &[String]) -> LiveServer {
            let policy = RoutingPolicy::Locality(CostModel::RemoteBytes);
            up(LiveService::gateway(name, upstreams, BEAT, policy).expect("upstreams reachable"))
        }

        /// Served processes for a component; the last one is the entry point.
        pub fn stack(component: &str) -> Vec<LiveServer> {
            let nodes = || {
                vec![
                    up(LiveService::node("a".into(), super::sites())),
                    up(LiveService::node("b".into(), super::sites())),
                ]
            };
            match component {
                "node" => vec![up(LiveService::node("a".into(), super::sites()))],
                "repo" => vec![up(LiveService::repo(2))],
                "gateway" => {
                    let mut s = nodes();
                    let urls: Vec<String> = s.iter().map(LiveServer::url).collect();
                    s.push(gw("gw", &urls));
                    s
                }
                "gateway-chain" => {
                    let mut s = nodes();
                    let urls: Vec<String> = s.iter().map(LiveServer::url).collect();
                    s.push(gw("inner", &urls));
                    let inner = s.last().unwrap().url();
                    s.push(gw("outer", &[inner]));
                    s
                }
                other => panic!("unknown component {other}"),
            }
        }

        pub fn caller(servers: &[LiveServer]) -> impl FnMut(&WireRequest) -> WireResponse {
            let client = WireClient::new(&servers.last().unwrap().url());
            move |req| client.call(req).expect("server reachable")
        }
    }
}
