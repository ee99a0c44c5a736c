//! Workflow driver for the gateway architecture: tasks go through a chain of
//! gateways to per-site TES nodes, and the driver polls their status through
//! the outermost gateway like an external workflow engine would.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sim::{BatchState, Eng, Ev, JobKind, Phase, Sim};
use crate::provenance::Record;
use crate::scenario::{Routing, ScenarioConfig};
use crate::simnet::SimError;
use crate::tes_layer::{
    CostModel, Gateway, NodeCommand, RoutingPolicy, SharedNode, TesCreateRequest, TesError, TesNode, TesService,
};
use crate::types::{DataRef, LifecycleEvent, SiteId, TaskSpec, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Target {
    Map(usize),
    Gather,
}

pub(super) struct GatewayDriver {
    nodes: BTreeMap<SiteId, SharedNode>,
    /// Innermost first; the driver talks to the last one.
    levels: Vec<Arc<Mutex<Gateway>>>,
    unsubmitted: VecDeque<Target>,
    outstanding: BTreeMap<String, Target>,
    attempts: BTreeMap<Target, u32>,
    /// A `DriverPoll` event is pending.
    polling: bool,
}

impl std::fmt::Debug for GatewayDriver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayDriver")
            .field("outstanding", &self.outstanding)
            .finish_non_exhaustive()
    }
}

impl PartialOrd for Target {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Target {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |t: &Target| match t {
            Target::Map(i) => (0, *i),
            Target::Gather => (1, 0),
        };
        key(self).cmp(&key(other))
    }
}

fn gateway_name(level: usize) -> String {
    format!("gateway-{level}")
}

impl GatewayDriver {
    pub fn new(cfg: &ScenarioConfig, site_backend: &BTreeMap<SiteId, usize>) -> Self {
        let sites: Vec<SiteId> = cfg.sites.iter().map(|s| s.id.clone()).collect();
        let nodes: BTreeMap<SiteId, SharedNode> = site_backend
            .keys()
            .map(|s| (s.clone(), Arc::new(Mutex::new(TesNode::new(s.clone(), sites.clone())))))
            .collect();
        let timeout = 3.0 * cfg.heartbeat_interval_s;
        let mut levels: Vec<Arc<Mutex<Gateway>>> = Vec::new();
        for level in 0..cfg.gateway_chain_depth as usize {
            let policy = match cfg.routing {
                Routing::Locality => RoutingPolicy::Locality(cfg.cost_model),
                Routing::UniformRandom => {
                    RoutingPolicy::UniformRandom(ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(level as u64 + 1)))
                }
            };
            let mut gw = Gateway::new(gateway_name(level), timeout, policy);
            if cfg.cost_model == CostModel::TransferTime {
                gw = gw.with_topology(cfg.topology());
            }
            match levels.last() {
                None => {
                    for (site, node) in &nodes {
                        gw.register(Box::new(node.clone()), format!("sim://{site}"), 0.0);
                    }
                }
                Some(inner) => {
                    gw.register(Box::new(inner.clone()), format!("sim://{}", gateway_name(level - 1)), 0.0);
                }
            }
            levels.push(Arc::new(Mutex::new(gw)));
        }
        GatewayDriver {
            nodes,
            levels,
            unsubmitted: VecDeque::new(),
            outstanding: BTreeMap::new(),
            attempts: BTreeMap::new(),
            polling: false,
        }
    }

    pub fn node_event(&self, site: &SiteId, id: &str, event: LifecycleEvent, at: f64, outputs: Vec<DataRef>) {
        if let Some(n) = self.nodes.get(site) {
            n.lock().unwrap().record_event(id, event, at, outputs);
        }
    }

    pub fn set_node_online(&self, site: &SiteId, online: bool) {
        if let Some(n) = self.nodes.get(site) {
            n.lock().unwrap().set_online(online);
        }
    }

    pub fn batch_of(&self, tes_id: &str) -> Option<usize> {
        match self.outstanding.get(tes_id) {
            Some(Target::Map(i)) => Some(*i),
            _ => None,
        }
    }

    fn outer(&self) -> &Arc<Mutex<Gateway>> {
        self.levels.last().expect("at least one gateway")
    }

    fn health(&self) -> Vec<(SiteId, bool)> {
        self.levels
            .iter()
            .flat_map(|g| {
                g.lock()
                    .unwrap()
                    .registry()
                    .map(|e| (e.node_id.clone(), e.up))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn node_up(&self, node: &SiteId) -> bool {
        self.levels[0].lock().unwrap().is_up(node)
    }
}

fn node_of(tes_id: &str) -> SiteId {
    SiteId::new(tes_id.split(".task-").next().unwrap_or_default())
}

fn request(spec: TaskSpec) -> TesCreateRequest {
    TesCreateRequest {
        name: Some(spec.id),
        command: spec.command,
        inputs: spec.inputs,
        outputs: spec.outputs,
        resources: spec.resources,
        node_count: spec.node_count,
        executor_count: spec.executor_count,
    }
}

impl Sim {
    fn driver(&mut self) -> &mut GatewayDriver {
        self.gw.as_mut().expect("gateway mode")
    }

    pub(super) fn gateway_start(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        let n = self.batches.len();
        let d = self.driver();
        d.unsubmitted.extend((0..n).map(Target::Map));
        engine.after(self.cfg.heartbeat_interval_s, Ev::Heartbeat)?;
        self.driver_poll(engine)
    }

    pub(super) fn gateway_gather(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        self.driver().unsubmitted.push_back(Target::Gather);
        if self.driver().polling {
            return Ok(());
        }
        self.driver_poll(engine)
    }

    fn submit_target(&mut self, engine: &mut Eng, target: Target) -> Result<bool, SimError> {
        let attempt = {
            let d = self.driver();
            let a = d.attempts.entry(target).or_default();
            *a += 1;
            *a
        };
        let spec = match target {
            Target::Map(i) => {
                self.batches[i].attempts = attempt;
                self.map_spec(i, format!("{}.a{attempt}", self.batches[i].id))
            }
            Target::Gather => {
                self.gather_attempts = attempt;
                self.gather_spec(format!("gather.a{attempt}"))
            }
        };
        let now = engine.now();
        let outer = self.driver().outer().clone();
        let created = outer.lock().unwrap().create_task(request(spec), now);
        let decisions = outer.lock().unwrap().drain_decisions();
        for decision in decisions {
            engine.record(Record::Route {
                decision: decision.clone(),
            });
            self.decisions.push(decision);
        }
        match created {
            Ok(id) => {
                self.driver().outstanding.insert(id, target);
                self.start_node_commands(engine)?;
                Ok(true)
            }
            Err(TesError::NoHealthyNode) => {
                *self.driver().attempts.get_mut(&target).unwrap() -= 1;
                Ok(false)
            }
            Err(e) => Err(SimError::World(e.to_string())),
        }
    }

    /// Turns work queued by the nodes into simulated jobs.
    fn start_node_commands(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        let nodes: Vec<(SiteId, SharedNode)> = self.driver().nodes.iter().map(|(s, n)| (s.clone(), n.clone())).collect();
        for (site, node) in nodes {
            let commands = node.lock().unwrap().take_commands();
            for c in commands {
                match c {
                    NodeCommand::Start { id, spec } => {
                        let batch = match self.driver().outstanding.get(&id) {
                            Some(Target::Map(i)) => Some(*i),
                            _ => None,
                        };
                        let backend = self.site_backend[&site];
                        self.submit_job(engine, TaskSpec { id, ..spec }, backend, JobKind::Tes, batch)?;
                    }
                    NodeCommand::Cancel { id } => self.cancel(engine, &id)?,
                }
            }
        }
        Ok(())
    }

    pub(super) fn heartbeat(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        if self.phase == Phase::Finished {
            return Ok(());
        }
        let now = engine.now();
        let up: Vec<SiteId> = self.gw.as_ref().unwrap().nodes.keys().filter(|s| self.is_up(s)).cloned().collect();
        let d = self.gw.as_ref().unwrap();
        let before = d.health();
        for site in &up {
            d.levels[0].lock().unwrap().heartbeat(site, now).expect("registered node");
        }
        for l in 1..d.levels.len() {
            let inner = SiteId::new(gateway_name(l - 1));
            d.levels[l].lock().unwrap().heartbeat(&inner, now).expect("registered gateway");
        }
        for g in &d.levels {
            g.lock().unwrap().refresh(now);
        }
        let after = d.health();
        for ((node, was), (_, is)) in before.into_iter().zip(after) {
            if was != is {
                engine.record(Record::NodeHealth { node, up: is });
            }
        }
        engine.after(self.cfg.heartbeat_interval_s, Ev::Heartbeat)?;
        Ok(())
    }

    /// Submits pending work and polls every outstanding task once.
    pub(super) fn driver_poll(&mut self, engine: &mut Eng) -> Result<(), SimError> {
        self.driver().polling = false;
        if self.phase == Phase::Finished {
            return Ok(());
        }
        while let Some(&target) = self.driver().unsubmitted.front() {
            if !self.submit_target(engine, target)? {
                break;
            }
            self.driver().unsubmitted.pop_front();
        }
        let now = engine.now();
        let ids: Vec<String> = self.driver().outstanding.keys().cloned().collect();
        let outer = self.driver().outer().clone();
        for id in ids {
            let doc = match outer.lock().unwrap().get_task(&id, now) {
                Ok(doc) => doc,
                Err(e) => return Err(SimError::World(e.to_string())),
            };
            let target = self.driver().outstanding[&id];
            let lost = doc.stale == Some(true) && !self.driver().node_up(&node_of(&id));
            let outcome = match doc.state {
                TaskState::Complete => Some(Ok(doc.outputs.first().cloned().expect("completed task has output"))),
                TaskState::ExecutorError => Some(Err(false)),
                TaskState::SystemError | TaskState::Canceled => Some(Err(true)),
                _ if lost => Some(Err(true)),
                _ => None,
            };
            let Some(outcome) = outcome else { continue };
            self.driver().outstanding.remove(&id);
            let attempts = self.driver().attempts[&target];
            match (outcome, target) {
                (Ok(out), Target::Map(i)) => self.batches[i].state = BatchState::Done(out),
                (Ok(out), Target::Gather) => {
                    self.gather_output = Some(out);
                    self.finish(engine);
                }
                (Err(true), _) if attempts <= self.cfg.workflow.retry_limit => {
                    self.retries += 1;
                    self.driver().unsubmitted.push_back(target);
                }
                (Err(_), Target::Map(i)) => self.batches[i].state = BatchState::Failed,
                (Err(_), Target::Gather) => {
                    self.gather_failed = true;
                    self.finish(engine);
                }
            }
        }
        let d = self.driver();
        if !d.outstanding.is_empty() || !d.unsubmitted.is_empty() {
            d.polling = true;
            engine.after(self.cfg.poll_interval_s, Ev::DriverPoll)?;
        }
        Ok(())
    }
}
