use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ServiceInfo, ServiceKind, TesCreateRequest, TesError, TesLog, TesService, TesTaskDoc, GATEWAY_LOG_PREFIX, LIST_PAGE_SIZE};
use crate::simnet::Topology;
use crate::types::{DataRef, SiteId, TaskState};

pub const DEFAULT_HEALTH_TIMEOUT_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Bytes of input that live somewhere other than the node's site.
    #[default]
    RemoteBytes,
    /// Seconds needed to pull remote inputs over the link matrix.
    TransferTime,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum RoutingPolicy {
    Locality(CostModel),
    /// Baseline that ignores data placement.
    UniformRandom(ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistryEntry {
    pub node_id: SiteId,
    pub endpoint: String,
    pub up: bool,
    pub last_heartbeat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCandidate {
    pub node: SiteId,
    pub cost_bytes_remote: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub gateway: String,
    pub task_id: String,
    pub chosen_node: SiteId,
    pub cost_bytes_remote: u64,
    /// Healthy candidates, cheapest first.
    pub alternatives: Vec<RouteCandidate>,
    pub inputs: Vec<DataRef>,
    pub at: f64,
}

struct Child {
    id: SiteId,
    sites: Vec<SiteId>,
    service: Box<dyn TesService>,
}

/// Reverse proxy over a set of services with locality-aware routing.
pub struct Gateway {
    name: String,
    children: Vec<Child>,
    registry: BTreeMap<SiteId, NodeRegistryEntry>,
    timeout_s: f64,
    policy: RoutingPolicy,
    topology: Option<Topology>,
    owners: BTreeMap<String, usize>,
    last_known: BTreeMap<String, TesTaskDoc>,
    decisions: Vec<RoutingDecision>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("name", &self.name)
            .field("registry", &self.registry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(name: impl Into<String>, timeout_s: f64, policy: RoutingPolicy) -> Self {
        Gateway {
            name: name.into(),
            children: Vec::new(),
            registry: BTreeMap::new(),
            timeout_s,
            policy,
            topology: None,
            owners: BTreeMap::new(),
            last_known: BTreeMap::new(),
            decisions: Vec::new(),
        }
    }

    /// Links used by the transfer-time cost model.
    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = Some(topology);
        self
    }

    /// Registers a child service, healthy as of `now`.
    pub fn register(&mut self, service: Box<dyn TesService>, endpoint: impl Into<String>, now: f64) -> SiteId {
        let info = service.service_info();
        let id = SiteId::new(info.name);
        self.registry.insert(
            id.clone(),
            NodeRegistryEntry {
                node_id: id.clone(),
                endpoint: endpoint.into(),
                up: true,
                last_heartbeat: now,
            },
        );
        self.children.push(Child {
            id: id.clone(),
            sites: info.sites,
            service,
        });
        id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn registry(&self) -> impl Iterator<Item = &NodeRegistryEntry> {
        self.registry.values()
    }

    pub fn is_up(&self, node: &SiteId) -> bool {
        self.registry.get(node).is_some_and(|e| e.up)
    }

    /// Records a heartbeat and recomputes health. Returns the node's health.
    pub fn heartbeat(&mut self, node: &SiteId, at: f64) -> Result<bool, TesError> {
        let entry = self
            .registry
            .get_mut(node)
            .ok_or_else(|| TesError::UnknownNode(node.clone()))?;
        entry.last_heartbeat = entry.last_heartbeat.max(at);
        self.refresh(at);
        Ok(self.is_up(node))
    }

    /// Marks nodes whose last heartbeat is older than the timeout as down.
    /// Returns the nodes whose health changed.
    pub fn refresh(&mut self, now: f64) -> Vec<(SiteId, bool)> {
        let mut changed = Vec::new();
        for e in self.registry.values_mut() {
            let up = now - e.last_heartbeat <= self.timeout_s;
            if up != e.up {
                e.up = up;
                changed.push((e.node_id.clone(), up));
            }
        }
        changed
    }

    fn candidate_cost(&self, child: &Child, inputs: &[DataRef]) -> RouteCandidate {
        let remote = |site: &SiteId| -> u64 {
            inputs.iter().filter(|i| &i.home_site != site).map(|i| i.size_bytes).sum()
        };
        let seconds = |site: &SiteId| -> Option<f64> {
            let topo = self.topology.as_ref()?;
            let mut total = 0.0;
            for i in inputs {
                total += topo.transfer_time(i.size_bytes, &i.home_site, site).ok()?;
            }
            Some(total)
        };
        // a nested gateway is as cheap as its cheapest site
        let best = child
            .sites
            .iter()
            .map(|s| (remote(s), s))
            .min()
            .expect("child exposes at least one site");
        let cost_s = match self.policy {
            RoutingPolicy::Locality(CostModel::TransferTime) => child
                .sites
                .iter()
                .filter_map(seconds)
                .min_by(|a, b| a.total_cmp(b)),
            _ => None,
        };
        RouteCandidate {
            node: child.id.clone(),
            cost_bytes_remote: best.0,
            cost_s,
        }
    }

    /// Chooses the healthy child with the lowest cost for `inputs`; ties go
    /// to the lower node id.
    pub fn route(&mut self, inputs: &[DataRef], now: f64) -> Result<RoutingDecision, TesError> {
        let mut candidates: Vec<(usize, RouteCandidate)> = self
            .children
            .iter()
            .enumerate()
            .filter(|(_, c)| self.is_up(&c.id))
            .map(|(i, c)| (i, self.candidate_cost(c, inputs)))
            .collect();
        if candidates.is_empty() {
            return Err(TesError::NoHealthyNode);
        }
        let by_time = matches!(self.policy, RoutingPolicy::Locality(CostModel::TransferTime));
        candidates.sort_by(|(_, a), (_, b)| {
            let primary = if by_time {
                a.cost_s
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&b.cost_s.unwrap_or(f64::INFINITY))
            } else {
                a.cost_bytes_remote.cmp(&b.cost_bytes_remote)
            };
            primary.then_with(|| a.node.cmp(&b.node))
        });
        let pick = match &mut self.policy {
            RoutingPolicy::UniformRandom(rng) => rng.random_range(0..candidates.len()),
            RoutingPolicy::Locality(_) => 0,
        };
        let chosen = candidates[pick].1.clone();
        Ok(RoutingDecision {
            gateway: self.name.clone(),
            task_id: String::new(),
            chosen_node: chosen.node,
            cost_bytes_remote: chosen.cost_bytes_remote,
            alternatives: candidates.into_iter().map(|(_, c)| c).collect(),
            inputs: inputs.to_vec(),
            at: now,
        })
    }

    fn child_index(&self, node: &SiteId) -> usize {
        self.children.iter().position(|c| &c.id == node).expect("routed to a registered child")
    }

    /// Fetches a routed task from its owning service. If that service cannot
    /// be reached, the last known document is returned with `stale` set.
    pub fn proxy_status(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError> {
        let owner = *self
            .owners
            .get(id)
            .ok_or_else(|| TesError::UnknownTask(id.to_string()))?;
        let mut doc = match self.children[owner].service.get_task(id, now) {
            Ok(doc) => {
                self.last_known.insert(id.to_string(), doc.clone());
                doc
            }
            Err(TesError::NodeUnreachable(_)) => {
                let mut doc = self.last_known[id].clone();
                doc.stale = Some(true);
                doc
            }
            Err(e) => return Err(e),
        };
        doc.logs.push(TesLog {
            event: format!("{GATEWAY_LOG_PREFIX}{}", self.name),
            at: now,
        });
        Ok(doc)
    }

    pub fn owner_of(&self, id: &str) -> Option<&SiteId> {
        self.owners.get(id).map(|&i| &self.children[i].id)
    }
}

impl TesService for Gateway {
    fn service_info(&self) -> ServiceInfo {
        let mut sites: Vec<SiteId> = self.children.iter().flat_map(|c| c.sites.iter().cloned()).collect();
        sites.sort();
        sites.dedup();
        ServiceInfo {
            name: self.name.clone(),
            kind: ServiceKind::Gateway,
            sites,
        }
    }

    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError> {
        let mut decision = self.route(&req.inputs, now)?;
        let idx = self.child_index(&decision.chosen_node);
        let id = self.children[idx].service.create_task(req.clone(), now)?;
        decision.task_id = id.clone();
        self.decisions.push(decision);
        self.owners.insert(id.clone(), idx);
        let initial = match self.children[idx].service.get_task(&id, now) {
            Ok(doc) => doc,
            Err(_) => TesTaskDoc {
                id: id.clone(),
                state: TaskState::Queued,
                name: req.name,
                command: req.command,
                inputs: req.inputs,
                outputs: Vec::new(),
                resources: req.resources,
                node_count: req.node_count,
                executor_count: req.executor_count,
                logs: Vec::new(),
                creation_time: now,
                stale: None,
            },
        };
        self.last_known.insert(id.clone(), initial);
        Ok(id)
    }

    fn get_task(&mut self, id: &str, now: f64) -> Result<TesTaskDoc, TesError> {
        self.proxy_status(id, now)
    }

    fn list_tasks(&mut self, now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        let ids: Vec<String> = self.owners.keys().take(LIST_PAGE_SIZE).cloned().collect();
        ids.iter().map(|id| self.proxy_status(id, now)).collect()
    }

    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError> {
        let owner = *self
            .owners
            .get(id)
            .ok_or_else(|| TesError::UnknownTask(id.to_string()))?;
        self.children[owner].service.cancel_task(id, now)
    }

    fn drain_decisions(&mut self) -> Vec<RoutingDecision> {
        let mut out = std::mem::take(&mut self.decisions);
        for c in &mut self.children {
            out.extend(c.service.drain_decisions());
        }
        out
    }

    fn tick(&mut self, now: f64) {
        self.refresh(now);
        for c in &mut self.children {
            c.service.tick(now);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::tes_layer::{SharedNode, TesNode};
    use crate::types::{Command, LifecycleEvent, ObjectId};

    const GB: u64 = 1_000_000_000;

    fn node(site: &str) -> SharedNode {
        Arc::new(Mutex::new(TesNode::new(site.into(), ["A", "B", "C"].map(SiteId::from))))
    }

    fn input(site: &str, size: u64) -> DataRef {
        DataRef {
            object_id: ObjectId(format!("{site}-{size}")),
            size_bytes: size,
            home_site: site.into(),
        }
    }

    fn req(inputs: Vec<DataRef>) -> TesCreateRequest {
        TesCreateRequest {
            name: None,
            command: Command {
                duration_s: 1.0,
                output_key: "k".into(),
                output_size_bytes: 0,
            },
            inputs,
            outputs: vec![],
            resources: Default::default(),
            node_count: 1,
            executor_count: 1,
        }
    }

    fn gateway(nodes: &[SharedNode]) -> Gateway {
        let mut g = Gateway::new("gw", DEFAULT_HEALTH_TIMEOUT_S, RoutingPolicy::Locality(CostModel::RemoteBytes));
        for n in nodes {
            g.register(Box::new(n.clone()), "", 0.0);
        }
        g
    }

    /// Independent brute force over healthy nodes.
    fn oracle(inputs: &[DataRef], healthy: &[&str]) -> (SiteId, u64) {
        let mut best: Option<(u64, SiteId)> = None;
        for n in healthy {
            let mut cost = 0;
            for i in inputs {
                if i.home_site.as_str() != *n {
                    cost += i.size_bytes;
                }
            }
            let cand = (cost, SiteId::from(*n));
            if best.as_ref().is_none_or(|b| cand < *b) {
                best = Some(cand);
            }
        }
        let (c, n) = best.unwrap();
        (n, c)
    }

    #[test]
    fn routes_to_data() {
        let nodes = [node("A"), node("B"), node("C")];
        let mut g = gateway(&nodes);
        let d = g.route(&[input("A", GB)], 0.0).unwrap();
        assert_eq!((d.chosen_node.as_str(), d.cost_bytes_remote), ("A", 0));

        let inputs = [input("A", 10 * GB), input("B", GB)];
        let d = g.route(&inputs, 0.0).unwrap();
        assert_eq!((d.chosen_node.clone(), d.cost_bytes_remote), oracle(&inputs, &["A", "B", "C"]));
        assert_eq!(d.chosen_node.as_str(), "A");
        assert_eq!(d.cost_bytes_remote, GB);
        let b = d.alternatives.iter().find(|c| c.node.as_str() == "B").unwrap();
        assert_eq!(b.cost_bytes_remote, 10 * GB);
    }

    #[test]
    fn health_timeout_and_recovery() {
        let nodes = [node("A"), node("B"), node("C")];
        let mut g = gateway(&nodes);
        for n in ["B", "C"] {
            g.heartbeat(&n.into(), 4.0).unwrap();
        }
        assert!(!g.is_up(&"A".into()));
        let d = g.route(&[input("A", GB)], 4.0).unwrap();
        assert_eq!(d.chosen_node.as_str(), "B");
        assert_eq!((d.chosen_node.clone(), d.cost_bytes_remote), oracle(&[input("A", GB)], &["B", "C"]));
        assert_eq!(g.heartbeat(&"A".into(), 4.5), Ok(true));
        assert_eq!(g.route(&[input("A", GB)], 4.5).unwrap().chosen_node.as_str(), "A");
        assert_eq!(g.heartbeat(&"Z".into(), 1.0), Err(TesError::UnknownNode("Z".into())));
        g.refresh(100.0);
        assert_eq!(g.route(&[], 100.0), Err(TesError::NoHealthyNode));
    }

    #[test]
    fn proxy_marks_stale_when_node_unreachable() {
        let nodes = [node("A"), node("B")];
        let mut g = gateway(&nodes);
        let id = g.create_task(req(vec![input("B", 5)]), 0.0).unwrap();
        assert_eq!(g.owner_of(&id).unwrap().as_str(), "B");
        let live = g.proxy_status(&id, 1.0).unwrap();
        assert_eq!(live.stale, None);
        assert_eq!(live.without_gateway_entries(), nodes[1].lock().unwrap().doc(&id).unwrap().clone());
        nodes[1].lock().unwrap().set_online(false);
        let stale = g.proxy_status(&id, 2.0).unwrap();
        assert_eq!(stale.stale, Some(true));
        assert_eq!(stale.state, TaskState::Queued);
        assert_eq!(g.proxy_status("nope", 2.0), Err(TesError::UnknownTask("nope".into())));
    }

    #[test]
    fn nested_gateway_matches_single_level() {
        let flat_nodes = [node("A"), node("B"), node("C")];
        let mut flat = gateway(&flat_nodes);
        let nested_nodes = [node("A"), node("B"), node("C")];
        let inner = gateway(&nested_nodes);
        let mut outer = Gateway::new("outer", DEFAULT_HEALTH_TIMEOUT_S, RoutingPolicy::Locality(CostModel::RemoteBytes));
        outer.register(Box::new(inner), "", 0.0);

        for (i, site) in ["C", "A", "B", "A"].iter().enumerate() {
            let r = req(vec![input(site, 100 + i as u64)]);
            let a = flat.create_task(r.clone(), 0.0).unwrap();
            let b = outer.create_task(r, 0.0).unwrap();
            assert_eq!(a, b);
        }
        for (flat_n, nested_n) in flat_nodes.iter().zip(&nested_nodes) {
            let ids = |n: &SharedNode| n.lock().unwrap().clone().list_tasks(0.0).unwrap();
            assert_eq!(ids(flat_n), ids(nested_n));
        }
        let decisions = outer.drain_decisions();
        assert_eq!(decisions.len(), 8);
        // outer decisions name the inner gateway, inner ones the node
        assert_eq!(decisions[0].chosen_node.as_str(), "gw");
        assert_eq!(decisions[4].chosen_node.as_str(), "C");

        let id = "A.task-000001";
        nested_nodes[0]
            .lock()
            .unwrap()
            .record_event(id, LifecycleEvent::StartInit, 1.0, vec![]);
        let doc = outer.get_task(id, 2.0).unwrap();
        assert_eq!(doc.logs.iter().filter(|l| l.event.starts_with(GATEWAY_LOG_PREFIX)).count(), 2);
        assert_eq!(doc.without_gateway_entries(), nested_nodes[0].lock().unwrap().doc(id).unwrap().clone());
    }
}
