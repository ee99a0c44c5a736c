//! Execution backends: a slot-limited local executor, a batch cluster with
//! one partition per site, and a capacity-overflow router that moves
//! eligible tasks from an orchestrator-like primary to a batch-like
//! secondary.
//!
//! Backends only decide *where and when* a task starts. Staging, running
//! and completion are driven by the simulation runtime.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{SiteId, ValidatedTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Local,
    BatchCluster,
    OverflowRouter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub name: String,
    pub site: SiteId,
    pub slots: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cpu_cores: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ram_gb: Option<f64>,
}

impl PartitionSpec {
    pub fn fits(&self, task: &ValidatedTask) -> bool {
        self.max_cpu_cores.is_none_or(|c| task.resources.cpu_cores <= c)
            && self.max_ram_gb.is_none_or(|r| task.resources.ram_gb <= r)
    }
}

/// Declarative backend configuration, part of the scenario file.
///
/// For `overflow_router`, `site`/`slots` describe the primary and the single
/// entry of `partitions` describes the secondary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    pub site: SiteId,
    pub slots: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<PartitionSpec>,
    /// Concurrent offload limit of a router (single shared mount proxy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offload_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("task `{0}` fits no partition of backend `{1}`")]
    NoEligiblePartition(String, String),
    #[error("unknown partition `{0}`")]
    UnknownPartition(String),
    #[error("invalid backend `{0}`: {1}")]
    InvalidBackend(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Primary,
    Offloaded,
    QueuedPrimary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedJob {
    pub task: ValidatedTask,
    pub enqueued_at: f64,
    pub partition_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub spec: PartitionSpec,
    running: BTreeSet<String>,
}

impl Partition {
    fn new(spec: PartitionSpec) -> Self {
        Partition {
            spec,
            running: BTreeSet::new(),
        }
    }

    pub fn free(&self) -> u32 {
        self.spec.slots.saturating_sub(self.running.len() as u32)
    }

    pub fn running(&self) -> &BTreeSet<String> {
        &self.running
    }
}

/// A task leaving the queue for a concrete partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub task: ValidatedTask,
    pub partition: String,
    pub site: SiteId,
    /// Site whose storage an offloaded task mounts remotely.
    pub mount_site: Option<SiteId>,
}

const PRIMARY: &str = "primary";
const SECONDARY: &str = "secondary";

#[derive(Debug, Clone)]
pub struct Backend {
    id: String,
    kind: BackendKind,
    partitions: Vec<Partition>,
    queues: BTreeMap<String, VecDeque<QueuedJob>>,
    offload_cap: Option<u32>,
    offloaded: BTreeSet<String>,
    location: BTreeMap<String, usize>,
}

impl Backend {
    pub fn from_descriptor(d: &BackendDescriptor) -> Result<Self, ExecError> {
        let invalid = |m: &str| ExecError::InvalidBackend(d.id.clone(), m.to_string());
        if d.slots == 0 {
            return Err(invalid("slots must be at least 1"));
        }
        let (partitions, queues): (Vec<PartitionSpec>, Vec<&str>) = match d.kind {
            BackendKind::Local => (
                vec![PartitionSpec {
                    name: "default".into(),
                    site: d.site.clone(),
                    slots: d.slots,
                    max_cpu_cores: None,
                    max_ram_gb: None,
                }],
                vec!["default"],
            ),
            BackendKind::BatchCluster => {
                if d.partitions.is_empty() {
                    return Err(invalid("batch cluster needs at least one partition"));
                }
                (d.partitions.clone(), vec!["fifo"])
            }
            BackendKind::OverflowRouter => {
                let [secondary] = d.partitions.as_slice() else {
                    return Err(invalid("overflow router needs exactly one secondary partition"));
                };
                let primary = PartitionSpec {
                    name: PRIMARY.into(),
                    site: d.site.clone(),
                    slots: d.slots,
                    max_cpu_cores: None,
                    max_ram_gb: None,
                };
                let secondary = PartitionSpec {
                    name: SECONDARY.into(),
                    ..secondary.clone()
                };
                (vec![primary, secondary], vec![PRIMARY, SECONDARY])
            }
        };
        let mut names = BTreeSet::new();
        for p in &partitions {
            if p.slots == 0 {
                return Err(invalid(&format!("partition `{}` has no slots", p.name)));
            }
            if !names.insert(p.name.clone()) {
                return Err(invalid(&format!("duplicate partition `{}`", p.name)));
            }
        }
        Ok(Backend {
            id: d.id.clone(),
            kind: d.kind,
            partitions: partitions.into_iter().map(Partition::new).collect(),
            queues: queues.into_iter().map(|q| (q.to_string(), VecDeque::new())).collect(),
            offload_cap: d.offload_cap,
            offloaded: BTreeSet::new(),
            location: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn pool_name(&self, partition: &str) -> String {
        format!("{}/{}", self.id, partition)
    }

    fn partition(&self, name: &str) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.spec.name == name)
    }

    fn partition_idx(&self, name: &str) -> usize {
        self.partitions
            .iter()
            .position(|p| p.spec.name == name)
            .expect("partition exists")
    }

    fn free_on(&self, name: &str, up: &dyn Fn(&SiteId) -> bool) -> u32 {
        self.partition(name)
            .filter(|p| up(&p.spec.site))
            .map_or(0, Partition::free)
    }

    /// Picks the partition a batch-cluster job starts on. `Ok(None)` means
    /// the job must wait for a slot; an error means it can never run.
    pub fn select_partition(
        &self,
        task: &ValidatedTask,
        up: &dyn Fn(&SiteId) -> bool,
    ) -> Result<Option<String>, ExecError> {
        let none = || ExecError::NoEligiblePartition(task.id.clone(), self.id.clone());
        if let Some(hint) = &task.partition_hint {
            let p = self
                .partition(hint)
                .ok_or_else(|| ExecError::UnknownPartition(hint.clone()))?;
            if !p.spec.fits(task) {
                return Err(none());
            }
            return Ok((up(&p.spec.site) && p.free() > 0).then(|| hint.clone()));
        }
        let feasible: Vec<&Partition> = self.partitions.iter().filter(|p| p.spec.fits(task)).collect();
        if feasible.is_empty() {
            return Err(none());
        }
        let best = feasible
            .into_iter()
            .filter(|p| up(&p.spec.site) && p.free() > 0)
            .min_by(|a, b| b.free().cmp(&a.free()).then_with(|| a.spec.name.cmp(&b.spec.name)));
        Ok(best.map(|p| p.spec.name.clone()))
    }

    /// Capacity-overflow decision of a router.
    pub fn admit_or_offload(&self, task: &ValidatedTask, up: &dyn Fn(&SiteId) -> bool) -> Placement {
        let waiting = self.queues.get(PRIMARY).map_or(0, VecDeque::len) as u32;
        if self.free_on(PRIMARY, up) > waiting {
            return Placement::Primary;
        }
        let cap_ok = self
            .offload_cap
            .is_none_or(|cap| (self.offloaded.len() as u32) < cap);
        if task.offload_eligible() && cap_ok && self.partitions[1].spec.fits(task) {
            Placement::Offloaded
        } else {
            Placement::QueuedPrimary
        }
    }

    /// Enqueues a task. Returns the router placement for overflow routers.
    pub fn submit(
        &mut self,
        task: ValidatedTask,
        now: f64,
        up: &dyn Fn(&SiteId) -> bool,
    ) -> Result<Option<Placement>, ExecError> {
        let hint = task.partition_hint.clone();
        let (queue, placement) = match self.kind {
            BackendKind::Local => {
                if let Some(h) = &hint {
                    return Err(ExecError::UnknownPartition(h.clone()));
                }
                ("default", None)
            }
            BackendKind::BatchCluster => {
                self.select_partition(&task, up)?;
                ("fifo", None)
            }
            BackendKind::OverflowRouter => {
                let placement = self.admit_or_offload(&task, up);
                match placement {
                    Placement::Offloaded => {
                        self.offloaded.insert(task.id.clone());
                        (SECONDARY, Some(placement))
                    }
                    _ => (PRIMARY, Some(placement)),
                }
            }
        };
        self.queues.get_mut(queue).expect("queue exists").push_back(QueuedJob {
            task,
            enqueued_at: now,
            partition_hint: hint,
        });
        Ok(placement)
    }

    /// Starts every queued job that can start now, in FIFO order per queue.
    /// The batch-cluster queue is strict FIFO: a blocked head blocks the rest.
    pub fn dispatch(&mut self, up: &dyn Fn(&SiteId) -> bool) -> Vec<Start> {
        let mut started = Vec::new();
        let queue_names: Vec<String> = self.queues.keys().cloned().collect();
        for q in queue_names {
            while let Some(head) = self.queues[&q].front() {
                let target = match self.kind {
                    BackendKind::BatchCluster => match self.select_partition(&head.task, up) {
                        Ok(Some(p)) => p,
                        _ => break,
                    },
                    _ => q.clone(),
                };
                if self.free_on(&target, up) == 0 {
                    break;
                }
                let job = self.queues.get_mut(&q).unwrap().pop_front().unwrap();
                let idx = self.partition_idx(&target);
                self.partitions[idx].running.insert(job.task.id.clone());
                self.location.insert(job.task.id.clone(), idx);
                let mount_site = (self.kind == BackendKind::OverflowRouter && target == SECONDARY)
                    .then(|| self.partitions[0].spec.site.clone());
                started.push(Start {
                    site: self.partitions[idx].spec.site.clone(),
                    partition: target,
                    task: job.task,
                    mount_site,
                });
            }
        }
        started
    }

    /// Frees the slot held by a finished task.
    pub fn release(&mut self, task_id: &str) {
        if let Some(idx) = self.location.remove(task_id) {
            self.partitions[idx].running.remove(task_id);
        }
        self.offloaded.remove(task_id);
    }

    /// Removes a still-queued task. Returns false if it was not queued.
    pub fn cancel_queued(&mut self, task_id: &str) -> bool {
        for q in self.queues.values_mut() {
            if let Some(pos) = q.iter().position(|j| j.task.id == task_id) {
                q.remove(pos);
                self.offloaded.remove(task_id);
                return true;
            }
        }
        false
    }

    pub fn queued(&self) -> impl Iterator<Item = &QueuedJob> {
        self.queues.values().flatten()
    }

    /// Tasks currently holding a slot on a partition located at `site`.
    pub fn running_at(&self, site: &SiteId) -> Vec<String> {
        self.partitions
            .iter()
            .filter(|p| &p.spec.site == site)
            .flat_map(|p| p.running.iter().cloned())
            .collect()
    }

    /// Offloaded tasks that depend on a mount from `site`.
    pub fn mounted_from(&self, site: &SiteId) -> Vec<String> {
        if self.kind != BackendKind::OverflowRouter || &self.partitions[0].spec.site != site {
            return Vec::new();
        }
        self.partitions[1].running.iter().cloned().collect()
    }

    pub fn is_idle(&self) -> bool {
        self.location.is_empty() && self.queues.values().all(VecDeque::is_empty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Command, ResourceRequest, TaskSpec, TaskValidator};

    fn task(v: &mut TaskValidator, id: &str) -> ValidatedTask {
        shaped(v, id, 1, 1, None, 1)
    }

    fn shaped(
        v: &mut TaskValidator,
        id: &str,
        nodes: u32,
        execs: u32,
        hint: Option<&str>,
        cores: u32,
    ) -> ValidatedTask {
        v.validate(TaskSpec {
            id: id.into(),
            command: Command {
                duration_s: 10.0,
                output_key: id.into(),
                output_size_bytes: 0,
            },
            inputs: vec![],
            outputs: vec![],
            resources: ResourceRequest {
                cpu_cores: cores,
                ..Default::default()
            },
            node_count: nodes,
            executor_count: execs,
            partition_hint: hint.map(str::to_string),
        })
        .unwrap()
    }

    fn cluster(parts: &[(&str, u32)]) -> Backend {
        Backend::from_descriptor(&BackendDescriptor {
            id: "c".into(),
            kind: BackendKind::BatchCluster,
            site: "A".into(),
            slots: 1,
            partitions: parts
                .iter()
                .map(|(n, s)| PartitionSpec {
                    name: n.to_string(),
                    site: SiteId::new(format!("site-{n}")),
                    slots: *s,
                    max_cpu_cores: Some(32),
                    max_ram_gb: None,
                })
                .collect(),
            offload_cap: None,
        })
        .unwrap()
    }

    fn router(primary_slots: u32) -> Backend {
        Backend::from_descriptor(&BackendDescriptor {
            id: "r".into(),
            kind: BackendKind::OverflowRouter,
            site: "k8s".into(),
            slots: primary_slots,
            partitions: vec![PartitionSpec {
                name: "pbs".into(),
                site: "pbs".into(),
                slots: 8,
                max_cpu_cores: None,
                max_ram_gb: None,
            }],
            offload_cap: None,
        })
        .unwrap()
    }

    fn all_up(_: &SiteId) -> bool {
        true
    }

    fn occupy(b: &mut Backend, part: &str, n: u32) {
        let idx = b.partition_idx(part);
        for i in 0..n {
            b.partitions[idx].running.insert(format!("busy-{part}-{i}"));
        }
    }

    #[test]
    fn select_partition_rules() {
        let mut v = TaskValidator::default();
        let mut b = cluster(&[("A", 5), ("B", 5), ("cloud-B", 1)]);
        let hinted = shaped(&mut v, "h", 1, 1, Some("cloud-B"), 1);
        assert_eq!(b.select_partition(&hinted, &all_up), Ok(Some("cloud-B".into())));

        occupy(&mut b, "A", 3);
        let t = task(&mut v, "t");
        assert_eq!(b.select_partition(&t, &all_up), Ok(Some("B".into())));

        let mut b = cluster(&[("A", 3), ("B", 3)]);
        assert_eq!(b.select_partition(&t, &all_up), Ok(Some("A".into())));
        occupy(&mut b, "A", 3);
        occupy(&mut b, "B", 3);
        assert_eq!(b.select_partition(&t, &all_up), Ok(None));

        let big = shaped(&mut v, "big", 1, 1, None, 64);
        assert!(matches!(
            b.select_partition(&big, &all_up),
            Err(ExecError::NoEligiblePartition(..))
        ));
    }

    #[test]
    fn strict_fifo_on_cluster() {
        let mut v = TaskValidator::default();
        let mut b = cluster(&[("A", 1), ("B", 1)]);
        for (id, hint) in [("1", "A"), ("2", "A"), ("3", "B")] {
            b.submit(shaped(&mut v, id, 1, 1, Some(hint), 1), 0.0, &all_up).unwrap();
        }
        let s = b.dispatch(&all_up);
        // job 2 waits on A and blocks job 3 behind it
        assert_eq!(s.iter().map(|s| s.task.id.as_str()).collect::<Vec<_>>(), vec!["1"]);
        b.release("1");
        let s = b.dispatch(&all_up);
        assert_eq!(
            s.iter().map(|s| (s.task.id.as_str(), s.partition.as_str())).collect::<Vec<_>>(),
            vec![("2", "A"), ("3", "B")]
        );
    }

    #[test]
    fn down_partition_is_not_eligible() {
        let mut v = TaskValidator::default();
        let mut b = cluster(&[("A", 2), ("B", 1)]);
        b.submit(task(&mut v, "x"), 0.0, &all_up).unwrap();
        let up = |s: &SiteId| s.as_str() != "site-A";
        let s = b.dispatch(&up);
        assert_eq!(s[0].partition, "B");
    }

    #[test]
    fn overflow_rules() {
        let mut v = TaskValidator::default();
        let mut r = router(2);
        let t = task(&mut v, "a");
        assert_eq!(r.admit_or_offload(&t, &all_up), Placement::Primary);
        occupy(&mut r, PRIMARY, 2);
        assert_eq!(r.admit_or_offload(&t, &all_up), Placement::Offloaded);
        let multi_node = shaped(&mut v, "m", 2, 1, None, 1);
        assert_eq!(r.admit_or_offload(&multi_node, &all_up), Placement::QueuedPrimary);
        let multi_exec = shaped(&mut v, "e", 1, 2, None, 1);
        assert_eq!(r.admit_or_offload(&multi_exec, &all_up), Placement::QueuedPrimary);
    }

    #[test]
    fn burst_overflows_once_primary_is_spoken_for() {
        let mut v = TaskValidator::default();
        let mut r = router(2);
        let placements: Vec<_> = (0..5)
            .map(|i| r.submit(task(&mut v, &format!("t{i}")), 0.0, &all_up).unwrap().unwrap())
            .collect();
        assert_eq!(&placements[..2], [Placement::Primary; 2]);
        assert_eq!(&placements[2..], [Placement::Offloaded; 3]);
        let started = r.dispatch(&all_up);
        assert_eq!(started.len(), 5);
        assert_eq!(started.iter().filter(|s| s.partition == PRIMARY).count(), 2);
    }

    #[test]
    fn offload_cap_limits_router() {
        let mut v = TaskValidator::default();
        let mut d = BackendDescriptor {
            id: "r".into(),
            kind: BackendKind::OverflowRouter,
            site: "k8s".into(),
            slots: 1,
            partitions: vec![PartitionSpec {
                name: "pbs".into(),
                site: "pbs".into(),
                slots: 8,
                max_cpu_cores: None,
                max_ram_gb: None,
            }],
            offload_cap: Some(1),
        };
        let mut r = Backend::from_descriptor(&d).unwrap();
        let placements: Vec<_> = (0..3)
            .map(|i| r.submit(task(&mut v, &format!("t{i}")), 0.0, &all_up).unwrap().unwrap())
            .collect();
        // queued primary work counts against the free slots
        assert_eq!(
            placements,
            [Placement::Primary, Placement::Offloaded, Placement::QueuedPrimary]
        );
        let started = r.dispatch(&all_up);
        assert_eq!(started.len(), 2);
        assert_eq!(started[1].mount_site, Some("k8s".into()));
        let p = r.submit(task(&mut v, "t3"), 0.0, &all_up).unwrap().unwrap();
        assert_eq!(p, Placement::QueuedPrimary);
        r.release("t0");
        r.release("t1");
        assert_eq!(r.dispatch(&all_up).len(), 1);
        let p = r.submit(task(&mut v, "t4"), 0.0, &all_up).unwrap().unwrap();
        assert_eq!(p, Placement::Offloaded);
        d.partitions.clear();
        assert!(Backend::from_descriptor(&d).is_err());
    }
}
