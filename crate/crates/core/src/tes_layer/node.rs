use std::collections::{BTreeMap, BTreeSet};

use super::{ServiceInfo, ServiceKind, TesCreateRequest, TesError, TesLog, TesService, TesTaskDoc, LIST_PAGE_SIZE};
use crate::types::{advance_state, DataRef, LifecycleEvent, SiteId, TaskSpec, TaskState, TaskValidator, ValidationError};

/// Work handed from a node to the runtime that executes its tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeCommand {
    Start { id: String, spec: TaskSpec },
    Cancel { id: String },
}

/// A TES-subset service for one site.
#[derive(Debug, Clone)]
pub struct TesNode {
    site: SiteId,
    known_sites: BTreeSet<SiteId>,
    counter: u64,
    docs: BTreeMap<String, TesTaskDoc>,
    outbox: Vec<NodeCommand>,
    online: bool,
}

impl TesNode {
    pub fn new(site: SiteId, known_sites: impl IntoIterator<Item = SiteId>) -> Self {
        TesNode {
            site,
            known_sites: known_sites.into_iter().collect(),
            counter: 0,
            docs: BTreeMap::new(),
            outbox: Vec::new(),
            online: true,
        }
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    /// An offline node refuses every request, as a crashed host would.
    pub fn set_online(&mut self, online: bool) {
        self.online = online;
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    pub fn take_commands(&mut self) -> Vec<NodeCommand> {
        std::mem::take(&mut self.outbox)
    }

    pub fn doc(&self, id: &str) -> Option<&TesTaskDoc> {
        self.docs.get(id)
    }

    /// Applies a lifecycle event reported by the executing runtime. Events
    /// that no longer apply (e.g. after a cancel) are ignored.
    pub fn record_event(
        &mut self,
        id: &str,
        event: LifecycleEvent,
        at: f64,
        outputs: Vec<DataRef>,
    ) -> Option<TaskState> {
        let doc = self.docs.get_mut(id)?;
        let next = advance_state(doc.state, event).ok()?;
        doc.state = next;
        doc.logs.push(TesLog {
            event: next.to_string(),
            at,
        });
        if next == TaskState::Complete {
            doc.outputs = outputs;
        }
        Some(next)
    }

    fn reachable(&self) -> Result<(), TesError> {
        if self.online {
            Ok(())
        } else {
            Err(TesError::NodeUnreachable(self.site.to_string()))
        }
    }
}

impl TesService for TesNode {
    fn service_info(&self) -> ServiceInfo {
        ServiceInfo {
            name: self.site.to_string(),
            kind: ServiceKind::Node,
            sites: vec![self.site.clone()],
        }
    }

    fn create_task(&mut self, req: TesCreateRequest, now: f64) -> Result<String, TesError> {
        self.reachable()?;
        self.counter += 1;
        let id = format!("{}.task-{:06}", self.site, self.counter);
        let spec = TaskSpec {
            id: id.clone(),
            command: req.command,
            inputs: req.inputs,
            outputs: req.outputs,
            resources: req.resources,
            node_count: req.node_count,
            executor_count: req.executor_count,
            partition_hint: None,
        };
        // the node only knows the sites it was configured with
        let mut validator = TaskValidator::new(self.known_sites.iter().cloned());
        let spec = validator
            .validate(spec)
            .map_err(|e| match e {
                ValidationError::UnknownSite(s) => TesError::MalformedSpec(format!("unknown site `{s}`")),
                other => TesError::MalformedSpec(other.to_string()),
            })?
            .into_spec();
        let doc = TesTaskDoc {
            id: id.clone(),
            state: TaskState::Queued,
            name: req.name,
            command: spec.command.clone(),
            inputs: spec.inputs.clone(),
            outputs: Vec::new(),
            resources: spec.resources.clone(),
            node_count: spec.node_count,
            executor_count: spec.executor_count,
            logs: vec![TesLog {
                event: TaskState::Queued.to_string(),
                at: now,
            }],
            creation_time: now,
            stale: None,
        };
        self.docs.insert(id.clone(), doc);
        self.outbox.push(NodeCommand::Start { id: id.clone(), spec });
        Ok(id)
    }

    fn get_task(&mut self, id: &str, _now: f64) -> Result<TesTaskDoc, TesError> {
        self.reachable()?;
        self.docs
            .get(id)
            .cloned()
            .ok_or_else(|| TesError::UnknownTask(id.to_string()))
    }

    fn list_tasks(&mut self, _now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        self.reachable()?;
        Ok(self.docs.values().take(LIST_PAGE_SIZE).cloned().collect())
    }

    fn cancel_task(&mut self, id: &str, now: f64) -> Result<(), TesError> {
        self.reachable()?;
        let doc = self
            .docs
            .get_mut(id)
            .ok_or_else(|| TesError::UnknownTask(id.to_string()))?;
        let next = advance_state(doc.state, LifecycleEvent::Cancel)
            .map_err(|_| TesError::AlreadyTerminal(id.to_string()))?;
        doc.state = next;
        doc.logs.push(TesLog {
            event: next.to_string(),
            at: now,
        });
        self.outbox.push(NodeCommand::Cancel { id: id.to_string() });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Command;

    fn req() -> TesCreateRequest {
        TesCreateRequest {
            name: Some("t".into()),
            command: Command {
                duration_s: 5.0,
                output_key: "k".into(),
                output_size_bytes: 1,
            },
            inputs: vec![],
            outputs: vec!["out".into()],
            resources: Default::default(),
            node_count: 1,
            executor_count: 1,
        }
    }

    #[test]
    fn create_get_cancel() {
        let mut n = TesNode::new("a".into(), ["a".into()]);
        let id = n.create_task(req(), 0.0).unwrap();
        assert!(id.starts_with("a."));
        let doc = n.get_task(&id, 0.0).unwrap();
        assert_eq!(doc.state, TaskState::Queued);
        n.cancel_task(&id, 1.0).unwrap();
        assert_eq!(n.get_task(&id, 1.0).unwrap().state, TaskState::Canceled);
        assert_eq!(n.cancel_task(&id, 2.0), Err(TesError::AlreadyTerminal(id.clone())));
        let cmds = n.take_commands();
        assert!(matches!(cmds[0], NodeCommand::Start { .. }));
        assert!(matches!(cmds[1], NodeCommand::Cancel { .. }));
        assert_eq!(n.get_task("nope", 0.0), Err(TesError::UnknownTask("nope".into())));
    }

    #[test]
    fn completed_task_cannot_be_canceled() {
        let mut n = TesNode::new("a".into(), ["a".into()]);
        let id = n.create_task(req(), 0.0).unwrap();
        for e in [LifecycleEvent::StartInit, LifecycleEvent::StartRun, LifecycleEvent::FinishOk] {
            n.record_event(&id, e, 1.0, vec![]);
        }
        assert_eq!(n.cancel_task(&id, 2.0).unwrap_err().status(), 409);
    }

    #[test]
    fn malformed_and_offline() {
        let mut n = TesNode::new("a".into(), ["a".into()]);
        let mut bad = req();
        bad.node_count = 0;
        assert_eq!(n.create_task(bad, 0.0).unwrap_err().status(), 400);
        n.set_online(false);
        assert!(matches!(n.create_task(req(), 0.0), Err(TesError::NodeUnreachable(_))));
    }
}
