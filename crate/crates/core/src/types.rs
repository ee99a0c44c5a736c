//! Shared domain types: identifiers, task descriptions and the task lifecycle.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a simulated cloud site.
///
/// Ordering is lexicographic and acts as the global tie-breaker for every
/// placement decision in the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub String);

impl SiteId {
    pub fn new(id: impl Into<String>) -> Self {
        SiteId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SiteId {
    fn from(s: &str) -> Self {
        SiteId(s.to_string())
    }
}

/// Hex-encoded SHA-256 digest of an object's content.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reference to a content-addressed object and the site it originates from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    pub object_id: ObjectId,
    pub size_bytes: u64,
    pub home_site: SiteId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceRequest {
    pub cpu_cores: u32,
    #[serde(default)]
    pub ram_gb: f64,
    #[serde(default)]
    pub disk_gb: f64,
}

impl Default for ResourceRequest {
    fn default() -> Self {
        ResourceRequest {
            cpu_cores: 1,
            ram_gb: 0.0,
            disk_gb: 0.0,
        }
    }
}

impl ResourceRequest {
    fn check(&self) -> Result<(), String> {
        if self.cpu_cores == 0 {
            return Err("cpu_cores must be at least 1".into());
        }
        for (name, v) in [("ram_gb", self.ram_gb), ("disk_gb", self.disk_gb)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Abstract unit of work: a logical duration plus the key from which the
/// task's output content is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub duration_s: f64,
    pub output_key: String,
    #[serde(default = "default_output_size")]
    pub output_size_bytes: u64,
}

fn default_output_size() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub command: Command,
    #[serde(default)]
    pub inputs: Vec<DataRef>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub resources: ResourceRequest,
    #[serde(default = "one")]
    pub node_count: u32,
    #[serde(default = "one")]
    pub executor_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_hint: Option<String>,
}

pub(crate) fn one() -> u32 {
    1
}

impl TaskSpec {
    /// Single-node, single-container tasks are the only ones an overflow
    /// router may move to its secondary backend.
    pub fn offload_eligible(&self) -> bool {
        self.node_count == 1 && self.executor_count == 1
    }

    pub fn remote_input_bytes(&self, site: &SiteId) -> u64 {
        self.inputs
            .iter()
            .filter(|i| &i.home_site != site)
            .map(|i| i.size_bytes)
            .sum()
    }
}

/// A task that passed [`TaskValidator::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedTask(TaskSpec);

impl ValidatedTask {
    pub fn spec(&self) -> &TaskSpec {
        &self.0
    }

    pub fn id(&self) -> &str {
        &self.0.id
    }

    pub fn into_spec(self) -> TaskSpec {
        self.0
    }
}

impl std::ops::Deref for ValidatedTask {
    type Target = TaskSpec;
    fn deref(&self) -> &TaskSpec {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("unknown site `{0}`")]
    UnknownSite(SiteId),
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("malformed task spec: {0}")]
    MalformedSpec(String),
}

/// Checks task specs against the set of sites of a scenario and remembers
/// every id it has accepted.
#[derive(Debug, Clone, Default)]
pub struct TaskValidator {
    sites: BTreeSet<SiteId>,
    seen: HashSet<String>,
}

impl TaskValidator {
    pub fn new(sites: impl IntoIterator<Item = SiteId>) -> Self {
        TaskValidator {
            sites: sites.into_iter().collect(),
            seen: HashSet::new(),
        }
    }

    pub fn validate(&mut self, spec: TaskSpec) -> Result<ValidatedTask, ValidationError> {
        check_shape(&spec)?;
        for input in &spec.inputs {
            if !self.sites.contains(&input.home_site) {
                return Err(ValidationError::UnknownSite(input.home_site.clone()));
            }
        }
        if self.seen.contains(&spec.id) {
            return Err(ValidationError::DuplicateTaskId(spec.id));
        }
        self.seen.insert(spec.id.clone());
        Ok(ValidatedTask(spec))
    }
}

/// Validates a task against the sites of a scenario. Id uniqueness is tracked
/// by the caller-owned validator; see [`TaskValidator`].
pub fn validate_task(
    spec: TaskSpec,
    validator: &mut TaskValidator,
) -> Result<ValidatedTask, ValidationError> {
    validator.validate(spec)
}

fn check_shape(spec: &TaskSpec) -> Result<(), ValidationError> {
    let bad = |m: String| Err(ValidationError::MalformedSpec(m));
    if spec.id.is_empty() {
        return bad("empty task id".into());
    }
    if spec.node_count == 0 {
        return bad("node_count must be at least 1".into());
    }
    if spec.executor_count == 0 {
        return bad("executor_count must be at least 1".into());
    }
    let d = spec.command.duration_s;
    if !d.is_finite() || d < 0.0 {
        return bad(format!("duration_s must be finite and nonnegative, got {d}"));
    }
    spec.resources.check().map_err(ValidationError::MalformedSpec)
}

/// Task lifecycle, named after the states of the task execution standard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Initializing,
    Running,
    Complete,
    ExecutorError,
    SystemError,
    Canceled,
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Queued,
        TaskState::Initializing,
        TaskState::Running,
        TaskState::Complete,
        TaskState::ExecutorError,
        TaskState::SystemError,
        TaskState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::Complete
                | TaskState::ExecutorError
                | TaskState::SystemError
                | TaskState::Canceled
        )
    }

    /// Whether a task in this state holds an execution slot.
    pub fn occupies_slot(self) -> bool {
        matches!(self, TaskState::Initializing | TaskState::Running)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskState::Queued => "QUEUED",
            TaskState::Initializing => "INITIALIZING",
            TaskState::Running => "RUNNING",
            TaskState::Complete => "COMPLETE",
            TaskState::ExecutorError => "EXECUTOR_ERROR",
            TaskState::SystemError => "SYSTEM_ERROR",
            TaskState::Canceled => "CANCELED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    StartInit,
    StartRun,
    FinishOk,
    FinishExecutorErr,
    FinishSystemErr,
    Cancel,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 6] = [
        LifecycleEvent::StartInit,
        LifecycleEvent::StartRun,
        LifecycleEvent::FinishOk,
        LifecycleEvent::FinishExecutorErr,
        LifecycleEvent::FinishSystemErr,
        LifecycleEvent::Cancel,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} from {from}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

/// Applies one lifecycle event to a task state.
pub fn advance_state(
    current: TaskState,
    event: LifecycleEvent,
) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;
    let next = match (current, event) {
        (S::Queued, E::StartInit) => S::Initializing,
        (S::Initializing, E::StartRun) => S::Running,
        (S::Running, E::FinishOk) => S::Complete,
        (S::Running, E::FinishExecutorErr) => S::ExecutorError,
        // a site can fail while inputs are still being staged
        (S::Initializing | S::Running, E::FinishSystemErr) => S::SystemError,
        (s, E::Cancel) if !s.is_terminal() => S::Canceled,
        (from, event) => return Err(IllegalTransition { from, event }),
    };
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, home: &str) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            command: Command {
                duration_s: 1.0,
                output_key: id.into(),
                output_size_bytes: 0,
            },
            inputs: vec![DataRef {
                object_id: ObjectId("00".into()),
                size_bytes: 10,
                home_site: home.into(),
            }],
            outputs: vec![],
            resources: ResourceRequest::default(),
            node_count: 1,
            executor_count: 1,
            partition_hint: None,
        }
    }

    #[test]
    fn documented_transitions() {
        use LifecycleEvent as E;
        use TaskState as S;
        assert_eq!(advance_state(S::Queued, E::StartInit), Ok(S::Initializing));
        assert!(advance_state(S::Complete, E::Cancel).is_err());
        assert_eq!(
            advance_state(S::Running, E::FinishExecutorErr),
            Ok(S::ExecutorError)
        );
    }

    #[test]
    fn transition_table_is_exact() {
        use LifecycleEvent as E;
        use TaskState as S;
        let expected: &[(S, E, S)] = &[
            (S::Queued, E::StartInit, S::Initializing),
            (S::Queued, E::Cancel, S::Canceled),
            (S::Initializing, E::StartRun, S::Running),
            (S::Initializing, E::FinishSystemErr, S::SystemError),
            (S::Initializing, E::Cancel, S::Canceled),
            (S::Running, E::FinishOk, S::Complete),
            (S::Running, E::FinishExecutorErr, S::ExecutorError),
            (S::Running, E::FinishSystemErr, S::SystemError),
            (S::Running, E::Cancel, S::Canceled),
        ];
        let mut legal = 0;
        for s in TaskState::ALL {
            for e in LifecycleEvent::ALL {
                let want = expected
                    .iter()
                    .find(|(f, ev, _)| *f == s && *ev == e)
                    .map(|t| t.2);
                assert_eq!(advance_state(s, e).ok(), want, "{s} {e:?}");
                legal += want.is_some() as usize;
            }
        }
        assert_eq!(legal, expected.len());
    }

    #[test]
    fn terminal_states_absorb() {
        for s in TaskState::ALL.into_iter().filter(|s| s.is_terminal()) {
            for e in LifecycleEvent::ALL {
                assert!(advance_state(s, e).is_err());
            }
        }
    }

    #[test]
    fn validation_errors() {
        let mut v = TaskValidator::new(["eu-1".into(), "eu-2".into()]);
        assert!(v.validate(spec("t0", "eu-1")).is_ok());
        assert_eq!(
            v.validate(spec("t2", "mars-1")),
            Err(ValidationError::UnknownSite("mars-1".into()))
        );
        assert!(v.validate(spec("t1", "eu-2")).is_ok());
        assert_eq!(
            v.validate(spec("t1", "eu-2")),
            Err(ValidationError::DuplicateTaskId("t1".into()))
        );
        let mut bad = spec("t3", "eu-1");
        bad.node_count = 0;
        assert!(matches!(v.validate(bad), Err(ValidationError::MalformedSpec(_))));
        let mut bad = spec("t4", "eu-1");
        bad.command.duration_s = f64::NAN;
        assert!(matches!(v.validate(bad), Err(ValidationError::MalformedSpec(_))));
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let ok = r#"{"object_id":"ab","size_bytes":3,"home_site":"a"}"#;
        assert!(serde_json::from_str::<DataRef>(ok).is_ok());
        let bad = r#"{"object_id":"ab","size_bytes":3,"home_site":"a","extra":1}"#;
        assert!(serde_json::from_str::<DataRef>(bad).is_err());
        assert_eq!(
            serde_json::to_string(&TaskState::ExecutorError).unwrap(),
            "\"EXECUTOR_ERROR\""
        );
    }
}
