//! Append-only provenance log shared by the simulator, the services and the
//! replay verifier.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::executors::Placement;
use crate::metadata_repo::BatchTag;
use crate::tes_layer::RoutingDecision;
use crate::types::{LifecycleEvent, ObjectId, SiteId, TaskState};

/// Capacity of one slot pool as declared at run start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolInfo {
    pub pool: String,
    pub site: SiteId,
    pub slots: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    RunStart {
        mode: String,
        seed: u64,
        pools: Vec<PoolInfo>,
        max_retries: u32,
    },
    Register {
        batch: String,
        version: u64,
    },
    Submit {
        task: String,
        backend: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hint: Option<String>,
        node_count: u32,
        executor_count: u32,
    },
    Placement {
        task: String,
        backend: String,
        placement: Placement,
        node_count: u32,
        executor_count: u32,
    },
    TaskState {
        task: String,
        pool: String,
        site: SiteId,
        from: TaskState,
        to: TaskState,
        event: LifecycleEvent,
    },
    Transfer {
        object: ObjectId,
        from: SiteId,
        to: SiteId,
        bytes: u64,
        done_at: f64,
    },
    TransferDone {
        object: ObjectId,
        site: SiteId,
    },
    TaskDone {
        task: String,
        site: SiteId,
        state: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<ObjectId>,
    },
    SiteDown {
        site: SiteId,
    },
    SiteUp {
        site: SiteId,
    },
    Preempt {
        site: SiteId,
    },
    Claim {
        batch: String,
        site: SiteId,
        version: u64,
        attempts: u32,
        lease_expiry: f64,
    },
    ClaimConflict {
        batch: String,
        site: SiteId,
        expected_version: u64,
        current_version: u64,
    },
    Report {
        batch: String,
        site: SiteId,
        tag: BatchTag,
        version: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lease_expiry: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<ObjectId>,
    },
    ReportRejected {
        batch: String,
        site: SiteId,
        tag: BatchTag,
        reason: String,
    },
    LeaseExpired {
        batch: String,
        tag: BatchTag,
        version: u64,
    },
    Route {
        decision: RoutingDecision,
    },
    NodeHealth {
        node: SiteId,
        up: bool,
    },
    RunEnd {
        status: String,
        ledger_bytes: u64,
        registered: u64,
        batch_tags: BTreeMap<String, u64>,
        starved: Vec<String>,
    },
}

impl Record {
    pub fn kind(&self) -> &'static str {
        match self {
            Record::RunStart { .. } => "run_start",
            Record::Register { .. } => "register",
            Record::Submit { .. } => "submit",
            Record::Placement { .. } => "placement",
            Record::TaskState { .. } => "task_state",
            Record::Transfer { .. } => "transfer",
            Record::TransferDone { .. } => "transfer_done",
            Record::TaskDone { .. } => "task_done",
            Record::SiteDown { .. } => "site_down",
            Record::SiteUp { .. } => "site_up",
            Record::Preempt { .. } => "preempt",
            Record::Claim { .. } => "claim",
            Record::ClaimConflict { .. } => "claim_conflict",
            Record::Report { .. } => "report",
            Record::ReportRejected { .. } => "report_rejected",
            Record::LeaseExpired { .. } => "lease_expired",
            Record::Route { .. } => "route",
            Record::NodeHealth { .. } => "node_health",
            Record::RunEnd { .. } => "run_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at: f64,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, at: f64, record: Record) {
        let seq = self.entries.len() as u64;
        self.entries.push(LogEntry { seq, at, record });
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: Vec<LogEntry>) -> Self {
        EventLog { entries }
    }

    pub fn into_entries(self) -> Vec<LogEntry> {
        self.entries
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses an NDJSON log. Returns the 1-based line number on failure.
    pub fn read_ndjson<R: BufRead>(input: R) -> Result<Self, (usize, String)> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| (i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry =
                serde_json::from_str(&line).map_err(|e| (i + 1, e.to_string()))?;
            entries.push(entry);
        }
        Ok(EventLog { entries })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_ndjson().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_has_stable_leading_fields() {
        let mut log = EventLog::new();
        log.append(1.5, Record::SiteDown { site: "a".into() });
        let text = log.to_ndjson();
        assert_eq!(text, "{\"seq\":0,\"at\":1.5,\"kind\":\"site_down\",\"site\":\"a\"}\n");
        let back = EventLog::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn bad_line_reports_position() {
        let text = "{\"seq\":0,\"at\":0.0,\"kind\":\"site_up\",\"site\":\"a\"}\n{\"seq\":1,";
        assert_eq!(EventLog::read_ndjson(text.as_bytes()).unwrap_err().0, 2);
    }
}
