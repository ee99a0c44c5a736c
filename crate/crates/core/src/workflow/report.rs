use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::provenance::{EventLog, Record};
use crate::storage::{digest, Manifest, ManifestEntry};
use crate::types::{SiteId, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Succeeded,
    /// At least one batch (or the gather step) failed for good.
    Failed,
    /// The run hit its horizon or left work that could never start.
    Stalled,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Succeeded => "succeeded",
            RunStatus::Failed => "failed",
            RunStatus::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub status: RunStatus,
    pub makespan_s: f64,
    /// Successfully completed tasks per site, gather task included.
    pub per_site_tasks: BTreeMap<SiteId, u64>,
    pub bytes_transferred_total: u64,
    pub bytes_by_purpose: BTreeMap<String, u64>,
    pub retries: u64,
    pub starved: Vec<String>,
    pub failed_batches: Vec<String>,
    pub final_manifest: Manifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gather_output: Option<ManifestEntry>,
    pub metrics_digest: String,
}

impl RunReport {
    /// Fills `metrics_digest` with the digest of every other field.
    pub(crate) fn seal(mut self) -> Self {
        self.metrics_digest.clear();
        let body = serde_json::to_vec(&self).expect("report serializes");
        self.metrics_digest = digest(&body).0;
        self
    }

    pub fn tasks_completed(&self) -> u64 {
        self.per_site_tasks.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub time: f64,
    pub running: Vec<u32>,
}

/// Running-task count per site after every change, derived from the log.
pub fn timeline(log: &EventLog, sites: &[SiteId]) -> (Vec<TimelineRow>, String) {
    let index: BTreeMap<&SiteId, usize> = sites.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut running = vec![0u32; sites.len()];
    let mut rows: Vec<TimelineRow> = vec![TimelineRow {
        time: 0.0,
        running: running.clone(),
    }];
    for e in log.entries() {
        let Record::TaskState { site, from, to, .. } = &e.record else {
            continue;
        };
        let Some(&i) = index.get(site) else { continue };
        if *to == TaskState::Running {
            running[i] += 1;
        } else if *from == TaskState::Running {
            running[i] = running[i].saturating_sub(1);
        } else {
            continue;
        }
        match rows.last_mut() {
            Some(last) if last.time == e.at => last.running = running.clone(),
            _ => rows.push(TimelineRow {
                time: e.at,
                running: running.clone(),
            }),
        }
    }
    let mut csv = String::from("time");
    for s in sites {
        write!(csv, ",{s}").unwrap();
    }
    csv.push('\n');
    for r in &rows {
        write!(csv, "{}", r.time).unwrap();
        for n in &r.running {
            write!(csv, ",{n}").unwrap();
        }
        csv.push('\n');
    }
    (rows, csv)
}
