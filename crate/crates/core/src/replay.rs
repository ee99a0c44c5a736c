//! Independent re-check of a run from its event log alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::Serialize;
use thiserror::Error;

use crate::executors::Placement;
use crate::metadata_repo::BatchTag;
use crate::provenance::{EventLog, LogEntry, Record};
use crate::types::{advance_state, SiteId, TaskState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

fn corrupt<T>(line: usize, reason: impl Into<String>) -> Result<T, ReplayError> {
    Err(ReplayError::CorruptLog {
        line,
        reason: reason.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ClockMonotonic,
    LegalTransition,
    PoolCapacity,
    PartitionPinning,
    OffloadEligibility,
    LeaseExclusivity,
    SingleSuccess,
    TaskConservation,
    BatchConservation,
    LedgerTotal,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::ClockMonotonic => "clock-monotonic",
            Rule::LegalTransition => "legal-transition",
            Rule::PoolCapacity => "pool-capacity",
            Rule::PartitionPinning => "partition-pinning",
            Rule::OffloadEligibility => "offload-eligibility",
            Rule::LeaseExclusivity => "lease-exclusivity",
            Rule::SingleSuccess => "single-success",
            Rule::TaskConservation => "task-conservation",
            Rule::BatchConservation => "batch-conservation",
            Rule::LedgerTotal => "ledger-total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    /// Sequence number of the offending entry, if there is one.
    pub seq: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(seq) => write!(f, "[{}] seq {seq}: {}", self.rule.as_str(), self.detail),
            None => write!(f, "[{}] {}", self.rule.as_str(), self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub entries: usize,
    pub tasks: usize,
    pub claims: usize,
    /// Highest concurrent occupancy seen per pool.
    pub peak_occupancy: BTreeMap<String, u32>,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }
}

/// Parses an NDJSON log and verifies it.
pub fn verify_reader<R: BufRead>(input: R) -> Result<Verdict, ReplayError> {
    let log = EventLog::read_ndjson(input).map_err(|(line, reason)| ReplayError::CorruptLog { line, reason })?;
    verify(&log)
}

#[derive(Debug)]
struct TaskTrack {
    state: TaskState,
    pool: Option<String>,
    hint: Option<String>,
    backend: String,
}

#[derive(Debug)]
struct Lease {
    site: SiteId,
    expiry: f64,
}

pub fn verify(log: &EventLog) -> Result<Verdict, ReplayError> {
    let entries = log.entries();
    for (i, e) in entries.iter().enumerate() {
        if e.seq != i as u64 {
            return corrupt(i + 1, format!("expected seq {i}, found {}", e.seq));
        }
        if !e.at.is_finite() {
            return corrupt(i + 1, "non-finite timestamp");
        }
    }
    let Some(LogEntry {
        record: Record::RunEnd {
            ledger_bytes,
            registered,
            batch_tags,
            starved,
            ..
        },
        ..
    }) = entries.last()
    else {
        return corrupt(entries.len(), "log does not end with run_end");
    };
    if !matches!(entries.first().map(|e| &e.record), Some(Record::RunStart { .. })) {
        return corrupt(1, "log does not start with run_start");
    }

    let mut v = Vec::new();
    let mut flag = |rule: Rule, seq: Option<u64>, detail: String| v.push(Violation { rule, seq, detail });

    let mut capacity: BTreeMap<String, u32> = BTreeMap::new();
    let mut occupancy: BTreeMap<String, u32> = BTreeMap::new();
    let mut peak: BTreeMap<String, u32> = BTreeMap::new();
    let mut tasks: BTreeMap<String, TaskTrack> = BTreeMap::new();
    let mut leases: BTreeMap<String, Lease> = BTreeMap::new();
    let mut successes: BTreeMap<String, u32> = BTreeMap::new();
    let mut registers: BTreeSet<String> = BTreeSet::new();
    let mut transfer_bytes: u64 = 0;
    let mut claims = 0;
    let mut last_at = f64::NEG_INFINITY;

    for e in entries {
        let seq = Some(e.seq);
        if e.at < last_at {
            flag(Rule::ClockMonotonic, seq, format!("time went back from {last_at} to {}", e.at));
        }
        last_at = last_at.max(e.at);
        match &e.record {
            Record::RunStart { pools, .. } => {
                for p in pools {
                    capacity.insert(p.pool.clone(), p.slots);
                }
            }
            Record::Register { batch, .. } => {
                registers.insert(batch.clone());
            }
            Record::Submit {
                task, backend, hint, ..
            } => {
                let prev = tasks.insert(
                    task.clone(),
                    TaskTrack {
                        state: TaskState::Queued,
                        pool: None,
                        hint: hint.clone(),
                        backend: backend.clone(),
                    },
                );
                if prev.is_some() {
                    flag(Rule::LegalTransition, seq, format!("task {task} submitted twice"));
                }
            }
            Record::Placement {
                task,
                placement: Placement::Offloaded,
                node_count,
                executor_count,
                ..
            } => {
                if *node_count != 1 || *executor_count != 1 {
                    flag(
                        Rule::OffloadEligibility,
                        seq,
                        format!("task {task} offloaded with {node_count} nodes and {executor_count} executors"),
                    );
                }
            }
            Record::Placement { .. } => {}
            Record::TaskState {
                task,
                pool,
                from,
                to,
                event,
                ..
            } => {
                let Some(t) = tasks.get_mut(task) else {
                    flag(Rule::LegalTransition, seq, format!("task {task} changes state before submit"));
                    continue;
                };
                if t.state != *from {
                    flag(
                        Rule::LegalTransition,
                        seq,
                        format!("task {task} leaves {from} but was {}", t.state),
                    );
                }
                match advance_state(*from, *event) {
                    Ok(next) if next == *to => {}
                    _ => flag(
                        Rule::LegalTransition,
                        seq,
                        format!("task {task}: {event:?} does not take {from} to {to}"),
                    ),
                }
                if !from.occupies_slot() && to.occupies_slot() {
                    if let Some(hint) = &t.hint {
                        let want = format!("{}/{hint}", t.backend);
                        if *pool != want {
                            flag(
                                Rule::PartitionPinning,
                                seq,
                                format!("task {task} hinted to {want} started in {pool}"),
                            );
                        }
                    }
                    let n = occupancy.entry(pool.clone()).or_default();
                    *n += 1;
                    let p = peak.entry(pool.clone()).or_default();
                    *p = (*p).max(*n);
                    match capacity.get(pool) {
                        Some(&cap) if *n > cap => flag(
                            Rule::PoolCapacity,
                            seq,
                            format!("pool {pool} holds {n} tasks with {cap} slots"),
                        ),
                        Some(_) => {}
                        None => flag(Rule::PoolCapacity, seq, format!("task {task} started in undeclared pool {pool}")),
                    }
                    t.pool = Some(pool.clone());
                } else if from.occupies_slot() && !to.occupies_slot() {
                    if let Some(p) = t.pool.take() {
                        if let Some(n) = occupancy.get_mut(&p) {
                            *n = n.saturating_sub(1);
                        }
                    }
                }
                t.state = *to;
            }
            Record::Claim {
                batch,
                site,
                lease_expiry,
                ..
            } => {
                claims += 1;
                if let Some(held) = leases.get(batch) {
                    if held.expiry > e.at {
                        flag(
                            Rule::LeaseExclusivity,
                            seq,
                            format!(
                                "{site} claimed {batch} while {} holds a lease until {}",
                                held.site, held.expiry
                            ),
                        );
                    }
                }
                leases.insert(
                    batch.clone(),
                    Lease {
                        site: site.clone(),
                        expiry: *lease_expiry,
                    },
                );
            }
            Record::Report {
                batch,
                site,
                tag,
                lease_expiry,
                ..
            } => {
                match tag {
                    BatchTag::Processing => {
                        if let (Some(l), Some(exp)) = (leases.get_mut(batch), lease_expiry) {
                            if l.site == *site {
                                l.expiry = *exp;
                            }
                        }
                    }
                    BatchTag::Succeeded | BatchTag::Failed => {
                        leases.remove(batch);
                    }
                    _ => {}
                }
                if *tag == BatchTag::Succeeded {
                    let n = successes.entry(batch.clone()).or_default();
                    *n += 1;
                    if *n > 1 {
                        flag(Rule::SingleSuccess, seq, format!("batch {batch} reported SUCCEEDED {n} times"));
                    }
                }
            }
            Record::LeaseExpired { batch, .. } => {
                leases.remove(batch);
            }
            Record::Transfer { bytes, .. } => transfer_bytes += bytes,
            _ => {}
        }
    }

    let starved: BTreeSet<&String> = starved.iter().collect();
    for (id, t) in &tasks {
        if !t.state.is_terminal() && !starved.contains(id) {
            flag(
                Rule::TaskConservation,
                None,
                format!("task {id} ended the run in {} without being reported starved", t.state),
            );
        }
    }
    let tagged: u64 = batch_tags.values().sum();
    if tagged != *registered || registers.len() as u64 != *registered {
        flag(
            Rule::BatchConservation,
            None,
            format!(
                "{} batches registered, repository holds {registered}, tags account for {tagged}",
                registers.len()
            ),
        );
    }
    if transfer_bytes != *ledger_bytes {
        flag(
            Rule::LedgerTotal,
            None,
            format!("transfers add up to {transfer_bytes} bytes, ledger says {ledger_bytes}"),
        );
    }

    Ok(Verdict {
        entries: entries.len(),
        tasks: tasks.len(),
        claims,
        peak_occupancy: peak,
        violations: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provenance::PoolInfo;

    fn framed(mid: Vec<Record>, ledger_bytes: u64) -> EventLog {
        let mut log = EventLog::new();
        log.append(
            0.0,
            Record::RunStart {
                mode: "manual".into(),
                seed: 1,
                pools: vec![PoolInfo {
                    pool: "b/p".into(),
                    site: "a".into(),
                    slots: 1,
                }],
                max_retries: 2,
            },
        );
        for (i, r) in mid.into_iter().enumerate() {
            log.append(i as f64, r);
        }
        log.append(
            100.0,
            Record::RunEnd {
                status: "succeeded".into(),
                ledger_bytes,
                registered: 0,
                batch_tags: BTreeMap::new(),
                starved: vec![],
            },
        );
        log
    }

    fn claim(site: &str, expiry: f64) -> Record {
        Record::Claim {
            batch: "x".into(),
            site: site.into(),
            version: 1,
            attempts: 1,
            lease_expiry: expiry,
        }
    }

    #[test]
    fn empty_run_is_clean() {
        assert!(verify(&framed(vec![], 0)).unwrap().is_clean());
    }

    #[test]
    fn overlapping_claims_are_flagged() {
        let v = verify(&framed(vec![claim("a", 50.0), claim("b", 60.0)], 0)).unwrap();
        assert_eq!(v.count(Rule::LeaseExclusivity), 1);
        let v = verify(&framed(vec![claim("a", 0.5), claim("b", 60.0)], 0)).unwrap();
        assert!(v.is_clean());
    }

    #[test]
    fn ledger_mismatch_is_flagged() {
        let t = Record::Transfer {
            object: crate::types::ObjectId("o".into()),
            from: "a".into(),
            to: "b".into(),
            bytes: 5,
            done_at: 1.0,
        };
        assert_eq!(verify(&framed(vec![t], 4)).unwrap().count(Rule::LedgerTotal), 1);
    }

    #[test]
    fn truncation_is_corruption() {
        let mut entries = framed(vec![claim("a", 5.0)], 0).into_entries();
        entries.pop();
        assert!(verify(&EventLog::from_entries(entries)).is_err());
        let text = framed(vec![], 0).to_ndjson();
        let cut = &text[..text.len() - 10];
        assert!(matches!(verify_reader(cut.as_bytes()), Err(ReplayError::CorruptLog { .. })));
    }
}
