//! Lightweight metadata repository: batches are reserved and reported by
//! tagging their records, guarded by a version counter (compare-and-set) and
//! a time-bounded lease.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DataRef, ObjectId, SiteId};

pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchTag {
    Unprocessed,
    Claimed,
    Processing,
    Succeeded,
    Failed,
}

impl BatchTag {
    pub const ALL: [BatchTag; 5] = [
        BatchTag::Unprocessed,
        BatchTag::Claimed,
        BatchTag::Processing,
        BatchTag::Succeeded,
        BatchTag::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, BatchTag::Succeeded | BatchTag::Failed)
    }

    pub fn holds_lease(self) -> bool {
        matches!(self, BatchTag::Claimed | BatchTag::Processing)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BatchTag::Unprocessed => "UNPROCESSED",
            BatchTag::Claimed => "CLAIMED",
            BatchTag::Processing => "PROCESSING",
            BatchTag::Succeeded => "SUCCEEDED",
            BatchTag::Failed => "FAILED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub granted_at: f64,
    pub duration_s: f64,
}

impl Lease {
    pub fn expiry(&self) -> f64 {
        self.granted_at + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_id: String,
    pub input: DataRef,
    pub tag: BatchTag,
    pub version: u64,
    pub claimant: Option<SiteId>,
    pub lease_expiry: Option<f64>,
    pub attempts: u32,
    pub output: Option<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepoError {
    #[error("batch `{0}` already registered")]
    DuplicateBatch(String),
    #[error("unknown batch `{0}`")]
    UnknownBatch(String),
    #[error("conflict on batch `{}` (version {}, tag {})", .0.batch_id, .0.version, .0.tag.as_str())]
    Conflict(Box<BatchRecord>),
    #[error("site `{site}` does not hold the claim on `{batch}`")]
    NotClaimant { batch: String, site: SiteId },
    #[error("illegal tag change on `{batch}`: {reason}")]
    IllegalTag { batch: String, reason: String },
    #[error("lease on `{0}` expired")]
    LeaseExpired(String),
    #[error("lease duration must be positive and finite")]
    InvalidLease,
}

/// One lease expiry outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Expired {
    pub batch_id: String,
    pub tag: BatchTag,
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct MetadataRepo {
    records: BTreeMap<String, BatchRecord>,
    max_retries: u32,
    mutations: u64,
}

impl Default for MetadataRepo {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_RETRIES)
    }
}

impl MetadataRepo {
    pub fn new(max_retries: u32) -> Self {
        MetadataRepo {
            records: BTreeMap::new(),
            max_retries,
            mutations: 0,
        }
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    /// Total number of applied mutations, registrations included.
    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    pub fn get(&self, batch_id: &str) -> Option<&BatchRecord> {
        self.records.get(batch_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn register_batch(&mut self, batch_id: &str, input: DataRef) -> Result<BatchRecord, RepoError> {
        if self.records.contains_key(batch_id) {
            return Err(RepoError::DuplicateBatch(batch_id.to_string()));
        }
        let rec = BatchRecord {
            batch_id: batch_id.to_string(),
            input,
            tag: BatchTag::Unprocessed,
            version: 1,
            claimant: None,
            lease_expiry: None,
            attempts: 0,
            output: None,
        };
        self.records.insert(batch_id.to_string(), rec.clone());
        self.mutations += 1;
        Ok(rec)
    }

    fn record_mut(&mut self, batch_id: &str) -> Result<&mut BatchRecord, RepoError> {
        self.records
            .get_mut(batch_id)
            .ok_or_else(|| RepoError::UnknownBatch(batch_id.to_string()))
    }

    pub fn claim(
        &mut self,
        batch_id: &str,
        site: &SiteId,
        expected_version: u64,
        lease_s: f64,
        now: f64,
    ) -> Result<BatchRecord, RepoError> {
        if !(lease_s > 0.0 && lease_s.is_finite()) {
            return Err(RepoError::InvalidLease);
        }
        let rec = self.record_mut(batch_id)?;
        if rec.tag != BatchTag::Unprocessed || rec.version != expected_version {
            return Err(RepoError::Conflict(Box::new(rec.clone())));
        }
        rec.tag = BatchTag::Claimed;
        rec.claimant = Some(site.clone());
        rec.lease_expiry = Some(now + lease_s);
        rec.version += 1;
        rec.attempts += 1;
        let out = rec.clone();
        self.mutations += 1;
        Ok(out)
    }

    /// Applies a status report from the current claimant. A PROCESSING
    /// report renews the lease for another `lease_s` seconds when given.
    pub fn report(
        &mut self,
        batch_id: &str,
        site: &SiteId,
        new_tag: BatchTag,
        output: Option<ObjectId>,
        renew_s: Option<f64>,
        now: f64,
    ) -> Result<BatchRecord, RepoError> {
        let rec = self.record_mut(batch_id)?;
        if rec.claimant.as_ref() != Some(site) {
            return Err(RepoError::NotClaimant {
                batch: batch_id.to_string(),
                site: site.clone(),
            });
        }
        if rec.lease_expiry.is_some_and(|e| now >= e) {
            return Err(RepoError::LeaseExpired(batch_id.to_string()));
        }
        let illegal = |reason: &str| RepoError::IllegalTag {
            batch: batch_id.to_string(),
            reason: reason.to_string(),
        };
        match (rec.tag, new_tag) {
            (BatchTag::Claimed, BatchTag::Processing) => {
                if let Some(d) = renew_s {
                    rec.lease_expiry = Some(now + d);
                }
            }
            (BatchTag::Processing, BatchTag::Succeeded) => {
                let Some(out) = output else {
                    return Err(illegal("SUCCEEDED requires an output"));
                };
                rec.output = Some(out);
                rec.claimant = None;
                rec.lease_expiry = None;
            }
            (BatchTag::Processing, BatchTag::Failed) => {
                rec.claimant = None;
                rec.lease_expiry = None;
            }
            (from, to) => {
                return Err(illegal(&format!("{} -> {}", from.as_str(), to.as_str())));
            }
        }
        rec.tag = new_tag;
        rec.version += 1;
        let out = rec.clone();
        self.mutations += 1;
        Ok(out)
    }

    /// Returns expired claims to the pool, or fails them once the retry
    /// budget is spent.
    pub fn expire_leases(&mut self, now: f64) -> Vec<Expired> {
        let mut out = Vec::new();
        for rec in self.records.values_mut() {
            if !rec.tag.holds_lease() || rec.lease_expiry.is_none_or(|e| e > now) {
                continue;
            }
            rec.tag = if rec.attempts <= self.max_retries {
                BatchTag::Unprocessed
            } else {
                BatchTag::Failed
            };
            rec.claimant = None;
            rec.lease_expiry = None;
            rec.version += 1;
            self.mutations += 1;
            out.push(Expired {
                batch_id: rec.batch_id.clone(),
                tag: rec.tag,
                version: rec.version,
            });
        }
        out
    }

    pub fn list(&self, tag: Option<BatchTag>) -> Vec<BatchRecord> {
        self.records
            .values()
            .filter(|r| tag.is_none_or(|t| r.tag == t))
            .cloned()
            .collect()
    }

    pub fn tag_counts(&self) -> BTreeMap<BatchTag, u64> {
        let mut counts: BTreeMap<BatchTag, u64> = BatchTag::ALL.iter().map(|t| (*t, 0)).collect();
        for r in self.records.values() {
            *counts.entry(r.tag).or_default() += 1;
        }
        counts
    }

    pub fn all_terminal(&self) -> bool {
        self.records.values().all(|r| r.tag.is_terminal())
    }

    /// Earliest lease expiry among active claims.
    pub fn next_expiry(&self) -> Option<f64> {
        self.records
            .values()
            .filter_map(|r| r.lease_expiry)
            .min_by(|a, b| a.total_cmp(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectId;

    fn input(i: usize) -> DataRef {
        DataRef {
            object_id: ObjectId(format!("{i:04}")),
            size_bytes: 1,
            home_site: "a".into(),
        }
    }

    fn repo_with(n: usize) -> MetadataRepo {
        let mut r = MetadataRepo::new(2);
        for i in 0..n {
            r.register_batch(&format!("b{i:03}"), input(i)).unwrap();
        }
        r
    }

    fn out() -> Option<ObjectId> {
        Some(ObjectId("out".into()))
    }

    #[test]
    fn register() {
        let mut r = MetadataRepo::default();
        let rec = r.register_batch("x", input(0)).unwrap();
        assert_eq!((rec.tag, rec.version, rec.attempts), (BatchTag::Unprocessed, 1, 0));
        assert_eq!(r.register_batch("x", input(0)), Err(RepoError::DuplicateBatch("x".into())));
        let r = repo_with(100);
        let listed = r.list(Some(BatchTag::Unprocessed));
        assert_eq!(listed.len(), 100);
        assert!(listed.windows(2).all(|w| w[0].batch_id < w[1].batch_id));
    }

    #[test]
    fn cas_claims() {
        let mut r = repo_with(1);
        let a: SiteId = "a".into();
        let b: SiteId = "b".into();
        let got = r.claim("b000", &a, 1, 10.0, 0.0).unwrap();
        assert_eq!((got.tag, got.version, got.attempts), (BatchTag::Claimed, 2, 1));
        assert!(matches!(r.claim("b000", &b, 1, 10.0, 0.0), Err(RepoError::Conflict(_))));
        assert_eq!(r.claim("zzz", &b, 1, 10.0, 0.0), Err(RepoError::UnknownBatch("zzz".into())));
        assert_eq!(r.claim("b000", &b, 2, 0.0, 0.0), Err(RepoError::InvalidLease));
    }

    #[test]
    fn claim_on_succeeded_conflicts() {
        let mut r = repo_with(1);
        let a: SiteId = "a".into();
        r.claim("b000", &a, 1, 10.0, 0.0).unwrap();
        r.report("b000", &a, BatchTag::Processing, None, None, 1.0).unwrap();
        let done = r.report("b000", &a, BatchTag::Succeeded, out(), None, 2.0).unwrap();
        assert_eq!(done.tag, BatchTag::Succeeded);
        assert!(matches!(r.claim("b000", &a, done.version, 10.0, 3.0), Err(RepoError::Conflict(_))));
    }

    #[test]
    fn reclaim_after_expiry_counts_attempts() {
        let mut r = repo_with(1);
        let a: SiteId = "a".into();
        let b: SiteId = "b".into();
        r.claim("b000", &a, 1, 5.0, 0.0).unwrap();
        assert!(r.expire_leases(4.9).is_empty());
        let reset = r.expire_leases(5.0);
        assert_eq!(reset.len(), 1);
        assert_eq!(reset[0].tag, BatchTag::Unprocessed);
        let v = r.get("b000").unwrap().version;
        let again = r.claim("b000", &b, v, 5.0, 6.0).unwrap();
        assert_eq!(again.attempts, 2);
        // the fenced worker is rejected
        assert!(matches!(
            r.report("b000", &a, BatchTag::Processing, None, None, 6.5),
            Err(RepoError::NotClaimant { .. })
        ));
    }

    #[test]
    fn report_rules() {
        let mut r = repo_with(1);
        let a: SiteId = "a".into();
        r.claim("b000", &a, 1, 5.0, 0.0).unwrap();
        assert!(matches!(
            r.report("b000", &a, BatchTag::Succeeded, out(), None, 1.0),
            Err(RepoError::IllegalTag { .. })
        ));
        let p = r.report("b000", &a, BatchTag::Processing, None, Some(5.0), 1.0).unwrap();
        assert_eq!(p.lease_expiry, Some(6.0));
        assert!(matches!(
            r.report("b000", &a, BatchTag::Succeeded, None, None, 2.0),
            Err(RepoError::IllegalTag { .. })
        ));
        assert_eq!(
            r.report("b000", &a, BatchTag::Succeeded, out(), None, 6.0),
            Err(RepoError::LeaseExpired("b000".into()))
        );
    }

    #[test]
    fn retry_bound_fails_batch() {
        let mut r = repo_with(1);
        let a: SiteId = "a".into();
        let mut now = 0.0;
        for attempt in 1..=3 {
            let v = r.get("b000").unwrap().version;
            r.claim("b000", &a, v, 1.0, now).unwrap();
            now += 1.0;
            let e = r.expire_leases(now);
            let want = if attempt <= 2 { BatchTag::Unprocessed } else { BatchTag::Failed };
            assert_eq!(e[0].tag, want);
        }
        assert!(r.all_terminal());
        // claim/reset per attempt plus registration
        assert!(r.get("b000").unwrap().version <= 3 * 3 + 1);
    }

    #[test]
    fn counts_partition_total() {
        let mut r = repo_with(5);
        let a: SiteId = "a".into();
        r.claim("b001", &a, 1, 5.0, 0.0).unwrap();
        r.claim("b002", &a, 1, 5.0, 0.0).unwrap();
        r.report("b002", &a, BatchTag::Processing, None, None, 0.0).unwrap();
        let c = r.tag_counts();
        assert_eq!(c.values().sum::<u64>(), 5);
        assert_eq!(c[&BatchTag::Claimed], 1);
        assert_eq!(c[&BatchTag::Processing], 1);
        assert_eq!(r.mutations(), 5 + 3);
    }
}
