//! Content-addressed object storage with per-site replicas and transfer
//! accounting.
//!
//! Every site (including the storage-only common site) holds replicas in one
//! store. A replica becomes usable at its `available_from` time, which lets a
//! fetch return immediately with the time the data will be present.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::simnet::{SimError, Topology};
use crate::types::{DataRef, ObjectId, SiteId};

pub const DIGEST_ALGORITHM: &str = "sha256";

pub fn digest(content: &[u8]) -> ObjectId {
    ObjectId(hex::encode(Sha256::digest(content)))
}

/// Small stand-in content for an object whose logical size is `size_bytes`.
/// The logical size is part of the content, so it is covered by the digest.
pub fn synthetic_content(key: &str, size_bytes: u64) -> Vec<u8> {
    let seed = hex::encode(Sha256::digest(key.as_bytes()));
    format!("hybridmesh/synthetic/v1\nsize={size_bytes}\nseed={seed}\n").into_bytes()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StorageError {
    #[error("site `{0}` is down")]
    SiteDown(SiteId),
    #[error("object `{0}` not found")]
    ObjectNotFound(ObjectId),
    #[error("no reachable replica of `{0}`")]
    NoReachableReplica(ObjectId),
    #[error("object `{object}` stored with size {stored}, referenced with size {referenced}")]
    SizeMismatch {
        object: ObjectId,
        stored: u64,
        referenced: u64,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredObject {
    pub object_id: ObjectId,
    pub size_bytes: u64,
    pub content: Vec<u8>,
    /// Replica site -> time from which the replica is readable.
    pub replicas: BTreeMap<SiteId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPurpose {
    Input,
    Output,
    Gather,
    Mount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub object: ObjectId,
    pub from: SiteId,
    pub to: SiteId,
    pub bytes: u64,
    pub at: f64,
    pub done_at: f64,
    pub purpose: TransferPurpose,
}

/// Append-only record of every replica-creating transfer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferLedger {
    entries: Vec<LedgerEntry>,
    total: u64,
}

impl TransferLedger {
    fn push(&mut self, entry: LedgerEntry) {
        self.total += entry.bytes;
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    pub fn bytes_for(&self, purpose: TransferPurpose) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.purpose == purpose)
            .map(|e| e.bytes)
            .sum()
    }
}

/// Outcome of a fetch: when the object is readable at the destination and
/// the transfer (if any) that makes it so.
#[derive(Debug, Clone, PartialEq)]
pub struct Fetch {
    pub available_at: f64,
    pub transfer: Option<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub object_id: ObjectId,
    pub size_bytes: u64,
}

pub type Manifest = Vec<ManifestEntry>;

#[derive(Debug, Clone)]
pub struct ObjectStore {
    topology: Topology,
    down: BTreeSet<SiteId>,
    objects: BTreeMap<ObjectId, StoredObject>,
    ledger: TransferLedger,
}

impl ObjectStore {
    pub fn new(topology: Topology) -> Self {
        ObjectStore {
            topology,
            down: BTreeSet::new(),
            objects: BTreeMap::new(),
            ledger: TransferLedger::default(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_site_up(&mut self, site: &SiteId, up: bool) {
        if up {
            self.down.remove(site);
        } else {
            self.down.insert(site.clone());
        }
    }

    pub fn is_up(&self, site: &SiteId) -> bool {
        !self.down.contains(site)
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn get(&self, id: &ObjectId) -> Option<&StoredObject> {
        self.objects.get(id)
    }

    pub fn objects(&self) -> impl Iterator<Item = &StoredObject> {
        self.objects.values()
    }

    pub fn has_replica(&self, id: &ObjectId, site: &SiteId) -> bool {
        self.objects
            .get(id)
            .is_some_and(|o| o.replicas.contains_key(site))
    }

    /// Stores `content` at `site`, readable immediately.
    pub fn put(&mut self, site: &SiteId, content: &[u8]) -> Result<ObjectId, StorageError> {
        self.put_at(site, content, content.len() as u64, 0.0)
    }

    /// Stores content whose logical size differs from its byte length
    /// (synthetic objects standing in for large data).
    pub fn put_at(
        &mut self,
        site: &SiteId,
        content: &[u8],
        size_bytes: u64,
        now: f64,
    ) -> Result<ObjectId, StorageError> {
        if !self.topology.contains(site) {
            return Err(SimError::UnknownSite(site.clone()).into());
        }
        if !self.is_up(site) {
            return Err(StorageError::SiteDown(site.clone()));
        }
        let id = digest(content);
        let obj = self
            .objects
            .entry(id.clone())
            .or_insert_with(|| StoredObject {
                object_id: id.clone(),
                size_bytes,
                content: content.to_vec(),
                replicas: BTreeMap::new(),
            });
        let slot = obj.replicas.entry(site.clone()).or_insert(now);
        if *slot > now {
            *slot = now;
        }
        Ok(id)
    }

    /// Stores a synthetic object and returns its reference.
    pub fn put_synthetic(
        &mut self,
        site: &SiteId,
        key: &str,
        size_bytes: u64,
        now: f64,
    ) -> Result<DataRef, StorageError> {
        let content = synthetic_content(key, size_bytes);
        let object_id = self.put_at(site, &content, size_bytes, now)?;
        Ok(DataRef {
            object_id,
            size_bytes,
            home_site: site.clone(),
        })
    }

    pub fn check_ref(&self, r: &DataRef) -> Result<(), StorageError> {
        let obj = self
            .objects
            .get(&r.object_id)
            .ok_or_else(|| StorageError::ObjectNotFound(r.object_id.clone()))?;
        if obj.size_bytes != r.size_bytes {
            return Err(StorageError::SizeMismatch {
                object: r.object_id.clone(),
                stored: obj.size_bytes,
                referenced: r.size_bytes,
            });
        }
        Ok(())
    }

    /// Makes `id` readable at `to`, choosing the replica that finishes the
    /// transfer first (ties broken by site order).
    pub fn fetch(
        &mut self,
        id: &ObjectId,
        to: &SiteId,
        now: f64,
        purpose: TransferPurpose,
    ) -> Result<Fetch, StorageError> {
        let obj = self
            .objects
            .get(id)
            .ok_or_else(|| StorageError::ObjectNotFound(id.clone()))?;
        if !self.topology.contains(to) {
            return Err(SimError::UnknownSite(to.clone()).into());
        }
        if let Some(&from) = obj.replicas.get(to) {
            return Ok(Fetch {
                available_at: from.max(now),
                transfer: None,
            });
        }
        let mut best: Option<(f64, &SiteId, f64)> = None;
        for (site, &ready) in &obj.replicas {
            if !self.is_up(site) {
                continue;
            }
            let start = ready.max(now);
            let done = start + self.topology.transfer_time(obj.size_bytes, site, to)?;
            if best.is_none_or(|(b, _, _)| done < b) {
                best = Some((done, site, start));
            }
        }
        let (done, source, _) = best.ok_or_else(|| StorageError::NoReachableReplica(id.clone()))?;
        let source = source.clone();
        Ok(self.record_transfer(id, source, to, now, done, purpose))
    }

    /// Copies along a fixed route instead of the cheapest one. Used for
    /// remote mounts, where data always travels through the mounting site.
    pub fn copy(
        &mut self,
        id: &ObjectId,
        from: &SiteId,
        to: &SiteId,
        now: f64,
        purpose: TransferPurpose,
    ) -> Result<Fetch, StorageError> {
        let obj = self
            .objects
            .get(id)
            .ok_or_else(|| StorageError::ObjectNotFound(id.clone()))?;
        if let Some(&ready) = obj.replicas.get(to) {
            return Ok(Fetch {
                available_at: ready.max(now),
                transfer: None,
            });
        }
        let ready = *obj
            .replicas
            .get(from)
            .ok_or_else(|| StorageError::NoReachableReplica(id.clone()))?;
        if !self.is_up(from) {
            return Err(StorageError::NoReachableReplica(id.clone()));
        }
        let done = ready.max(now) + self.topology.transfer_time(obj.size_bytes, from, to)?;
        Ok(self.record_transfer(id, from.clone(), to, now, done, purpose))
    }

    fn record_transfer(
        &mut self,
        id: &ObjectId,
        from: SiteId,
        to: &SiteId,
        now: f64,
        done: f64,
        purpose: TransferPurpose,
    ) -> Fetch {
        let obj = self.objects.get_mut(id).expect("checked by caller");
        obj.replicas.insert(to.clone(), done);
        let entry = LedgerEntry {
            object: id.clone(),
            from,
            to: to.clone(),
            bytes: obj.size_bytes,
            at: now,
            done_at: done,
            purpose,
        };
        self.ledger.push(entry.clone());
        Fetch {
            available_at: done,
            transfer: Some(entry),
        }
    }

    /// Replicates every object to the common site. Returns the sorted
    /// manifest, the time at which all copies are present and the transfers
    /// that were started.
    pub fn gather(
        &mut self,
        ids: &[ObjectId],
        common_site: &SiteId,
        now: f64,
    ) -> Result<(Manifest, f64, Vec<LedgerEntry>), StorageError> {
        let mut ready = now;
        let mut transfers = Vec::new();
        let mut manifest = Manifest::new();
        for id in ids {
            let f = self.fetch(id, common_site, now, TransferPurpose::Gather)?;
            ready = ready.max(f.available_at);
            transfers.extend(f.transfer);
            manifest.push(ManifestEntry {
                object_id: id.clone(),
                size_bytes: self.objects[id].size_bytes,
            });
        }
        manifest.sort();
        manifest.dedup();
        Ok((manifest, ready, transfers))
    }
}

pub fn manifest_json(manifest: &Manifest) -> String {
    serde_json::to_string_pretty(manifest).expect("manifest serializes")
}
