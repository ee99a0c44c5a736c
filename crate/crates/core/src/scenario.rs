//! Declarative scenario files (TOML): sites, links, backends, the workflow to
//! run, injected failures and mode flags.
//!
//! Loading happens in two steps. [`ScenarioConfig::parse`] only reads the
//! file; [`ScenarioConfig::resolve`] validates every cross-reference and
//! fills defaults, so the resolved value can be echoed back as the effective
//! configuration and reloaded to reproduce the same run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executors::{Backend, BackendDescriptor, BackendKind, PartitionSpec};
use crate::metadata_repo::DEFAULT_MAX_RETRIES;
use crate::simnet::{Link, LinkMatrix, Outage, SiteDescriptor, Topology, DEFAULT_MAX_EVENTS};
use crate::storage::digest;
use crate::tes_layer::CostModel;
use crate::types::SiteId;
use crate::workflow::{Mode, WorkflowSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("cannot read scenario: {0}")]
    Io(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Validation(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: SiteId,
    pub to: SiteId,
    pub bandwidth_gbps: f64,
    #[serde(default)]
    pub latency_s: f64,
    #[serde(default = "yes")]
    pub symmetric: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub site: SiteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub down_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up_at: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preempt_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    #[default]
    Locality,
    UniformRandom,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_site: Option<SiteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo_site: Option<SiteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_site: Option<SiteId>,
    #[serde(default = "yes")]
    pub gather: bool,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub routing: Routing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_s: Option<f64>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "one_second")]
    pub poll_interval_s: f64,
    #[serde(default = "one_second")]
    pub heartbeat_interval_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    /// Relative spread of task durations; 0 disables jitter.
    #[serde(default)]
    pub jitter: f64,
    /// Batches whose map task always ends in EXECUTOR_ERROR.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub poisoned: Vec<String>,
    #[serde(default = "one_level")]
    pub gateway_chain_depth: u32,
    pub sites: Vec<SiteDescriptor>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub backends: Vec<BackendDescriptor>,
    pub workflow: WorkflowSpec,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn one_second() -> f64 {
    1.0
}

fn default_max_events() -> u64 {
    DEFAULT_MAX_EVENTS
}

fn one_level() -> u32 {
    1
}

impl ScenarioConfig {
    /// Reads TOML without validating cross-references.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            ConfigError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    /// Parses, validates and fills defaults.
    pub fn load(text: &str) -> Result<Self, ConfigError> {
        Self::parse(text)?.resolve()
    }

    pub fn load_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::load(&text)
    }

    /// Canonical TOML of the (resolved) configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Digest of the canonical form; identifies the run's inputs.
    pub fn digest(&self) -> String {
        digest(self.to_toml().as_bytes()).0
    }

    pub fn mode(&self) -> Mode {
        self.workflow.mode
    }

    /// Validates cross-references and fills every defaulted field. Resolving
    /// an already resolved config is the identity.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        self.check_sites()?;
        let ids: BTreeSet<SiteId> = self.sites.iter().map(|s| s.id.clone()).collect();
        let known = |s: &SiteId, what: &str| -> Result<(), ConfigError> {
            if ids.contains(s) {
                Ok(())
            } else {
                invalid(format!("{what} references unknown site `{s}`"))
            }
        };

        self.links.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
        for l in &self.links {
            known(&l.from, "link")?;
            known(&l.to, "link")?;
            if !(l.bandwidth_gbps.is_finite() && l.bandwidth_gbps > 0.0) {
                return invalid(format!(
                    "link {} -> {} has non-positive bandwidth {}",
                    l.from, l.to, l.bandwidth_gbps
                ));
            }
            if !(l.latency_s.is_finite() && l.latency_s >= 0.0) {
                return invalid(format!("link {} -> {} has invalid latency {}", l.from, l.to, l.latency_s));
            }
            if l.from == l.to {
                return invalid(format!("link {} -> {} connects a site to itself", l.from, l.to));
            }
        }
        let matrix = self.link_matrix();
        if let Some((a, b)) = matrix.missing_pairs(ids.iter()).into_iter().next() {
            return invalid(format!("link matrix has no entry for {a} -> {b}"));
        }

        if self.common_site.is_none() {
            let storage_only = self.sites.iter().find(|s| !s.compute).map(|s| s.id.clone());
            self.common_site = Some(storage_only.unwrap_or_else(|| ids.iter().next().unwrap().clone()));
        }
        if self.repo_site.is_none() {
            self.repo_site = self.common_site.clone();
        }
        if self.controller_site.is_none() {
            self.controller_site = self.repo_site.clone();
        }
        for (s, what) in [
            (&self.common_site, "common_site"),
            (&self.repo_site, "repo_site"),
            (&self.controller_site, "controller_site"),
        ] {
            known(s.as_ref().unwrap(), what)?;
        }

        for (v, what) in [
            (self.poll_interval_s, "poll_interval_s"),
            (self.heartbeat_interval_s, "heartbeat_interval_s"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{what} must be positive, got {v}"));
            }
        }
        if !(self.jitter.is_finite() && (0.0..1.0).contains(&self.jitter)) {
            return invalid(format!("jitter must be in [0, 1), got {}", self.jitter));
        }
        if self.gateway_chain_depth == 0 {
            return invalid("gateway_chain_depth must be at least 1");
        }
        if self.horizon_s.is_some_and(|h| !(h.is_finite() && h > 0.0)) {
            return invalid("horizon_s must be positive");
        }

        self.workflow.resolve(&self.sites)?;
        for b in &self.poisoned {
            if !self.workflow.batch_ids().any(|id| &id == b) {
                return invalid(format!("poisoned batch `{b}` does not exist"));
            }
        }

        if self.lease_s.is_none() {
            self.lease_s = Some(self.default_lease());
        }
        let lease = self.lease_s.unwrap();
        if !(lease.is_finite() && lease > 0.0) {
            return invalid(format!("lease_s must be positive, got {lease}"));
        }

        if self.backends.is_empty() {
            self.backends = self.default_backends();
        }
        self.check_backends(&ids)?;
        self.check_failures(&ids)?;
        Ok(self)
    }

    fn check_sites(&self) -> Result<(), ConfigError> {
        if self.sites.is_empty() {
            return invalid("scenario declares no sites");
        }
        let mut seen = BTreeSet::new();
        for s in &self.sites {
            if s.id.as_str().is_empty() {
                return invalid("site with empty id");
            }
            if !seen.insert(&s.id) {
                return invalid(format!("duplicate site `{}`", s.id));
            }
            if s.slots == 0 {
                return invalid(format!("site `{}` must have at least one slot", s.id));
            }
        }
        if !self.sites.iter().any(|s| s.compute) {
            return invalid("scenario needs at least one compute site");
        }
        Ok(())
    }

    fn check_backends(&self, ids: &BTreeSet<SiteId>) -> Result<(), ConfigError> {
        let mut names = BTreeSet::new();
        for b in &self.backends {
            if !names.insert(&b.id) {
                return invalid(format!("duplicate backend `{}`", b.id));
            }
            if !ids.contains(&b.site) {
                return invalid(format!("backend `{}` references unknown site `{}`", b.id, b.site));
            }
            for p in &b.partitions {
                if !ids.contains(&p.site) {
                    return invalid(format!(
                        "partition `{}` of backend `{}` references unknown site `{}`",
                        p.name, b.id, p.site
                    ));
                }
            }
            Backend::from_descriptor(b).map_err(|e| ConfigError::Validation(e.to_string()))?;
        }
        let kinds: Vec<BackendKind> = self.backends.iter().map(|b| b.kind).collect();
        let ok = match self.mode() {
            Mode::Manual | Mode::Federated | Mode::FederatedController | Mode::Gateway => {
                let mut sites = BTreeSet::new();
                for b in &self.backends {
                    if !sites.insert(&b.site) {
                        return invalid(format!("two backends at site `{}`", b.site));
                    }
                }
                kinds.iter().all(|k| *k == BackendKind::Local)
            }
            Mode::Overlay => kinds == [BackendKind::BatchCluster],
            Mode::Overflow => kinds == [BackendKind::OverflowRouter],
        };
        if !ok {
            return invalid(format!(
                "mode `{}` needs {}",
                self.mode().as_str(),
                match self.mode() {
                    Mode::Overlay => "exactly one batch_cluster backend",
                    Mode::Overflow => "exactly one overflow_router backend",
                    _ => "local backends only",
                }
            ));
        }
        if self.mode() == Mode::Overlay {
            let parts: BTreeSet<&str> = self.backends[0].partitions.iter().map(|p| p.name.as_str()).collect();
            for o in &self.workflow.overrides {
                if let Some(p) = &o.partition {
                    if !parts.contains(p.as_str()) {
                        return invalid(format!("batch `{}` pinned to unknown partition `{p}`", o.batch));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_failures(&self, ids: &BTreeSet<SiteId>) -> Result<(), ConfigError> {
        let mut windows: BTreeMap<&SiteId, Vec<Outage>> = BTreeMap::new();
        for s in &self.sites {
            windows.entry(&s.id).or_default().extend(s.reliability.iter().copied());
        }
        for f in &self.failures {
            if !ids.contains(&f.site) {
                return invalid(format!("failure references unknown site `{}`", f.site));
            }
            match (f.down_at, f.up_at, f.preempt_at) {
                (Some(down_at), up_at, None) => windows.entry(&f.site).or_default().push(Outage {
                    down_at,
                    up_at: up_at.unwrap_or(f64::INFINITY),
                }),
                (None, None, Some(at)) => {
                    if !(at.is_finite() && at >= 0.0) {
                        return invalid(format!("preemption of `{}` at invalid time {at}", f.site));
                    }
                    if !self.sites.iter().any(|s| s.id == f.site && s.preemptible) {
                        return invalid(format!("site `{}` is not preemptible", f.site));
                    }
                }
                _ => {
                    return invalid(format!(
                        "failure at `{}` needs either down_at (and optionally up_at) or preempt_at",
                        f.site
                    ))
                }
            }
        }
        for (site, mut ws) in windows {
            ws.sort_by(|a, b| a.down_at.total_cmp(&b.down_at));
            for w in &ws {
                if !(w.down_at.is_finite() && !w.up_at.is_nan() && 0.0 <= w.down_at && w.down_at < w.up_at) {
                    return invalid(format!(
                        "failure window [{}, {}) of `{site}` is not a valid interval",
                        w.down_at, w.up_at
                    ));
                }
            }
            for pair in ws.windows(2) {
                if pair[1].down_at < pair[0].up_at {
                    return invalid(format!(
                        "overlapping failure windows for `{site}`: [{}, {}) and [{}, {})",
                        pair[0].down_at, pair[0].up_at, pair[1].down_at, pair[1].up_at
                    ));
                }
            }
        }
        Ok(())
    }

    fn default_lease(&self) -> f64 {
        let w = &self.workflow;
        let mut staging: f64 = 0.0;
        let mut latency: f64 = 0.0;
        for l in &self.links {
            let link = Link {
                bandwidth_gbps: l.bandwidth_gbps,
                latency_s: l.latency_s,
            };
            staging = staging.max(crate::simnet::link_time(w.batch_size_bytes, link));
            latency = latency.max(l.latency_s);
        }
        (3.0 * (w.map_duration_s * (1.0 + self.jitter) + staging + 2.0 * latency)).max(1.0)
    }

    fn default_backends(&self) -> Vec<BackendDescriptor> {
        let compute: Vec<&SiteDescriptor> = self.sites.iter().filter(|s| s.compute).collect();
        let local = |s: &SiteDescriptor| BackendDescriptor {
            id: format!("local-{}", s.id),
            kind: BackendKind::Local,
            site: s.id.clone(),
            slots: s.slots,
            partitions: Vec::new(),
            offload_cap: None,
        };
        match self.mode() {
            Mode::Manual | Mode::Federated | Mode::FederatedController | Mode::Gateway => {
                compute.into_iter().map(local).collect()
            }
            Mode::Overlay => vec![BackendDescriptor {
                id: "cluster".into(),
                kind: BackendKind::BatchCluster,
                site: compute[0].id.clone(),
                slots: compute.iter().map(|s| s.slots).sum(),
                partitions: compute
                    .iter()
                    .map(|s| PartitionSpec {
                        name: partition_label(s),
                        site: s.id.clone(),
                        slots: s.slots,
                        max_cpu_cores: None,
                        max_ram_gb: None,
                    })
                    .collect(),
                offload_cap: None,
            }],
            Mode::Overflow => {
                let primary = compute[0];
                let secondary = compute.get(1).copied().unwrap_or(primary);
                vec![BackendDescriptor {
                    id: "router".into(),
                    kind: BackendKind::OverflowRouter,
                    site: primary.id.clone(),
                    slots: primary.slots,
                    partitions: vec![PartitionSpec {
                        name: "secondary".into(),
                        site: secondary.id.clone(),
                        slots: secondary.slots,
                        max_cpu_cores: None,
                        max_ram_gb: None,
                    }],
                    offload_cap: None,
                }]
            }
        }
    }

    pub fn link_matrix(&self) -> LinkMatrix {
        let mut m = LinkMatrix::new();
        for l in &self.links {
            let link = Link {
                bandwidth_gbps: l.bandwidth_gbps,
                latency_s: l.latency_s,
            };
            if l.symmetric {
                m.set_symmetric(l.from.clone(), l.to.clone(), link);
            } else {
                m.set(l.from.clone(), l.to.clone(), link);
            }
        }
        m
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.sites.clone(), self.link_matrix())
    }

    pub fn common_site(&self) -> &SiteId {
        self.common_site.as_ref().expect("resolved config")
    }

    pub fn repo_site(&self) -> &SiteId {
        self.repo_site.as_ref().expect("resolved config")
    }

    pub fn controller_site(&self) -> &SiteId {
        self.controller_site.as_ref().expect("resolved config")
    }

    pub fn lease(&self) -> f64 {
        self.lease_s.expect("resolved config")
    }

    /// Every outage window, from site schedules and the failure list.
    pub fn outages(&self) -> Vec<(SiteId, Outage)> {
        let mut out: Vec<(SiteId, Outage)> = Vec::new();
        for s in &self.sites {
            out.extend(s.reliability.iter().map(|o| (s.id.clone(), *o)));
        }
        for f in &self.failures {
            if let Some(down_at) = f.down_at {
                let up_at = f.up_at.unwrap_or(f64::INFINITY);
                out.push((f.site.clone(), Outage { down_at, up_at }));
            }
        }
        out.sort_by(|a, b| a.1.down_at.total_cmp(&b.1.down_at).then_with(|| a.0.cmp(&b.0)));
        out
    }

    pub fn preemptions(&self) -> Vec<(SiteId, f64)> {
        let mut out: Vec<(SiteId, f64)> = self
            .failures
            .iter()
            .filter_map(|f| f.preempt_at.map(|t| (f.site.clone(), t)))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

/// Partition name used for a site inside a spanning batch cluster.
pub fn partition_label(site: &SiteDescriptor) -> String {
    if site.partition.is_empty() {
        site.id.to_string()
    } else {
        site.partition.clone()
    }
}
