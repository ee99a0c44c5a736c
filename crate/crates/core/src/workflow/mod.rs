//! Scatter-gather workflow driver. One dataset is split into batches, each
//! batch is processed by one map task under the selected architecture, and a
//! final gather task consolidates the map outputs.

mod federated;
mod report;
mod sim;
mod tes_driver;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::EventLog;
use crate::scenario::ConfigError;
use crate::simnet::{SimError, SiteDescriptor};
use crate::storage::{digest, synthetic_content, Manifest, ManifestEntry};
use crate::types::{DataRef, SiteId};

pub use report::{timeline, RunReport, RunStatus, TimelineRow};
pub use sim::{run_scenario, RunOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batches statically split across sites.
    Manual,
    /// Sites claim batches from the metadata repository on their own.
    Federated,
    /// A controller claims batches on the sites' behalf.
    FederatedController,
    /// One batch cluster with a partition per site.
    Overlay,
    /// Capacity-overflow router from a primary to a secondary backend.
    Overflow,
    /// Tasks routed through a TES gateway.
    Gateway,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Manual,
        Mode::Federated,
        Mode::FederatedController,
        Mode::Overlay,
        Mode::Overflow,
        Mode::Gateway,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Manual => "manual",
            Mode::Federated => "federated",
            Mode::FederatedController => "federated-controller",
            Mode::Overlay => "overlay",
            Mode::Overflow => "overflow",
            Mode::Gateway => "gateway",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Mode::Federated | Mode::FederatedController)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// Per-batch task shape and placement overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchOverride {
    pub batch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_cores: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub mode: Mode,
    pub batch_count: u32,
    pub batch_size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size_bytes: Option<u64>,
    pub map_duration_s: f64,
    #[serde(default)]
    pub gather_duration_s: f64,
    #[serde(default = "two")]
    pub retry_limit: u32,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Sites that hold the input batches, assigned round-robin. Defaults to
    /// every compute site.
    #[serde(default)]
    pub input_sites: Vec<SiteId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<BatchOverride>,
}

fn two() -> u32 {
    2
}

fn default_dataset() -> String {
    "dataset".into()
}

impl WorkflowSpec {
    pub(crate) fn resolve(&mut self, sites: &[SiteDescriptor]) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Validation(m));
        if self.batch_count == 0 {
            return bad("workflow.batch_count must be at least 1".into());
        }
        for (v, what) in [
            (self.map_duration_s, "map_duration_s"),
            (self.gather_duration_s, "gather_duration_s"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("workflow.{what} must be finite and nonnegative, got {v}"));
            }
        }
        if self.output_size_bytes.is_none() {
            self.output_size_bytes = Some(self.batch_size_bytes);
        }
        if self.input_sites.is_empty() {
            self.input_sites = sites.iter().filter(|s| s.compute).map(|s| s.id.clone()).collect();
            self.input_sites.sort();
        }
        for s in &self.input_sites {
            if !sites.iter().any(|d| &d.id == s) {
                return bad(format!("workflow.input_sites references unknown site `{s}`"));
            }
        }
        let ids: BTreeSet<String> = self.batch_ids().collect();
        let mut seen = BTreeSet::new();
        for o in &self.overrides {
            if !ids.contains(&o.batch) {
                return bad(format!("override references unknown batch `{}`", o.batch));
            }
            if !seen.insert(&o.batch) {
                return bad(format!("two overrides for batch `{}`", o.batch));
            }
            if o.node_count == Some(0) || o.executor_count == Some(0) || o.cpu_cores == Some(0) {
                return bad(format!("override for `{}` has a zero count", o.batch));
            }
        }
        Ok(())
    }

    pub fn batch_ids(&self) -> impl Iterator<Item = String> {
        (0..self.batch_count).map(batch_id)
    }

    pub fn output_size(&self) -> u64 {
        self.output_size_bytes.unwrap_or(self.batch_size_bytes)
    }

    pub fn override_for(&self, batch: &str) -> Option<&BatchOverride> {
        self.overrides.iter().find(|o| o.batch == batch)
    }
}

pub fn batch_id(i: u32) -> String {
    format!("batch-{i:04}")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    /// The simulation stopped part way; `log` holds what was recorded.
    #[error("simulation aborted: {error}")]
    Aborted { error: SimError, log: Box<EventLog> },
}

/// Content key of batch `index` of a dataset.
pub fn batch_key(dataset: &str, index: u32) -> String {
    format!("{dataset}/{}", batch_id(index))
}

/// Content key of the map output for an input object.
pub fn map_output_key(input: &DataRef) -> String {
    format!("map-output/{}", input.object_id)
}

/// Deterministic split of a dataset: batch `i` is synthetic content derived
/// from `(dataset, i)` and lives at `sites[i % sites.len()]`.
pub fn scatter(dataset: &str, batch_count: u32, batch_size_bytes: u64, sites: &[SiteId]) -> Vec<DataRef> {
    assert!(!sites.is_empty(), "scatter needs at least one site");
    (0..batch_count)
        .map(|i| DataRef {
            object_id: digest(&synthetic_content(&batch_key(dataset, i), batch_size_bytes)),
            size_bytes: batch_size_bytes,
            home_site: sites[i as usize % sites.len()].clone(),
        })
        .collect()
}

/// Manifest of a single-site sequential run: the map output of every batch,
/// computed without simulating anything.
pub fn baseline_manifest(spec: &WorkflowSpec) -> Manifest {
    let here = [SiteId::new("baseline")];
    let mut m: Manifest = scatter(&spec.dataset, spec.batch_count, spec.batch_size_bytes, &here)
        .iter()
        .map(|input| ManifestEntry {
            object_id: digest(&synthetic_content(&map_output_key(input), spec.output_size())),
            size_bytes: spec.output_size(),
        })
        .collect();
    m.sort();
    m
}

/// True iff both runs produced the same final manifest.
pub fn compare_runs(a: &RunReport, b: &RunReport) -> bool {
    a.final_manifest == b.final_manifest
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_examples() {
        let one = scatter("d", 1, 10, &["a".into()]);
        assert_eq!(one.len(), 1);
        let homes: Vec<String> = scatter("d", 3, 10, &["A".into(), "B".into()])
            .into_iter()
            .map(|r| r.home_site.0)
            .collect();
        assert_eq!(homes, ["A", "B", "A"]);
        assert_eq!(scatter("d", 4, 10, &["a".into()]), scatter("d", 4, 10, &["a".into()]));
        let ids: BTreeSet<_> = scatter("d", 50, 10, &["a".into()]).into_iter().map(|r| r.object_id).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn baseline_is_sorted_and_placement_free() {
        let spec = WorkflowSpec {
            mode: Mode::Manual,
            batch_count: 5,
            batch_size_bytes: 100,
            output_size_bytes: Some(7),
            map_duration_s: 1.0,
            gather_duration_s: 0.0,
            retry_limit: 2,
            dataset: "d".into(),
            input_sites: vec![],
            overrides: vec![],
        };
        let m = baseline_manifest(&spec);
        assert_eq!(m.len(), 5);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        assert!(m.iter().all(|e| e.size_bytes == 7));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>(), Ok(m));
        }
    }
}
