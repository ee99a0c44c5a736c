//! The run's bill of materials: report plus digests of its inputs and log.

use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioConfig;
use crate::workflow::{RunOutcome, RunReport};

pub const TOOL: &str = "hybridmesh";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub tool: String,
    pub version: String,
    pub digest_algorithm: String,
    /// Digest of the effective (defaults-filled) scenario.
    pub config_digest: String,
    pub event_log_digest: String,
    pub report: RunReport,
}

impl MetricsDoc {
    /// Expects the resolved config, the one echoed as the effective config.
    pub fn new(cfg: &ScenarioConfig, outcome: &RunOutcome) -> Self {
        MetricsDoc {
            tool: TOOL.into(),
            version: VERSION.into(),
            digest_algorithm: "sha256".into(),
            config_digest: cfg.digest(),
            event_log_digest: outcome.log.digest(),
            report: outcome.report.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
