//! Service configuration: a TOML file plus environment overrides.
//!
//! ```toml
//! data_dir = "data"            # FAIRGATE_DATA_DIR
//! listen = "127.0.0.1:8080"    # FAIRGATE_LISTEN
//! window_size = 1000
//! min_count = 30
//! max_inflight_ingest = 64
//! cors_allowlist = ["http://localhost:5173"]
//! bearer_token = "secret"      # FAIRGATE_TOKEN; unset disables auth
//!
//! [thresholds]
//! psi_watch = 0.025
//! psi_alert = 0.25
//! ks_watch = 0.1
//! ks_alert = 0.2
//! ks_min_support = 100
//!
//! [[canary_stages]]
//! fraction = 0.05
//! min_duration_secs = 3600
//! min_events = 500
//!
//! [[flag_rules]]
//! rule_id = "f1-drop"
//! scope = "per_window_subgroup"
//! attribute = "sex"
//! ```

use std::path::{Path, PathBuf};

use fairgate_core::drift::DriftThresholds;
use fairgate_core::hitl::FlagRule;
use fairgate_core::model::DEFAULT_WINDOW_SIZE;
use fairgate_core::rollout::{default_stages, Stage};
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

pub const ENV_DATA_DIR: &str = "FAIRGATE_DATA_DIR";
pub const ENV_LISTEN: &str = "FAIRGATE_LISTEN";
pub const ENV_TOKEN: &str = "FAIRGATE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen: String,
    pub window_size: usize,
    pub min_count: usize,
    pub thresholds: DriftThresholds,
    pub canary_stages: Vec<Stage>,
    pub flag_rules: Vec<FlagRule>,
    pub cors_allowlist: Vec<String>,
    pub bearer_token: Option<String>,
    /// Concurrent ingestion requests before new ones get 429.
    pub max_inflight_ingest: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("data"),
            listen: "127.0.0.1:8080".into(),
            window_size: DEFAULT_WINDOW_SIZE,
            min_count: fairgate_core::metrics::DEFAULT_MIN_COUNT,
            thresholds: DriftThresholds::default(),
            canary_stages: default_stages(3600, 500),
            flag_rules: Vec::new(),
            cors_allowlist: Vec::new(),
            bearer_token: None,
            max_inflight_ingest: 64,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    /// Reads `path` if given (defaults otherwise), then applies env overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, GatewayError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| GatewayError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(|k| std::env::var(k).ok());
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(d) = var(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(d);
        }
        if let Some(l) = var(ENV_LISTEN) {
            self.listen = l;
        }
        if let Some(t) = var(ENV_TOKEN) {
            self.bearer_token = Some(t).filter(|t| !t.is_empty());
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.window_size == 0 {
            return bad("window_size must be at least 1".into());
        }
        if self.max_inflight_ingest == 0 {
            return bad("max_inflight_ingest must be at least 1".into());
        }
        self.thresholds.validate().map_err(GatewayError::Config)?;
        if let Some(last) = self.canary_stages.last() {
            if last.fraction != 1.0 || self.canary_stages.windows(2).any(|w| w[0].fraction >= w[1].fraction) {
                return bad("canary_stages must rise strictly and end at 1.0".into());
            }
        }
        Ok(())
    }

    /// Creates the data directory and checks it is writable.
    pub fn prepare_data_dir(&self) -> Result<(), GatewayError> {
        std::fs::create_dir_all(&self.data_dir)
            .map_err(|e| GatewayError::Config(format!("data_dir {}: {e}", self.data_dir.display())))?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| GatewayError::Config(format!("data_dir {} not writable: {e}", self.data_dir.display())))
    }
}
