//! Run configuration: every module's settings plus a global seed, loadable
//! from one JSON file and echoed into every output.

use std::path::Path;

use inrprop::feature_field::FieldFitConfig;
use inrprop::flow_field::FlowFitConfig;
use inrprop::io;
use inrprop::maskops::{InteriorConfig, KdeConfig};
use inrprop::matching::MatchConfig;
use inrprop::metrics::MetricsConfig;
use inrprop::Result;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every fitting stage when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub field: FieldFitConfig,
    pub flow: FlowFitConfig,
    pub matching: MatchConfig,
    pub interior: InteriorConfig,
    pub kde: KdeConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        io::docs::from_json(&bytes).map_err(|e| e.in_file(path))
    }

    /// Pushes the global seed down into the sub-configs.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.field.seed = s;
            self.flow.seed = s;
        }
        self
    }

    /// Seed recorded in output documents.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.flow.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.flow.validate()?;
        self.matching.validate()?;
        self.kde.validate()?;
        self.metrics.validate()
    }

    pub fn echo(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }
}
