//! Provenance stamped into every file the tool writes.

use serde::{Deserialize, Serialize};

/// Crate version plus `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("RAFCAST_GIT_DESCRIBE"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// The full configuration the artifact was produced with.
    pub config: serde_json::Value,
}

impl Envelope {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Self {
        Self {
            tool: "rafcast".into(),
            version: VERSION.into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config).expect("configs serialize to JSON"),
        }
    }

    /// `# `-prefixed header lines for CSV outputs.
    pub fn csv_preamble(&self) -> String {
        format!(
            "# {} {} {} seed={}\n# config: {}\n",
            self.tool,
            self.version,
            self.command,
            self.seed,
            serde_json::to_string(&self.config).expect("json value serializes")
        )
    }
}
