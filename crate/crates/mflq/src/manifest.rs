//! Run manifests: everything needed to repeat a command, plus what it wrote.

use serde::{Deserialize, Serialize};

use crate::output::WrittenFile;
use crate::pipeline::Job;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEcho {
    /// where the model was read from, for information only
    pub source: String,
    pub sha256: String,
    /// verbatim model file; reruns parse this text
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverGrid {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    pub model: ModelEcho,
    pub grid: SolverGrid,
    pub seeds: Vec<u64>,
    /// worker threads used; outputs do not depend on it
    pub threads: usize,
    pub timings: Vec<Timing>,
    /// every file written besides the manifest, in write order
    pub outputs: Vec<WrittenFile>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
