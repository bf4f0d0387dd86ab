//! Architecture interchange as pretty-printed JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_error, read_text, write_atomic};
use crate::superkernel::Decision;
use crate::supernet::{DerivedArchitecture, MacroConfig};
use crate::Result;

/// Where a derived architecture came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub lambda: f64,
    pub search_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureFile {
    #[serde(rename = "macro")]
    pub macro_cfg: MacroConfig,
    pub decisions: Vec<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ArchitectureFile {
    pub fn new(arch: &DerivedArchitecture, provenance: Option<Provenance>) -> Self {
        ArchitectureFile {
            macro_cfg: arch.macro_cfg.clone(),
            decisions: arch.decisions.clone(),
            provenance,
        }
    }

    pub fn architecture(&self) -> Result<DerivedArchitecture> {
        DerivedArchitecture::new(self.macro_cfg.clone(), self.decisions.clone())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("architecture serializes");
        s.push('\n');
        s
    }

    /// Parse and check that the decisions fit the macro config.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let f: ArchitectureFile =
            serde_json::from_str(text).map_err(|e| parse_error(origin, e.line(), e.to_string()))?;
        f.architecture().map_err(|e| parse_error(origin, 0, e.to_string()))?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?, path)
    }
}
