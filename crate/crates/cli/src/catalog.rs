//! The list of shipped experiments and the statements they check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub tag: String,
    /// Path relative to the catalog file.
    pub config: PathBuf,
    pub summary: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub entry: Vec<CatalogEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Catalog {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read catalog {}: {e}", path.display())))?;
        let mut cat: Catalog =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        cat.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cat)
    }

    pub fn config_path(&self, entry: &CatalogEntry) -> PathBuf {
        self.root.join(&entry.config)
    }

    /// Loads and validates every listed experiment.
    pub fn configs(&self) -> Result<Vec<(CatalogEntry, ExperimentConfig)>, CliError> {
        self.entry
            .iter()
            .map(|e| Ok((e.clone(), ExperimentConfig::load(&self.config_path(e))?)))
            .collect()
    }

    pub fn find(&self, tag: &str) -> Vec<&CatalogEntry> {
        self.entry.iter().filter(|e| e.tag == tag).collect()
    }

    pub fn table(&self) -> String {
        let w = self.entry.iter().map(|e| e.tag.len()).max().unwrap_or(0);
        self.entry
            .iter()
            .map(|e| format!("{:<w$}  {:<40}  {}\n", e.tag, e.config.display(), e.summary))
            .collect()
    }
}
