//! Registered data sources and knowledge collections, i.e. everything a
//! request can `@`-mention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Table, ValueKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Csv,
    KnowledgeCollection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRegistration {
    pub name: String,
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<ColumnSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_doc_id: Option<String>,
}

impl SourceRegistration {
    pub fn csv(name: &str, path: impl Into<PathBuf>) -> Self {
        SourceRegistration {
            name: name.to_string(),
            kind: SourceKind::Csv,
            path: Some(path.into()),
            columns: Vec::new(),
            schema_doc_id: None,
        }
    }

    pub fn collection(name: &str) -> Self {
        SourceRegistration {
            name: name.to_string(),
            kind: SourceKind::KnowledgeCollection,
            path: None,
            columns: Vec::new(),
            schema_doc_id: None,
        }
    }

    pub fn with_columns_from(mut self, table: &Table) -> Self {
        self.columns = table
            .columns
            .iter()
            .enumerate()
            .map(|(i, name)| ColumnSummary {
                name: name.clone(),
                kind: if table.is_numeric_column(i) && !table.rows.is_empty() {
                    ValueKind::Number
                } else {
                    ValueKind::Text
                },
            })
            .collect();
        self
    }

    /// Text of the schema-metadata document stored in the knowledge base.
    pub fn schema_summary(&self) -> String {
        let cols = self
            .columns
            .iter()
            .map(|c| format!("{} ({})", c.name, c.kind))
            .collect::<Vec<_>>()
            .join(", ");
        format!("data source {} columns: {cols}", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("a source named {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid source name {0:?}: expected [A-Za-z][A-Za-z0-9_]*")]
    InvalidName(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Names usable as `@` mentions.
pub fn is_binding_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Default)]
pub struct SourceCatalog {
    entries: RwLock<BTreeMap<String, SourceRegistration>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    sources: Vec<SourceRegistration>,
}

impl SourceCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, reg: SourceRegistration) -> Result<(), CatalogError> {
        if !is_binding_name(&reg.name) {
            return Err(CatalogError::InvalidName(reg.name));
        }
        let mut entries = self.entries.write();
        if entries.contains_key(&reg.name) {
            return Err(CatalogError::DuplicateName(reg.name));
        }
        entries.insert(reg.name.clone(), reg);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<SourceRegistration> {
        self.entries.read().get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.read().contains_key(name)
    }

    pub fn find_by_path(&self, path: &str) -> Option<SourceRegistration> {
        let wanted = Path::new(path);
        self.entries.read().values().find(|r| r.path.as_deref() == Some(wanted)).cloned()
    }

    pub fn list(&self) -> Vec<SourceRegistration> {
        self.entries.read().values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.read().keys().cloned().collect()
    }

    /// Loads a `{"sources": [...]}` manifest; relative paths resolve against
    /// the manifest's directory.
    pub fn load_manifest(path: &Path) -> Result<Self, CatalogError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CatalogError::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let catalog = SourceCatalog::new();
        for mut reg in manifest.sources {
            if let Some(p) = &reg.path {
                if p.is_relative() {
                    reg.path = Some(base.join(p));
                }
            }
            catalog.register(reg)?;
        }
        Ok(catalog)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<(), CatalogError> {
        let manifest = Manifest { sources: self.list() };
        let raw = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, raw).map_err(|e| CatalogError::Manifest(format!("{}: {e}", path.display())))
    }
}
