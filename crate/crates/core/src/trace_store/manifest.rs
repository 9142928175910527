// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// One population of FFN neurons, e.g. a language model's MLP stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    pub layer_count: u16,
    /// Intermediate FFN size: the number of neurons in each layer.
    pub neurons_per_layer: u32,
}

impl ModuleSpec {
    pub fn population(&self) -> usize {
        usize::from(self.layer_count) * self.neurons_per_layer as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTypeSpec {
    pub id: u8,
    pub name: String,
}

/// Describes what a set of trace files covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub model_id: String,
    pub modules: Vec<ModuleSpec>,
    pub domains: Vec<DomainSpec>,
    pub token_types: Vec<TokenTypeSpec>,
}

impl CorpusManifest {
    /// Parse and validate a TOML manifest.
    pub fn load(text: &str) -> Result<Self> {
        let manifest: CorpusManifest = toml::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self) -> Result<String> {
        self.validate()?;
        Ok(toml::to_string(self)?)
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn module(&self, id: u16) -> Option<&ModuleSpec> {
        self.modules.get(usize::from(id))
    }

    pub fn domain_name(&self, id: u16) -> Option<&str> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .map(|d| d.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::doc(format!(
                "unsupported manifest format_version {}",
                self.format_version
            )));
        }
        if self.domains.len() < 2 {
            return Err(Error::doc(format!(
                "need at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.id) {
                return Err(Error::doc(format!("duplicate domain id {}", d.id)));
            }
        }
        for expected in 0..self.domains.len() {
            if !seen.contains(&(expected as u16)) {
                return Err(Error::doc(format!(
                    "domain ids must be contiguous from 0; missing {expected}"
                )));
            }
        }
        if self.modules.is_empty() {
            return Err(Error::doc("manifest lists no modules"));
        }
        let mut names = HashSet::new();
        for m in &self.modules {
            if !names.insert(m.name.as_str()) {
                return Err(Error::doc(format!("duplicate module name {:?}", m.name)));
            }
            if m.layer_count == 0 || m.neurons_per_layer == 0 {
                return Err(Error::doc(format!(
                    "module {:?} must have layer_count >= 1 and neurons_per_layer >= 1",
                    m.name
                )));
            }
        }
        let mut types = HashSet::new();
        for t in &self.token_types {
            if !types.insert(t.id) {
                return Err(Error::doc(format!("duplicate token type id {}", t.id)));
            }
        }
        Ok(())
    }
}
