//! Declarative feature layout shared by embeddings, masking and the adapter.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    User,
    Item,
    Context,
}

/// Fine-grained personalized identifiers vs coarse attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureClass {
    IdBased,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub class: FeatureClass,
    /// Vocabulary size including the reserved out-of-vocabulary index 0.
    pub vocab: usize,
    #[serde(default)]
    pub sequence: bool,
    /// Whether this feature's embedding feeds the adapter's state signals.
    /// Defaults to true for scalar id-based user/item features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_id: Option<bool>,
}

impl FeatureSpec {
    pub fn new(name: &str, kind: FeatureKind, class: FeatureClass, vocab: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            class,
            vocab,
            sequence: false,
            state_id: None,
        }
    }

    pub fn sequence(mut self) -> Self {
        self.sequence = true;
        self
    }

    pub fn with_state_id(mut self, flag: bool) -> Self {
        self.state_id = Some(flag);
        self
    }

    pub fn is_state_id(&self) -> bool {
        self.state_id.unwrap_or(
            self.class == FeatureClass::IdBased && !self.sequence && self.kind != FeatureKind::Context,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    /// Embedding dimension shared by every feature.
    pub dim: usize,
    #[serde(rename = "feature")]
    features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(dim: usize, features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = Self { dim, features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Schema("embedding dimension must be at least 1".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Schema("schema has no features".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            if f.vocab < 1 {
                return Err(Error::Schema(format!("feature `{}` has an empty vocabulary", f.name)));
            }
            if f.class == FeatureClass::IdBased && f.vocab <= 1 {
                return Err(Error::Schema(format!(
                    "id-based feature `{}` needs a vocabulary larger than 1",
                    f.name
                )));
            }
            if f.sequence && f.class != FeatureClass::IdBased {
                return Err(Error::Schema(format!("sequence feature `{}` must be id-based", f.name)));
            }
            if f.state_id == Some(true) && (f.sequence || f.kind == FeatureKind::Context) {
                return Err(Error::Schema(format!(
                    "state id feature `{}` must be a scalar user or item feature",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &FeatureSpec {
        &self.features[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn indices_of_kind(&self, kind: FeatureKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.features[i].kind == kind).collect()
    }

    /// Schema positions of state-signal id features, in schema order.
    pub fn state_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.features[i].is_state_id()).collect()
    }

    pub fn state_ids_of_kind(&self, kind: FeatureKind) -> Vec<usize> {
        self.state_ids()
            .into_iter()
            .filter(|&i| self.features[i].kind == kind)
            .collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Schema(e.to_string()))?;
        let schema: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}
