//! Base predictors `g`: concatenation MLP, three-field FM and two-tower.
//! Each maps an [`EmbeddingSet`] to one logit per sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::schema::{FeatureKind, FeatureSchema};
use crate::tensor::{dot, sigmoid, Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Fm,
    TwoTower,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Fm => "fm",
            ModelKind::TwoTower => "two_tower",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// MLP layer widths; the last must be 1.
    pub hidden: Vec<usize>,
    /// Hidden widths of each tower, before the latent projection.
    pub tower: Vec<usize>,
    pub latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Fm,
            hidden: vec![512, 128, 1],
            tower: vec![512, 128],
            latent: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::Mlp && self.hidden.last() != Some(&1) {
            return Err(Error::config("model.hidden", format!("last width must be 1, got {:?}", self.hidden)));
        }
        if self.hidden.contains(&0) || self.tower.contains(&0) {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        if self.latent == 0 {
            return Err(Error::config("model.latent", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TwoTower {
    pub user_features: Vec<usize>,
    pub item_features: Vec<usize>,
    pub user: Mlp,
    pub item: Mlp,
}

impl TwoTower {
    fn tower(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, set: &EmbeddingSet, features: &[usize]) -> Result<NodeId> {
        let parts: Vec<NodeId> = features.iter().map(|&i| set.vectors[i]).collect();
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        mlp.forward(tape, store, x)
    }

    /// User-tower output (`B × latent`), from user and context features only.
    pub fn user_vectors(&self, tape: &mut Tape, store: &ParamStore, set: &EmbeddingSet) -> Result<NodeId> {
        Self::tower(tape, store, &self.user, set, &self.user_features)
    }

    /// Item-tower output (`B × latent`), from item features only.
    pub fn item_vectors(&self, tape: &mut Tape, store: &ParamStore, set: &EmbeddingSet) -> Result<NodeId> {
        Self::tower(tape, store, &self.item, set, &self.item_features)
    }
}

#[derive(Clone, Debug)]
pub enum BaseModel {
    Mlp(Mlp),
    Fm {
        bias: ParamId,
        user: Vec<usize>,
        item: Vec<usize>,
        context: Vec<usize>,
    },
    TwoTower(TwoTower),
}

impl BaseModel {
    pub fn init(store: &mut ParamStore, schema: &FeatureSchema, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = schema.dim;
        Ok(match config.kind {
            ModelKind::Mlp => BaseModel::Mlp(Mlp::init(store, "mlp", schema.len() * d, &config.hidden, false, rng)?),
            ModelKind::Fm => BaseModel::Fm {
                bias: store.register("fm.bias", Matrix::zeros(1, 1))?,
                user: schema.indices_of_kind(FeatureKind::User),
                item: schema.indices_of_kind(FeatureKind::Item),
                context: schema.indices_of_kind(FeatureKind::Context),
            },
            ModelKind::TwoTower => {
                let user_features: Vec<usize> =
                    (0..schema.len()).filter(|&i| schema.feature(i).kind != FeatureKind::Item).collect();
                let item_features = schema.indices_of_kind(FeatureKind::Item);
                if user_features.is_empty() || item_features.is_empty() {
                    return Err(Error::Schema("two-tower needs user and item features".into()));
                }
                let mut dims = config.tower.clone();
                dims.push(config.latent);
                let user = Mlp::init(store, "tower.user", user_features.len() * d, &dims, false, rng)?;
                let item = Mlp::init(store, "tower.item", item_features.len() * d, &dims, false, rng)?;
                BaseModel::TwoTower(TwoTower {
                    user_features,
                    item_features,
                    user,
                    item,
                })
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            BaseModel::Mlp(_) => ModelKind::Mlp,
            BaseModel::Fm { .. } => ModelKind::Fm,
            BaseModel::TwoTower(_) => ModelKind::TwoTower,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            BaseModel::Mlp(m) => m.params(),
            BaseModel::Fm { bias, .. } => vec![*bias],
            BaseModel::TwoTower(t) => t.user.params().into_iter().chain(t.item.params()).collect(),
        }
    }

    /// Pre-sigmoid scores, `B × 1`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, set: &EmbeddingSet) -> Result<NodeId> {
        match self {
            BaseModel::Mlp(mlp) => {
                let x = tape.concat(&set.vectors)?;
                if tape.value(x).cols() != mlp.input_width() {
                    return Err(Error::ShapeMismatch {
                        op: "mlp input",
                        left: tape.value(x).shape(),
                        right: (tape.value(x).rows(), mlp.input_width()),
                    });
                }
                mlp.forward(tape, store, x)
            }
            BaseModel::Fm {
                bias,
                user,
                item,
                context,
            } => {
                let mut pools = Vec::with_capacity(3);
                for group in [user, item, context] {
                    let parts: Vec<NodeId> = group.iter().map(|&i| set.vectors[i]).collect();
                    pools.push(match parts.len() {
                        0 => None,
                        1 => Some(parts[0]),
                        _ => Some(tape.sum(&parts)?),
                    });
                }
                let mut terms = Vec::with_capacity(3);
                for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                    if let (Some(x), Some(y)) = (pools[a], pools[b]) {
                        terms.push(tape.row_dot(x, y)?);
                    }
                }
                let score = match terms.len() {
                    0 => tape.input(Matrix::zeros(set.batch(), 1))?,
                    1 => terms[0],
                    _ => tape.sum(&terms)?,
                };
                tape.bias_add(store, score, *bias)
            }
            BaseModel::TwoTower(t) => {
                let u = t.user_vectors(tape, store, set)?;
                let v = t.item_vectors(tape, store, set)?;
                tape.row_dot(u, v)
            }
        }
    }
}

/// Precomputed item-tower outputs for retrieval-style scoring.
#[derive(Clone, Debug, Default)]
pub struct ItemCache {
    vectors: std::collections::BTreeMap<u32, Vec<f64>>,
}

impl ItemCache {
    pub fn insert(&mut self, item: u32, vector: Vec<f64>) {
        self.vectors.insert(item, vector);
    }

    pub fn get(&self, item: u32) -> Option<&[f64]> {
        self.vectors.get(&item).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `σ(⟨user, cached item⟩)`.
    pub fn score(&self, user: &[f64], item: u32) -> Result<f64> {
        let v = self.get(item).ok_or(Error::OutOfRange {
            what: "cached item",
            index: item as usize,
            len: self.len(),
        })?;
        if v.len() != user.len() {
            return Err(Error::ShapeMismatch {
                op: "cached score",
                left: (1, user.len()),
                right: (1, v.len()),
            });
        }
        Ok(sigmoid(dot(user, v)))
    }
}
