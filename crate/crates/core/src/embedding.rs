//! Per-feature embedding tables, their trainable mask rows, and batched lookup.

use rand::Rng;

use crate::data::{FeatureValue, Sample};
use crate::error::{Error, Result};
use crate::schema::FeatureSchema;
use crate::tensor::{Matrix, NodeId, ParamId, ParamStore, Tape};

/// Parameter handles for every feature's table (`V × d`) and mask row (`1 × d`).
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    tables: Vec<ParamId>,
    masks: Vec<ParamId>,
    vocab: Vec<usize>,
    dim: usize,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized to shape")
}

impl EmbeddingTables {
    /// Registers `embedding.<name>` and `mask.<name>` for every feature, drawn
    /// from uniform(±1/√d) in schema order.
    pub fn init(store: &mut ParamStore, schema: &FeatureSchema, rng: &mut impl Rng) -> Result<Self> {
        let d = schema.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut tables = Vec::with_capacity(schema.len());
        let mut masks = Vec::with_capacity(schema.len());
        for f in schema.features() {
            tables.push(store.register(format!("embedding.{}", f.name), uniform(f.vocab, d, bound, rng))?);
            masks.push(store.register(format!("mask.{}", f.name), uniform(1, d, bound, rng))?);
        }
        Ok(Self {
            tables,
            masks,
            vocab: schema.features().iter().map(|f| f.vocab).collect(),
            dim: d,
        })
    }

    /// Re-binds to parameters already present in `store`, checking shapes.
    pub fn attach(store: &ParamStore, schema: &FeatureSchema) -> Result<Self> {
        let find = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let pid = store
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if store.value(pid).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "attach embedding",
                    left: store.value(pid).shape(),
                    right: shape,
                });
            }
            Ok(pid)
        };
        let d = schema.dim;
        let mut tables = Vec::new();
        let mut masks = Vec::new();
        for f in schema.features() {
            tables.push(find(format!("embedding.{}", f.name), (f.vocab, d))?);
            masks.push(find(format!("mask.{}", f.name), (1, d))?);
        }
        Ok(Self {
            tables,
            masks,
            vocab: schema.features().iter().map(|f| f.vocab).collect(),
            dim: d,
        })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self, feature: usize) -> ParamId {
        self.tables[feature]
    }

    pub fn mask_param(&self, feature: usize) -> Result<ParamId> {
        self.masks.get(feature).copied().ok_or(Error::OutOfRange {
            what: "feature index",
            index: feature,
            len: self.masks.len(),
        })
    }

    /// The current value of feature `feature`'s mask row.
    pub fn mask_row<'a>(&self, store: &'a ParamStore, feature: usize) -> Result<&'a [f64]> {
        Ok(store.value(self.mask_param(feature)?).row(0))
    }

    /// Mask row of `feature` repeated `batch` times, as a tape node.
    pub fn mask_node(&self, tape: &mut Tape, store: &ParamStore, feature: usize, batch: usize) -> Result<NodeId> {
        tape.gather(store, self.mask_param(feature)?, vec![0; batch])
    }

    fn index(&self, feature: usize, value: u32) -> usize {
        let v = value as usize;
        if v < self.vocab[feature] {
            v
        } else {
            0
        }
    }
}

/// Embeddings `[v₁…vₙ]` of a batch: one `B × d` node per feature, plus which
/// rows of each were replaced by that feature's mask row.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub vectors: Vec<NodeId>,
    pub masked: Vec<Vec<bool>>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.masked.first().map_or(0, Vec::len)
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().flatten().filter(|&&m| m).count()
    }
}

/// Looks up every feature of every sample. Values outside a feature's
/// vocabulary map to index 0; sequences are mean-pooled, and an empty
/// sequence takes the feature's mask row.
pub fn lookup(
    tape: &mut Tape,
    store: &ParamStore,
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    samples: &[&Sample],
) -> Result<EmbeddingSet> {
    if tables.len() != schema.len() {
        return Err(Error::FeatureCountMismatch {
            expected: schema.len(),
            got: tables.len(),
        });
    }
    for s in samples {
        if s.features.len() != schema.len() {
            return Err(Error::FeatureCountMismatch {
                expected: schema.len(),
                got: s.features.len(),
            });
        }
    }
    let batch = samples.len();
    let mut vectors = Vec::with_capacity(schema.len());
    let mut masked = Vec::with_capacity(schema.len());
    for (i, spec) in schema.features().iter().enumerate() {
        if spec.sequence {
            let mut lists = Vec::with_capacity(batch);
            for s in samples {
                let FeatureValue::Seq(vals) = &s.features[i] else {
                    return Err(Error::Invalid(format!("feature `{}` expects a sequence", spec.name)));
                };
                lists.push(vals.iter().map(|&v| tables.index(i, v)).collect::<Vec<_>>());
            }
            let empty: Vec<bool> = lists.iter().map(Vec::is_empty).collect();
            let pooled = tape.gather_mean(store, tables.table(i), lists)?;
            if empty.iter().any(|&e| e) {
                let mask = tables.mask_node(tape, store, i, batch)?;
                vectors.push(tape.select_rows(pooled, mask, empty.clone())?);
            } else {
                vectors.push(pooled);
            }
            masked.push(empty);
        } else {
            let mut rows = Vec::with_capacity(batch);
            for s in samples {
                let FeatureValue::Id(v) = s.features[i] else {
                    return Err(Error::Invalid(format!("feature `{}` expects a scalar", spec.name)));
                };
                rows.push(tables.index(i, v));
            }
            vectors.push(tape.gather(store, tables.table(i), rows)?);
            masked.push(vec![false; batch]);
        }
    }
    Ok(EmbeddingSet { vectors, masked })
}

/// `r_norm`: norm transforms of each listed feature's embedding, concatenated
/// in the given order (`B × 4·ids.len()`). `None` when `ids` is empty.
pub fn id_norm_features(tape: &mut Tape, set: &EmbeddingSet, ids: &[usize]) -> Result<Option<NodeId>> {
    let mut parts = Vec::with_capacity(ids.len());
    for &i in ids {
        let v = *set.vectors.get(i).ok_or(Error::OutOfRange {
            what: "feature index",
            index: i,
            len: set.len(),
        })?;
        parts.push(tape.norm_features(v)?);
    }
    match parts.len() {
        0 => Ok(None),
        1 => Ok(Some(parts[0])),
        _ => tape.concat(&parts).map(Some),
    }
}
