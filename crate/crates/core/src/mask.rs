//! Feature-mask augmentation: masked copies of a batch's embeddings and the
//! auxiliary loss over their predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, EmbeddingTables};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Augmented variants per sample; 0 disables augmentation.
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            k: 1,
            beta: 0.1,
            gamma: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.beta && self.beta <= self.gamma && self.gamma <= 1.0) {
            return Err(Error::config(
                "mask",
                format!("need 0 <= beta <= gamma <= 1, got beta={} gamma={}", self.beta, self.gamma),
            ));
        }
        Ok(())
    }
}

/// `k` masking probabilities drawn uniformly from `[beta, gamma]`.
pub fn sample_probabilities(config: &MaskConfig, rng: &mut impl Rng) -> Vec<f64> {
    (0..config.k)
        .map(|_| {
            if config.beta == config.gamma {
                config.beta
            } else {
                rng.random_range(config.beta..=config.gamma)
            }
        })
        .collect()
}

/// Replaces each (sample, feature) embedding by the feature's mask row
/// independently with probability `probs[sample]`. Features with nothing
/// masked keep the very same tape node.
pub fn apply_mask(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    set: &EmbeddingSet,
    probs: &[f64],
    rng: &mut impl Rng,
) -> Result<EmbeddingSet> {
    let batch = set.batch();
    if probs.len() != batch {
        return Err(Error::Invalid(format!(
            "{} masking probabilities for a batch of {batch}",
            probs.len()
        )));
    }
    let mut vectors = Vec::with_capacity(set.len());
    let mut masked = Vec::with_capacity(set.len());
    for (i, (&v, prev)) in set.vectors.iter().zip(&set.masked).enumerate() {
        let flags: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
        if flags.iter().any(|&f| f) {
            let mask = tables.mask_node(tape, store, i, batch)?;
            vectors.push(tape.select_rows(v, mask, flags.clone())?);
        } else {
            vectors.push(v);
        }
        masked.push(prev.iter().zip(&flags).map(|(&a, &b)| a || b).collect());
    }
    Ok(EmbeddingSet { vectors, masked })
}

/// The `k` masked variants of one batch.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub variants: Vec<EmbeddingSet>,
    /// `probabilities[j][s]`: probability used for sample `s` in variant `j`.
    pub probabilities: Vec<Vec<f64>>,
}

pub fn augment(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    set: &EmbeddingSet,
    config: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    let per_sample: Vec<Vec<f64>> = (0..set.batch()).map(|_| sample_probabilities(config, rng)).collect();
    let mut variants = Vec::with_capacity(config.k);
    let mut probabilities = Vec::with_capacity(config.k);
    for j in 0..config.k {
        let probs: Vec<f64> = per_sample.iter().map(|p| p[j]).collect();
        variants.push(apply_mask(tape, store, tables, set, &probs, rng)?);
        probabilities.push(probs);
    }
    Ok(AugmentedBatch {
        variants,
        probabilities,
    })
}

/// Sum over samples and variants of the cross-entropy of each masked
/// prediction against the sample's label, divided by the batch size only.
/// `predictions[s]` holds the `k` variant probabilities of sample `s`.
pub fn auxiliary_loss(predictions: &[Vec<f64>], labels: &[f64], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} prediction rows for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &y) in predictions.iter().zip(labels) {
        if row.len() != k {
            return Err(Error::Invalid(format!("expected {k} masked predictions per sample, got {}", row.len())));
        }
        for &p in row {
            total += cross_entropy(p, y)?;
        }
    }
    Ok(total / labels.len() as f64)
}
