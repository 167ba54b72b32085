//! State-aware feature weighting.
//!
//! State signals `[r_active, r_ID, r_norm, r_count]` feed a small MLP whose
//! sigmoid outputs scale each feature embedding. In two-tower mode the user
//! and item towers each get their own adapter fed only by their side's
//! signals.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountChannel, Sample, StatsStore};
use crate::embedding::{id_norm_features, EmbeddingSet};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::schema::{FeatureKind, FeatureSchema};
use crate::tensor::{Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

/// What the weight generator looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Empirical state signals.
    State,
    /// The concatenated feature embeddings themselves (baseline).
    #[serde(rename = "self")]
    SelfWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketConfig {
    /// Lower bounds of the active-day buckets; must start at 0.
    pub active_bounds: Vec<u32>,
    /// Largest log₂ count bucket; larger counts share it.
    pub count_cap: u32,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            active_bounds: vec![0, 1, 2, 3, 5, 10, 20, 30],
            count_cap: 20,
        }
    }
}

impl BucketConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.active_bounds;
        if b.first() != Some(&0) || b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "adapter.buckets.active_bounds",
                format!("must start at 0 and increase, got {b:?}"),
            ));
        }
        if self.count_cap > 63 {
            return Err(Error::config("adapter.buckets.count_cap", "must be at most 63"));
        }
        Ok(())
    }

    fn count_width(&self) -> usize {
        self.count_cap as usize + 1
    }
}

/// Which state signals feed the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSet {
    pub active: bool,
    pub ids: bool,
    pub norms: bool,
    pub counts: bool,
}

impl Default for SignalSet {
    fn default() -> Self {
        Self {
            active: true,
            ids: true,
            norms: true,
            counts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub activation_out: OutputActivation,
    /// Keep adapter gradients out of the ID embeddings read as signals.
    pub stop_gradient: bool,
    pub source: WeightSource,
    pub signals: SignalSet,
    pub buckets: BucketConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: 128,
            activation_out: OutputActivation::Sigmoid,
            stop_gradient: false,
            source: WeightSource::State,
            signals: SignalSet::default(),
            buckets: BucketConfig::default(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("adapter.hidden", "must be positive"));
        }
        let g = self.signals;
        if self.source == WeightSource::State && !(g.active || g.ids || g.norms || g.counts) {
            return Err(Error::config("adapter.signals", "at least one state signal must be enabled"));
        }
        self.buckets.validate()
    }
}

/// Bucket index of an active-day count.
pub fn active_bucket(days: u32, bounds: &[u32]) -> usize {
    bounds.partition_point(|&b| b <= days).saturating_sub(1)
}

/// `⌊log₂ count⌋` capped at `cap`; `None` for a zero count.
pub fn count_bucket(count: u64, cap: u32) -> Option<usize> {
    (count > 0).then(|| (63 - count.leading_zeros()).min(cap) as usize)
}

/// Which features and signals an adapter covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Joint,
    /// User and context features.
    User,
    Item,
}

impl Side {
    fn has_user(self) -> bool {
        self != Side::Item
    }

    fn has_item(self) -> bool {
        self != Side::User
    }

    pub fn covers(self, kind: FeatureKind) -> bool {
        match self {
            Side::Joint => true,
            Side::User => kind != FeatureKind::Item,
            Side::Item => kind == FeatureKind::Item,
        }
    }

    fn id_features(self, schema: &FeatureSchema) -> Vec<usize> {
        schema
            .state_ids()
            .into_iter()
            .filter(|&i| self.covers(schema.feature(i).kind))
            .collect()
    }

    pub fn features(self, schema: &FeatureSchema) -> Vec<usize> {
        (0..schema.len()).filter(|&i| self.covers(schema.feature(i).kind)).collect()
    }
}

/// Column counts of each signal block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignalLayout {
    pub active: usize,
    pub ids: usize,
    pub norms: usize,
    pub counts: usize,
}

impl SignalLayout {
    pub fn new(schema: &FeatureSchema, channels: &[CountChannel], side: Side, config: &AdapterConfig) -> Self {
        let (g, buckets) = (config.signals, &config.buckets);
        let n_ids = side.id_features(schema).len();
        let entities = usize::from(side.has_user()) + usize::from(side.has_item());
        let on = |flag: bool, width: usize| if flag { width } else { 0 };
        Self {
            active: on(g.active && side.has_user(), 2 * buckets.active_bounds.len()),
            ids: on(g.ids, n_ids * schema.dim),
            norms: on(g.norms, n_ids * 4),
            counts: on(g.counts, entities * channels.len() * buckets.count_width()),
        }
    }

    pub fn width(&self) -> usize {
        self.active + self.ids + self.norms + self.counts
    }
}

/// Bucketized activity (`B × active`) and count (`B × counts`) one-hots.
/// Entities without training statistics get all-zero rows.
pub fn numeric_signals(samples: &[&Sample], stats: &StatsStore, side: Side, buckets: &BucketConfig) -> (Matrix, Matrix) {
    let nb = buckets.active_bounds.len();
    let cw = buckets.count_width();
    let channels = stats.channels().len();
    let entities = usize::from(side.has_user()) + usize::from(side.has_item());
    let mut active = Matrix::zeros(samples.len(), if side.has_user() { 2 * nb } else { 0 });
    let mut counts = Matrix::zeros(samples.len(), entities * channels * cw);
    for (r, s) in samples.iter().enumerate() {
        if side.has_user() {
            if let Some(a) = stats.user_activity(s.user, s.timestamp) {
                let row = active.row_mut(r);
                row[active_bucket(a.active_7, &buckets.active_bounds)] = 1.0;
                row[nb + active_bucket(a.active_30, &buckets.active_bounds)] = 1.0;
            }
        }
        let mut blocks: Vec<Option<Vec<u64>>> = Vec::with_capacity(2);
        if side.has_user() {
            blocks.push(stats.user_state_counts(s.user, s.timestamp));
        }
        if side.has_item() {
            blocks.push(stats.item_state_counts(s.item, s.timestamp));
        }
        let row = counts.row_mut(r);
        for (b, block) in blocks.into_iter().enumerate() {
            let Some(block) = block else { continue };
            for (c, &n) in block.iter().enumerate() {
                if let Some(k) = count_bucket(n, buckets.count_cap) {
                    row[(b * channels + c) * cw + k] = 1.0;
                }
            }
        }
    }
    (active, counts)
}

/// Signal vector `[r_active, r_ID, r_norm, r_count]` as one `B × width` node.
#[derive(Clone, Debug)]
pub struct StateSignals {
    pub node: NodeId,
    pub layout: SignalLayout,
}

pub fn build_state_signals(
    tape: &mut Tape,
    schema: &FeatureSchema,
    set: &EmbeddingSet,
    samples: &[&Sample],
    stats: &StatsStore,
    side: Side,
    config: &AdapterConfig,
) -> Result<StateSignals> {
    let layout = SignalLayout::new(schema, stats.channels(), side, config);
    let g = config.signals;
    let (active, counts) = numeric_signals(samples, stats, side, &config.buckets);
    let mut parts = Vec::with_capacity(4);
    if g.active && active.cols() > 0 {
        parts.push(tape.input(active)?);
    }
    let ids = side.id_features(schema);
    let mut id_nodes = Vec::with_capacity(ids.len());
    for &i in &ids {
        let v = set.vectors[i];
        id_nodes.push(if config.stop_gradient { tape.stop_gradient(v)? } else { v });
    }
    if g.ids {
        parts.extend(&id_nodes);
    }
    let view = EmbeddingSet {
        vectors: id_nodes,
        masked: vec![Vec::new(); ids.len()],
    };
    let positions: Vec<usize> = (0..ids.len()).collect();
    if g.norms {
        if let Some(norms) = id_norm_features(tape, &view, &positions)? {
            parts.push(norms);
        }
    }
    if g.counts && counts.cols() > 0 {
        parts.push(tape.input(counts)?);
    }
    let node = match parts.len() {
        0 => tape.input(Matrix::zeros(samples.len(), 0))?,
        1 => parts[0],
        _ => tape.concat(&parts)?,
    };
    debug_assert_eq!(tape.value(node).cols(), layout.width());
    Ok(StateSignals { node, layout })
}

/// One weight generator `h` covering a subset of features.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub side: Side,
    pub features: Vec<usize>,
    mlp: Mlp,
}

impl Adapter {
    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    /// `σ(h(input))` (or a row softmax), one column per covered feature.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: NodeId, act: OutputActivation) -> Result<NodeId> {
        let width = tape.value(input).cols();
        if width != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "adapter input",
                left: tape.value(input).shape(),
                right: (tape.value(input).rows(), self.input_width()),
            });
        }
        let h = self.mlp.forward(tape, store, input)?;
        match act {
            OutputActivation::Sigmoid => tape.sigmoid(h),
            OutputActivation::Softmax => tape.softmax_rows(h),
        }
    }
}

/// Per-feature weights of a batch: feature `i` is scaled by column
/// `columns[i].1` of node `columns[i].0`.
#[derive(Debug)]
pub struct AdaptiveWeights {
    pub columns: Vec<(NodeId, usize)>,
    reads: Cell<usize>,
}

impl AdaptiveWeights {
    pub fn new(columns: Vec<(NodeId, usize)>) -> Self {
        Self {
            columns,
            reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Number of times these weights were applied to embeddings.
    pub fn read_count(&self) -> usize {
        self.reads.get()
    }

    /// `B × n` weight values.
    pub fn values(&self, tape: &Tape) -> Matrix {
        let batch = self.columns.first().map_or(0, |&(node, _)| tape.value(node).rows());
        let mut out = Matrix::zeros(batch, self.columns.len());
        for (i, &(node, col)) in self.columns.iter().enumerate() {
            let v = tape.value(node);
            for r in 0..batch {
                out.set(r, i, v.get(r, col));
            }
        }
        out
    }
}

/// `a(vᵢ) = wᵢ · vᵢ` for every feature.
pub fn apply_weights(tape: &mut Tape, weights: &AdaptiveWeights, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if weights.len() != set.len() {
        return Err(Error::FeatureCountMismatch {
            expected: set.len(),
            got: weights.len(),
        });
    }
    weights.reads.set(weights.reads.get() + 1);
    let mut vectors = Vec::with_capacity(set.len());
    for (&v, &(node, col)) in set.vectors.iter().zip(&weights.columns) {
        vectors.push(tape.scale_by_column(v, node, col)?);
    }
    Ok(EmbeddingSet {
        vectors,
        masked: set.masked.clone(),
    })
}

/// All weight generators of a model.
#[derive(Clone, Debug)]
pub struct AdapterStack {
    pub config: AdapterConfig,
    pub units: Vec<Adapter>,
    channels: Vec<CountChannel>,
    n_features: usize,
    forced: Option<Vec<f64>>,
}

impl AdapterStack {
    /// One joint adapter, or a user and an item adapter when `two_tower`.
    /// Final layers start at zero, so every initial weight is 0.5.
    pub fn init(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        channels: &[CountChannel],
        config: &AdapterConfig,
        two_tower: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let sides: &[(Side, &str)] = if two_tower {
            &[(Side::User, "adapter.user"), (Side::Item, "adapter.item")]
        } else {
            &[(Side::Joint, "adapter")]
        };
        let mut units = Vec::new();
        for &(side, prefix) in sides {
            let features = side.features(schema);
            if features.is_empty() {
                continue;
            }
            let input = match config.source {
                WeightSource::State => SignalLayout::new(schema, channels, side, config).width(),
                WeightSource::SelfWeight => features.len() * schema.dim,
            };
            let mlp = Mlp::init(store, prefix, input, &[config.hidden, features.len()], true, rng)?;
            units.push(Adapter { side, features, mlp });
        }
        Ok(Self {
            config: config.clone(),
            units,
            channels: channels.to_vec(),
            n_features: schema.len(),
            forced: None,
        })
    }

    /// Replaces the generated weights by fixed values (testing and analysis hook).
    pub fn force_weights(&mut self, weights: Option<Vec<f64>>) -> Result<()> {
        if let Some(w) = &weights {
            if w.len() != self.n_features {
                return Err(Error::FeatureCountMismatch {
                    expected: self.n_features,
                    got: w.len(),
                });
            }
        }
        self.forced = weights;
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.units.iter().flat_map(|u| u.mlp.params()).collect()
    }

    pub fn weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        schema: &FeatureSchema,
        set: &EmbeddingSet,
        samples: &[&Sample],
        stats: &StatsStore,
    ) -> Result<AdaptiveWeights> {
        if set.len() != self.n_features {
            return Err(Error::FeatureCountMismatch {
                expected: self.n_features,
                got: set.len(),
            });
        }
        if let Some(w) = &self.forced {
            let rows = vec![w.clone(); samples.len()];
            let node = tape.input(Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, w.len())))?;
            return Ok(AdaptiveWeights::new((0..w.len()).map(|i| (node, i)).collect()));
        }
        if self.config.source == WeightSource::State && stats.channels() != self.channels.as_slice() {
            return Err(Error::Invalid(format!(
                "adapter was built for count channels {:?} but statistics carry {:?}",
                self.channels,
                stats.channels()
            )));
        }
        let mut columns = vec![None; self.n_features];
        for unit in &self.units {
            let input = match self.config.source {
                WeightSource::State => {
                    build_state_signals(tape, schema, set, samples, stats, unit.side, &self.config)?.node
                }
                WeightSource::SelfWeight => {
                    let parts: Vec<NodeId> = unit.features.iter().map(|&i| set.vectors[i]).collect();
                    let cat = tape.concat(&parts)?;
                    if self.config.stop_gradient {
                        tape.stop_gradient(cat)?
                    } else {
                        cat
                    }
                }
            };
            let w = unit.forward(tape, store, input, self.config.activation_out)?;
            for (c, &f) in unit.features.iter().enumerate() {
                columns[f] = Some((w, c));
            }
        }
        let columns = columns
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Invalid(format!("no adapter covers feature {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptiveWeights::new(columns))
    }
}
