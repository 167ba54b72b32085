//! Training and serving.
//!
//! One step masks `k` copies of the batch embeddings and scores them with the
//! unweighted base model (auxiliary loss), scores the adaptively weighted
//! embeddings (main loss), and takes a single Adam step on
//! `main + alpha · aux`. Serving runs only the weighted forward.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_weights, AdapterConfig, AdapterStack, AdaptiveWeights};
use crate::data::{CountChannel, Dataset, Sample, StatsStore};
use crate::embedding::{lookup, EmbeddingSet, EmbeddingTables};
use crate::error::{Error, Result};
use crate::mask::{augment, MaskConfig};
use crate::metrics::auc;
use crate::models::{BaseModel, ItemCache, ModelConfig};
use crate::schema::FeatureSchema;
use crate::seed;
use crate::tensor::{sigmoid, Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    BaseOnly,
    MaskOnly,
    AdapterOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::BaseOnly, Ablation::MaskOnly, Ablation::AdapterOnly, Ablation::Full];

    pub fn uses_mask(self) -> bool {
        matches!(self, Ablation::MaskOnly | Ablation::Full)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, Ablation::AdapterOnly | Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BaseOnly => "base_only",
            Ablation::MaskOnly => "mask_only",
            Ablation::AdapterOnly => "adapter_only",
            Ablation::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Candidate learning rates for tuning runs.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub ablation: Ablation,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Record a step line in the training log every this many steps (0: never).
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            batch_size: 256,
            lr: 0.001,
            lr_grid: vec![0.001, 0.005, 0.01, 0.02, 0.1],
            epochs: 3,
            ablation: Ablation::Full,
            clip_norm: None,
            log_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("trainer.alpha", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("trainer.lr", "must be positive"));
        }
        if self.lr_grid.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::config("trainer.lr_grid", "entries must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("trainer", "Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// What is needed to rebuild a network's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    /// Whether adapter parameters exist at all.
    pub use_adapter: bool,
    pub channels: Vec<CountChannel>,
}

/// Embeddings, base model and (optionally) adapters over one schema.
/// Parameter values live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct Network {
    pub schema: FeatureSchema,
    pub spec: NetworkSpec,
    pub tables: EmbeddingTables,
    pub base: BaseModel,
    pub adapter: Option<AdapterStack>,
    forward_rows: AtomicU64,
}

impl Network {
    pub fn init(schema: &FeatureSchema, spec: &NetworkSpec, root_seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::init(&mut store, schema, &mut seed::stream(root_seed, "init.embedding"))?;
        let base = BaseModel::init(&mut store, schema, &spec.model, &mut seed::stream(root_seed, "init.model"))?;
        let adapter = if spec.use_adapter {
            Some(AdapterStack::init(
                &mut store,
                schema,
                &spec.channels,
                &spec.adapter,
                spec.model.kind == crate::models::ModelKind::TwoTower,
                &mut seed::stream(root_seed, "init.adapter"),
            )?)
        } else {
            None
        };
        let net = Self {
            schema: schema.clone(),
            spec: spec.clone(),
            tables,
            base,
            adapter,
            forward_rows: AtomicU64::new(0),
        };
        Ok((net, store))
    }

    /// Total sample rows that have passed through the base model.
    pub fn forward_rows(&self) -> u64 {
        self.forward_rows.load(Ordering::Relaxed)
    }

    /// `g` applied to an embedding set.
    pub fn base_logits(&self, tape: &mut Tape, store: &ParamStore, set: &EmbeddingSet) -> Result<NodeId> {
        self.forward_rows.fetch_add(set.batch() as u64, Ordering::Relaxed);
        self.base.logits(tape, store, set)
    }

    /// Parameter groups: embedding tables, mask rows, base model, adapter.
    pub fn param_groups(&self) -> [(&'static str, Vec<ParamId>); 4] {
        let n = self.tables.len();
        [
            ("tables", (0..n).map(|i| self.tables.table(i)).collect()),
            ("masks", (0..n).filter_map(|i| self.tables.mask_param(i).ok()).collect()),
            ("model", self.base.params()),
            ("adapter", self.adapter.as_ref().map(AdapterStack::params).unwrap_or_default()),
        ]
    }

    fn weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        set: &EmbeddingSet,
        samples: &[&Sample],
        stats: &StatsStore,
    ) -> Result<Option<AdaptiveWeights>> {
        match &self.adapter {
            Some(a) => a.weights(tape, store, &self.schema, set, samples, stats).map(Some),
            None => Ok(None),
        }
    }
}

/// Loss components of one step; `total = main + alpha · aux`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: f64,
    pub total: f64,
}

/// Nodes of one training forward.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub main: NodeId,
    pub aux: Option<NodeId>,
    pub total: NodeId,
    pub main_logits: NodeId,
    pub aux_logits: Vec<NodeId>,
    pub embeddings: EmbeddingSet,
    pub masked: Vec<EmbeddingSet>,
    pub weighted: Option<EmbeddingSet>,
    pub weights: Option<AdaptiveWeights>,
    /// Weight reads observed after the masked forwards, before the main one.
    pub weight_reads_during_aux: usize,
}

impl LossGraph {
    pub fn breakdown(&self, alpha: f64) -> LossBreakdown {
        let main = self.tape.scalar(self.main);
        let aux = self.aux.map_or(0.0, |a| self.tape.scalar(a));
        let total = self.tape.scalar(self.total);
        debug_assert!((total - (main + alpha * aux)).abs() <= 1e-12 * total.abs().max(1.0));
        LossBreakdown { main, aux, total }
    }
}

/// Builds the step's forward graph. `mask_seed` fixes the masking draws.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph(
    net: &Network,
    store: &ParamStore,
    samples: &[&Sample],
    stats: &StatsStore,
    mask: &MaskConfig,
    train: &TrainConfig,
    mask_seed: u64,
    finite_checks: bool,
) -> Result<LossGraph> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut tape = if finite_checks { Tape::with_finite_checks() } else { Tape::new() };
    let labels: Vec<f64> = samples.iter().map(|s| s.label_f64()).collect();
    let inv_b = 1.0 / samples.len() as f64;
    let set = lookup(&mut tape, store, &net.schema, &net.tables, samples)?;

    let weights = if train.ablation.uses_adapter() {
        net.weights(&mut tape, store, &set, samples, stats)?
    } else {
        None
    };

    let mut masked = Vec::new();
    let mut aux_logits = Vec::new();
    let mut aux_terms = Vec::new();
    if train.ablation.uses_mask() && mask.k > 0 {
        let mut rng = seed::stream(mask_seed, "mask");
        let batch = augment(&mut tape, store, &net.tables, &set, mask, &mut rng)?;
        for variant in batch.variants {
            let z = net.base_logits(&mut tape, store, &variant)?;
            aux_terms.push(tape.cross_entropy_with_logits(z, &labels, inv_b)?);
            aux_logits.push(z);
            masked.push(variant);
        }
    }
    let weight_reads_during_aux = weights.as_ref().map_or(0, AdaptiveWeights::read_count);

    let weighted = match &weights {
        Some(w) => Some(apply_weights(&mut tape, w, &set)?),
        None => None,
    };
    let main_logits = net.base_logits(&mut tape, store, weighted.as_ref().unwrap_or(&set))?;
    let main = tape.cross_entropy_with_logits(main_logits, &labels, inv_b)?;

    let aux = match aux_terms.len() {
        0 => None,
        1 => Some(aux_terms[0]),
        _ => Some(tape.sum(&aux_terms)?),
    };
    let total = match aux {
        Some(a) => tape.linear_combination(&[(main, 1.0), (a, train.alpha)])?,
        None => tape.linear_combination(&[(main, 1.0)])?,
    };
    Ok(LossGraph {
        tape,
        main,
        aux,
        total,
        main_logits,
        aux_logits,
        embeddings: set,
        masked,
        weighted,
        weights,
        weight_reads_during_aux,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|p| {
                    let (r, c) = store.value(p).shape();
                    Matrix::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, pid: ParamId) -> (&Matrix, &Matrix) {
        (&self.m[pid.index()], &self.v[pid.index()])
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "adam (parameter count)",
                left: (self.m.len(), 1),
                right: (store.len(), 1),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for pid in ids {
            let i = pid.index();
            let (value, grad) = store.value_and_grad_mut(pid);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            m.check_same_shape("adam", grad)?;
            let (ms, vs, ws, gs) = (m.as_mut_slice(), v.as_mut_slice(), value.as_mut_slice(), grad.as_slice());
            for j in 0..gs.len() {
                let g = gs[j];
                ms[j] = self.beta1 * ms[j] + (1.0 - self.beta1) * g;
                vs[j] = self.beta2 * vs[j] + (1.0 - self.beta2) * g * g;
                let mhat = ms[j] / c1;
                let vhat = vs[j] / c2;
                ws[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimization step on `samples`; `step` selects the masking draws.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &Network,
    store: &mut ParamStore,
    opt: &mut Adam,
    samples: &[&Sample],
    stats: &StatsStore,
    mask: &MaskConfig,
    train: &TrainConfig,
    root_seed: u64,
    step: u64,
) -> Result<LossBreakdown> {
    let graph = loss_graph(
        net,
        store,
        samples,
        stats,
        mask,
        train,
        seed::derive_indexed(root_seed, "mask", step),
        false,
    )?;
    let total = graph.tape.scalar(graph.total);
    if !total.is_finite() {
        let (node, op) = graph
            .tape
            .first_non_finite()
            .map_or((graph.total.index(), "total"), |(n, op)| (n.index(), op));
        return Err(Error::NonFinite { node, op });
    }
    store.zero_grad();
    graph.tape.backward(graph.total, store)?;
    if let Some(limit) = train.clip_norm {
        let norm = store.global_grad_norm();
        if norm > limit {
            store.scale_grads(limit / norm);
        }
    }
    opt.step(store)?;
    Ok(graph.breakdown(train.alpha))
}

const SERVE_CHUNK: usize = 1024;

fn check_servable(store: &ParamStore) -> Result<()> {
    if store.is_empty() {
        return Err(Error::Invalid("model has no parameters".into()));
    }
    for pid in store.ids() {
        if !store.value(pid).all_finite() {
            return Err(Error::NonFinite {
                node: pid.index(),
                op: "parameter",
            });
        }
    }
    Ok(())
}

/// Click probabilities from one weighted forward per sample.
pub fn serve_predict(net: &Network, store: &ParamStore, samples: &[&Sample], stats: &StatsStore) -> Result<Vec<f64>> {
    check_servable(store)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SERVE_CHUNK) {
        let mut tape = Tape::new();
        let set = lookup(&mut tape, store, &net.schema, &net.tables, chunk)?;
        let input = match net.weights(&mut tape, store, &set, chunk, stats)? {
            Some(w) => apply_weights(&mut tape, &w, &set)?,
            None => set,
        };
        let z = net.base_logits(&mut tape, store, &input)?;
        out.extend(tape.value(z).as_slice().iter().map(|&x| sigmoid(x)));
    }
    Ok(out)
}

pub fn serve_dataset(net: &Network, store: &ParamStore, data: &Dataset, stats: &StatsStore) -> Result<Vec<f64>> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    serve_predict(net, store, &refs, stats)
}

/// Adaptive weights per sample (`None` without an adapter).
pub fn sample_weights(net: &Network, store: &ParamStore, samples: &[&Sample], stats: &StatsStore) -> Result<Option<Vec<Vec<f64>>>> {
    if net.adapter.is_none() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SERVE_CHUNK) {
        let mut tape = Tape::new();
        let set = lookup(&mut tape, store, &net.schema, &net.tables, chunk)?;
        let w = net.weights(&mut tape, store, &set, chunk, stats)?.expect("adapter present");
        let values = w.values(&tape);
        out.extend((0..values.rows()).map(|r| values.row(r).to_vec()));
    }
    Ok(Some(out))
}

fn tower_inputs(net: &Network, store: &ParamStore, tape: &mut Tape, chunk: &[&Sample], stats: &StatsStore) -> Result<EmbeddingSet> {
    let set = lookup(tape, store, &net.schema, &net.tables, chunk)?;
    match net.weights(tape, store, &set, chunk, stats)? {
        Some(w) => apply_weights(tape, &w, &set),
        None => Ok(set),
    }
}

/// Item-tower vectors for every distinct item in `samples`.
pub fn build_item_cache(net: &Network, store: &ParamStore, samples: &[&Sample], stats: &StatsStore) -> Result<ItemCache> {
    let BaseModel::TwoTower(towers) = &net.base else {
        return Err(Error::Invalid("item caching needs a two-tower model".into()));
    };
    let mut seen = std::collections::BTreeSet::new();
    let reps: Vec<&Sample> = samples.iter().copied().filter(|s| seen.insert(s.item)).collect();
    let mut cache = ItemCache::default();
    for chunk in reps.chunks(SERVE_CHUNK) {
        let mut tape = Tape::new();
        let set = tower_inputs(net, store, &mut tape, chunk, stats)?;
        let v = towers.item_vectors(&mut tape, store, &set)?;
        for (r, s) in chunk.iter().enumerate() {
            cache.insert(s.item, tape.value(v).row(r).to_vec());
        }
    }
    Ok(cache)
}

/// Two-tower serving against precomputed item vectors.
pub fn serve_with_cache(
    net: &Network,
    store: &ParamStore,
    cache: &ItemCache,
    samples: &[&Sample],
    stats: &StatsStore,
) -> Result<Vec<f64>> {
    let BaseModel::TwoTower(towers) = &net.base else {
        return Err(Error::Invalid("cached serving needs a two-tower model".into()));
    };
    check_servable(store)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SERVE_CHUNK) {
        let mut tape = Tape::new();
        let set = tower_inputs(net, store, &mut tape, chunk, stats)?;
        let u = towers.user_vectors(&mut tape, store, &set)?;
        for (r, s) in chunk.iter().enumerate() {
            out.push(cache.score(tape.value(u).row(r), s.item)?);
        }
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub main: f64,
    pub aux: f64,
    pub total: f64,
    /// Set on end-of-epoch records, whose losses are epoch means.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub val_aucs: Vec<Option<f64>>,
    pub epoch_losses: Vec<LossBreakdown>,
    pub log: Vec<LogRecord>,
}

impl FitOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.log {
            let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Index of the largest defined value; earlier entries win ties.
pub fn select_best(values: &[Option<f64>]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        let better = match (v, values[best]) {
            (Some(x), Some(b)) => *x > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Epoch loop with seeded shuffling. After every epoch the validation AUC is
/// logged; the parameters of the best epoch are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    net: &Network,
    store: &mut ParamStore,
    train: &Dataset,
    val: &Dataset,
    stats: &StatsStore,
    mask: &MaskConfig,
    config: &TrainConfig,
    root_seed: u64,
) -> Result<FitOutcome> {
    config.validate()?;
    mask.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut opt = Adam::with_betas(store, config.lr, config.beta1, config.beta2, config.eps);
    let mut log = Vec::new();
    let mut val_aucs = Vec::with_capacity(config.epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<Vec<Matrix>> = None;
    let val_refs: Vec<&Sample> = val.samples.iter().collect();
    let val_labels = val.labels();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::indexed_stream(root_seed, "shuffle", epoch as u64));
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let b = train_step(net, store, &mut opt, &batch, stats, mask, config, root_seed, step)?;
            sums[0] += b.main;
            sums[1] += b.aux;
            sums[2] += b.total;
            batches += 1;
            step += 1;
            if config.log_every > 0 && step.is_multiple_of(config.log_every as u64) {
                log.push(LogRecord {
                    epoch,
                    step,
                    main: b.main,
                    aux: b.aux,
                    total: b.total,
                    val_auc: None,
                });
            }
        }
        let mean = |x: f64| x / batches as f64;
        let losses = LossBreakdown {
            main: mean(sums[0]),
            aux: mean(sums[1]),
            total: mean(sums[2]),
        };
        let val_auc = if val.is_empty() {
            None
        } else {
            auc(&serve_predict(net, store, &val_refs, stats)?, &val_labels)
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (main {:.5}, aux {:.5}), val AUC {}",
            losses.total,
            losses.main,
            losses.aux,
            crate::metrics::fmt_metric(val_auc)
        );
        log.push(LogRecord {
            epoch,
            step,
            main: losses.main,
            aux: losses.aux,
            total: losses.total,
            val_auc,
        });
        val_aucs.push(val_auc);
        epoch_losses.push(losses);
        if select_best(&val_aucs) == epoch {
            best = Some(store.ids().map(|p| store.value(p).clone()).collect());
        }
    }
    if let Some(values) = best {
        for (pid, v) in store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *store.value_mut(pid) = v;
        }
    }
    let best_epoch = select_best(&val_aucs);
    Ok(FitOutcome {
        best_epoch,
        best_val_auc: val_aucs[best_epoch],
        val_aucs,
        epoch_losses,
        log,
    })
}

#[cfg(test)]
mod tests;
