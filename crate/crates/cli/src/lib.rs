//! Run orchestration behind the `maskadapt` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use maskadapt::checkpoint;
use maskadapt::config::{DatasetKind, RunConfig};
use maskadapt::data::movielens::{load_movielens, MovieLensOptions};
use maskadapt::data::synth::{cold_mask, generate_synthetic};
use maskadapt::data::{read_columnar, split_random, write_columnar, Dataset, Sample, Split, Splits, StatsStore};
use maskadapt::mask::MaskConfig;
use maskadapt::metrics::{bucket_report, rela_impr, BucketRule, MetricReport, WeightHeatmap};
use maskadapt::models::{ModelConfig, ModelKind};
use maskadapt::schema::FeatureSchema;
use maskadapt::seed;
use maskadapt::tensor::{finite_difference_check, GradCheckOptions, ParamId, ParamStore};
use maskadapt::trainer::{fit, loss_graph, sample_weights, serve_dataset, Ablation, FitOutcome, Network, TrainConfig};

pub const CHECKPOINT: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log";
pub const REPORT: &str = "report";
pub const RESOLVED_CONFIG: &str = "resolved_config";
pub const HEATMAP_USER: &str = "heatmap_user.csv";
pub const HEATMAP_ITEM: &str = "heatmap_item.csv";

/// Splits and training statistics of a run.
pub struct Prepared {
    pub schema: FeatureSchema,
    pub splits: Splits,
    pub stats: StatsStore,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dim = cfg.schema.dim;
    let (splits, stats) = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let data = generate_synthetic(&cfg.dataset.synth, dim)?;
            (data.splits, data.stats)
        }
        DatasetKind::Movielens => {
            let dir = cfg.dataset.path.as_deref().expect("validated");
            let ds = load_movielens(dir, dim, MovieLensOptions { titles: cfg.dataset.titles })?;
            let splits = split_random(&ds, cfg.dataset.split, seed::derive_seed(cfg.seed, "split"))?;
            let stats = StatsStore::build(&splits.train, cfg.dataset.temporal_stats);
            (splits, stats)
        }
        DatasetKind::Columnar => {
            let schema_path = cfg.schema.path.as_deref().expect("validated");
            let schema = FeatureSchema::load(schema_path)?;
            if schema.dim != dim {
                bail!("schema file {} has dim {}, config has schema.dim = {dim}", schema_path.display(), schema.dim);
            }
            let path = cfg.dataset.path.as_deref().expect("validated");
            let ds = read_columnar(path, &schema, cfg.dataset.channels.clone())?;
            let splits = split_random(&ds, cfg.dataset.split, seed::derive_seed(cfg.seed, "split"))?;
            let stats = StatsStore::build(&splits.train, cfg.dataset.temporal_stats);
            (splits, stats)
        }
    };
    let stats = if cfg.dataset.temporal_stats && !stats.is_temporal() {
        StatsStore::build(&splits.train, true)
    } else {
        stats
    };
    Ok(Prepared {
        schema: splits.train.schema.clone(),
        splits,
        stats,
    })
}

pub struct Trained {
    pub net: Network,
    pub store: ParamStore,
    pub fit: FitOutcome,
    pub lr: f64,
}

/// Fits one model at `trainer.lr`.
pub fn train_model(cfg: &RunConfig, data: &Prepared) -> Result<Trained> {
    train_with_lr(cfg, data, cfg.trainer.lr)
}

fn train_with_lr(cfg: &RunConfig, data: &Prepared, lr: f64) -> Result<Trained> {
    let spec = cfg.network_spec(data.stats.channels().to_vec());
    let (net, mut store) = Network::init(&data.schema, &spec, cfg.seed)?;
    let train = TrainConfig { lr, ..cfg.train_config() };
    let outcome = fit(&net, &mut store, &data.splits.train, &data.splits.val, &data.stats, &cfg.mask, &train, cfg.seed)?;
    Ok(Trained {
        net,
        store,
        fit: outcome,
        lr,
    })
}

/// Best validation AUC per learning rate.
pub type LrScores = Vec<(f64, Option<f64>)>;

/// Fits one model per entry of `trainer.lr_grid` and keeps the one with the
/// best validation AUC (earlier entries win ties).
pub fn tune_model(cfg: &RunConfig, data: &Prepared) -> Result<(Trained, LrScores)> {
    let mut best: Option<Trained> = None;
    let mut scores = Vec::new();
    for &lr in &cfg.trainer.lr_grid {
        let t = train_with_lr(cfg, data, lr)?;
        log::info!("lr {lr}: best val AUC {}", maskadapt::metrics::fmt_metric(t.fit.best_val_auc));
        scores.push((lr, t.fit.best_val_auc));
        let better = match (&best, t.fit.best_val_auc) {
            (None, _) => true,
            (Some(b), Some(v)) => b.fit.best_val_auc.is_none_or(|bv| v > bv),
            (Some(_), None) => false,
        };
        if better {
            best = Some(t);
        }
    }
    let best = best.context("trainer.lr_grid is empty")?;
    Ok((best, scores))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes `checkpoint`, `train_log` and `resolved_config` under `out`.
pub fn write_train_artifacts(out: &Path, cfg: &RunConfig, t: &Trained) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let extra = serde_json::json!({
        "best_epoch": t.fit.best_epoch,
        "lr": t.lr,
        "ablation": cfg.effective_ablation().name(),
        "seed": cfg.seed,
    });
    checkpoint::save(&out.join(CHECKPOINT), &t.net, &t.store, extra)?;
    t.fit.write_log(&out.join(TRAIN_LOG))?;
    write_resolved_config(out, cfg)
}

pub fn write_resolved_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(RESOLVED_CONFIG), cfg.to_toml_string()?)
}

/// Contents of a `report` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rela_impr: Option<RelaImpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaImpr {
    pub baseline: PathBuf,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = format!("split    {}\n{}", self.split, self.metrics.render());
        if let Some(r) = &self.rela_impr {
            let pct = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:+.2}%"));
            s.push_str(&format!("\nRelaImpr AUC   {}\nRelaImpr UAUC  {}\n", pct(r.auc), pct(r.uauc)));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn parse_split(name: &str) -> Result<Split> {
    Ok(match name {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::All => "all",
    }
}

/// Per-sample statistics used for grouping.
fn user_values(stats: &StatsStore, ds: &Dataset) -> Vec<u64> {
    ds.samples.iter().map(|s| stats.user_impressions(s.user)).collect()
}

fn item_values(stats: &StatsStore, ds: &Dataset) -> Vec<u64> {
    ds.samples.iter().map(|s| stats.item_impressions(s.item)).collect()
}

/// Serves `split` and computes AUC, UAUC and bucket tables.
pub fn evaluate(cfg: &RunConfig, data: &Prepared, net: &Network, store: &ParamStore, split: Split) -> Result<EvalReport> {
    let ds = data.splits.get(split)?;
    let scores = serve_dataset(net, store, ds, &data.stats)?;
    let labels = ds.labels();
    let mut metrics = MetricReport::new(&scores, &labels, &ds.users());
    let (users, items) = (user_values(&data.stats, ds), item_values(&data.stats, ds));
    metrics.tables = vec![
        bucket_report(&scores, &labels, &items, &cfg.metrics.item_impressions),
        bucket_report(&scores, &labels, &users, &cfg.metrics.user_state),
        bucket_report(&scores, &labels, &items, &cfg.metrics.item_state),
    ];
    Ok(EvalReport {
        split: split_name(split).into(),
        metrics,
        rela_impr: None,
    })
}

pub fn attach_baseline(report: &mut EvalReport, baseline: &Path) -> Result<()> {
    let base = EvalReport::load(baseline)?;
    report.rela_impr = Some(RelaImpr {
        baseline: baseline.to_path_buf(),
        auc: rela_impr(report.metrics.auc, base.metrics.auc),
        uauc: rela_impr(report.metrics.uauc, base.metrics.uauc),
    });
    Ok(())
}

/// Loads a checkpoint, insisting on the schema of the prepared data.
pub fn load_checkpoint(path: &Path, data: &Prepared) -> Result<checkpoint::Loaded> {
    checkpoint::load(path, Some(&data.schema)).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub struct Analysis {
    pub user: WeightHeatmap,
    pub item: WeightHeatmap,
    pub report: EvalReport,
}

/// Average adaptive weights per user and item group, plus bucketed metrics.
pub fn analyze(cfg: &RunConfig, data: &Prepared, net: &Network, store: &ParamStore, split: Split) -> Result<Analysis> {
    let ds = data.splits.get(split)?;
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let Some(weights) = sample_weights(net, store, &refs, &data.stats)? else {
        bail!("checkpoint has no adapter (trained with adapter.enabled = false or without the adapter ablation); nothing to analyze");
    };
    let names = data.schema.names();
    let group = |values: Vec<u64>, rule: &BucketRule| values.into_iter().map(|v| rule.bucket(v)).collect::<Vec<_>>();
    let user_groups = group(user_values(&data.stats, ds), &cfg.metrics.user_state);
    let item_groups = group(item_values(&data.stats, ds), &cfg.metrics.item_state);
    Ok(Analysis {
        user: WeightHeatmap::from_weights(&weights, &user_groups, &cfg.metrics.user_state, names.clone()),
        item: WeightHeatmap::from_weights(&weights, &item_groups, &cfg.metrics.item_state, names),
        report: evaluate(cfg, data, net, store, split)?,
    })
}

pub fn write_analysis(out: &Path, a: &Analysis) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(HEATMAP_USER), a.user.to_csv())?;
    write(&out.join(HEATMAP_ITEM), a.item.to_csv())?;
    a.report.save(&out.join(REPORT))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub model: ModelKind,
    pub ablation: Ablation,
    pub max_rel_error: f64,
    pub coords: usize,
    pub pass: bool,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central-difference check of the full training loss on a small synthetic
/// batch, once per ablation. Parameters are perturbed away from their
/// initial values so zero-initialized layers take part. `analytic_scale`
/// other than 1 corrupts the analytic gradient (negative control).
pub fn gradcheck(seed_root: u64, models: &[ModelKind], analytic_scale: f64) -> Result<Vec<GradRow>> {
    use rand::Rng;
    let mut synth = maskadapt::data::synth::SynthConfig {
        users: 30,
        items: 40,
        samples: 400,
        seed: seed_root,
        ..Default::default()
    };
    synth.cold_user_fraction = 0.1;
    let data = generate_synthetic(&synth, 4)?;
    let batch: Vec<&Sample> = data.splits.train.samples.iter().take(12).collect();
    let mut rows = Vec::new();
    for &kind in models {
        for ablation in Ablation::ALL {
            let mut cfg = RunConfig {
                model: ModelConfig {
                    kind,
                    hidden: vec![8, 4, 1],
                    tower: vec![6],
                    latent: 4,
                },
                ..RunConfig::default()
            };
            cfg.adapter.hidden = 6;
            cfg.trainer.ablation = ablation;
            let spec = cfg.network_spec(data.stats.channels().to_vec());
            let (net, mut store) = Network::init(&data.splits.train.schema, &spec, seed_root)?;
            let mut rng = seed::stream(seed_root, "gradcheck.jitter");
            let ids: Vec<ParamId> = store.ids().collect();
            for &p in &ids {
                for v in store.value_mut(p).as_mut_slice() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let train = cfg.train_config();
            let mask = MaskConfig::default();
            let opts = GradCheckOptions {
                analytic_scale,
                seed: seed_root,
                ..GradCheckOptions::default()
            };
            let report = finite_difference_check(
                &mut store,
                &ids,
                |s| {
                    let g = loss_graph(&net, s, &batch, &data.stats, &mask, &train, seed::derive_seed(seed_root, "gradcheck.mask"), false)?;
                    Ok((g.tape, g.total))
                },
                &opts,
            )?;
            rows.push(GradRow {
                model: kind,
                ablation,
                max_rel_error: report.max_rel_error,
                coords: report.coords_checked,
                pass: report.passes(GRAD_TOLERANCE),
            });
        }
    }
    Ok(rows)
}

/// Writes the synthetic splits as columnar text plus the schema.
pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = generate_synthetic(&cfg.dataset.synth, cfg.schema.dim)?;
    data.splits.train.schema.save(&out.join("schema.toml"))?;
    for (name, ds) in [("train", &data.splits.train), ("val", &data.splits.val), ("test", &data.splits.test)] {
        write_columnar(ds, &out.join(format!("{name}.tsv")))?;
    }
    write_resolved_config(out, cfg)
}

/// Outcome of one seed of the cold-start study.
#[derive(Clone, Debug, Serialize)]
pub struct ColdStartRun {
    pub seed: u64,
    pub base_cold_auc: Option<f64>,
    pub full_cold_auc: Option<f64>,
    pub base_test_auc: Option<f64>,
    pub full_test_auc: Option<f64>,
    /// Mean meta-feature weight over test samples of cold users.
    pub cold_user_meta_weight: f64,
    /// Same for users in the top activity group.
    pub head_user_meta_weight: f64,
}

/// Trains the base-only and full variants of `cfg` on synthetic data and
/// compares them on the cold segment of the test split.
pub fn cold_start_run(cfg: &RunConfig) -> Result<ColdStartRun> {
    if cfg.dataset.kind != DatasetKind::Synthetic {
        bail!("the cold-start study needs synthetic data");
    }
    let data = prepare(cfg)?;
    let test = &data.splits.test;
    let cold = cold_mask(&data.stats, test);
    let labels = test.labels();
    let cold_auc = |scores: &[f64]| {
        let (s, y): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .zip(&labels)
            .zip(&cold)
            .filter(|(_, &c)| c)
            .map(|((&s, &y), _)| (s, y))
            .unzip();
        maskadapt::metrics::auc(&s, &y)
    };

    let mut base_cfg = cfg.clone();
    base_cfg.trainer.ablation = Ablation::BaseOnly;
    let base = train_model(&base_cfg, &data)?;
    let base_scores = serve_dataset(&base.net, &base.store, test, &data.stats)?;

    let mut full_cfg = cfg.clone();
    full_cfg.trainer.ablation = Ablation::Full;
    let full = train_model(&full_cfg, &data)?;
    let full_scores = serve_dataset(&full.net, &full.store, test, &data.stats)?;

    let refs: Vec<&Sample> = test.samples.iter().collect();
    let weights = sample_weights(&full.net, &full.store, &refs, &data.stats)?.context("full model has an adapter")?;
    let meta: Vec<usize> = (0..data.schema.len())
        .filter(|&i| data.schema.feature(i).class == maskadapt::schema::FeatureClass::Meta && data.schema.feature(i).kind != maskadapt::schema::FeatureKind::Context)
        .collect();
    let rule = &cfg.metrics.user_state;
    let head = rule.len() - 1;
    let (mut cold_sum, mut cold_n, mut head_sum, mut head_n) = (0.0, 0usize, 0.0, 0usize);
    for (s, w) in test.samples.iter().zip(&weights) {
        let m = meta.iter().map(|&i| w[i]).sum::<f64>() / meta.len() as f64;
        match rule.bucket(data.stats.user_impressions(s.user)) {
            0 => {
                cold_sum += m;
                cold_n += 1;
            }
            g if g == head => {
                head_sum += m;
                head_n += 1;
            }
            _ => {}
        }
    }
    if cold_n == 0 || head_n == 0 {
        bail!("cold-start study needs both cold and head users in the test split");
    }
    Ok(ColdStartRun {
        seed: cfg.seed,
        base_cold_auc: cold_auc(&base_scores),
        full_cold_auc: cold_auc(&full_scores),
        base_test_auc: maskadapt::metrics::auc(&base_scores, &labels),
        full_test_auc: maskadapt::metrics::auc(&full_scores, &labels),
        cold_user_meta_weight: cold_sum / cold_n as f64,
        head_user_meta_weight: head_sum / head_n as f64,
    })
}
