//! Seeded long-tail click generator with a known ground-truth model.
//!
//! Users and items draw latent factors; user activity and item exposure are
//! Zipf-distributed. Meta features are quantized, noisy projections of the
//! latents whose fidelity is set by `informativeness`. A random subset of
//! users and items is held out of training entirely to form the cold segment.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::data::{split_random, CountChannel, Dataset, FeatureValue, Sample, Split, Splits, StatsStore};
use crate::error::{Error, Result};
use crate::schema::{FeatureClass, FeatureKind, FeatureSchema, FeatureSpec};
use crate::seed;
use crate::tensor::sigmoid;

const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub samples: usize,
    pub user_zipf: f64,
    pub item_zipf: f64,
    pub latent_dim: usize,
    /// Meta features per side.
    pub user_meta: usize,
    pub item_meta: usize,
    /// Distinct values of each meta feature (excluding the reserved 0).
    pub meta_vocab: usize,
    pub informativeness: f64,
    /// Probability that a drawn label is flipped.
    pub label_noise: f64,
    /// Standard deviation of the true interaction logit.
    pub logit_scale: f64,
    pub cold_user_fraction: f64,
    pub cold_item_fraction: f64,
    pub days: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 10_000,
            items: 5_000,
            samples: 200_000,
            user_zipf: 1.2,
            item_zipf: 1.1,
            latent_dim: 8,
            user_meta: 4,
            item_meta: 4,
            meta_vocab: 10,
            informativeness: 0.8,
            label_noise: 0.1,
            logit_scale: 2.5,
            cold_user_fraction: 0.05,
            cold_item_fraction: 0.05,
            days: 60,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("synthetic config: {msg}")));
        if self.users < 2 || self.items < 2 {
            return bad("need at least two users and two items");
        }
        if self.samples == 0 {
            return bad("sample count must be positive");
        }
        if !(self.user_zipf > 0.0 && self.item_zipf > 0.0) {
            return bad("Zipf exponents must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if self.meta_vocab < 2 {
            return bad("meta vocabulary must have at least two values");
        }
        if !(0.0..=1.0).contains(&self.informativeness) {
            return bad("informativeness must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label noise must lie in [0, 0.5]");
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return bad("logit scale must be finite and non-negative");
        }
        for f in [self.cold_user_fraction, self.cold_item_fraction] {
            if !(0.0..1.0).contains(&f) {
                return bad("cold fractions must lie in [0, 1)");
            }
        }
        if self.days == 0 {
            return bad("day span must be positive");
        }
        Ok(())
    }

    pub fn schema(&self, dim: usize) -> Result<FeatureSchema> {
        use FeatureClass::*;
        use FeatureKind::*;
        let mut f = vec![FeatureSpec::new("user_id", User, IdBased, self.users + 1)];
        for j in 0..self.user_meta {
            f.push(FeatureSpec::new(&format!("user_meta_{j}"), User, Meta, self.meta_vocab + 1));
        }
        f.push(FeatureSpec::new("item_id", Item, IdBased, self.items + 1));
        for j in 0..self.item_meta {
            f.push(FeatureSpec::new(&format!("item_meta_{j}"), Item, Meta, self.meta_vocab + 1));
        }
        f.push(FeatureSpec::new("daypart", Context, Meta, 5));
        FeatureSchema::new(dim, f)
    }
}

/// The generating click model. Ids are 1-based; index 0 is unused.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub user_meta: Vec<Vec<u32>>,
    pub item_meta: Vec<Vec<u32>>,
    /// Additive logit effect per (meta feature, value); zero when meta
    /// features are uninformative.
    pub user_meta_effect: Vec<Vec<f64>>,
    pub item_meta_effect: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn logit(&self, user: u32, item: u32) -> f64 {
        let (u, i) = (user as usize, item as usize);
        let mut z = crate::tensor::dot(&self.user_latent[u], &self.item_latent[i]);
        for (eff, &v) in self.user_meta_effect.iter().zip(&self.user_meta[u]) {
            z += eff[v as usize];
        }
        for (eff, &v) in self.item_meta_effect.iter().zip(&self.item_meta[i]) {
            z += eff[v as usize];
        }
        z
    }

    /// Click probability before label noise.
    pub fn probability(&self, user: u32, item: u32) -> f64 {
        sigmoid(self.logit(user, item))
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub splits: Splits,
    /// Statistics of the training split.
    pub stats: StatsStore,
    pub truth: GroundTruth,
    pub cold_users: BTreeSet<u32>,
    pub cold_items: BTreeSet<u32>,
}

/// Samples whose user or item has no training interactions.
pub fn cold_mask(stats: &StatsStore, dataset: &Dataset) -> Vec<bool> {
    dataset
        .samples
        .iter()
        .map(|s| stats.user_impressions(s.user) == 0 || stats.item_impressions(s.item) == 0)
        .collect()
}

fn latents(n: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    out.extend((0..n).map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()));
    out
}

fn quantize(x: f64, buckets: usize) -> u32 {
    let pos = ((x + 2.0) / 4.0 * buckets as f64).floor();
    pos.clamp(0.0, buckets as f64 - 1.0) as u32 + 1
}

/// Meta values for every entity: each feature projects the latent onto a
/// random direction, standardizes it, mixes in noise and quantizes.
fn meta_values(latent: &[Vec<f64>], count: usize, vocab: usize, inf: f64, scale: f64, rng: &mut impl Rng) -> Vec<Vec<u32>> {
    let dim = latent[0].len();
    let directions: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = crate::tensor::dot(&v, &v).sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let keep = (1.0 - inf * inf).sqrt();
    let mut out = vec![vec![0; count]];
    for z in &latent[1..] {
        out.push(
            directions
                .iter()
                .map(|a| {
                    let s = crate::tensor::dot(a, z) / scale.max(1e-12);
                    let noise: f64 = rng.sample(StandardNormal);
                    quantize(inf * s + keep * noise, vocab)
                })
                .collect(),
        );
    }
    out
}

fn effects(count: usize, vocab: usize, inf: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut e = vec![0.0];
            e.extend((0..vocab).map(|_| inf * 0.3 * rng.sample::<f64, _>(StandardNormal)));
            e
        })
        .collect()
}

fn pick_cold(n: usize, fraction: f64, rng: &mut impl Rng) -> BTreeSet<u32> {
    let k = (n as f64 * fraction).round() as usize;
    index::sample(rng, n, k).into_iter().map(|i| i as u32 + 1).collect()
}

pub fn generate_synthetic(config: &SynthConfig, dim: usize) -> Result<SynthData> {
    config.validate()?;
    let schema = config.schema(dim)?;
    let root = config.seed;

    // Entries N(0, s^2) give an inner product with standard deviation
    // s^2 * sqrt(latent_dim); choose s so that equals the logit scale.
    let entry = (config.logit_scale / (config.latent_dim as f64).sqrt()).sqrt();
    let mut rng = seed::stream(root, "synth.latent");
    let user_latent = latents(config.users, config.latent_dim, entry, &mut rng);
    let item_latent = latents(config.items, config.latent_dim, entry, &mut rng);

    let mut rng = seed::stream(root, "synth.meta");
    let inf = config.informativeness;
    let user_meta = meta_values(&user_latent, config.user_meta, config.meta_vocab, inf, entry, &mut rng);
    let item_meta = meta_values(&item_latent, config.item_meta, config.meta_vocab, inf, entry, &mut rng);
    let user_meta_effect = effects(config.user_meta, config.meta_vocab, inf, &mut rng);
    let item_meta_effect = effects(config.item_meta, config.meta_vocab, inf, &mut rng);
    let truth = GroundTruth {
        user_latent,
        item_latent,
        user_meta,
        item_meta,
        user_meta_effect,
        item_meta_effect,
    };

    let mut rng = seed::stream(root, "synth.cold");
    let cold_users = pick_cold(config.users, config.cold_user_fraction, &mut rng);
    let cold_items = pick_cold(config.items, config.cold_item_fraction, &mut rng);

    let user_dist = Zipf::new(config.users as f64, config.user_zipf).map_err(|e| Error::Invalid(e.to_string()))?;
    let item_dist = Zipf::new(config.items as f64, config.item_zipf).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = seed::stream(root, "synth.samples");
    let mut warm = Vec::with_capacity(config.samples);
    let mut cold = Vec::new();
    for _ in 0..config.samples {
        let user = user_dist.sample(&mut rng) as u32;
        let item = item_dist.sample(&mut rng) as u32;
        let clicked = rng.random::<f64>() < truth.probability(user, item);
        let flip = rng.random::<f64>() < config.label_noise;
        let label = u8::from(clicked != flip);
        let comment = rng.random::<f64>() < if label == 1 { 0.2 } else { 0.02 };
        let day = rng.random_range(0..config.days) as i64;
        let timestamp = day * DAY + rng.random_range(0..DAY);
        let daypart = (timestamp % DAY / (6 * 3600)) as u32 + 1;

        let mut features = vec![FeatureValue::Id(user)];
        features.extend(truth.user_meta[user as usize].iter().map(|&v| FeatureValue::Id(v)));
        features.push(FeatureValue::Id(item));
        features.extend(truth.item_meta[item as usize].iter().map(|&v| FeatureValue::Id(v)));
        features.push(FeatureValue::Id(daypart));
        let sample = Sample {
            features,
            label,
            user,
            item,
            timestamp: Some(timestamp),
            comment,
        };
        if cold_users.contains(&user) || cold_items.contains(&item) {
            cold.push(sample);
        } else {
            warm.push(sample);
        }
    }

    let channels = vec![CountChannel::Impression, CountChannel::Comment, CountChannel::Like];
    let warm = Dataset::new(schema, warm, Split::All, channels)?;
    let mut splits = split_random(&warm, [0.6, 0.2, 0.2], seed::derive_seed(root, "synth.split"))?;
    let mut rng = seed::stream(root, "synth.cold_split");
    for s in cold {
        if rng.random::<bool>() {
            splits.test.samples.push(s);
        } else {
            splits.val.samples.push(s);
        }
    }
    let stats = StatsStore::build(&splits.train, false);
    Ok(SynthData {
        splits,
        stats,
        truth,
        cold_users,
        cold_items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;
    use std::collections::HashMap;

    fn small(seed: u64, informativeness: f64) -> SynthConfig {
        SynthConfig {
            users: 2_000,
            items: 1_000,
            samples: 60_000,
            informativeness,
            cold_user_fraction: 0.1,
            cold_item_fraction: 0.1,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small(3, 0.8), 4).unwrap();
        let b = generate_synthetic(&small(3, 0.8), 4).unwrap();
        assert_eq!(a.splits.train.samples, b.splits.train.samples);
        assert_eq!(a.splits.test.samples, b.splits.test.samples);
        let c = generate_synthetic(&small(4, 0.8), 4).unwrap();
        assert_ne!(a.splits.train.samples, c.splits.train.samples);
    }

    #[test]
    fn cold_entities_never_reach_training() {
        let d = generate_synthetic(&small(1, 0.8), 4).unwrap();
        for s in &d.splits.train.samples {
            assert!(!d.cold_users.contains(&s.user) && !d.cold_items.contains(&s.item));
        }
        let mask = cold_mask(&d.stats, &d.splits.test);
        for (s, &c) in d.splits.test.samples.iter().zip(&mask) {
            if d.cold_users.contains(&s.user) || d.cold_items.contains(&s.item) {
                assert!(c);
            }
        }
        assert!(mask.iter().filter(|&&c| c).count() > 1_000);
    }

    #[test]
    fn zipf_head_dominates() {
        // Partial sums of r^-1.2: the top 500 of 10^4 ranks carry about 86%
        // of the mass, so a 60% floor has a wide margin.
        let h = |n: usize| (1..=n).map(|r| (r as f64).powf(-1.2)).sum::<f64>();
        assert!(h(500) / h(10_000) > 0.85);

        let cfg = SynthConfig {
            samples: 100_000,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg, 4).unwrap();
        let mut per_user: HashMap<u32, usize> = HashMap::new();
        let all = d.splits.train.samples.iter().chain(&d.splits.val.samples).chain(&d.splits.test.samples);
        for s in all {
            *per_user.entry(s.user).or_default() += 1;
        }
        let mut counts: Vec<usize> = per_user.into_values().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts.iter().take(cfg.users / 20).sum();
        let total: usize = counts.iter().sum();
        assert!(top as f64 / total as f64 >= 0.6, "{top}/{total}");
    }

    #[test]
    fn ground_truth_is_recoverable() {
        let d = generate_synthetic(&small(2, 0.8), 4).unwrap();
        let test = &d.splits.test;
        let scores: Vec<f64> = test.samples.iter().map(|s| d.truth.probability(s.user, s.item)).collect();
        let a = auc(&scores, &test.labels()).unwrap();
        assert!(a >= 0.75, "oracle AUC {a}");
    }

    /// Naive-Bayes style scorer fitted on training meta values only.
    fn meta_scores(d: &SynthData, ds: &Dataset) -> Vec<f64> {
        let schema = &ds.schema;
        let meta: Vec<usize> = (0..schema.len())
            .filter(|&i| schema.feature(i).class == FeatureClass::Meta)
            .collect();
        let mut table: HashMap<(usize, u32), (f64, f64)> = HashMap::new();
        for s in &d.splits.train.samples {
            for &i in &meta {
                if let FeatureValue::Id(v) = s.features[i] {
                    let e = table.entry((i, v)).or_insert((1.0, 2.0));
                    e.0 += s.label_f64();
                    e.1 += 1.0;
                }
            }
        }
        ds.samples
            .iter()
            .map(|s| {
                meta.iter()
                    .map(|&i| match s.features[i] {
                        FeatureValue::Id(v) => {
                            let (pos, n) = table.get(&(i, v)).copied().unwrap_or((1.0, 2.0));
                            let p = pos / n;
                            (p / (1.0 - p)).ln()
                        }
                        FeatureValue::Seq(_) => 0.0,
                    })
                    .sum()
            })
            .collect()
    }

    fn cold_meta_auc(informativeness: f64) -> f64 {
        let d = generate_synthetic(&small(5, informativeness), 4).unwrap();
        let mask = cold_mask(&d.stats, &d.splits.test);
        let scores = meta_scores(&d, &d.splits.test);
        let (s, y): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .zip(&d.splits.test.samples)
            .zip(&mask)
            .filter(|(_, &c)| c)
            .map(|((&s, x), _)| (s, x.label_f64()))
            .unzip();
        auc(&s, &y).unwrap()
    }

    #[test]
    fn uninformative_meta_gives_chance_cold_auc() {
        let a = cold_meta_auc(0.0);
        assert!((a - 0.5).abs() <= 0.02, "cold AUC {a}");
        assert!(cold_meta_auc(1.0) > 0.55);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { user_zipf: 0.0, ..SynthConfig::default() },
            SynthConfig { informativeness: 1.5, ..SynthConfig::default() },
            SynthConfig { users: 1, ..SynthConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
