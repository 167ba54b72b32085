//! Samples, datasets, splitting, and the sources they come from.

pub mod movielens;
mod stats;
pub mod synth;
mod text;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::FeatureSchema;

pub use stats::{CountChannel, EntityStats, StatsStore, UserActivity};
pub use text::{read_columnar, write_columnar};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureValue {
    Id(u32),
    Seq(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<FeatureValue>,
    pub label: u8,
    pub user: u32,
    pub item: u32,
    /// Seconds since the epoch, when the source provides one.
    pub timestamp: Option<i64>,
    /// Whether the interaction also produced a comment (synthetic data only).
    pub comment: bool,
}

impl Sample {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Interaction channels this source can count for state signals.
    pub channels: Vec<CountChannel>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>, split: Split, channels: Vec<CountChannel>) -> Result<Self> {
        let ds = Self {
            schema,
            samples,
            split,
            channels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.schema.len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Invalid(format!("sample {i}: label {} is not 0/1", s.label)));
            }
            if s.features.len() != n {
                return Err(Error::FeatureCountMismatch {
                    expected: n,
                    got: s.features.len(),
                });
            }
            for (f, v) in self.schema.features().iter().zip(&s.features) {
                let ok = matches!((f.sequence, v), (true, FeatureValue::Seq(_)) | (false, FeatureValue::Id(_)));
                if !ok {
                    return Err(Error::Invalid(format!(
                        "sample {i}: feature `{}` has the wrong arity",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(Sample::label_f64).collect()
    }

    pub fn users(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.user).collect()
    }

    fn with_samples(&self, samples: Vec<Sample>, split: Split) -> Self {
        Self {
            schema: self.schema.clone(),
            samples,
            split,
            channels: self.channels.clone(),
        }
    }
}

/// Train / validation / test partition of one dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> Result<&Dataset> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Val => Ok(&self.val),
            Split::Test => Ok(&self.test),
            Split::All => Err(Error::Invalid("`all` is not a partition".into())),
        }
    }
}

/// Sizes of a `ratios` partition of `n` items. Train and validation are
/// rounded to nearest; the test split takes the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let train = ((n as f64) * ratios[0]).round() as usize;
    let val = (((n as f64) * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok((train, val, n - train - val))
}

/// Seeded uniform random partition.
pub fn split_random(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let (n_train, n_val, _) = split_sizes(dataset.len(), ratios)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = crate::seed::stream(seed, "split");
    order.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: dataset.with_samples(pick(&order[..n_train]), Split::Train),
        val: dataset.with_samples(pick(&order[n_train..n_train + n_val]), Split::Val),
        test: dataset.with_samples(pick(&order[n_train + n_val..]), Split::Test),
    })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::schema::{FeatureClass, FeatureKind, FeatureSpec};

    pub fn tiny_schema(dim: usize) -> FeatureSchema {
        FeatureSchema::new(
            dim,
            vec![
                FeatureSpec::new("user_id", FeatureKind::User, FeatureClass::IdBased, 6),
                FeatureSpec::new("age", FeatureKind::User, FeatureClass::Meta, 4),
                FeatureSpec::new("item_id", FeatureKind::Item, FeatureClass::IdBased, 8),
                FeatureSpec::new("genres", FeatureKind::Item, FeatureClass::IdBased, 5)
                    .sequence()
                    .with_state_id(false),
                FeatureSpec::new("hour", FeatureKind::Context, FeatureClass::Meta, 3),
            ],
        )
        .unwrap()
    }

    pub fn tiny_sample(user: u32, item: u32, label: u8) -> Sample {
        Sample {
            features: vec![
                FeatureValue::Id(user),
                FeatureValue::Id(1 + user % 3),
                FeatureValue::Id(item),
                FeatureValue::Seq(vec![1 + item % 4, 1 + (item + 1) % 4]),
                FeatureValue::Id(1 + (user + item) % 2),
            ],
            label,
            user,
            item,
            timestamp: Some(86_400 * i64::from(user + item)),
            comment: label == 1 && item.is_multiple_of(2),
        }
    }

    pub fn tiny_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let (u, it) = (1 + (i % 5) as u32, 1 + (i % 7) as u32);
                tiny_sample(u, it, ((u + it) % 2) as u8)
            })
            .collect();
        Dataset::new(
            tiny_schema(4),
            samples,
            Split::All,
            vec![CountChannel::Impression, CountChannel::Comment, CountChannel::Like],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn ten_samples_split_six_two_two() {
        let ds = tiny_dataset(10);
        let s = split_random(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny_dataset(50);
        let a = split_random(&ds, [0.6, 0.2, 0.2], 9).unwrap();
        let b = split_random(&ds, [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(a.train.samples, b.train.samples);
        assert_eq!(a.test.samples, b.test.samples);
    }

    #[test]
    fn degenerate_ratios_are_rejected() {
        let ds = tiny_dataset(10);
        assert!(split_random(&ds, [0.6, 0.2, 0.1], 0).is_err());
        assert!(split_random(&ds, [1.2, -0.2, 0.0], 0).is_err());
        assert!(split_random(&ds, [f64::NAN, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let mut s = tiny_sample(1, 1, 0);
        s.features[3] = FeatureValue::Id(2);
        assert!(Dataset::new(tiny_schema(4), vec![s], Split::All, vec![]).is_err());
        let mut s = tiny_sample(1, 1, 0);
        s.label = 2;
        assert!(Dataset::new(tiny_schema(4), vec![s], Split::All, vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_partition(n in 0usize..200, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (r0, r1) = (a, (1.0 - a) * b);
                let ratios = [r0, r1, 1.0 - r0 - r1];
                let ds = tiny_dataset(n);
                let s = split_random(&ds, ratios, seed).unwrap();
                prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
                prop_assert!((s.train.len() as f64 - n as f64 * ratios[0]).abs() <= 1.0);
                prop_assert!((s.val.len() as f64 - n as f64 * ratios[1]).abs() <= 1.0);
                prop_assert!((s.test.len() as f64 - n as f64 * ratios[2]).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
