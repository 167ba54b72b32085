//! Ranking metrics and the analysis tables built on them.
//!
//! Undefined values (single-class inputs, empty groups) are `None`, which
//! serializes as `null`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank, which credits each tied positive/negative pair 0.5.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| labels[k] > 0.5).count();
        rank_sum += avg * pos as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user AUC averaged with weights equal to each user's sample count.
/// Users whose samples are all one class are left out entirely.
pub fn uauc(scores: &[f64], labels: &[f64], users: &[u32]) -> Option<f64> {
    assert_eq!(scores.len(), users.len(), "scores and users differ in length");
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &y), &u) in scores.iter().zip(labels).zip(users) {
        let g = groups.entry(u).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (s, y) in groups.values() {
        if let Some(a) = auc(s, y) {
            num += a * s.len() as f64;
            den += s.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Relative AUC improvement in percent.
pub fn rela_impr(auc_new: Option<f64>, auc_base: Option<f64>) -> Option<f64> {
    match (auc_new, auc_base) {
        (Some(n), Some(b)) if b > 0.0 => Some((n / b - 1.0) * 100.0),
        _ => None,
    }
}

/// Maps a non-negative statistic to a labelled bucket: value `v` falls in
/// bucket `i` for the first `i` with `v < edges[i]`, otherwise the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRule {
    pub name: String,
    pub edges: Vec<u64>,
    pub labels: Vec<String>,
}

impl BucketRule {
    pub fn new(name: &str, edges: Vec<u64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != edges.len() + 1 {
            return Err(Error::Invalid(format!(
                "bucket rule `{name}`: {} edges need {} labels, got {}",
                edges.len(),
                edges.len() + 1,
                labels.len()
            )));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("bucket rule `{name}`: edges must increase")));
        }
        Ok(Self {
            name: name.to_string(),
            edges,
            labels,
        })
    }

    /// Ranges labelled `lo-hi` plus a final `lo+`.
    pub fn ranges(name: &str, edges: &[u64]) -> Result<Self> {
        let mut labels = Vec::new();
        let mut lo = 0;
        for &e in edges {
            labels.push(format!("{lo}-{e}"));
            lo = e;
        }
        labels.push(format!("{lo}+"));
        Self::new(name, edges.to_vec(), labels)
    }

    /// Item exposure groups by training impressions.
    pub fn item_impressions() -> Self {
        Self::ranges("item_impressions", &[128, 512, 1024]).expect("valid edges")
    }

    /// User activity groups by training impressions.
    pub fn user_state() -> Self {
        let labels = ["new", "low", "mid", "high"].map(String::from).to_vec();
        Self::new("user_state", vec![1, 10, 50], labels).expect("valid edges")
    }

    pub fn item_state() -> Self {
        let labels = ["cold", "warm", "hot"].map(String::from).to_vec();
        Self::new("item_state", vec![1, 100], labels).expect("valid edges")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bucket(&self, value: u64) -> usize {
        self.edges.partition_point(|&e| e <= value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub label: String,
    pub count: usize,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub rule: String,
    pub buckets: Vec<BucketMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<BucketTable>,
}

impl MetricReport {
    pub fn new(scores: &[f64], labels: &[f64], users: &[u32]) -> Self {
        Self {
            count: scores.len(),
            auc: auc(scores, labels),
            uauc: uauc(scores, labels, users),
            tables: Vec::new(),
        }
    }

    /// Aligned human-readable rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples  {}", self.count);
        let _ = writeln!(out, "AUC      {}", fmt_metric(self.auc));
        let _ = writeln!(out, "UAUC     {}", fmt_metric(self.uauc));
        for t in &self.tables {
            let _ = writeln!(out, "\n{:<16} {:>9} {:>9}", t.rule, "count", "AUC");
            for b in &t.buckets {
                let _ = writeln!(out, "{:<16} {:>9} {:>9}", b.label, b.count, fmt_metric(b.auc));
            }
        }
        out
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// AUC and sample count per bucket of `values` (one statistic per sample).
pub fn bucket_report(scores: &[f64], labels: &[f64], values: &[u64], rule: &BucketRule) -> BucketTable {
    let mut parts: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); rule.len()];
    for ((&s, &y), &v) in scores.iter().zip(labels).zip(values) {
        let p = &mut parts[rule.bucket(v)];
        p.0.push(s);
        p.1.push(y);
    }
    BucketTable {
        rule: rule.name.clone(),
        buckets: parts
            .iter()
            .zip(&rule.labels)
            .map(|((s, y), label)| BucketMetrics {
                label: label.clone(),
                count: s.len(),
                auc: auc(s, y),
            })
            .collect(),
    }
}

/// Mean adaptive weight per (group, feature).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHeatmap {
    pub rule: String,
    pub groups: Vec<String>,
    pub sizes: Vec<usize>,
    pub features: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl WeightHeatmap {
    /// `weights[s]` holds one weight per feature for sample `s`, which lies
    /// in group `groups[s]`. Empty groups are omitted.
    pub fn from_weights(weights: &[Vec<f64>], groups: &[usize], rule: &BucketRule, features: Vec<String>) -> Self {
        let n = features.len();
        let mut sums = vec![vec![0.0; n]; rule.len()];
        let mut sizes = vec![0usize; rule.len()];
        for (w, &g) in weights.iter().zip(groups) {
            for (acc, x) in sums[g].iter_mut().zip(w) {
                *acc += x;
            }
            sizes[g] += 1;
        }
        let mut heat = Self {
            rule: rule.name.clone(),
            groups: Vec::new(),
            sizes: Vec::new(),
            features,
            cells: Vec::new(),
        };
        for (g, (row, size)) in sums.into_iter().zip(sizes).enumerate() {
            if size == 0 {
                log::warn!("heatmap group `{}` has no samples; row omitted", rule.labels[g]);
                continue;
            }
            heat.groups.push(rule.labels[g].clone());
            heat.sizes.push(size);
            heat.cells.push(row.into_iter().map(|x| x / size as f64).collect());
        }
        heat
    }

    pub fn row(&self, group: &str) -> Option<&[f64]> {
        let i = self.groups.iter().position(|g| g == group)?;
        Some(&self.cells[i])
    }

    /// Header `group,count,<features>`, then one line per group.
    pub fn to_csv(&self) -> String {
        let mut out = format!("group,count,{}\n", self.features.join(","));
        for ((g, size), row) in self.groups.iter().zip(&self.sizes).zip(&self.cells) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(out, "{g},{size},{}", cells.join(","));
        }
        out
    }
}
