use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};

const DAY: i64 = 86_400;

/// Interaction types that can be counted per user and per item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountChannel {
    /// Every logged sample.
    Impression,
    Comment,
    /// Positive label.
    Like,
}

impl CountChannel {
    fn count(self, s: &Sample) -> u64 {
        match self {
            CountChannel::Impression => 1,
            CountChannel::Comment => u64::from(s.comment),
            CountChannel::Like => u64::from(s.label),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityStats {
    /// One count per channel, in the store's channel order.
    pub counts: Vec<u64>,
}

/// Running counts of one entity: after the `j`-th interaction in time
/// order, `cumulative[j * channels..(j + 1) * channels]`.
#[derive(Clone, Debug, Default)]
struct History {
    times: Vec<i64>,
    cumulative: Vec<u64>,
}

impl History {
    fn build(events: &mut [(i64, &Sample)], channels: &[CountChannel]) -> Self {
        events.sort_by_key(|&(t, _)| t);
        let mut running = vec![0u64; channels.len()];
        let mut h = History::default();
        for &(t, s) in events.iter() {
            for (c, ch) in running.iter_mut().zip(channels) {
                *c += ch.count(s);
            }
            h.times.push(t);
            h.cumulative.extend_from_slice(&running);
        }
        h
    }

    /// Counts over interactions strictly before `t`, `None` if there are none.
    fn before(&self, t: i64, channels: usize) -> Option<Vec<u64>> {
        let n = self.times.partition_point(|&x| x < t);
        (n > 0).then(|| self.cumulative[(n - 1) * channels..n * channels].to_vec())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UserActivity {
    pub active_7: u32,
    pub active_30: u32,
}

/// Per-user and per-item statistics computed from a training split only.
#[derive(Clone, Debug, Default)]
pub struct StatsStore {
    channels: Vec<CountChannel>,
    users: BTreeMap<u32, EntityStats>,
    items: BTreeMap<u32, EntityStats>,
    /// Sorted distinct active days per user, with the earliest timestamp on each.
    user_days: BTreeMap<u32, Vec<(i64, i64)>>,
    user_history: BTreeMap<u32, History>,
    item_history: BTreeMap<u32, History>,
    /// Last training day; `None` when timestamps were unavailable.
    end_day: Option<i64>,
    temporal: bool,
}

impl StatsStore {
    /// Aggregates `train`. With `temporal`, state queries see only training
    /// interactions strictly before the queried timestamp, and active-day
    /// windows trail it; otherwise counts are totals and windows end at the
    /// last training day. Without timestamps only total counts are available.
    pub fn build(train: &Dataset, temporal: bool) -> Self {
        let channels = train.channels.clone();
        let mut users: BTreeMap<u32, EntityStats> = BTreeMap::new();
        let mut items: BTreeMap<u32, EntityStats> = BTreeMap::new();
        let mut days: BTreeMap<u32, BTreeMap<i64, i64>> = BTreeMap::new();
        let has_time = !train.samples.is_empty() && train.samples.iter().all(|s| s.timestamp.is_some());
        if !train.samples.is_empty() && !has_time {
            log::warn!("training split lacks timestamps; active-day signals fall back to zero buckets");
        }
        let mut end_day = None;
        for s in &train.samples {
            for (map, key) in [(&mut users, s.user), (&mut items, s.item)] {
                let e = map.entry(key).or_insert_with(|| EntityStats {
                    counts: vec![0; channels.len()],
                });
                for (c, ch) in e.counts.iter_mut().zip(&channels) {
                    *c += ch.count(s);
                }
            }
            if has_time {
                let t = s.timestamp.unwrap_or_default();
                let day = t.div_euclid(DAY);
                let first = days.entry(s.user).or_default().entry(day).or_insert(t);
                *first = (*first).min(t);
                end_day = Some(end_day.map_or(day, |e: i64| e.max(day)));
            }
        }
        let (mut user_history, mut item_history) = (BTreeMap::new(), BTreeMap::new());
        if temporal && has_time {
            let mut by_user: BTreeMap<u32, Vec<(i64, &Sample)>> = BTreeMap::new();
            let mut by_item: BTreeMap<u32, Vec<(i64, &Sample)>> = BTreeMap::new();
            for s in &train.samples {
                let t = s.timestamp.unwrap_or_default();
                by_user.entry(s.user).or_default().push((t, s));
                by_item.entry(s.item).or_default().push((t, s));
            }
            user_history = by_user.into_iter().map(|(k, mut e)| (k, History::build(&mut e, &channels))).collect();
            item_history = by_item.into_iter().map(|(k, mut e)| (k, History::build(&mut e, &channels))).collect();
        }
        Self {
            channels,
            users,
            items,
            user_days: days.into_iter().map(|(u, d)| (u, d.into_iter().collect())).collect(),
            user_history,
            item_history,
            end_day,
            temporal,
        }
    }

    pub fn channels(&self) -> &[CountChannel] {
        &self.channels
    }

    pub fn is_temporal(&self) -> bool {
        self.temporal
    }

    pub fn user_counts(&self, user: u32) -> Option<&[u64]> {
        self.users.get(&user).map(|e| e.counts.as_slice())
    }

    pub fn item_counts(&self, item: u32) -> Option<&[u64]> {
        self.items.get(&item).map(|e| e.counts.as_slice())
    }

    fn state_counts(&self, history: &BTreeMap<u32, History>, key: u32, totals: Option<&[u64]>, timestamp: Option<i64>) -> Option<Vec<u64>> {
        match (self.temporal && !history.is_empty(), timestamp) {
            (true, Some(t)) => history.get(&key)?.before(t, self.channels.len()),
            _ => totals.map(<[u64]>::to_vec),
        }
    }

    /// Counts describing the user's state at `timestamp`: totals for a static
    /// store, earlier interactions only for a temporal one.
    pub fn user_state_counts(&self, user: u32, timestamp: Option<i64>) -> Option<Vec<u64>> {
        self.state_counts(&self.user_history, user, self.user_counts(user), timestamp)
    }

    pub fn item_state_counts(&self, item: u32, timestamp: Option<i64>) -> Option<Vec<u64>> {
        self.state_counts(&self.item_history, item, self.item_counts(item), timestamp)
    }

    fn channel_count(counts: Option<&[u64]>, channels: &[CountChannel], ch: CountChannel) -> u64 {
        let pos = channels.iter().position(|&c| c == ch);
        match (counts, pos) {
            (Some(c), Some(p)) => c[p],
            _ => 0,
        }
    }

    pub fn user_impressions(&self, user: u32) -> u64 {
        Self::channel_count(self.user_counts(user), &self.channels, CountChannel::Impression)
    }

    pub fn item_impressions(&self, item: u32) -> u64 {
        Self::channel_count(self.item_counts(item), &self.channels, CountChannel::Impression)
    }

    /// Distinct active days in the trailing 7- and 30-day windows. `None`
    /// for users unseen in training, for users with no earlier activity in a
    /// temporal store, or when timestamps were unavailable.
    pub fn user_activity(&self, user: u32, timestamp: Option<i64>) -> Option<UserActivity> {
        let days = self.user_days.get(&user)?;
        let (end, hi) = match (self.temporal, timestamp) {
            (true, Some(t)) => {
                let hi = days.partition_point(|&(_, first)| first < t);
                (t.div_euclid(DAY), hi)
            }
            _ => (self.end_day?, days.len()),
        };
        if hi == 0 && self.temporal && timestamp.is_some() {
            return None;
        }
        let count = |window: i64| {
            let lo = days[..hi].partition_point(|&(d, _)| d <= end - window);
            (hi - lo) as u32
        };
        Some(UserActivity {
            active_7: count(7),
            active_30: count(30),
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testing::*;
    use crate::data::{CountChannel, Split};
    use std::collections::HashMap;

    #[test]
    fn distinct_days_in_window() {
        let mut samples = Vec::new();
        // user 1 active on days 100, 102, 102 (twice), 105; user 2 on day 60
        for (u, day) in [(1, 100), (1, 102), (1, 102), (1, 105), (2, 60)] {
            let mut s = tiny_sample(u, 1, 0);
            s.timestamp = Some(day * DAY + 3600);
            samples.push(s);
        }
        let ds = Dataset::new(tiny_schema(4), samples, Split::Train, vec![CountChannel::Impression]).unwrap();
        let stats = StatsStore::build(&ds, false);
        let a = stats.user_activity(1, None).unwrap();
        assert_eq!(a.active_7, 3);
        assert_eq!(a.active_30, 3);
        assert_eq!(stats.user_activity(2, None).unwrap().active_30, 0);

        let temporal = StatsStore::build(&ds, true);
        let at_101 = temporal.user_activity(1, Some(101 * DAY)).unwrap();
        assert_eq!(at_101.active_7, 1);
    }

    #[test]
    fn temporal_state_sees_only_earlier_interactions() {
        let mut samples = Vec::new();
        for (u, item, day, label) in [(1, 7, 10, 1), (1, 8, 12, 0), (1, 7, 12, 1), (2, 7, 20, 1)] {
            let mut s = tiny_sample(u, item, label);
            s.timestamp = Some(day * DAY);
            samples.push(s);
        }
        let ds = Dataset::new(tiny_schema(4), samples, Split::Train, vec![CountChannel::Impression, CountChannel::Like]).unwrap();
        let stats = StatsStore::build(&ds, true);
        assert_eq!(stats.user_state_counts(1, Some(10 * DAY)), None);
        assert_eq!(stats.user_state_counts(1, Some(12 * DAY)), Some(vec![1, 1]));
        assert_eq!(stats.user_state_counts(1, Some(13 * DAY)), Some(vec![3, 2]));
        assert_eq!(stats.item_state_counts(7, Some(20 * DAY)), Some(vec![2, 2]));
        assert_eq!(stats.item_state_counts(7, None), Some(vec![3, 3]));
        assert_eq!(stats.user_state_counts(9, Some(30 * DAY)), None);
        assert!(stats.user_activity(1, Some(10 * DAY)).is_none());
        assert_eq!(stats.user_activity(1, Some(12 * DAY)).unwrap().active_7, 1);
        assert_eq!(stats.user_activity(1, Some(13 * DAY)).unwrap().active_7, 2);

        let fixed = StatsStore::build(&ds, false);
        assert_eq!(fixed.user_state_counts(1, Some(10 * DAY)), Some(vec![3, 2]));
    }

    #[test]
    fn unseen_item_has_no_counts() {
        let ds = tiny_dataset(30);
        let stats = StatsStore::build(&ds, false);
        assert!(stats.item_counts(999).is_none());
        assert_eq!(stats.item_impressions(999), 0);
        assert!(stats.user_activity(999, None).is_none());
    }

    #[test]
    fn counts_match_group_by() {
        let ds = tiny_dataset(97);
        let stats = StatsStore::build(&ds, false);
        let mut expected: HashMap<u32, [u64; 3]> = HashMap::new();
        for s in &ds.samples {
            let e = expected.entry(s.item).or_default();
            e[0] += 1;
            e[1] += s.comment as u64;
            e[2] += s.label as u64;
        }
        for (item, c) in expected {
            assert_eq!(stats.item_counts(item).unwrap(), &c);
        }
    }

    #[test]
    fn missing_timestamps_keep_counts() {
        let mut ds = tiny_dataset(10);
        ds.samples[3].timestamp = None;
        let stats = StatsStore::build(&ds, false);
        let u = ds.samples[0].user;
        assert!(stats.user_activity(u, None).is_none());
        assert!(stats.user_impressions(u) > 0);
    }
}
