//! Per-user trajectories, the history/support filters and the 6:2:2 split.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CheckIn;
use crate::error::{Error, Result};

const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrajectory {
    pub user_id: String,
    /// Ascending by timestamp.
    pub events: Vec<CheckIn>,
}

impl UserTrajectory {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Groups check-ins by user (sorted by user id) and orders each user's events
/// by timestamp; the sort is stable so same-second events keep file order.
pub fn group_by_user(checkins: Vec<CheckIn>) -> Vec<UserTrajectory> {
    let mut by_user: BTreeMap<String, Vec<CheckIn>> = BTreeMap::new();
    for c in checkins {
        by_user.entry(c.user_id.clone()).or_default().push(c);
    }
    by_user
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|c| c.timestamp);
            UserTrajectory { user_id, events }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_user_checkins: usize,
    pub min_venue_visits: usize,
    pub max_window_days: i64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_user_checkins: 10,
            min_venue_visits: 10,
            max_window_days: 120,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_user_checkins < 1 || self.min_venue_visits < 1 || self.max_window_days < 1 {
            return Err(Error::Config("filter thresholds must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Keeps each user's events within `max_window_days` of their last event,
/// then drops rare venues and short users until neither rule removes anything.
pub fn apply_filters(mut trajectories: Vec<UserTrajectory>, cfg: &FilterConfig) -> Vec<UserTrajectory> {
    let horizon = cfg.max_window_days * DAY;
    loop {
        let before: usize = trajectories.iter().map(UserTrajectory::len).sum::<usize>() + trajectories.len();

        for t in &mut trajectories {
            if let Some(last) = t.events.last().map(|c| c.timestamp) {
                t.events.retain(|c| last - c.timestamp <= horizon);
            }
        }

        let mut visits: HashMap<&str, usize> = HashMap::new();
        for t in &trajectories {
            for c in &t.events {
                *visits.entry(c.venue_id.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = visits
            .into_iter()
            .filter(|&(_, n)| n < cfg.min_venue_visits)
            .map(|(v, _)| v.to_string())
            .collect();
        for t in &mut trajectories {
            t.events.retain(|c| !rare.contains(&c.venue_id));
        }
        trajectories.retain(|t| t.len() >= cfg.min_user_checkins);

        let after: usize = trajectories.iter().map(UserTrajectory::len).sum::<usize>() + trajectories.len();
        if after == before {
            return trajectories;
        }
    }
}

/// Drops consecutive check-ins at the same venue within `gap_secs` of the
/// previous kept one.
pub fn collapse_duplicates(t: &mut UserTrajectory, gap_secs: i64) {
    let mut kept: Vec<CheckIn> = Vec::with_capacity(t.events.len());
    for c in t.events.drain(..) {
        if let Some(prev) = kept.last() {
            if prev.venue_id == c.venue_id && c.timestamp - prev.timestamp <= gap_secs {
                continue;
            }
        }
        kept.push(c);
    }
    t.events = kept;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    ByUser,
    ByEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<UserTrajectory>,
    pub valid: Vec<UserTrajectory>,
    pub test: Vec<UserTrajectory>,
    pub seed: u64,
}

/// JSON sidecar recording how a split was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub mode: SplitMode,
    pub filter: FilterConfig,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn manifest(&self, mode: SplitMode, filter: FilterConfig) -> SplitManifest {
        let ids = |v: &[UserTrajectory]| v.iter().map(|t| t.user_id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            mode,
            filter,
            train: ids(&self.train),
            valid: ids(&self.valid),
            test: ids(&self.test),
        }
    }

    /// Rebuilds a by-user split from a manifest and the filtered trajectories.
    pub fn from_manifest(m: &SplitManifest, trajectories: &[UserTrajectory]) -> Result<Self> {
        let by_id: HashMap<&str, &UserTrajectory> =
            trajectories.iter().map(|t| (t.user_id.as_str(), t)).collect();
        let pick = |ids: &[String]| -> Result<Vec<UserTrajectory>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| Error::Config(format!("user {id} missing from corpus")))
                })
                .collect()
        };
        Ok(Self {
            train: pick(&m.train)?,
            valid: pick(&m.valid)?,
            test: pick(&m.test)?,
            seed: m.seed,
        })
    }
}

fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let valid = n / 5;
    let test = n / 5;
    (n - valid - test, valid, test)
}

/// Seeded 60/20/20 partition. Valid and test take `floor(n/5)` each, train
/// takes the remainder.
pub fn split_dataset(trajectories: Vec<UserTrajectory>, seed: u64) -> Result<DatasetSplit> {
    split_dataset_with(trajectories, seed, SplitMode::ByUser)
}

pub fn split_dataset_with(
    mut trajectories: Vec<UserTrajectory>,
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetSplit> {
    if trajectories.len() < 5 {
        return Err(Error::Config(format!(
            "need at least 5 users to split, got {}",
            trajectories.len()
        )));
    }
    trajectories.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::ByUser => {
            trajectories.shuffle(&mut rng);
            let (n_train, n_valid, _) = partition_sizes(trajectories.len());
            let test = trajectories.split_off(n_train + n_valid);
            let valid = trajectories.split_off(n_train);
            Ok(DatasetSplit {
                train: trajectories,
                valid,
                test,
                seed,
            })
        }
        SplitMode::ByEvent => {
            let mut events: Vec<CheckIn> = trajectories.into_iter().flat_map(|t| t.events).collect();
            events.shuffle(&mut rng);
            let (n_train, n_valid, _) = partition_sizes(events.len());
            let test = events.split_off(n_train + n_valid);
            let valid = events.split_off(n_train);
            Ok(DatasetSplit {
                train: group_by_user(events),
                valid: group_by_user(valid),
                test: group_by_user(test),
                seed,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ck(user: &str, ts: i64, venue: &str) -> CheckIn {
        CheckIn {
            user_id: user.into(),
            timestamp: ts,
            lat: 0.0,
            lon: 0.0,
            venue_id: venue.into(),
            category: None,
        }
    }

    fn users(n: usize) -> Vec<UserTrajectory> {
        (0..n)
            .map(|i| UserTrajectory {
                user_id: format!("u{i:02}"),
                events: vec![ck(&format!("u{i:02}"), 1, "v")],
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let s = split_dataset(users(10), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        let s = split_dataset(users(11), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 2, 2));
        assert!(matches!(split_dataset(users(4), 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_seeded() {
        let a = split_dataset(users(30), 9).unwrap();
        let mut shuffled = users(30);
        shuffled.reverse();
        let b = split_dataset(shuffled, 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(users(30), 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn by_event_split_keeps_every_event() {
        let mut t = users(6);
        for u in &mut t {
            for k in 0..9 {
                u.events.push(ck(&u.user_id.clone(), 10 + k, "w"));
            }
        }
        let s = split_dataset_with(t, 1, SplitMode::ByEvent).unwrap();
        let count = |v: &[UserTrajectory]| v.iter().map(UserTrajectory::len).sum::<usize>();
        assert_eq!(count(&s.train), 36);
        assert_eq!(count(&s.valid) + count(&s.test), 24);
    }

    #[test]
    fn nine_checkins_removed_ten_kept() {
        let mut t = Vec::new();
        for (u, n) in [("a", 9), ("b", 10)] {
            let events = (0..n).map(|i| ck(u, 1000 + i, "v")).collect();
            t.push(UserTrajectory { user_id: u.into(), events });
        }
        let out = apply_filters(t, &FilterConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].user_id, "b");
    }

    #[test]
    fn trailing_window_anchor() {
        let events = (0..=400).step_by(10).map(|d| ck("a", 1_000_000 + d * DAY, "v")).collect();
        let out = apply_filters(
            vec![UserTrajectory { user_id: "a".into(), events }],
            &FilterConfig::default(),
        );
        let ev = &out[0].events;
        assert_eq!(ev.first().unwrap().timestamp, 1_000_000 + 280 * DAY);
        assert_eq!(ev.len(), 13);
    }

    #[test]
    fn collapse_same_venue_bursts() {
        let mut t = UserTrajectory {
            user_id: "a".into(),
            events: vec![ck("a", 0, "v"), ck("a", 120, "v"), ck("a", 400, "v"), ck("a", 1000, "v"), ck("a", 1100, "w")],
        };
        collapse_duplicates(&mut t, 300);
        let ts: Vec<i64> = t.events.iter().map(|c| c.timestamp).collect();
        assert_eq!(ts, vec![0, 400, 1000, 1100]);
    }
}
