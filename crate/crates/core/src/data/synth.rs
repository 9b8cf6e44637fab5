//! Synthetic check-in corpora with planted second-order dynamics.
//!
//! Every venue has four successor candidates. Which candidate dominates
//! depends on the previous venue, and the runner-up depends on the time of
//! day, so `P(next | prev, cur)` is far from `P(next | cur)`. A small
//! uniform component keeps every venue well visited.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::data::{group_by_user, CheckIn, UserTrajectory};
use crate::error::{Error, Result};

/// 2010-01-04 00:00:00 UTC, a Monday.
pub const SYNTH_EPOCH: i64 = 1_262_563_200;
const DAY: i64 = 86_400;
const CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_venues: usize,
    pub days: i64,
    pub seed: u64,
    /// Probability of jumping to a uniformly random venue.
    pub explore: f64,
    /// Mass on the dominant successor before exploration.
    pub dominant: f64,
    /// Mass on the time-of-day runner-up.
    pub runner_up: f64,
    /// Median gap between check-ins, hours.
    pub median_gap_hours: f64,
    /// Log-normal shape of the gaps.
    pub gap_sigma: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_venues: usize, days: i64, seed: u64) -> Self {
        Self {
            n_users,
            n_venues,
            days,
            seed,
            explore: 0.08,
            dominant: 0.55,
            runner_up: 0.25,
            median_gap_hours: 14.0,
            gap_sigma: 0.75,
        }
    }

    /// 200 users, 50 venues, 120 days.
    pub fn reference(seed: u64) -> Self {
        Self::new(200, 50, 120, seed)
    }
}

/// Reproducibility record written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub epoch: i64,
    pub rng: String,
    pub successors: Vec<Vec<usize>>,
    pub checkins: usize,
}

pub fn venue_name(i: usize) -> String {
    format!("v{i:03}")
}

fn daypart(ts: i64) -> usize {
    (ts.rem_euclid(DAY) / (6 * 3600)) as usize
}

/// Index of the dominant successor for the pair `(prev, cur)`.
fn dominant_slot(prev: usize, cur: usize) -> usize {
    let mut h = (prev as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cur as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 29;
    (h % CANDIDATES as u64) as usize
}

fn next_venue(
    cfg: &SynthConfig,
    successors: &[Vec<usize>],
    prev: usize,
    cur: usize,
    ts: i64,
    rng: &mut ChaCha8Rng,
) -> usize {
    if rng.random::<f64>() < cfg.explore {
        return rng.random_range(0..cfg.n_venues);
    }
    let fav = dominant_slot(prev, cur);
    let second = (fav + 1 + daypart(ts) % (CANDIDATES - 1)) % CANDIDATES;
    let rest = (1.0 - cfg.dominant - cfg.runner_up) / CANDIDATES as f64;
    let mut w = [rest; CANDIDATES];
    w[fav] += cfg.dominant;
    w[second] += cfg.runner_up;
    let mut u = rng.random::<f64>();
    for (slot, p) in w.iter().enumerate() {
        if u < *p {
            return successors[cur][slot];
        }
        u -= p;
    }
    successors[cur][CANDIDATES - 1]
}

/// Generates the corpus and its manifest.
pub fn synth_generate_with_manifest(cfg: &SynthConfig) -> Result<(Vec<UserTrajectory>, SynthManifest)> {
    if cfg.n_venues < 3 {
        return Err(Error::Config("synthetic corpus needs at least 3 venues".into()));
    }
    if cfg.n_users == 0 || cfg.days < 1 {
        return Err(Error::Config("synthetic corpus needs users and days".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = CANDIDATES.min(cfg.n_venues - 1);
    let successors: Vec<Vec<usize>> = (0..cfg.n_venues)
        .map(|v| {
            let mut s: Vec<usize> = sample(&mut rng, cfg.n_venues - 1, k)
                .into_iter()
                .map(|i| if i >= v { i + 1 } else { i })
                .collect();
            while s.len() < CANDIDATES {
                s.push(s[s.len() % k]);
            }
            s
        })
        .collect();
    let coords: Vec<(f64, f64)> = (0..cfg.n_venues)
        .map(|_| {
            (
                40.6 + rng.random::<f64>() * 0.3,
                -74.1 + rng.random::<f64>() * 0.3,
            )
        })
        .collect();
    let gaps = LogNormal::new((cfg.median_gap_hours * 3600.0).ln(), cfg.gap_sigma)
        .map_err(|e| Error::Config(e.to_string()))?;
    let end = SYNTH_EPOCH + cfg.days * DAY;

    let mut checkins = Vec::new();
    for u in 0..cfg.n_users {
        let user = format!("u{u:04}");
        let mut ts = SYNTH_EPOCH + rng.random_range(0..DAY);
        let mut prev = rng.random_range(0..cfg.n_venues);
        let mut cur = rng.random_range(0..cfg.n_venues);
        while ts < end {
            checkins.push(CheckIn {
                user_id: user.clone(),
                timestamp: ts,
                lat: coords[cur].0,
                lon: coords[cur].1,
                venue_id: venue_name(cur),
                category: None,
            });
            let gap: f64 = gaps.sample(&mut rng);
            ts += (gap.round() as i64).max(60);
            let next = next_venue(cfg, &successors, prev, cur, ts, &mut rng);
            prev = cur;
            cur = next;
        }
    }
    let manifest = SynthManifest {
        config: cfg.clone(),
        epoch: SYNTH_EPOCH,
        rng: "ChaCha8Rng".into(),
        successors,
        checkins: checkins.len(),
    };
    Ok((group_by_user(checkins), manifest))
}

pub fn synth_generate(n_users: usize, n_venues: usize, days: i64, seed: u64) -> Result<Vec<UserTrajectory>> {
    synth_generate_with_manifest(&SynthConfig::new(n_users, n_venues, days, seed)).map(|(t, _)| t)
}
