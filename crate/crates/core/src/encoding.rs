//! Venue tokens, time-of-week buckets, summed location/time embeddings and
//! sliding windows.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::UserTrajectory;
use crate::error::{Error, Result};
use crate::numeric::nn::normal;
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

pub const TIME_BUCKETS: usize = 56;
const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: usize,
    pub unk: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub venue_to_token: BTreeMap<String, usize>,
    pub time_bucket_count: usize,
    pub specials: Specials,
}

impl Vocab {
    /// One token per venue of the training split in venue-id order, then
    /// PAD and UNK.
    pub fn build(train: &[UserTrajectory]) -> Result<Self> {
        let mut venues: Vec<&str> = train
            .iter()
            .flat_map(|t| t.events.iter().map(|c| c.venue_id.as_str()))
            .collect();
        if venues.is_empty() {
            return Err(Error::Empty("no training check-ins to build a vocabulary".into()));
        }
        venues.sort_unstable();
        venues.dedup();
        let venue_to_token: BTreeMap<String, usize> = venues
            .iter()
            .enumerate()
            .map(|(i, v)| (v.to_string(), i))
            .collect();
        let n = venue_to_token.len();
        Ok(Self {
            venue_to_token,
            time_bucket_count: TIME_BUCKETS,
            specials: Specials { pad: n, unk: n + 1 },
        })
    }

    pub fn len(&self) -> usize {
        self.venue_to_token.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, venue_id: &str) -> usize {
        self.venue_to_token
            .get(venue_id)
            .copied()
            .unwrap_or(self.specials.unk)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `day_of_week × 8 + hour / 3` with Monday = 0.
pub fn time_bucket(timestamp: i64) -> usize {
    let days = timestamp.div_euclid(86_400);
    let dow = (days + 3).rem_euclid(7) as usize;
    let hour = (timestamp.rem_euclid(86_400) / 3600) as usize;
    dow * 8 + hour / 3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub user_id: String,
    pub tokens: Vec<usize>,
    pub time_buckets: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(vocab: &Vocab, t: &UserTrajectory) -> TokenizedSequence {
    TokenizedSequence {
        user_id: t.user_id.clone(),
        tokens: t.events.iter().map(|c| vocab.token(&c.venue_id)).collect(),
        time_buckets: t.events.iter().map(|c| time_bucket(c.timestamp)).collect(),
        timestamps: t.events.iter().map(|c| c.timestamp).collect(),
    }
}

/// Learnable `phi_loc [|V| × d]` and `phi_time [buckets × d]`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub phi_loc: ParamId,
    pub phi_time: ParamId,
    pub vocab_size: usize,
    pub buckets: usize,
    pub d: usize,
}

impl EmbeddingTables {
    pub fn new(store: &mut ParamStore, vocab_size: usize, buckets: usize, d: usize, rng: &mut impl Rng) -> Self {
        let phi_loc = store.add("phi_loc", normal(&[vocab_size, d], EMBED_STD, rng), true);
        let phi_time = store.add("phi_time", normal(&[buckets, d], EMBED_STD, rng), true);
        Self {
            phi_loc,
            phi_time,
            vocab_size,
            buckets,
            d,
        }
    }

    fn check(&self, tokens: &[usize], buckets: &[usize]) -> Result<()> {
        if tokens.len() != buckets.len() {
            return Err(Error::dim("token and bucket counts differ"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", self.vocab_size)));
        }
        if let Some(b) = buckets.iter().find(|&&b| b >= self.buckets) {
            return Err(Error::Index(format!("time bucket {b} outside {}", self.buckets)));
        }
        Ok(())
    }

    /// Rows `e_t = phi_loc[x_t] + phi_time[b_t]` on the tape. With
    /// `use_time` off only the location row is used.
    pub fn embed_rows<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[usize],
        buckets: &[usize],
        use_time: bool,
    ) -> Result<Var> {
        self.check(tokens, buckets)?;
        let loc = tape.param(store, self.phi_loc)?;
        let loc = tape.gather_rows(loc, tokens)?;
        if !use_time {
            return Ok(loc);
        }
        let time = tape.param(store, self.phi_time)?;
        let time = tape.gather_rows(time, buckets)?;
        tape.add(loc, time)
    }

    /// The same rows computed directly, `[len × d]`.
    pub fn embed_matrix(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        buckets: &[usize],
        use_time: bool,
    ) -> Result<Tensor> {
        self.check(tokens, buckets)?;
        if tokens.is_empty() {
            return Err(Error::Empty("no positions to embed".into()));
        }
        let loc = store.value(self.phi_loc);
        let time = store.value(self.phi_time);
        let mut data = Vec::with_capacity(tokens.len() * self.d);
        for (&x, &b) in tokens.iter().zip(buckets) {
            if use_time {
                data.extend(loc.row(x).iter().zip(time.row(b)).map(|(a, c)| a + c));
            } else {
                data.extend_from_slice(loc.row(x));
            }
        }
        Tensor::matrix(tokens.len(), self.d, data)
    }
}

/// A single `e_t` vector.
pub fn embed(token: usize, bucket: usize, tables: &EmbeddingTables, store: &ParamStore) -> Result<Tensor> {
    let m = tables.embed_matrix(store, &[token], &[bucket], true)?;
    m.reshape(&[tables.d])
}

/// Window ranges `[s, s+W)` for `s = 0, stride, …`; partial tails are
/// dropped, and a sequence shorter than `W` yields one window over the whole
/// sequence when it has at least two positions.
pub fn make_windows(len: usize, window: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if window < 2 {
        return Err(Error::Config(format!("window length {window} < 2")));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be ≥ 1".into()));
    }
    if len < window {
        return Ok(if len >= 2 { vec![0..len] } else { Vec::new() });
    }
    Ok((0..=len - window)
        .step_by(stride)
        .map(|s| s..s + window)
        .collect())
}

/// A window of one user's sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRef {
    pub seq: usize,
    pub range: Range<usize>,
}

pub fn windows_for(seqs: &[TokenizedSequence], window: usize, stride: usize) -> Result<Vec<WindowRef>> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        for range in make_windows(s.len(), window, stride)? {
            out.push(WindowRef { seq: i, range });
        }
    }
    Ok(out)
}
