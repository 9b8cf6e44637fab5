//! Participation sampling, loopback transport and fixed-order federated
//! averaging of client updates.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientUpdate, PrivacyConfig};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_rounds: u32,
    pub clients_per_round: usize,
    pub global_seed: u64,
    pub local_epochs: usize,
    pub privacy: PrivacyConfig,
    /// Weight each update by its record count instead of the plain mean.
    pub weighted: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            total_rounds: 5,
            clients_per_round: 10,
            global_seed: 0,
            local_epochs: 1,
            privacy: PrivacyConfig::default(),
            weighted: false,
        }
    }
}

/// The global signal of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSignal {
    pub round: u32,
    pub d: u16,
    /// Row-major `d²` mean.
    pub signal: Vec<f64>,
    /// Ascending.
    pub contributing_clients: Vec<String>,
    pub rejected: usize,
}

impl AggregatedSignal {
    pub fn norm(&self) -> f64 {
        self.signal.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// All-zero signal of the same shape.
    pub fn zeroed(&self) -> Self {
        Self {
            signal: vec![0.0; self.signal.len()],
            ..self.clone()
        }
    }
}

/// A seeded sample of `clients_per_round` ids, sorted ascending.
pub fn select_participants(registry: &[String], round: u32, cfg: &RoundConfig) -> Result<Vec<String>> {
    if registry.is_empty() {
        return Err(Error::Empty("no registered clients".into()));
    }
    let k = cfg.clients_per_round;
    if k == 0 || k > registry.len() {
        return Err(Error::Config(format!(
            "cannot sample {k} of {} clients",
            registry.len()
        )));
    }
    let mut ids: Vec<&String> = registry.iter().collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.global_seed, "participants", round as u64));
    let mut out: Vec<String> = sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    out.sort();
    Ok(out)
}

/// Unweighted mean of the finite updates, summed in ascending client order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<AggregatedSignal> {
    aggregate_with(updates, false)
}

pub fn aggregate_with(updates: &[ClientUpdate], weighted: bool) -> Result<AggregatedSignal> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Empty("no updates to aggregate".into()))?;
    let (round, d) = (first.round, first.d);
    let n = d as usize * d as usize;
    for u in updates {
        if u.round != round || u.d != d {
            return Err(Error::Protocol(format!(
                "update from {} is for round {} d={}, expected round {round} d={d}",
                u.client_id, u.round, u.d
            )));
        }
        if u.payload.len() != n {
            return Err(Error::Protocol(format!(
                "update from {} carries {} values, expected {n}",
                u.client_id,
                u.payload.len()
            )));
        }
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol(format!("duplicate update from {}", w[0].client_id)));
    }
    let (ok, bad): (Vec<&ClientUpdate>, Vec<&ClientUpdate>) = sorted.into_iter().partition(|u| u.is_finite());
    if ok.is_empty() {
        return Err(Error::Protocol(format!("all {} updates rejected", bad.len())));
    }
    let mut sum = vec![0.0; n];
    let mut total_weight = 0.0;
    for u in &ok {
        let w = if weighted { u.window_count as f64 } else { 1.0 };
        total_weight += w;
        if weighted {
            for (s, x) in sum.iter_mut().zip(&u.payload) {
                *s += w * x;
            }
        } else {
            for (s, x) in sum.iter_mut().zip(&u.payload) {
                *s += x;
            }
        }
    }
    if !(total_weight > 0.0) {
        return Err(Error::Protocol("updates carry zero total weight".into()));
    }
    sum.iter_mut().for_each(|s| *s /= total_weight);
    Ok(AggregatedSignal {
        round,
        d,
        signal: sum,
        contributing_clients: ok.iter().map(|u| u.client_id.clone()).collect(),
        rejected: bad.len(),
    })
}

/// In-process message queue standing in for the network. Every message is
/// the wire encoding of one [`ClientUpdate`].
#[derive(Debug, Default, Clone)]
pub struct Loopback {
    queue: Vec<Vec<u8>>,
    /// Everything ever sent, kept for audits.
    pub log: Vec<Vec<u8>>,
}

impl Loopback {
    pub fn send(&mut self, bytes: Vec<u8>) {
        self.log.push(bytes.clone());
        self.queue.push(bytes);
    }

    pub fn drain(&mut self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.queue)
    }
}

/// Decodes raw messages and aggregates them; undecodable messages count as
/// rejected.
pub fn aggregate_messages(messages: &[Vec<u8>], weighted: bool) -> Result<AggregatedSignal> {
    let mut undecodable = 0;
    let updates: Vec<ClientUpdate> = messages
        .iter()
        .filter_map(|m| match ClientUpdate::from_bytes(m) {
            Ok(u) => Some(u),
            Err(_) => {
                undecodable += 1;
                None
            }
        })
        .collect();
    if updates.is_empty() {
        return Err(Error::Protocol(format!("all {} messages rejected", messages.len())));
    }
    let mut s = aggregate_with(&updates, weighted)?;
    s.rejected += undecodable;
    Ok(s)
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub participants: usize,
    /// `‖ō‖₂`.
    pub signal_norm: f64,
    pub rejected_count: usize,
    pub wall_ms: u64,
}

impl RoundLog {
    pub fn to_ndjson(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Selects participants, has each train locally and upload through
/// `transport`, then aggregates what arrived.
pub fn run_round(
    clients: &mut [Client],
    cfg: &RoundConfig,
    round: u32,
    transport: &mut Loopback,
) -> Result<(AggregatedSignal, RoundLog)> {
    let start = Instant::now();
    let registry: Vec<String> = clients.iter().map(|c| c.id().to_string()).collect();
    let chosen = select_participants(&registry, round, cfg)?;
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by(|&a, &b| clients[a].id().cmp(clients[b].id()));
    for i in order {
        if chosen.binary_search_by(|id| id.as_str().cmp(clients[i].id())).is_ok() {
            let u = clients[i].local_round(round, cfg.global_seed, cfg.local_epochs, &cfg.privacy)?;
            transport.send(u.to_bytes()?);
        }
    }
    let signal = aggregate_messages(&transport.drain(), cfg.weighted)?;
    let log = RoundLog {
        round,
        participants: chosen.len(),
        signal_norm: signal.norm(),
        rejected_count: signal.rejected,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((signal, log))
}
