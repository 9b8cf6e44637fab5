//! Client side: the local causal transformer, its next-embedding training
//! loop and the privatized outer-product summary that is the only thing a
//! client ever uploads.

mod model;
mod privacy;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use model::{batch_sizes, client_forward, local_train_epoch, ClientConfig, ClientModel};
pub use privacy::{
    clip_frobenius, compute_outer_products, privatize, ClientUpdate, OuterProductRecord,
    PrivacyConfig,
};

use crate::encoding::{make_windows, TokenizedSequence};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A participant holding one user's sequence and its local model. Neither
/// leaves this type; [`Client::local_round`] returns only a [`ClientUpdate`].
#[derive(Debug, Clone)]
pub struct Client {
    id: String,
    seq: TokenizedSequence,
    model: ClientModel,
    windows: Vec<Range<usize>>,
    last_loss: Option<f64>,
}

impl Client {
    pub fn new(seq: TokenizedSequence, model: ClientModel) -> Result<Self> {
        let windows = make_windows(seq.len(), model.cfg.window, model.cfg.stride)?;
        if windows.is_empty() {
            return Err(Error::Empty(format!("user {} has no windows", seq.user_id)));
        }
        Ok(Self {
            id: seq.user_id.clone(),
            seq,
            model,
            windows,
            last_loss: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Mean loss of the most recent local epoch.
    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Trains `epochs` local epochs, then summarizes the sequence's
    /// consecutive-embedding outer products. Randomness is seeded from
    /// `(global_seed, client id, round)`.
    pub fn local_round(
        &mut self,
        round: u32,
        global_seed: u64,
        epochs: usize,
        privacy: &PrivacyConfig,
    ) -> Result<ClientUpdate> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(global_seed, &self.id, round as u64));
        for _ in 0..epochs {
            self.last_loss = Some(local_train_epoch(&mut self.model, &self.seq, &self.windows, &mut rng)?);
        }
        let e = self.model.embed_sequence(&self.seq)?;
        let records = compute_outer_products(&e)?;
        let mut update = privatize(&records, privacy, &mut rng)?;
        update.client_id = self.id.clone();
        update.round = round;
        Ok(update)
    }
}
