use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::lm::{FrozenLM, TokenBatch};
use crate::numeric::checkpoint::{self, Manifest};
use crate::numeric::nn::Linear;
use crate::numeric::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `W1 · GELU(W0 x + b0) + b1`.
    Mlp,
    /// `W x + b`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    /// 1-based index of the block whose input receives the signal.
    pub l_k: usize,
    pub scale: f64,
    /// Off means the signal never enters the model.
    pub enabled: bool,
}

impl InjectionConfig {
    /// Mid-stack injection: `l_k = L / 2`.
    pub fn mid(layers: usize) -> Self {
        Self {
            l_k: (layers / 2).max(1),
            scale: 1.0,
            enabled: true,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.l_k < 1 || self.l_k > layers {
            return Err(Error::Config(format!(
                "injection layer {} outside 1..={layers}",
                self.l_k
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("injection scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Side of the signal matrix; the projection input has `d²` entries.
    pub d: usize,
    pub d1: usize,
    pub d_llm: usize,
    pub vocab: usize,
    pub kind: ProjectionKind,
    pub injection: InjectionConfig,
    pub lr: f64,
}

/// `Ψ` and `W_out`, the only trainable weights of the conditioned model.
#[derive(Debug, Clone)]
pub struct Adapters {
    pub cfg: AdapterConfig,
    pub store: ParamStore,
    pub first: Linear,
    pub second: Option<Linear>,
    pub head: Linear,
    adam: Adam,
}

impl Adapters {
    pub fn new(cfg: AdapterConfig, seed: u64) -> Result<Self> {
        if cfg.d == 0 || cfg.d1 == 0 || cfg.d_llm == 0 || cfg.vocab == 0 {
            return Err(Error::Config(format!("invalid adapter config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d2 = cfg.d * cfg.d;
        let (first, second) = match cfg.kind {
            ProjectionKind::Mlp => {
                let a = Linear::new(&mut store, "psi.0", d2, cfg.d1, true, &mut rng);
                let b = Linear::new(&mut store, "psi.1", cfg.d1, cfg.d_llm, true, &mut rng);
                (a, Some(b))
            }
            ProjectionKind::Linear => (Linear::new(&mut store, "psi.0", d2, cfg.d_llm, true, &mut rng), None),
        };
        let head = Linear::new(&mut store, "head", cfg.d_llm, cfg.vocab, false, &mut rng);
        let adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
        Ok(Self {
            cfg,
            store,
            first,
            second,
            head,
            adam,
        })
    }

    pub fn projection_numel(&self) -> usize {
        self.first.numel() + self.second.map_or(0, |l| l.numel())
    }

    /// `h̃ = Ψ(signal)` on the tape.
    pub fn project_on<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, signal: Var) -> Result<Var> {
        let n = tape.value(signal).len();
        if n != self.cfg.d * self.cfg.d || tape.value(signal).shape().len() != 1 {
            return Err(Error::dim(format!(
                "projection expects a vector of {} entries, got {:?}",
                self.cfg.d * self.cfg.d,
                tape.value(signal).shape()
            )));
        }
        let h = self.first.forward(tape, store, signal)?;
        match self.second {
            Some(second) => {
                let h = tape.gelu(h)?;
                second.forward(tape, store, h)
            }
            None => Ok(h),
        }
    }

    pub fn project(&self, signal: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.constant(signal.clone())?;
        let h = self.project_on(&mut tape, &self.store, s)?;
        Ok(tape.value(h).clone())
    }

    pub fn save(&self, prefix: &Path) -> Result<Manifest> {
        let c = &self.cfg;
        let mut meta = BTreeMap::new();
        meta.insert("l_k".into(), c.injection.l_k.into());
        meta.insert("scale".into(), c.injection.scale.into());
        meta.insert("injection".into(), c.injection.enabled.into());
        meta.insert("d".into(), c.d.into());
        meta.insert("d1".into(), c.d1.into());
        meta.insert("d_llm".into(), c.d_llm.into());
        meta.insert("vocab".into(), c.vocab.into());
        meta.insert("projection".into(), serde_json::to_value(c.kind)?);
        checkpoint::save(prefix, &[("adapter", &self.store)], meta)
    }
}

/// `W_out · z` with `scale·h̃` added to every row entering block `l_k`.
/// `h_tilde = None` runs the plain model.
pub fn logits_on<'a>(
    tape: &mut Tape<'a>,
    lm: &'a FrozenLM,
    adapters: &'a Adapters,
    batch: &TokenBatch,
    h_tilde: Option<Var>,
) -> Result<Var> {
    let inj = adapters.cfg.injection;
    inj.validate(lm.cfg.layers)?;
    let x = lm.embed(tape, &lm.store, batch)?;
    let split = inj.l_k - 1;
    let x = lm.blocks_range(tape, &lm.store, x, &batch.segments, 0..split)?;
    let x = inject(tape, x, h_tilde, inj)?;
    let x = lm.blocks_range(tape, &lm.store, x, &batch.segments, split..lm.blocks.len())?;
    head_on(tape, lm, adapters, x)
}

fn inject(tape: &mut Tape<'_>, x: Var, h_tilde: Option<Var>, inj: InjectionConfig) -> Result<Var> {
    match h_tilde {
        Some(h) if inj.enabled => {
            let h = if inj.scale == 1.0 { h } else { tape.scale(h, inj.scale)? };
            tape.add_row(x, h)
        }
        _ => Ok(x),
    }
}

fn head_on<'a>(tape: &mut Tape<'a>, lm: &'a FrozenLM, adapters: &'a Adapters, x: Var) -> Result<Var> {
    let z = lm.ln_f.forward(tape, &lm.store, x)?;
    adapters.head.forward(tape, &adapters.store, z)
}

/// Logits `[T × |V|]` of one token sequence conditioned on `h_tilde`.
pub fn inject_forward(tokens: &[usize], h_tilde: &Tensor, lm: &FrozenLM, adapters: &Adapters) -> Result<Tensor> {
    if h_tilde.len() != lm.cfg.d_llm {
        return Err(Error::dim(format!(
            "h̃ has {} entries, model width is {}",
            h_tilde.len(),
            lm.cfg.d_llm
        )));
    }
    let batch = TokenBatch::new([tokens]);
    let mut tape = Tape::new();
    let h = tape.constant(h_tilde.clone())?;
    let l = logits_on(&mut tape, lm, adapters, &batch, Some(h))?;
    Ok(tape.value(l).clone())
}

/// Logits with no conditioning at all.
pub fn plain_forward(tokens: &[usize], lm: &FrozenLM, adapters: &Adapters) -> Result<Tensor> {
    let batch = TokenBatch::new([tokens]);
    let mut tape = Tape::new();
    let l = logits_on(&mut tape, lm, adapters, &batch, None)?;
    Ok(tape.value(l).clone())
}

/// Token windows with the frozen hidden states entering the injection
/// block precomputed once.
#[derive(Debug, Clone)]
pub struct CachedWindows {
    pub windows: Vec<Vec<usize>>,
    pub hidden: Vec<Tensor>,
    pub split: usize,
}

impl CachedWindows {
    pub fn build(lm: &FrozenLM, windows: Vec<Vec<usize>>, inj: &InjectionConfig) -> Result<Self> {
        inj.validate(lm.cfg.layers)?;
        let split = inj.l_k - 1;
        let hidden = windows
            .iter()
            .map(|w| lm.hidden_entering(&TokenBatch::new([w.as_slice()]), split))
            .collect::<Result<_>>()?;
        Ok(Self { windows, hidden, split })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn stack(&self, idx: &[usize]) -> Result<(TokenBatch, Tensor)> {
        let batch = TokenBatch::new(idx.iter().map(|&i| self.windows[i].as_slice()));
        let w = self.hidden[idx[0]].shape()[1];
        let mut data = Vec::with_capacity(batch.tokens.len() * w);
        for &i in idx {
            data.extend_from_slice(self.hidden[i].data());
        }
        Ok((batch.clone(), Tensor::matrix(batch.tokens.len(), w, data)?))
    }
}

/// Mean next-token cross-entropy of a batch of cached windows.
pub fn adapter_loss_on<'a>(
    tape: &mut Tape<'a>,
    lm: &'a FrozenLM,
    adapters: &'a Adapters,
    cache: &CachedWindows,
    idx: &[usize],
    signal: &Tensor,
) -> Result<(Var, usize)> {
    let inj = adapters.cfg.injection;
    if cache.split != inj.l_k - 1 {
        return Err(Error::Contract("cache was built for a different injection layer".into()));
    }
    let (batch, hidden) = cache.stack(idx)?;
    let (rows, targets) = batch.next_token_pairs();
    let x = tape.constant(hidden)?;
    let h = if inj.enabled {
        let s = tape.constant(signal.clone())?;
        Some(adapters.project_on(tape, &adapters.store, s)?)
    } else {
        None
    };
    let x = inject(tape, x, h, inj)?;
    let x = lm.blocks_range(tape, &lm.store, x, &batch.segments, cache.split..lm.blocks.len())?;
    let logits = head_on(tape, lm, adapters, x)?;
    let logits = tape.gather_rows(logits, &rows)?;
    Ok((tape.cross_entropy(logits, &targets)?, rows.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Trains `Ψ` and `W_out` against the frozen model. Epoch `e` conditions
/// on `signals[e·R / epochs]`, so a stream of `R` round signals is walked
/// in order. Returns the mean loss of each epoch.
pub fn train_adapters(
    lm: &FrozenLM,
    adapters: &mut Adapters,
    signals: &[Tensor],
    cache: &CachedWindows,
    cfg: &AdapterTrainConfig,
) -> Result<Vec<f64>> {
    if !lm.is_frozen() {
        return Err(Error::Contract("adapters train only against a frozen model".into()));
    }
    if signals.is_empty() {
        return Err(Error::Empty("no round signals".into()));
    }
    if cache.is_empty() {
        return Err(Error::Empty("no adapter training windows".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("adapter batch must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let signal = &signals[e * signals.len() / cfg.epochs];
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch) {
            adapters.store.zero_grad();
            let (loss, n, grads) = {
                let mut tape = Tape::new();
                let (l, n) = adapter_loss_on(&mut tape, lm, adapters, cache, chunk, signal)?;
                (tape.value(l).data()[0], n, tape.backward(l)?)
            };
            grads.accumulate_into(&mut adapters.store)?;
            adapters.adam.step(&mut adapters.store)?;
            total += loss * n as f64;
            count += n;
        }
        losses.push(total / count.max(1) as f64);
    }
    Ok(losses)
}

/// The `k` highest entries of `row`, ties broken by lower index.
pub fn rank_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Ranked next-token ids after the final position of `tokens`.
pub fn predict_next(
    tokens: &[usize],
    h_tilde: &Tensor,
    lm: &FrozenLM,
    adapters: &Adapters,
    k: usize,
) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::Empty("no context tokens".into()));
    }
    if k == 0 || k > adapters.cfg.vocab {
        return Err(Error::Config(format!("k = {k} outside 1..={}", adapters.cfg.vocab)));
    }
    let logits = inject_forward(tokens, h_tilde, lm, adapters)?;
    Ok(rank_top_k(logits.row(tokens.len() - 1), k))
}
