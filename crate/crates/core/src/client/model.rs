use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EmbeddingTables, TokenizedSequence, TIME_BUCKETS};
use crate::error::{Error, Result};
use crate::numeric::nn::{normal, BlockConfig, CausalBlock, LayerNorm, Linear};
use crate::numeric::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};

const POS_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Embedding width.
    pub d: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub stride: usize,
    /// Adds the time-of-week embedding to every position.
    pub use_time: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            d: 128,
            hidden: 256,
            heads: 4,
            layers: 6,
            lr: 1e-4,
            batch: 64,
            window: 32,
            stride: 1,
            use_time: true,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        BlockConfig::new(self.hidden, self.heads)?;
        if self.d == 0 || self.layers == 0 || self.batch == 0 || self.window < 2 || self.stride == 0 {
            return Err(Error::Config(format!("invalid client config {self:?}")));
        }
        if self.d > u16::MAX as usize {
            return Err(Error::Config(format!("d = {} does not fit the wire header", self.d)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("client learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Causal transformer `f_θ` over embedding rows, together with the
/// embedding tables it trains and their optimizer state.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub cfg: ClientConfig,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub in_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<CausalBlock>,
    pub ln_f: LayerNorm,
    pub out_proj: Linear,
    adam: Adam,
}

impl ClientModel {
    /// Models built with the same `init_seed` start from identical weights.
    pub fn new(vocab_size: usize, cfg: ClientConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, vocab_size, TIME_BUCKETS, cfg.d, &mut rng);
        let in_proj = Linear::new(&mut store, "in_proj", cfg.d, cfg.hidden, true, &mut rng);
        let pos = store.add("pos", normal(&[cfg.window, cfg.hidden], POS_STD, &mut rng), true);
        let bc = BlockConfig::new(cfg.hidden, cfg.heads)?;
        let blocks = (0..cfg.layers)
            .map(|i| CausalBlock::new(&mut store, &format!("block{i}"), bc, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", cfg.hidden);
        let out_proj = Linear::new(&mut store, "out_proj", cfg.hidden, cfg.d, true, &mut rng);
        let adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
        Ok(Self {
            cfg,
            store,
            tables,
            in_proj,
            pos,
            blocks,
            ln_f,
            out_proj,
            adam,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// `H` for stacked sequences of embedding rows `e` (`[N × d]`).
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        e: Var,
        segments: &[usize],
    ) -> Result<Var> {
        let (_, d) = tape.value(e).dims2()?;
        if d != self.cfg.d {
            return Err(Error::dim(format!("client model expects width {}, got {d}", self.cfg.d)));
        }
        if let Some(&t) = segments.iter().find(|&&t| t > self.cfg.window) {
            return Err(Error::dim(format!(
                "sequence of {t} exceeds {} positions",
                self.cfg.window
            )));
        }
        let positions: Vec<usize> = segments.iter().flat_map(|&t| 0..t).collect();
        let x = self.in_proj.forward(tape, store, e)?;
        let pos = tape.param(store, self.pos)?;
        let pos = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x, segments)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        self.out_proj.forward(tape, store, x)
    }

    /// Summed next-embedding loss over a set of windows, divided by the
    /// window count. Targets are the embeddings of the following positions,
    /// held constant.
    pub fn batch_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        seq: &TokenizedSequence,
        windows: &[Range<usize>],
    ) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::Empty("no windows in batch".into()));
        }
        let mut tokens = Vec::new();
        let mut buckets = Vec::new();
        let mut segments = Vec::with_capacity(windows.len());
        let mut pred = Vec::new();
        let mut next = Vec::new();
        for w in windows {
            if w.len() < 2 || w.end > seq.len() {
                return Err(Error::Index(format!("window {w:?} over sequence of {}", seq.len())));
            }
            let off = tokens.len();
            tokens.extend_from_slice(&seq.tokens[w.clone()]);
            buckets.extend_from_slice(&seq.time_buckets[w.clone()]);
            segments.push(w.len());
            pred.extend(off..off + w.len() - 1);
            next.extend(off + 1..off + w.len());
        }
        let e = self
            .tables
            .embed_rows(tape, store, &tokens, &buckets, self.cfg.use_time)?;
        let target = {
            let ev = tape.value(e);
            let d = self.cfg.d;
            let mut data = Vec::with_capacity(next.len() * d);
            for &r in &next {
                data.extend_from_slice(ev.row(r));
            }
            Tensor::matrix(next.len(), d, data)?
        };
        let target = tape.constant(target)?;
        let h = self.forward(tape, store, e, &segments)?;
        let h = tape.gather_rows(h, &pred)?;
        let loss = tape.mse_sum(h, target)?;
        tape.scale(loss, 1.0 / windows.len() as f64)
    }

    /// One Adam step on the given windows; returns the summed window loss.
    pub fn train_step(&mut self, seq: &TokenizedSequence, windows: &[Range<usize>]) -> Result<f64> {
        self.store.zero_grad();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let l = self.batch_loss(&mut tape, &self.store, seq, windows)?;
            (tape.value(l).data()[0], tape.backward(l)?)
        };
        grads.accumulate_into(&mut self.store)?;
        self.adam.step(&mut self.store)?;
        Ok(loss * windows.len() as f64)
    }

    /// Embedding rows of a whole sequence.
    pub fn embed_sequence(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        self.tables
            .embed_matrix(&self.store, &seq.tokens, &seq.time_buckets, self.cfg.use_time)
    }
}

/// `H = f_θ(E)` for one window `E` (`[W × d]`), without recording gradients.
pub fn client_forward(e: &Tensor, model: &ClientModel) -> Result<Tensor> {
    let (w, d) = e.dims2()?;
    if w < 2 {
        return Err(Error::dim(format!("client_forward needs at least 2 rows, got {w}")));
    }
    if d != model.cfg.d {
        return Err(Error::dim(format!("expected width {}, got {d}", model.cfg.d)));
    }
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone())?;
    let h = model.forward(&mut tape, &model.store, ev, &[w])?;
    Ok(tape.value(h).clone())
}

/// One pass over `windows` in an order drawn from `rng`, in batches of at
/// most `cfg.batch`. Returns the mean per-window loss.
pub fn local_train_epoch(
    model: &mut ClientModel,
    seq: &TokenizedSequence,
    windows: &[Range<usize>],
    rng: &mut impl Rng,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batch = Vec::with_capacity(model.cfg.batch);
    for chunk in order.chunks(model.cfg.batch) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| windows[i].clone()));
        total += model.train_step(seq, &batch)?;
    }
    Ok(total / windows.len() as f64)
}

/// Batch sizes one epoch will use.
pub fn batch_sizes(windows: usize, batch: usize) -> Vec<usize> {
    (0..windows)
        .step_by(batch.max(1))
        .map(|s| batch.min(windows - s))
        .collect()
}
