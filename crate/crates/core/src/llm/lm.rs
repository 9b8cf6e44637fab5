use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{make_windows, TokenizedSequence};
use crate::error::{Error, Result};
use crate::numeric::nn::{normal, BlockConfig, CausalBlock, LayerNorm};
use crate::numeric::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        BlockConfig::new(self.d_llm, self.heads)?;
        if self.vocab < 2 || self.layers == 0 || self.max_len < 2 {
            return Err(Error::Config(format!("invalid language model config {self:?}")));
        }
        Ok(())
    }
}

/// GPT-style decoder over the venue vocabulary. Pretraining uses a head
/// tied to the token table; once frozen no parameter is trainable.
#[derive(Debug, Clone)]
pub struct FrozenLM {
    pub cfg: LmConfig,
    pub store: ParamStore,
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<CausalBlock>,
    pub ln_f: LayerNorm,
}

/// Flattened stack of token windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
}

impl TokenBatch {
    pub fn new<'t>(windows: impl IntoIterator<Item = &'t [usize]>) -> Self {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        for w in windows {
            tokens.extend_from_slice(w);
            segments.push(w.len());
        }
        Self { tokens, segments }
    }

    /// Row indices that predict a next token, and the tokens they predict.
    pub fn next_token_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut off = 0;
        for &t in &self.segments {
            for i in 0..t.saturating_sub(1) {
                rows.push(off + i);
                targets.push(self.tokens[off + i + 1]);
            }
            off += t;
        }
        (rows, targets)
    }
}

impl FrozenLM {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tok = store.add("tok", normal(&[cfg.vocab, cfg.d_llm], EMBED_STD, &mut rng), true);
        let pos = store.add("pos", normal(&[cfg.max_len, cfg.d_llm], EMBED_STD, &mut rng), true);
        let bc = BlockConfig::new(cfg.d_llm, cfg.heads)?;
        let blocks = (0..cfg.layers)
            .map(|i| CausalBlock::new(&mut store, &format!("block{i}"), bc, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", cfg.d_llm);
        Ok(Self {
            cfg,
            store,
            tok,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_count() == 0
    }

    pub fn freeze(&mut self) {
        self.store.set_trainable(false);
    }

    pub fn check(&self, batch: &TokenBatch) -> Result<()> {
        if batch.tokens.is_empty() {
            return Err(Error::Empty("no tokens".into()));
        }
        if let Some(t) = batch.tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        if let Some(s) = batch.segments.iter().find(|&&s| s > self.cfg.max_len) {
            return Err(Error::dim(format!("sequence of {s} exceeds {} positions", self.cfg.max_len)));
        }
        Ok(())
    }

    /// Token plus positional rows.
    pub fn embed<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, batch: &TokenBatch) -> Result<Var> {
        self.check(batch)?;
        let positions: Vec<usize> = batch.segments.iter().flat_map(|&t| 0..t).collect();
        let tok = tape.param(store, self.tok)?;
        let tok = tape.gather_rows(tok, &batch.tokens)?;
        let pos = tape.param(store, self.pos)?;
        let pos = tape.gather_rows(pos, &positions)?;
        tape.add(tok, pos)
    }

    /// Runs blocks `range` (0-based) over `x`.
    pub fn blocks_range<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        mut x: Var,
        segments: &[usize],
        range: Range<usize>,
    ) -> Result<Var> {
        if range.end > self.blocks.len() {
            return Err(Error::Index(format!("block range {range:?} of {}", self.blocks.len())));
        }
        for b in &self.blocks[range] {
            x = b.forward(tape, store, x, segments)?;
        }
        Ok(x)
    }

    /// Final hidden states `z`.
    pub fn hidden<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, batch: &TokenBatch) -> Result<Var> {
        let x = self.embed(tape, store, batch)?;
        let x = self.blocks_range(tape, store, x, &batch.segments, 0..self.blocks.len())?;
        self.ln_f.forward(tape, store, x)
    }

    /// Logits through the tied head.
    pub fn tied_logits<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, batch: &TokenBatch) -> Result<Var> {
        let z = self.hidden(tape, store, batch)?;
        let tok = tape.param(store, self.tok)?;
        tape.linear(z, tok, None)
    }

    /// Hidden states entering block `index` (0-based), without gradients.
    pub fn hidden_entering(&self, batch: &TokenBatch, index: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = self.embed(&mut tape, &self.store, batch)?;
        let x = self.blocks_range(&mut tape, &self.store, x, &batch.segments, 0..index)?;
        Ok(tape.value(x).clone())
    }

    /// Mean next-token cross-entropy of the tied head over non-overlapping
    /// windows.
    pub fn mean_cross_entropy(&self, seqs: &[TokenizedSequence], window: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in seqs {
            for w in make_windows(s.len(), window.min(self.cfg.max_len), window.min(self.cfg.max_len))? {
                let batch = TokenBatch::new([&s.tokens[w]]);
                let (rows, targets) = batch.next_token_pairs();
                let mut tape = Tape::new();
                let logits = self.tied_logits(&mut tape, &self.store, &batch)?;
                let logits = tape.gather_rows(logits, &rows)?;
                let ce = tape.cross_entropy(logits, &targets)?;
                total += tape.value(ce).data()[0] * rows.len() as f64;
                count += rows.len();
            }
        }
        if count == 0 {
            return Err(Error::Empty("no predictable positions".into()));
        }
        Ok(total / count as f64)
    }

    pub fn perplexity(&self, seqs: &[TokenizedSequence], window: usize) -> Result<f64> {
        Ok(self.mean_cross_entropy(seqs, window)?.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub window: usize,
    pub seed: u64,
}

/// Non-overlapping token windows of every sequence.
pub fn token_windows(seqs: &[TokenizedSequence], window: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for s in seqs {
        for w in make_windows(s.len(), window, window)? {
            out.push(s.tokens[w].to_vec());
        }
    }
    Ok(out)
}

/// Next-token training of every weight with the tied head, then freezing.
/// Returns the mean loss of each epoch.
pub fn pretrain_toy_lm(lm: &mut FrozenLM, train: &[TokenizedSequence], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.batch == 0 || cfg.window < 2 {
        return Err(Error::Config("pretraining needs batch ≥ 1 and window ≥ 2".into()));
    }
    let windows = token_windows(train, cfg.window.min(lm.cfg.max_len))?;
    if windows.is_empty() {
        return Err(Error::Empty("no pretraining windows".into()));
    }
    lm.store.set_trainable(true);
    let mut adam = Adam::new(&lm.store, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch = TokenBatch::new(chunk.iter().map(|&i| windows[i].as_slice()));
            let (rows, targets) = batch.next_token_pairs();
            lm.store.zero_grad();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let logits = lm.tied_logits(&mut tape, &lm.store, &batch)?;
                let logits = tape.gather_rows(logits, &rows)?;
                let ce = tape.cross_entropy(logits, &targets)?;
                (tape.value(ce).data()[0], tape.backward(ce)?)
            };
            grads.accumulate_into(&mut lm.store)?;
            adam.step(&mut lm.store)?;
            total += loss * rows.len() as f64;
            count += rows.len();
        }
        losses.push(total / count as f64);
    }
    lm.freeze();
    Ok(losses)
}
