//! Layers built on the tape: linear maps, layer norm and the pre-norm causal
//! transformer block shared by the client model and the language model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Xavier-uniform `[rows × cols]`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("non-zero extents")
}

/// `N(0, std²)` entries.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-zero extents")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(d_out, d_in, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = match self.b {
            Some(b) => Some(tape.param(store, b)?),
            None => None,
        };
        tape.linear(x, w, b)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl BlockConfig {
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            hidden,
            heads,
            ff_mult: 4,
        })
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a GELU MLP.
#[derive(Debug, Clone)]
pub struct CausalBlock {
    pub cfg: BlockConfig,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl CausalBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let ff = h * cfg.ff_mult;
        Self {
            cfg,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), h),
            q: Linear::new(store, &format!("{name}.attn.q"), h, h, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), h, h, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), h, h, true, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), h, h, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), h),
            ff1: Linear::new(store, &format!("{name}.ff1"), h, ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, h, true, rng),
        }
    }

    /// `x` is `[N × hidden]` holding sequences of the given `segments` lengths.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        segments: &[usize],
    ) -> Result<Var> {
        let (_, h) = tape.value(x).dims2()?;
        if h != self.cfg.hidden {
            return Err(Error::dim(format!(
                "block expects width {}, got {h}",
                self.cfg.hidden
            )));
        }
        let a = self.ln1.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, a)?;
        let k = self.k.forward(tape, store, a)?;
        let v = self.v.forward(tape, store, a)?;
        let att = tape.causal_attention(q, k, v, self.cfg.heads, segments)?;
        let att = self.o.forward(tape, store, att)?;
        let x = tape.add(x, att)?;
        let f = self.ln2.forward(tape, store, x)?;
        let f = self.ff1.forward(tape, store, f)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, store, f)?;
        tape.add(x, f)
    }

    pub fn numel(&self) -> usize {
        let h = self.cfg.hidden;
        4 * h + self.q.numel() + self.k.numel() + self.v.numel() + self.o.numel()
            + self.ff1.numel()
            + self.ff2.numel()
    }
}

/// Runs one block over a single `[T × h]` sequence without recording
/// gradients.
pub fn causal_attention_block(
    x: &Tensor,
    block: &CausalBlock,
    store: &ParamStore,
) -> Result<Tensor> {
    let (t, _) = x.dims2()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let y = block.forward(&mut tape, store, xv, &[t])?;
    Ok(tape.value(y).clone())
}
