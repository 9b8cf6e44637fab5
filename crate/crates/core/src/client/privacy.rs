use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// `O_t = e_t ⊗ e_{t+1}`, `[d × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterProductRecord {
    pub t: usize,
    pub o: Tensor,
}

/// One record per consecutive pair of rows of `e` (`[W × d]`).
pub fn compute_outer_products(e: &Tensor) -> Result<Vec<OuterProductRecord>> {
    let (w, _) = e.dims2()?;
    if w < 2 {
        return Err(Error::dim(format!("need at least 2 positions, got {w}")));
    }
    Ok((0..w - 1)
        .map(|t| OuterProductRecord {
            t,
            o: Tensor::outer(e.row(t), e.row(t + 1)),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub sigma: f64,
    /// Frobenius bound per record; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::Config(format!("clip norm must be ≥ 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` so that its norm is at most `bound`, nudging down by an ulp
/// at a time if rounding lands just above it.
pub fn clip_frobenius(v: &mut [f64], bound: f64) {
    let n = frobenius(v);
    if n <= bound {
        return;
    }
    let s = bound / n;
    v.iter_mut().for_each(|x| *x *= s);
    while frobenius(v) > bound {
        v.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
    }
}

/// The only artifact a client sends: the mean of its clipped, noised,
/// flattened outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    /// Number of records averaged into the payload.
    pub window_count: u32,
    pub d: u16,
    pub sigma: f32,
    pub clip: f32,
    /// Row-major `d²` payload.
    pub payload: Vec<f64>,
}

/// Clips each record, flattens it row-major, adds `N(0, σ²)` to every
/// coordinate and averages. The noise is drawn from `rng` in record order.
pub fn privatize(
    records: &[OuterProductRecord],
    cfg: &PrivacyConfig,
    rng: &mut impl Rng,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("no outer-product records".into()))?;
    let (d, _) = first.o.dims2()?;
    if d > u16::MAX as usize {
        return Err(Error::dim(format!("d = {d} does not fit the wire header")));
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut sum = vec![0.0; d * d];
    let mut buf = vec![0.0; d * d];
    for r in records {
        if r.o.shape() != [d, d] {
            return Err(Error::dim(format!("record of shape {:?} among d = {d}", r.o.shape())));
        }
        buf.copy_from_slice(r.o.data());
        if cfg.clip_norm > 0.0 {
            clip_frobenius(&mut buf, cfg.clip_norm);
        }
        if cfg.sigma > 0.0 {
            for x in buf.iter_mut() {
                *x += noise.sample(rng);
            }
        }
        for (s, x) in sum.iter_mut().zip(&buf) {
            *s += x;
        }
    }
    let n = records.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(ClientUpdate {
        client_id: String::new(),
        round: 0,
        window_count: records.len() as u32,
        d: d as u16,
        sigma: cfg.sigma as f32,
        clip: cfg.clip_norm as f32,
        payload: sum,
    })
}

impl ClientUpdate {
    pub fn is_finite(&self) -> bool {
        self.payload.iter().all(|x| x.is_finite())
    }

    /// Payload reshaped to `[d × d]`.
    pub fn matrix(&self) -> Result<Tensor> {
        let d = self.d as usize;
        Tensor::matrix(d, d, self.payload.clone())
    }

    /// Payload rounded to wire precision.
    pub fn quantized(mut self) -> Self {
        self.payload.iter_mut().for_each(|x| *x = *x as f32 as f64);
        self
    }

    /// `u16 id length ‖ id ‖ u32 round ‖ u32 window_count ‖ u16 d ‖ f32 σ ‖
    /// f32 clip ‖ d² f32`, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.d as usize;
        if self.payload.len() != d * d {
            return Err(Error::dim(format!(
                "payload of {} for d = {d}",
                self.payload.len()
            )));
        }
        let id = self.client_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Protocol("client id longer than 65535 bytes".into()))?;
        let mut out = Vec::with_capacity(2 + id.len() + 18 + 4 * d * d);
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.window_count.to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend_from_slice(&self.sigma.to_le_bytes());
        out.extend_from_slice(&self.clip.to_le_bytes());
        for &x in &self.payload {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let id_len = u16::from_le_bytes(r.take()?) as usize;
        let id = std::str::from_utf8(r.slice(id_len)?)
            .map_err(|_| Error::Protocol("client id is not UTF-8".into()))?
            .to_string();
        let round = u32::from_le_bytes(r.take()?);
        let window_count = u32::from_le_bytes(r.take()?);
        let d = u16::from_le_bytes(r.take()?);
        let sigma = f32::from_le_bytes(r.take()?);
        let clip = f32::from_le_bytes(r.take()?);
        let n = d as usize * d as usize;
        let payload = r
            .slice(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after update",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            client_id: id,
            round,
            window_count,
            d,
            sigma,
            clip,
            payload,
        })
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn slice(&mut self, n: usize) -> Result<&'b [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Protocol("truncated update".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.slice(N)?.try_into().expect("slice of length N"))
    }
}
