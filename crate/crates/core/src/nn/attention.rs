//! Single-head dot-product attention, the cross-patch key/value cache, and
//! the attention blocks shared by the UNet, guidance and fusion modules.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use super::layers::{from_tokens, softmax_last, to_tokens, LayerNorm, Linear};
use super::params::{Init, ParamBuilder};
use crate::error::{config_err, internal_err, Error, Result};

/// Bias added to masked logits.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Tensor,
    /// `[batch, queries, keys]`, rows sum to one.
    pub weights: Tensor,
}

/// `q [b, lq, d]`, `k [b, lk, d]`, `v [b, lk, dv]`; `key_mask [b or 1, lk]`
/// holds 1 for valid keys and 0 for padding.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&Tensor>) -> Result<Attended> {
    let d = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != d {
        return Err(config_err!("attention width mismatch: queries {d}, keys {}", k.dim(D::Minus1)?));
    }
    let mut logits = q.matmul(&k.t()?)?.affine(1.0 / (d as f64).sqrt(), 0.0)?;
    if let Some(m) = key_mask {
        let (mb, lk) = m.dims2()?;
        let bias = m.affine(-MASK_BIAS, MASK_BIAS)?.reshape((mb, 1, lk))?;
        logits = logits.broadcast_add(&bias)?;
    }
    let weights = softmax_last(&logits)?;
    let out = weights.matmul(v)?;
    Ok(Attended { out, weights })
}

#[derive(Debug, Clone)]
struct CacheEntry {
    timestep: usize,
    k: Tensor,
    v: Tensor,
}

/// Keys and values of already-denoised patches within one sampler timestep.
///
/// Entries are keyed by `(layer, patch index)`. The store is cleared by
/// [`KvCache::begin_timestep`]; reading an entry written under another
/// timestep is a [`Error::Staleness`] error.
#[derive(Debug, Clone)]
pub struct KvCache {
    timestep: Option<usize>,
    capacity: usize,
    entries: BTreeMap<(String, usize), CacheEntry>,
}

impl KvCache {
    /// `capacity` is the number of predecessor patches a query may read.
    pub fn new(capacity: usize) -> Self {
        Self { timestep: None, capacity, entries: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn timestep(&self) -> Option<usize> {
        self.timestep
    }

    pub fn begin_timestep(&mut self, t: usize) {
        self.entries.clear();
        self.timestep = Some(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: &str, patch: usize, t: usize) -> Result<Option<(Tensor, Tensor)>> {
        match self.entries.get(&(layer.to_string(), patch)) {
            None => Ok(None),
            Some(e) if e.timestep != t => Err(Error::Staleness(format!(
                "layer {layer} patch {patch} written at t={} read at t={t}",
                e.timestep
            ))),
            Some(e) => Ok(Some((e.k.clone(), e.v.clone()))),
        }
    }

    pub fn insert(&mut self, layer: &str, patch: usize, t: usize, k: Tensor, v: Tensor) -> Result<()> {
        if self.timestep != Some(t) {
            return Err(Error::Staleness(format!("insert at t={t} into cache opened at {:?}", self.timestep)));
        }
        let key = (layer.to_string(), patch);
        if self.entries.contains_key(&key) {
            return Err(internal_err!("kv-cache entry for layer {layer} patch {patch} written twice"));
        }
        self.entries.insert(key, CacheEntry { timestep: t, k: k.detach(), v: v.detach() });
        Ok(())
    }
}

/// Which cache entries the current patch reads and where it writes its own.
pub struct CacheSession<'a> {
    pub cache: &'a mut KvCache,
    pub patch: usize,
    pub neighbours: Vec<usize>,
    pub timestep: usize,
}

impl CacheSession<'_> {
    fn gather(&self, layer: &str) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::new();
        for &n in self.neighbours.iter().take(self.cache.capacity()) {
            if let Some(kv) = self.cache.get(layer, n, self.timestep)? {
                out.push(kv);
            }
        }
        Ok(out)
    }
}

/// Attention of `q` over cached predecessor keys followed by the current ones,
/// then stores the current keys. With nothing cached this is plain attention.
pub fn cached_attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    session: &mut CacheSession<'_>,
    layer: &str,
) -> Result<Attended> {
    let cached = session.gather(layer)?;
    let res = if cached.is_empty() {
        attend(q, k, v, None)?
    } else {
        let mut ks: Vec<Tensor> = cached.iter().map(|(k, _)| k.clone()).collect();
        let mut vs: Vec<Tensor> = cached.iter().map(|(_, v)| v.clone()).collect();
        ks.push(k.clone());
        vs.push(v.clone());
        attend(q, &Tensor::cat(&ks, 1)?, &Tensor::cat(&vs, 1)?, None)?
    };
    session.cache.insert(layer, session.patch, session.timestep, k.clone(), v.clone())?;
    Ok(res)
}

/// Pre-norm residual self-attention over the spatial tokens of each frame.
#[derive(Debug, Clone)]
pub struct SpatialSelfAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    name: String,
}

impl SpatialSelfAttention {
    pub fn new(pb: &ParamBuilder, width: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), width)?,
            q: Linear::new(&pb.pp("q"), width, width)?,
            k: Linear::new(&pb.pp("k"), width, width)?,
            v: Linear::new(&pb.pp("v"), width, width)?,
            out: Linear::new(&pb.pp("out"), width, width)?,
            name: pb.prefix().to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `x [n, c, h, w]`.
    pub fn forward(&self, x: &Tensor, session: Option<&mut CacheSession<'_>>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = to_tokens(x)?;
        let normed = self.norm.forward(&tokens)?;
        let (q, k, v) = (self.q.forward(&normed)?, self.k.forward(&normed)?, self.v.forward(&normed)?);
        let att = match session {
            Some(s) => cached_attend(&q, &k, &v, s, &self.name)?,
            None => attend(&q, &k, &v, None)?,
        };
        let y = (tokens + self.out.forward(&att.out)?)?;
        from_tokens(&y, h, w)
    }
}

/// Pre-norm residual self-attention along the frame axis at every spatial site.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl TemporalAttention {
    /// `pb` should end in a `temporal` component so freeze policies see it.
    pub fn new(pb: &ParamBuilder, width: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), width)?,
            q: Linear::new(&pb.pp("q"), width, width)?,
            k: Linear::new(&pb.pp("k"), width, width)?,
            v: Linear::new(&pb.pp("v"), width, width)?,
            out: Linear::with_init(&pb.pp("out"), width, width, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        // [n, c, h, w] -> [h*w, n, c]
        let seq = x.reshape((n, c, h * w))?.permute((2, 0, 1))?.contiguous()?;
        let normed = self.norm.forward(&seq)?;
        let att = attend(&self.q.forward(&normed)?, &self.k.forward(&normed)?, &self.v.forward(&normed)?, None)?;
        let y = (seq + self.out.forward(&att.out)?)?;
        Ok(y.permute((1, 2, 0))?.contiguous()?.reshape((n, c, h, w))?)
    }
}

/// Residual cross-attention from spatial tokens to a context sequence.
/// The output projection starts at zero, so the block is an identity at init.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    width: usize,
    context_width: usize,
}

impl CrossAttention {
    pub fn new(pb: &ParamBuilder, width: usize, context_width: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), width)?,
            q: Linear::new(&pb.pp("q"), width, width)?,
            k: Linear::new(&pb.pp("k"), context_width, width)?,
            v: Linear::new(&pb.pp("v"), context_width, width)?,
            out: Linear::zeros(&pb.pp("out"), width, width)?,
            width,
            context_width,
        })
    }

    /// `tokens [b, l, width]`, `context [b or 1, m, context_width]`.
    pub fn forward_tokens(&self, tokens: &Tensor, context: &Tensor, key_mask: Option<&Tensor>) -> Result<Attended> {
        if tokens.dim(D::Minus1)? != self.width || context.dim(D::Minus1)? != self.context_width {
            return Err(config_err!(
                "cross-attention expects widths ({}, {}), got ({}, {})",
                self.width,
                self.context_width,
                tokens.dim(D::Minus1)?,
                context.dim(D::Minus1)?
            ));
        }
        let b = tokens.dim(0)?;
        let context = if context.dim(0)? == b { context.clone() } else { context.broadcast_as((b, context.dim(1)?, self.context_width))?.contiguous()? };
        let normed = self.norm.forward(tokens)?;
        let att = attend(&self.q.forward(&normed)?, &self.k.forward(&context)?, &self.v.forward(&context)?, key_mask)?;
        let out = (tokens + self.out.forward(&att.out)?)?;
        Ok(Attended { out, weights: att.weights })
    }

    /// Same on a `[n, c, h, w]` grid.
    pub fn forward(&self, x: &Tensor, context: &Tensor, key_mask: Option<&Tensor>) -> Result<Attended> {
        let (_, _, h, w) = x.dims4()?;
        let att = self.forward_tokens(&to_tokens(x)?, context, key_mask)?;
        Ok(Attended { out: from_tokens(&att.out, h, w)?, weights: att.weights })
    }
}
