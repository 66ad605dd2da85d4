//! Position-aware global frame and prompt features.
//!
//! Global frames are tokenized by a small patchify encoder, captions by a
//! hashed-vocabulary text encoder. Both token sets are fused with a Fourier
//! embedding of the current patch's normalized bounding box and then read by
//! the guidance network through cross-attention.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{input_err, Result};
use crate::nn::layers::{timestep_embedding, to_tokens};
use crate::nn::{attend, Conv2d, Init, LayerNorm, Linear, ParamBuilder};
use crate::rng::fnv1a;
use crate::volume::FrameVolume;

pub const DEFAULT_BANDS: usize = 8;
pub const VOCAB_SIZE: usize = 4096;
pub const MAX_CAPTION_TOKENS: usize = 64;

/// Per coordinate `u`: `[sin(2^k pi u) for k < L, cos(2^k pi u) for k < L]`;
/// coordinates in bbox order, total length `8 L`.
pub fn fourier_embed(norm_bbox: [f32; 4], bands: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(8 * bands);
    for &u in &norm_bbox {
        if !(0.0..=1.0).contains(&u) {
            return Err(input_err!("bbox coordinate {u} outside [0,1]"));
        }
        let u = f64::from(u);
        for k in 0..bands {
            out.push((2f64.powi(k as i32) * PI * u).sin() as f32);
        }
        for k in 0..bands {
            out.push((2f64.powi(k as i32) * PI * u).cos() as f32);
        }
    }
    Ok(out)
}

pub fn fourier_tensor(norm_bbox: [f32; 4], bands: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let v = fourier_embed(norm_bbox, bands)?;
    let len = v.len();
    Ok(Tensor::from_vec(v, (1, len), device)?.to_dtype(dtype)?)
}

/// Lowercased alphanumeric words hashed into the vocabulary, truncated.
pub fn tokenize(caption: &str) -> Vec<u32> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(MAX_CAPTION_TOKENS)
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % VOCAB_SIZE as u64) as u32)
        .collect()
}

/// Patch tokens of each global frame, `[n, K, width]`; no class token.
#[derive(Debug, Clone)]
pub struct GlobalFrameFeature {
    pub tokens: Tensor,
    pub position_fused: bool,
}

/// Caption tokens `[b, M, width]` and key mask `[b, M]` (1 valid, 0 padding).
#[derive(Debug, Clone)]
pub struct GlobalPromptFeature {
    pub tokens: Tensor,
    pub mask: Tensor,
    pub position_fused: bool,
}

/// Convolutional patch tokenizer; swap point for a frozen pretrained encoder.
#[derive(Debug, Clone)]
pub struct FrameEncoder {
    patchify: Conv2d,
    mix: Conv2d,
    pub patch: usize,
    pub width: usize,
}

impl FrameEncoder {
    pub fn new(pb: &ParamBuilder, patch: usize, width: usize) -> Result<Self> {
        Ok(Self {
            patchify: Conv2d::new(&pb.pp("patchify"), 3, width, patch, patch, 0)?,
            mix: Conv2d::new(&pb.pp("mix"), width, width, 1, 1, 0)?,
            patch,
            width,
        })
    }

    /// `frames [n, 3, h, w]` -> `[n, (h/patch)(w/patch), width]`.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let x = self.patchify.forward(frames)?.silu()?;
        let x = self.mix.forward(&x)?;
        to_tokens(&x)
    }

    pub fn tokens_per_frame(&self, h: usize, w: usize) -> usize {
        (h / self.patch) * (w / self.patch)
    }
}

/// Resizes global frames to `target` and tokenizes them.
pub fn encode_global_frames(
    encoder: &FrameEncoder,
    frames: &FrameVolume,
    target: (usize, usize),
    device: &Device,
    dtype: DType,
) -> Result<GlobalFrameFeature> {
    let resized = if (frames.height(), frames.width()) == target { frames.clone() } else { frames.resize(target.0, target.1)? };
    let x = resized.to_tensor(device, dtype)?;
    let x = if x.dim(1)? == 1 { x.repeat((1, 3, 1, 1))? } else { x };
    Ok(GlobalFrameFeature { tokens: encoder.forward(&x)?, position_fused: false })
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    pub width: usize,
}

impl TextEncoder {
    pub fn new(pb: &ParamBuilder, width: usize) -> Result<Self> {
        Ok(Self {
            embed: pb.get((VOCAB_SIZE, width), "embed", Init::Normal(0.5))?,
            norm: LayerNorm::new(&pb.pp("norm"), width)?,
            q: Linear::new(&pb.pp("q"), width, width)?,
            k: Linear::new(&pb.pp("k"), width, width)?,
            v: Linear::new(&pb.pp("v"), width, width)?,
            out: Linear::new(&pb.pp("out"), width, width)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), width)?,
            mlp1: Linear::new(&pb.pp("mlp1"), width, 2 * width)?,
            mlp2: Linear::new(&pb.pp("mlp2"), 2 * width, width)?,
            width,
        })
    }

    /// Encodes a batch of captions, padded to the longest with masked tokens.
    /// Empty captions become a single masked-in padding token.
    pub fn forward(&self, captions: &[&str]) -> Result<GlobalPromptFeature> {
        let device = self.embed.device().clone();
        let dtype = self.embed.dtype();
        let ids: Vec<Vec<u32>> = captions.iter().map(|c| tokenize(c)).collect();
        let m = ids.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = ids.len();
        let mut flat = Vec::with_capacity(b * m);
        let mut mask = Vec::with_capacity(b * m);
        for row in &ids {
            for i in 0..m {
                flat.push(row.get(i).copied().unwrap_or(0));
                // an all-padding row keeps its first slot so softmax stays defined
                mask.push(if i < row.len() || (row.is_empty() && i == 0) { 1f32 } else { 0.0 });
            }
        }
        let idx = Tensor::from_vec(flat, b * m, &device)?;
        let emb = self.embed.index_select(&idx, 0)?.reshape((b, m, self.width))?;
        let pos: Vec<usize> = (0..m).collect();
        let pos = timestep_embedding(&pos, self.width, &device, dtype)?.unsqueeze(0)?;
        let x = emb.broadcast_add(&pos)?;
        let mask = Tensor::from_vec(mask, (b, m), &device)?.to_dtype(dtype)?;
        let h = self.norm.forward(&x)?;
        let att = attend(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?, Some(&mask))?;
        let x = (x + self.out.forward(&att.out)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + self.mlp2.forward(&self.mlp1.forward(&h)?.silu()?)?)?;
        Ok(GlobalPromptFeature { tokens: x, mask, position_fused: false })
    }
}

/// Concatenates each token with the projected bbox embedding and projects
/// back to the token width. The re-projection starts as `[I | I]`.
#[derive(Debug, Clone)]
pub struct PositionFuser {
    pub bbox_proj: Linear,
    pub reproject: Linear,
    pub width: usize,
    pub bands: usize,
}

impl PositionFuser {
    pub fn new(pb: &ParamBuilder, width: usize, bands: usize) -> Result<Self> {
        let eye = Tensor::eye(width, pb.dtype(), pb.device())?;
        let init = Tensor::cat(&[&eye, &eye], 1)?;
        Ok(Self {
            bbox_proj: Linear::new(&pb.pp("bbox_proj"), 8 * bands, width)?,
            reproject: Linear::with_init(&pb.pp("reproject"), 2 * width, width, Init::Tensor(init))?,
            width,
            bands,
        })
    }

    /// `tokens [b, K, d]`, `femb [1 or b, 8 L]` -> `[b, K, d]`.
    pub fn forward(&self, tokens: &Tensor, femb: &Tensor) -> Result<Tensor> {
        let (b, k, d) = tokens.dims3()?;
        let e = self.bbox_proj.forward(femb)?;
        let e = e.unsqueeze(1)?.broadcast_as((b, k, d))?.contiguous()?;
        self.reproject.forward(&Tensor::cat(&[tokens, &e], 2)?)
    }
}

/// Trainable fusion parameters shared by every guidance level.
#[derive(Debug, Clone)]
pub struct FusionModule {
    pub frame_encoder: FrameEncoder,
    pub text_encoder: TextEncoder,
    pub frame_position: PositionFuser,
    pub prompt_position: PositionFuser,
    pub width: usize,
    pub bands: usize,
}

impl FusionModule {
    pub fn new(pb: &ParamBuilder, width: usize, frame_patch: usize, bands: usize) -> Result<Self> {
        Ok(Self {
            frame_encoder: FrameEncoder::new(&pb.pp("frame_encoder"), frame_patch, width)?,
            text_encoder: TextEncoder::new(&pb.pp("text_encoder"), width)?,
            frame_position: PositionFuser::new(&pb.pp("frame_position"), width, bands)?,
            prompt_position: PositionFuser::new(&pb.pp("prompt_position"), width, bands)?,
            width,
            bands,
        })
    }

    pub fn frame_feature(&self, global_frames: &Tensor, norm_bbox: [f32; 4]) -> Result<GlobalFrameFeature> {
        let tokens = self.frame_encoder.forward(global_frames)?;
        let femb = fourier_tensor(norm_bbox, self.bands, tokens.device(), tokens.dtype())?;
        Ok(GlobalFrameFeature { tokens: self.frame_position.forward(&tokens, &femb)?, position_fused: true })
    }

    pub fn prompt_feature(&self, caption: &str, norm_bbox: [f32; 4]) -> Result<GlobalPromptFeature> {
        let raw = self.text_encoder.forward(&[caption])?;
        let femb = fourier_tensor(norm_bbox, self.bands, raw.tokens.device(), raw.tokens.dtype())?;
        Ok(GlobalPromptFeature {
            tokens: self.prompt_position.forward(&raw.tokens, &femb)?,
            mask: raw.mask,
            position_fused: true,
        })
    }
}
