use candle_core::{DType, Device, Tensor};

use super::{upsample_to, BackboneConfig, PlainRes};
use crate::error::{input_err, Result};
use crate::latent::LatentVolume;
use crate::nn::{Conv2d, Init, ParamBuilder};
use crate::volume::FrameVolume;

/// Convolutional latent autoencoder. Latents are multiplied by a stored
/// scale (fitted after training) so that they have roughly unit variance.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    enc_in: Conv2d,
    enc_stages: Vec<(Conv2d, PlainRes)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<(Conv2d, PlainRes)>,
    dec_out: Conv2d,
    latent_scale: Tensor,
    stride: usize,
}

impl Autoencoder {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let w = &cfg.ae_widths;
        let enc_in = Conv2d::same(&pb.pp("enc_in"), 3, w[0])?;
        let mut enc_stages = Vec::new();
        for i in 1..w.len() {
            let p = pb.pp(&format!("enc{i}"));
            enc_stages.push((Conv2d::new(&p.pp("down"), w[i - 1], w[i], 3, 2, 1)?, PlainRes::new(&p.pp("res"), w[i])?));
        }
        let last = *w.last().expect("validated");
        let enc_out = Conv2d::same(&pb.pp("enc_out"), last, cfg.latent_channels)?;
        let dec_in = Conv2d::same(&pb.pp("dec_in"), cfg.latent_channels, last)?;
        let mut dec_stages = Vec::new();
        for i in (1..w.len()).rev() {
            let p = pb.pp(&format!("dec{i}"));
            dec_stages.push((Conv2d::same(&p.pp("conv"), w[i], w[i - 1])?, PlainRes::new(&p.pp("res"), w[i - 1])?));
        }
        let dec_out = Conv2d::same(&pb.pp("dec_out"), w[0], 3)?;
        let latent_scale = pb.get(1, "latent_scale", Init::Ones)?;
        Ok(Self { enc_in, enc_stages, enc_out, dec_in, dec_stages, dec_out, latent_scale, stride: cfg.stride() })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn latent_scale(&self) -> &Tensor {
        &self.latent_scale
    }

    /// Unscaled encoder output; `x [n, 3, H, W]` in [0,1] with `H, W` multiples of the stride.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.enc_in.forward(&x.affine(2.0, -1.0)?)?.silu()?;
        for (down, res) in &self.enc_stages {
            h = res.forward(&down.forward(&h)?.silu()?)?;
        }
        self.enc_out.forward(&h)
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(x)?.broadcast_mul(&self.latent_scale)?)
    }

    /// Unclamped reconstruction of a scaled latent.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_raw(&z.broadcast_div(&self.latent_scale)?)
    }

    /// Inverse of [`Autoencoder::encode_raw`], ignoring the latent scale.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.silu()?;
        for (conv, res) in &self.dec_stages {
            let (_, _, hh, hw) = h.dims4()?;
            h = upsample_to(&h, hh * 2, hw * 2)?;
            h = res.forward(&conv.forward(&h)?.silu()?)?;
        }
        Ok(self.dec_out.forward(&h)?.affine(0.5, 0.5)?)
    }

    /// Reflect-pads to a multiple of the stride and encodes.
    pub fn encode_latent(&self, frames: &FrameVolume, device: &Device, dtype: DType) -> Result<LatentVolume> {
        if frames.data().iter().any(|v| !v.is_finite()) {
            return Err(input_err!("frames contain non-finite values"));
        }
        let s = self.stride;
        let (h, w) = (frames.height().div_ceil(s) * s, frames.width().div_ceil(s) * s);
        let padded = if (h, w) == (frames.height(), frames.width()) { frames.clone() } else { frames.pad_reflect(h, w)? };
        let x = padded.to_tensor(device, dtype)?;
        let x = if x.dim(1)? == 1 { x.repeat((1, 3, 1, 1))? } else { x };
        Ok(LatentVolume::from_tensor_unchecked(self.encode_tensor(&x)?, s))
    }

    /// Decodes, crops to `out_hw` (defaults to the full decoded size) and clamps to [0,1].
    pub fn decode_latent(&self, z: &LatentVolume, out_hw: Option<(usize, usize)>) -> Result<FrameVolume> {
        let x = self.decode_tensor(z.tensor())?;
        let (_, _, h, w) = x.dims4()?;
        let (oh, ow) = out_hw.unwrap_or((h, w));
        if oh > h || ow > w {
            return Err(input_err!("requested crop {oh}x{ow} exceeds decoded {h}x{w}"));
        }
        let x = x.narrow(2, 0, oh)?.narrow(3, 0, ow)?;
        FrameVolume::from_tensor(&x.clamp(0.0, 1.0)?)
    }
}
