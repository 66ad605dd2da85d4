use candle_core::Tensor;

use super::{upsample_to, BackboneConfig, GuidanceResiduals, ResBlock};
use crate::error::{input_err, internal_err, Result};
use crate::nn::layers::timestep_embedding;
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder, TemporalAttention};

/// Encoder half of the UNet. The guidance branch builds the same layout
/// under its own prefix and is initialized as a copy of the base weights.
#[derive(Debug, Clone)]
pub(crate) struct UNetEncoder {
    time1: Linear,
    time2: Linear,
    pub(crate) in_conv: Conv2d,
    pub(crate) res: [ResBlock; 2],
    pub(crate) temporal: [TemporalAttention; 2],
    pub(crate) downsample: Conv2d,
    pub(crate) widths: [usize; 2],
}

/// Parameter prefixes owned by [`UNetEncoder`].
pub(crate) const ENCODER_PARTS: [&str; 5] = ["time", "in_conv", "down0", "downsample", "down1"];

impl UNetEncoder {
    pub(crate) fn new(pb: &ParamBuilder, cfg: &BackboneConfig, input: usize) -> Result<Self> {
        let [w0, w1] = cfg.unet_widths;
        let tdim = 2 * w0;
        Ok(Self {
            time1: Linear::new(&pb.pp("time").pp("l1"), w0, tdim)?,
            time2: Linear::new(&pb.pp("time").pp("l2"), tdim, tdim)?,
            in_conv: Conv2d::same(&pb.pp("in_conv"), input, w0)?,
            res: [
                ResBlock::new(&pb.pp("down0").pp("res"), w0, w0, tdim)?,
                ResBlock::new(&pb.pp("down1").pp("res"), w1, w1, tdim)?,
            ],
            temporal: [
                TemporalAttention::new(&pb.pp("down0").pp("temporal"), w0)?,
                TemporalAttention::new(&pb.pp("down1").pp("temporal"), w1)?,
            ],
            downsample: Conv2d::new(&pb.pp("downsample"), w0, w1, 3, 2, 1)?,
            widths: cfg.unet_widths,
        })
    }

    pub(crate) fn temb(&self, t: usize, like: &Tensor) -> Result<Tensor> {
        let e = timestep_embedding(&[t], self.widths[0], like.device(), like.dtype())?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub(crate) enc: UNetEncoder,
    mid: ResBlock,
    up1_res: ResBlock,
    up1_temporal: TemporalAttention,
    up_conv: Conv2d,
    up0_res: ResBlock,
    up0_temporal: TemporalAttention,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    timesteps: usize,
}

impl UNet {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let [w0, w1] = cfg.unet_widths;
        let tdim = 2 * w0;
        Ok(Self {
            enc: UNetEncoder::new(pb, cfg, cfg.latent_channels)?,
            mid: ResBlock::new(&pb.pp("mid"), w1, w1, tdim)?,
            up1_res: ResBlock::new(&pb.pp("up1").pp("res"), 2 * w1, w1, tdim)?,
            up1_temporal: TemporalAttention::new(&pb.pp("up1").pp("temporal"), w1)?,
            up_conv: Conv2d::same(&pb.pp("up_conv"), w1, w0)?,
            up0_res: ResBlock::new(&pb.pp("up0").pp("res"), 2 * w0, w0, tdim)?,
            up0_temporal: TemporalAttention::new(&pb.pp("up0").pp("temporal"), w0)?,
            out_norm: GroupNorm::new(&pb.pp("out_norm"), w0, 8)?,
            out_conv: Conv2d::same(&pb.pp("out_conv"), w0, cfg.latent_channels)?,
            timesteps: cfg.timesteps,
        })
    }

    pub fn widths(&self) -> [usize; 2] {
        self.enc.widths
    }

    /// Noise prediction for `z_t [n, c, h, w]`; guidance residuals, when
    /// given, are added to the two skip connections.
    pub fn forward(&self, z_t: &Tensor, t: usize, residuals: Option<&GuidanceResiduals>) -> Result<Tensor> {
        if t >= self.timesteps {
            return Err(input_err!("timestep {t} outside [0, {})", self.timesteps));
        }
        let temb = self.enc.temb(t, z_t)?;
        let h = self.enc.in_conv.forward(z_t)?;
        let h = self.enc.temporal[0].forward(&self.enc.res[0].forward(&h, &temb)?)?;
        let mut s0 = h.clone();
        let h = self.enc.downsample.forward(&h)?;
        let h = self.enc.temporal[1].forward(&self.enc.res[1].forward(&h, &temb)?)?;
        let mut s1 = h.clone();
        let h = self.mid.forward(&h, &temb)?;
        if let Some(r) = residuals {
            if r.levels.len() != 2 || r.levels[0].dims() != s0.dims() || r.levels[1].dims() != s1.dims() {
                return Err(internal_err!(
                    "residual shapes {:?} do not match skips {:?}, {:?}",
                    r.levels.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>(),
                    s0.dims(),
                    s1.dims()
                ));
            }
            s0 = (s0 + &r.levels[0])?;
            s1 = (s1 + &r.levels[1])?;
        }
        let h = self.up1_res.forward(&Tensor::cat(&[&h, &s1], 1)?, &temb)?;
        let h = self.up1_temporal.forward(&h)?;
        let (_, _, sh, sw) = s0.dims4()?;
        let h = self.up_conv.forward(&upsample_to(&h, sh, sw)?)?;
        let h = self.up0_res.forward(&Tensor::cat(&[&h, &s0], 1)?, &temb)?;
        let h = self.up0_temporal.forward(&h)?;
        self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)
    }
}
