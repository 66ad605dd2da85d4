use candle_core::Tensor;

use super::unet::UNetEncoder;
use super::BackboneConfig;
use crate::error::{config_err, internal_err, Result};
use crate::frequency::TextureModule;
use crate::fusion::{GlobalFrameFeature, GlobalPromptFeature};
use crate::nn::{CacheSession, Conv2d, CrossAttention, Init, ParamBuilder, SpatialSelfAttention};
use crate::rng;

/// Block sequence inside every guidance level.
pub const BLOCK_ORDER: [&str; 5] = ["self_attn", "prompt_cross_attn", "frame_cross_attn", "texture", "temporal"];

/// Conditioning for one patch. A component must be present exactly when the
/// corresponding guidance block is enabled.
#[derive(Debug, Clone, Default)]
pub struct ConditionContext {
    pub frame: Option<GlobalFrameFeature>,
    pub prompt: Option<GlobalPromptFeature>,
    /// Latent of the degraded patch, `[n, c, h, w]`.
    pub patch_latent: Option<Tensor>,
    /// Latent of the global frames resized to the patch resolution.
    pub global_latent: Option<Tensor>,
    pub norm_bbox: [f32; 4],
}

#[derive(Debug, Clone)]
pub struct GuidanceResiduals {
    /// One residual per UNet decoder level, finest first.
    pub levels: Vec<Tensor>,
    /// Executed blocks as `level<i>.<block>`.
    pub trace: Vec<String>,
}

/// 1x1 projection of `[z_t ; condition]` back to the latent width. Starts as
/// the identity on the `z_t` half.
#[derive(Debug, Clone)]
pub struct NoisyConditionFuser {
    proj: Conv2d,
    channels: usize,
}

impl NoisyConditionFuser {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let mut r = rng::stream(pb.store().seed(), &format!("{}.cond_init", pb.prefix()));
        let bound = (1.0 / channels as f64).sqrt() * 0.5;
        let mut w = vec![0f64; channels * 2 * channels];
        for o in 0..channels {
            w[o * 2 * channels + o] = 1.0;
            for i in 0..channels {
                w[o * 2 * channels + channels + i] = rng::normal_vec_f64(&mut r, 1)[0] * bound;
            }
        }
        let init = Tensor::from_vec(w, (channels, 2 * channels, 1, 1), pb.device())?.to_dtype(pb.dtype())?;
        Ok(Self { proj: Conv2d::with_init(&pb.pp("proj"), 2 * channels, channels, 1, 1, 0, Init::Tensor(init))?, channels })
    }

    pub fn forward(&self, z_t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if z_t.dims() != cond.dims() || z_t.dim(1)? != self.channels {
            return Err(internal_err!("cannot fuse z_t {:?} with condition {:?}", z_t.dims(), cond.dims()));
        }
        self.proj.forward(&Tensor::cat(&[z_t, cond], 1)?)
    }
}

pub fn fuse_noisy_and_condition(fuser: &NoisyConditionFuser, z_t: &Tensor, cond: &Tensor) -> Result<Tensor> {
    fuser.forward(z_t, cond)
}

#[derive(Debug, Clone)]
struct GuidanceLevel {
    self_attn: SpatialSelfAttention,
    prompt: Option<CrossAttention>,
    frame: Option<CrossAttention>,
    texture: Option<TextureModule>,
    zero: Conv2d,
}

/// Restoration-guidance branch: a trainable copy of the UNet encoder with
/// attention, fusion and texture blocks, emitting zero-initialized residuals.
#[derive(Debug, Clone)]
pub struct GuidanceNetwork {
    pub fuser: NoisyConditionFuser,
    enc: UNetEncoder,
    levels: Vec<GuidanceLevel>,
    enable_prompt: bool,
    enable_frame: bool,
    enable_texture: bool,
}

impl GuidanceNetwork {
    /// `root` is the unscoped builder; parameters land in the `guidance`,
    /// `fusion` and `frequency` groups.
    pub fn new(root: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let g = root.pp("guidance");
        let enc = UNetEncoder::new(&g, cfg, cfg.latent_channels)?;
        let mut levels = Vec::new();
        for (i, &w) in cfg.unet_widths.iter().enumerate() {
            let lvl = format!("level{i}");
            levels.push(GuidanceLevel {
                self_attn: SpatialSelfAttention::new(&g.pp(&lvl).pp("self_attn"), w)?,
                prompt: cfg
                    .enable_prompt
                    .then(|| CrossAttention::new(&root.pp("fusion").pp(&lvl).pp("prompt_xattn"), w, cfg.fusion_width))
                    .transpose()?,
                frame: cfg
                    .enable_frame
                    .then(|| CrossAttention::new(&root.pp("fusion").pp(&lvl).pp("frame_xattn"), w, cfg.fusion_width))
                    .transpose()?,
                texture: cfg
                    .enable_texture
                    .then(|| TextureModule::new(&root.pp("frequency").pp(&lvl), w, cfg.latent_channels, cfg.freq_hidden))
                    .transpose()?,
                zero: Conv2d::with_init(&g.pp(&lvl).pp("zero"), w, w, 1, 1, 0, Init::Zeros)?,
            });
        }
        Ok(Self {
            fuser: NoisyConditionFuser::new(&g.pp("fuse"), cfg.latent_channels)?,
            enc,
            levels,
            enable_prompt: cfg.enable_prompt,
            enable_frame: cfg.enable_frame,
            enable_texture: cfg.enable_texture,
        })
    }

    pub fn block_order(&self) -> Vec<&'static str> {
        BLOCK_ORDER.to_vec()
    }

    fn check_context(&self, ctx: &ConditionContext) -> Result<()> {
        let checks = [
            ("global prompt feature", self.enable_prompt, ctx.prompt.is_some()),
            ("global frame feature", self.enable_frame, ctx.frame.is_some()),
            ("patch latent", self.enable_texture, ctx.patch_latent.is_some()),
            ("global latent", self.enable_texture, ctx.global_latent.is_some()),
        ];
        for (name, enabled, present) in checks {
            if enabled && !present {
                return Err(config_err!("{name} missing but its guidance block is enabled"));
            }
            if !enabled && present {
                return Err(config_err!("{name} supplied but its guidance block is disabled"));
            }
        }
        Ok(())
    }

    /// `fused [n, c, h, w]` from [`fuse_noisy_and_condition`].
    pub fn forward(
        &self,
        fused: &Tensor,
        ctx: &ConditionContext,
        t: usize,
        mut cache: Option<&mut CacheSession<'_>>,
    ) -> Result<GuidanceResiduals> {
        self.check_context(ctx)?;
        let temb = self.enc.temb(t, fused)?;
        let mut h = self.enc.in_conv.forward(fused)?;
        let mut out = Vec::with_capacity(self.levels.len());
        let mut trace = Vec::new();
        let mut patch_ref = ctx.patch_latent.clone();
        let mut global_ref = ctx.global_latent.clone();
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                h = self.enc.downsample.forward(&h)?;
                patch_ref = patch_ref.map(|p| p.avg_pool2d(2)).transpose()?;
                global_ref = global_ref.map(|p| p.avg_pool2d(2)).transpose()?;
            }
            h = self.enc.res[i].forward(&h, &temb)?;

            h = level.self_attn.forward(&h, cache.as_deref_mut())?;
            trace.push(format!("level{i}.self_attn"));
            if let (Some(block), Some(p)) = (&level.prompt, &ctx.prompt) {
                h = block.forward(&h, &p.tokens, Some(&p.mask))?.out;
                trace.push(format!("level{i}.prompt_cross_attn"));
            }
            if let (Some(block), Some(f)) = (&level.frame, &ctx.frame) {
                h = block.forward(&h, &f.tokens, None)?.out;
                trace.push(format!("level{i}.frame_cross_attn"));
            }
            if let (Some(block), Some(p), Some(g)) = (&level.texture, &patch_ref, &global_ref) {
                h = block.forward(&h, p, g)?.out;
                trace.push(format!("level{i}.texture"));
            }
            h = self.enc.temporal[i].forward(&h)?;
            trace.push(format!("level{i}.temporal"));
            out.push(level.zero.forward(&h)?);
        }
        Ok(GuidanceResiduals { levels: out, trace })
    }
}
