//! All networks built from one parameter store.

use candle_core::Tensor;

use crate::backbone::{Autoencoder, BackboneConfig, ConditionContext, GuidanceNetwork, GuidanceResiduals, PreprocessNet, UNet};
use crate::error::Result;
use crate::fusion::FusionModule;
use crate::nn::{CacheSession, ParamStore};

/// Per-patch conditioning inputs before fusion.
#[derive(Debug, Clone)]
pub struct PatchCondition<'a> {
    /// Global frames of the patch's frame range, `[n, 3, g, g]`.
    pub global_frames: &'a Tensor,
    pub caption: &'a str,
    /// Degraded patch latent.
    pub patch_latent: &'a Tensor,
    /// Latent of the global frames resized to the patch size.
    pub global_latent: &'a Tensor,
    pub norm_bbox: [f32; 4],
}

#[derive(Debug, Clone)]
pub struct FrdmModel {
    pub cfg: BackboneConfig,
    pub ae: Autoencoder,
    pub preprocess: PreprocessNet,
    pub unet: UNet,
    pub guidance: GuidanceNetwork,
    pub fusion: FusionModule,
}

impl FrdmModel {
    /// Builds every network, creating missing parameters. Modules capture the
    /// store's freeze policy at build time, so rebuild after changing it.
    pub fn build(store: &ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        Ok(Self {
            cfg: cfg.clone(),
            ae: Autoencoder::new(&root.pp("autoencoder"), cfg)?,
            preprocess: PreprocessNet::new(&root.pp("preprocess"), cfg)?,
            unet: UNet::new(&root.pp("unet_base"), cfg)?,
            guidance: GuidanceNetwork::new(&root, cfg)?,
            fusion: FusionModule::new(&root.pp("fusion"), cfg.fusion_width, cfg.frame_patch, cfg.bands)?,
        })
    }

    /// Copies the base UNet encoder into the guidance branch.
    pub fn init_guidance_from_base(store: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for part in crate::backbone::ENCODER_PARTS {
            n += store.copy_prefix(&format!("unet_base.{part}"), &format!("guidance.{part}"))?;
        }
        Ok(n)
    }

    /// Builds the guidance context, honoring which blocks are enabled.
    pub fn context(&self, cond: &PatchCondition<'_>) -> Result<ConditionContext> {
        let c = &self.cfg;
        Ok(ConditionContext {
            frame: c.enable_frame.then(|| self.fusion.frame_feature(cond.global_frames, cond.norm_bbox)).transpose()?,
            prompt: c.enable_prompt.then(|| self.fusion.prompt_feature(cond.caption, cond.norm_bbox)).transpose()?,
            patch_latent: c.enable_texture.then(|| cond.patch_latent.clone()),
            global_latent: c.enable_texture.then(|| cond.global_latent.clone()),
            norm_bbox: cond.norm_bbox,
        })
    }

    /// Guidance residuals and the guided noise prediction for `z_t`.
    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        features: &Tensor,
        ctx: &ConditionContext,
        cache: Option<&mut CacheSession<'_>>,
    ) -> Result<(Tensor, GuidanceResiduals)> {
        let fused = self.guidance.fuser.forward(z_t, features)?;
        let residuals = self.guidance.forward(&fused, ctx, t, cache)?;
        let eps = self.unet.forward(z_t, t, Some(&residuals))?;
        Ok((eps, residuals))
    }
}
