//! The neural stack: latent autoencoder, preprocess network, denoising UNet
//! with temporal attention, and the restoration-guidance branch.

mod autoencoder;
mod guidance;
mod preprocess;
mod unet;

pub use autoencoder::Autoencoder;
pub use guidance::{fuse_noisy_and_condition, ConditionContext, GuidanceNetwork, GuidanceResiduals, NoisyConditionFuser, BLOCK_ORDER};
pub use preprocess::{box_downsample, PreprocessNet, PreprocessOutput};
pub use unet::UNet;
pub(crate) use unet::ENCODER_PARTS;

use candle_core::Tensor;

use crate::error::{config_err, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    /// Autoencoder widths: full resolution first, then one entry per 2x
    /// downsampling, so the latent stride is `2^(len-1)`.
    pub ae_widths: Vec<usize>,
    /// UNet widths of the two resolution levels.
    pub unet_widths: [usize; 2],
    pub preprocess_widths: [usize; 4],
    /// Pyramid scales of the preprocess network.
    pub scales: usize,
    pub fusion_width: usize,
    /// Side of the square global frames fed to the frame encoder.
    pub global_size: usize,
    pub frame_patch: usize,
    pub bands: usize,
    pub freq_hidden: usize,
    pub timesteps: usize,
    pub enable_prompt: bool,
    pub enable_frame: bool,
    pub enable_texture: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            ae_widths: vec![32, 64, 128, 128],
            unet_widths: [64, 128],
            preprocess_widths: [16, 32, 64, 64],
            scales: 3,
            fusion_width: 64,
            global_size: 128,
            frame_patch: 16,
            bands: 8,
            freq_hidden: 32,
            timesteps: 1000,
            enable_prompt: true,
            enable_frame: true,
            enable_texture: true,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << (self.ae_widths.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ae_widths.len() < 2 || self.ae_widths.iter().any(|&w| w == 0) {
            return Err(config_err!("autoencoder needs at least two positive widths"));
        }
        if self.latent_channels == 0 || self.unet_widths.iter().any(|&w| w == 0) || self.fusion_width == 0 {
            return Err(config_err!("model widths must be positive"));
        }
        if self.scales == 0 || self.scales > 4 {
            return Err(config_err!("preprocess scales must be in 1..=4, got {}", self.scales));
        }
        if self.frame_patch == 0 || self.global_size % self.frame_patch != 0 {
            return Err(config_err!(
                "global size {} is not a multiple of the frame patch {}",
                self.global_size,
                self.frame_patch
            ));
        }
        if self.timesteps < 2 {
            return Err(config_err!("need at least two diffusion timesteps"));
        }
        Ok(())
    }
}

/// Conv residual block with additive timestep conditioning.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    temb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub(crate) fn new(pb: &ParamBuilder, input: usize, output: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&pb.pp("n1"), input, 8)?,
            c1: Conv2d::same(&pb.pp("c1"), input, output)?,
            temb: Linear::new(&pb.pp("temb"), temb_dim, output)?,
            n2: GroupNorm::new(&pb.pp("n2"), output, 8)?,
            c2: Conv2d::same(&pb.pp("c2"), output, output)?,
            skip: if input != output { Some(Conv2d::new(&pb.pp("skip"), input, output, 1, 1, 0)?) } else { None },
        })
    }

    /// `x [n, c, h, w]`, `temb [1, temb_dim]`.
    pub(crate) fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let c = t.dim(1)?;
        let h = h.broadcast_add(&t.reshape((1, c, 1, 1))?)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Plain conv residual block without normalization or time input.
#[derive(Debug, Clone)]
pub(crate) struct PlainRes {
    c1: Conv2d,
    c2: Conv2d,
}

impl PlainRes {
    pub(crate) fn new(pb: &ParamBuilder, width: usize) -> Result<Self> {
        Ok(Self { c1: Conv2d::same(&pb.pp("c1"), width, width)?, c2: Conv2d::same(&pb.pp("c2"), width, width)? })
    }
    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c2.forward(&self.c1.forward(x)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Nearest 2x upsampling, cropped to `(h, w)` when the target is odd.
pub(crate) fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    let up = x.upsample_nearest2d(xh * 2, xw * 2)?;
    Ok(if (xh * 2, xw * 2) == (h, w) { up } else { up.narrow(2, 0, h)?.narrow(3, 0, w)? })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{FrdmModel, PatchCondition};
    use crate::nn::{finite_difference_error, ParamStore};
    use crate::rng;
    use candle_core::{DType, Device, Var};

    pub(crate) fn tiny() -> BackboneConfig {
        BackboneConfig {
            ae_widths: vec![8, 8, 8, 8],
            unet_widths: [8, 16],
            preprocess_widths: [4, 4, 4, 4],
            fusion_width: 8,
            global_size: 16,
            frame_patch: 8,
            freq_hidden: 8,
            timesteps: 100,
            ..BackboneConfig::default()
        }
    }

    fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
        let mut r = rng::stream(seed, "backbone-test");
        let v = rng::normal_vec_f64(&mut r, shape.iter().product());
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn autoencoder_shapes_and_padding() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let cfg = tiny();
        let ae = Autoencoder::new(&store.builder("autoencoder"), &cfg).unwrap();
        assert_eq!(ae.stride(), 8);
        let x = randn(2, &[2, 3, 16, 24], DType::F32).clamp(0.0, 1.0).unwrap();
        let z = ae.encode_tensor(&x).unwrap();
        assert_eq!(z.dims(), &[2, 4, 2, 3]);
        assert_eq!(ae.decode_tensor(&z).unwrap().dims(), &[2, 3, 16, 24]);
        let clip = crate::synthdata::procedural_clip(3, 2, 13, 21).0;
        let lat = ae.encode_latent(&clip, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(lat.dims(), (2, 2, 3, 4));
        let back = ae.decode_latent(&lat, Some((13, 21))).unwrap();
        assert_eq!(back.dims(), (2, 13, 21, 3));
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ae.decode_latent(&lat, Some((40, 21))).is_err());
    }

    #[test]
    fn preprocess_starts_as_box_pyramid() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let cfg = tiny();
        let net = PreprocessNet::new(&store.builder("preprocess"), &cfg).unwrap();
        let x = randn(4, &[2, 3, 16, 16], DType::F32);
        let pyr = net.pyramid(&x).unwrap();
        assert_eq!(pyr.len(), cfg.scales);
        for (j, p) in pyr.iter().enumerate() {
            assert_eq!(max_abs(p, &box_downsample(&x, 1 << j).unwrap()), 0.0);
        }
        assert!(net.pyramid(&randn(4, &[1, 3, 12, 16], DType::F32)).is_err());
    }

    #[test]
    fn unet_rejects_out_of_range_timestep() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let unet = UNet::new(&store.builder("unet_base"), &tiny()).unwrap();
        let z = randn(5, &[2, 4, 4, 4], DType::F32);
        assert_eq!(unet.forward(&z, 99, None).unwrap().dims(), z.dims());
        assert!(matches!(unet.forward(&z, 100, None), Err(crate::Error::Input(_))));
    }

    fn fresh_context(model: &FrdmModel, z: &Tensor) -> crate::backbone::ConditionContext {
        let frames = randn(7, &[2, 3, 16, 16], DType::F32).clamp(0.0, 1.0).unwrap();
        model
            .context(&PatchCondition {
                global_frames: &frames,
                caption: "a man walks past a shop",
                patch_latent: &randn(8, z.dims(), DType::F32),
                global_latent: &randn(9, z.dims(), DType::F32),
                norm_bbox: [0.25, 0.0, 0.75, 0.5],
            })
            .unwrap()
    }

    #[test]
    fn fresh_guidance_leaves_base_output_bit_identical() {
        let store = ParamStore::new(2, Device::Cpu, DType::F32);
        let model = FrdmModel::build(&store, &tiny()).unwrap();
        let z = randn(6, &[2, 4, 4, 4], DType::F32);
        let ctx = fresh_context(&model, &z);
        let features = randn(10, &[2, 4, 4, 4], DType::F32);
        let base = model.unet.forward(&z, 42, None).unwrap();
        let (guided, res) = model.predict_noise(&z, 42, &features, &ctx, None).unwrap();
        assert_eq!(
            base.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            guided.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let expected: Vec<String> =
            (0..2).flat_map(|i| BLOCK_ORDER.iter().map(move |b| format!("level{i}.{b}"))).collect();
        assert_eq!(res.trace, expected);
    }

    #[test]
    fn context_must_match_enabled_blocks() {
        let store = ParamStore::new(2, Device::Cpu, DType::F32);
        let model = FrdmModel::build(&store, &tiny()).unwrap();
        let z = randn(6, &[2, 4, 4, 4], DType::F32);
        let mut ctx = fresh_context(&model, &z);
        ctx.prompt = None;
        let fused = model.guidance.fuser.forward(&z, &z).unwrap();
        assert!(matches!(model.guidance.forward(&fused, &ctx, 3, None), Err(crate::Error::Config(_))));

        let cfg = BackboneConfig { enable_prompt: false, enable_texture: false, ..tiny() };
        let store = ParamStore::new(2, Device::Cpu, DType::F32);
        let model = FrdmModel::build(&store, &cfg).unwrap();
        let ctx = fresh_context(&model, &z);
        assert!(ctx.prompt.is_none() && ctx.patch_latent.is_none());
        let res = model.guidance.forward(&model.guidance.fuser.forward(&z, &z).unwrap(), &ctx, 3, None).unwrap();
        assert!(res.trace.iter().all(|b| !b.ends_with("prompt_cross_attn") && !b.ends_with("texture")));
    }

    #[test]
    fn fuser_gradients_reach_both_inputs() {
        let store = ParamStore::new(3, Device::Cpu, DType::F64);
        let fuser = NoisyConditionFuser::new(&store.builder("guidance.fuse"), 2).unwrap();
        let inputs = [randn(11, &[2, 2, 4, 4], DType::F64), randn(12, &[2, 2, 4, 4], DType::F64)];
        let probe = randn(13, &[2, 2, 4, 4], DType::F64);
        let loss = |a: &Tensor, b: &Tensor| -> crate::Result<Tensor> {
            Ok(fuse_noisy_and_condition(&fuser, a, b)?.sqr()?.mul(&probe)?.sum_all()?)
        };
        for i in 0..2 {
            let var = Var::from_tensor(&inputs[i]).unwrap();
            let mut xs = inputs.clone();
            xs[i] = var.as_tensor().clone();
            let grads = loss(&xs[0], &xs[1]).unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap();
            assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0, "input {i} got no gradient");
            let err = finite_difference_error(&inputs[i], g, 1e-5, |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                Ok(loss(&xs[0], &xs[1])?.to_scalar::<f64>()?)
            })
            .unwrap();
            assert!(err < 1e-3, "input {i}: relative error {err}");
        }
        assert!(fuser.forward(&inputs[0], &randn(1, &[2, 3, 4, 4], DType::F64)).is_err());
    }

    #[test]
    fn trainable_blocks_match_finite_differences() {
        let store = ParamStore::new(4, Device::Cpu, DType::F64);
        let cfg = tiny();
        let unet = UNet::new(&store.builder("unet_base"), &cfg).unwrap();
        let res = ResBlock::new(&store.builder("blk"), 4, 8, 16).unwrap();
        let attn = crate::nn::SpatialSelfAttention::new(&store.builder("attn"), 4).unwrap();
        let temb = randn(20, &[1, 16], DType::F64);
        let x = randn(21, &[2, 4, 4, 4], DType::F64);
        let probe8 = randn(22, &[2, 8, 4, 4], DType::F64);
        let probe4 = randn(23, &[2, 4, 4, 4], DType::F64);
        type Block<'a> = Box<dyn Fn(&Tensor) -> crate::Result<Tensor> + 'a>;
        let blocks: Vec<(&str, Block)> = vec![
            ("unet", Box::new(|z: &Tensor| Ok(unet.forward(z, 30, None)?.mul(&probe4)?.sum_all()?))),
            ("resblock", Box::new(|z: &Tensor| Ok(res.forward(z, &temb)?.mul(&probe8)?.sum_all()?))),
            ("self_attn", Box::new(|z: &Tensor| Ok(attn.forward(z, None)?.mul(&probe4)?.sum_all()?))),
        ];
        for (name, f) in &blocks {
            let var = Var::from_tensor(&x).unwrap();
            let grads = f(var.as_tensor()).unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap();
            let err = finite_difference_error(&x, g, 1e-5, |z| Ok(f(z)?.to_scalar::<f64>()?)).unwrap();
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }
}
