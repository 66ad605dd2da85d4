use candle_core::Tensor;

use super::{upsample_to, Autoencoder, BackboneConfig, PlainRes};
use crate::error::{config_err, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Box-filter downsampling by `factor` (kernel = stride); the resampler of the pyramid.
pub fn box_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    Ok(if factor == 1 { x.clone() } else { x.avg_pool2d(factor)? })
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    /// Latent encoding of the finest RGB prediction, `[n, c, h/s, w/s]`.
    pub features: Tensor,
    /// Finest first; scale `j` has `H / 2^j` rows.
    pub rgb_pyramid: Vec<Tensor>,
}

/// Multi-scale convolutional restorer of degraded patches.
///
/// Each scale predicts a residual over the box-downsampled input through a
/// zero-initialized head, so an untrained network returns the input pyramid.
#[derive(Debug, Clone)]
pub struct PreprocessNet {
    stem: Conv2d,
    stem_res: PlainRes,
    down: Vec<(Conv2d, PlainRes)>,
    bottleneck: PlainRes,
    up: Vec<(Conv2d, PlainRes)>,
    heads: Vec<Conv2d>,
    scales: usize,
}

impl PreprocessNet {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let w = cfg.preprocess_widths;
        let stem = Conv2d::same(&pb.pp("stem"), 3, w[0])?;
        let stem_res = PlainRes::new(&pb.pp("stem_res"), w[0])?;
        let mut down = Vec::new();
        for i in 1..4 {
            let p = pb.pp(&format!("down{i}"));
            down.push((Conv2d::new(&p.pp("conv"), w[i - 1], w[i], 3, 2, 1)?, PlainRes::new(&p.pp("res"), w[i])?));
        }
        let bottleneck = PlainRes::new(&pb.pp("bottleneck"), w[3])?;
        let mut up = Vec::new();
        for i in (0..3).rev() {
            let p = pb.pp(&format!("up{i}"));
            up.push((Conv2d::same(&p.pp("conv"), w[i + 1], w[i])?, PlainRes::new(&p.pp("res"), w[i])?));
        }
        let heads = (0..cfg.scales).map(|j| Conv2d::zeros(&pb.pp(&format!("head{j}")), w[j], 3, 3)).collect::<Result<_>>()?;
        Ok(Self { stem, stem_res, down, bottleneck, up, heads, scales: cfg.scales })
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    /// `x [n, 3, H, W]` with `H, W` divisible by 8; finest prediction first.
    pub fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(config_err!("preprocess input {h}x{w} is not a multiple of 8"));
        }
        let mut skips = vec![self.stem_res.forward(&self.stem.forward(x)?.silu()?)?];
        for (conv, res) in &self.down {
            let prev = skips.last().expect("nonempty");
            skips.push(res.forward(&conv.forward(prev)?.silu()?)?);
        }
        let mut hcur = self.bottleneck.forward(skips.last().expect("nonempty"))?;
        let mut out = vec![None; self.scales];
        // up stages run coarse to fine: level 2, 1, 0
        for (k, (conv, res)) in self.up.iter().enumerate() {
            let level = 2 - k;
            let skip = &skips[level];
            let (_, _, sh, sw) = skip.dims4()?;
            let u = conv.forward(&upsample_to(&hcur, sh, sw)?)?.silu()?;
            hcur = res.forward(&(u + skip)?)?;
            if level < self.scales {
                let base = box_downsample(x, 1 << level)?;
                out[level] = Some((base + self.heads[level].forward(&hcur)?)?);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every scale predicted")).collect())
    }

    /// Pyramid plus latent features from the frozen autoencoder encoder.
    pub fn forward(&self, x: &Tensor, ae: &Autoencoder) -> Result<PreprocessOutput> {
        let rgb_pyramid = self.pyramid(x)?;
        let features = ae.encode_tensor(&rgb_pyramid[0].clamp(0.0, 1.0)?)?;
        Ok(PreprocessOutput { features, rgb_pyramid })
    }
}
