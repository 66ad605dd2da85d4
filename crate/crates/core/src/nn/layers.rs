//! Basic layers on top of candle tensors. Activations are `[batch, channels, h, w]`
//! for convolutions and `[batch, tokens, width]` for token layers.

use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, input: usize, output: usize) -> Result<Self> {
        Self::with_init(pb, input, output, Init::FanIn(input))
    }

    /// Zero weight and bias: the layer outputs zeros until trained.
    pub fn zeros(pb: &ParamBuilder, input: usize, output: usize) -> Result<Self> {
        Self::with_init(pb, input, output, Init::Zeros)
    }

    pub fn with_init(pb: &ParamBuilder, input: usize, output: usize, init: Init) -> Result<Self> {
        let weight = pb.get((output, input), "weight", init)?;
        let bias = Some(pb.get(output, "bias", Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(pb: &ParamBuilder, input: usize, output: usize, init: Init) -> Result<Self> {
        Ok(Self { weight: pb.get((output, input), "weight", init)?, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("linear input has rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, input))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, input: usize, output: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::with_init(pb, input, output, kernel, stride, padding, Init::FanIn(input * kernel * kernel))
    }

    /// 3x3, stride 1, same padding.
    pub fn same(pb: &ParamBuilder, input: usize, output: usize) -> Result<Self> {
        Self::new(pb, input, output, 3, 1, 1)
    }

    pub fn zeros(pb: &ParamBuilder, input: usize, output: usize, kernel: usize) -> Result<Self> {
        Self::with_init(pb, input, output, kernel, 1, kernel / 2, Init::Zeros)
    }

    pub fn with_init(
        pb: &ParamBuilder,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get((output, input, kernel, kernel), "weight", init)?;
        let bias = pb.get(output, "bias", Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            gamma: pb.get(channels, "gamma", Init::Ones)?,
            beta: pb.get(channels, "beta", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xg = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n).max(1)).rev().find(|d| n % d == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, width: usize) -> Result<Self> {
        Ok(Self { gamma: pb.get(width, "gamma", Init::Ones)?, beta: pb.get(width, "beta", Init::Zeros)?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Sinusoidal embedding of diffusion timesteps, `[len(t), dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0f64; dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = step as f64 * freq;
            row[k] = a.sin();
            row[half + k] = a.cos();
        }
        v.extend(row);
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// `[n, c, h, w]` to `[n, h*w, c]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}
