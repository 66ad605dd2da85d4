use candle_core::Tensor;
use rand::Rng;

use crate::error::{config_err, input_err, Result};
use crate::rng::PortableRng;

/// Discrete diffusion schedule with `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(config_err!("schedule needs at least two timesteps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!("betas must satisfy 0 < start <= end < 1"));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn default_for(timesteps: usize) -> Result<Self> {
        Self::linear(timesteps, 1e-4, 2e-2)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| input_err!("timestep {t} outside [0, {})", self.len()))
    }

    /// Uniform draw from `[0, T)`.
    pub fn sample_timestep(&self, rng: &mut PortableRng) -> usize {
        rng.random_range(0..self.len())
    }

    /// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        add_noise_at(z0, self.alpha_bar(t)?, eps)
    }

    /// One-step clean estimate from a noise prediction.
    pub fn predict_x0(&self, z_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        Ok(((z_t - eps_pred.affine((1.0 - ab).sqrt(), 0.0)?)? * (1.0 / ab.sqrt()))?)
    }

    /// Evenly strided descending sub-schedule `{(k-1)T/k, ..., T/k, 0}`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(config_err!("sampler steps {steps} outside 1..={}", self.len()));
        }
        Ok((0..steps).rev().map(|i| i * self.len() / steps).collect())
    }

    /// Deterministic (eta = 0) update from `t` to `t_prev`; `t_prev = None`
    /// means the clean end point with `abar = 1`.
    pub fn ddim_step(&self, z_t: &Tensor, eps_pred: &Tensor, t: usize, t_prev: Option<usize>) -> Result<Tensor> {
        let x0 = self.predict_x0(z_t, eps_pred, t)?;
        let ab_prev = match t_prev {
            Some(p) => self.alpha_bar(p)?,
            None => 1.0,
        };
        Ok((x0.affine(ab_prev.sqrt(), 0.0)? + eps_pred.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
    }
}

pub fn add_noise_at(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(input_err!("noise shape {:?} does not match latent {:?}", eps.dims(), z0.dims()));
    }
    Ok((z0.affine(alpha_bar.sqrt(), 0.0)? + eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?)
}

/// Standard normal tensor from a portable stream.
pub fn gaussian_like(shape: &[usize], rng: &mut PortableRng, like: &Tensor) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = crate::rng::normal_vec(rng, n);
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}
