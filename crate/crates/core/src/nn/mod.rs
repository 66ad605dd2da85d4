//! Minimal neural-network toolkit: parameters, layers, attention, optimizer.

pub mod attention;
pub mod layers;
pub mod optim;
pub mod params;

pub use attention::{attend, Attended, CacheSession, CrossAttention, KvCache, SpatialSelfAttention, TemporalAttention};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{FreezePolicy, Init, ParamBuilder, ParamStore};

use candle_core::Tensor;

use crate::error::Result;

/// Central finite-difference check helper: returns the max relative error
/// between `analytic` and numeric gradients of `f` at `x` (f64 tensors).
pub fn finite_difference_error<F>(x: &Tensor, analytic: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let grad = analytic.flatten_all()?.to_vec1::<f64>()?;
    let mut num = vec![0f64; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let fp = f(&Tensor::from_vec(p.clone(), x.shape(), x.device())?)?;
        p[i] -= 2.0 * h;
        let fm = f(&Tensor::from_vec(p, x.shape(), x.device())?)?;
        num[i] = (fp - fm) / (2.0 * h);
    }
    let diff: f64 = num.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(grad.iter().map(|a| a * a).sum::<f64>().sqrt());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}
