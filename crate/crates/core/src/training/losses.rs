use candle_core::{DType, Tensor};

use crate::backbone::box_downsample;
use crate::error::{config_err, input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_p: f64,
    pub alpha_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_p: 1.0, alpha_d: 81.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_noise: f64,
    pub l_preprocess: f64,
    pub l_defect: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_noise: f64, l_preprocess: f64, l_defect: f64, w: &LossWeights) -> Self {
        Self { l_noise, l_preprocess, l_defect, l_total: loss_total(l_noise, l_preprocess, l_defect, w) }
    }

    pub fn csv_header() -> &'static str {
        "step,l_noise,l_preprocess,l_defect,l_total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!("{step},{:e},{:e},{:e},{:e}", self.l_noise, self.l_preprocess, self.l_defect, self.l_total)
    }
}

pub fn loss_total(l_noise: f64, l_preprocess: f64, l_defect: f64, w: &LossWeights) -> f64 {
    l_noise + w.alpha_p * l_preprocess + w.alpha_d * l_defect
}

/// Differentiable weighted sum of loss tensors (scalars).
pub fn loss_total_tensor(l_noise: &Tensor, l_preprocess: &Tensor, l_defect: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((l_noise + l_preprocess.affine(w.alpha_p, 0.0)?)? + l_defect.affine(w.alpha_d, 0.0)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean squared error over all entries.
pub fn loss_noise(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_pred.dims() {
        return Err(input_err!("noise shapes differ: {:?} vs {:?}", eps.dims(), eps_pred.dims()));
    }
    Ok((eps - eps_pred)?.sqr()?.mean_all()?)
}

/// Sum over scales of the per-pixel mean absolute error between each
/// prediction `[n, 3, H/2^j, W/2^j]` and the box-downsampled ground truth.
pub fn loss_preprocess(pyramid: &[Tensor], gt: &Tensor, scales: usize) -> Result<Tensor> {
    if pyramid.len() != scales {
        return Err(config_err!("pyramid has {} scales, expected {scales}", pyramid.len()));
    }
    let mut total: Option<Tensor> = None;
    for (j, pred) in pyramid.iter().enumerate() {
        let target = box_downsample(gt, 1 << j)?;
        if target.dims() != pred.dims() {
            return Err(config_err!("scale {j}: prediction {:?} vs ground truth {:?}", pred.dims(), target.dims()));
        }
        let l = (pred - target)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    total.ok_or_else(|| config_err!("empty pyramid"))
}

/// Masked mean absolute error: `|pred - gt| * m` averaged over every pixel
/// and channel, masked-out pixels contributing zero. `mask [n, 1, h, w]`.
pub fn loss_defect(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(input_err!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()));
    }
    let bad = mask
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .any(|v| v != 0.0 && v != 1.0);
    if bad {
        return Err(input_err!("defect mask is not binary"));
    }
    Ok((pred - gt)?.abs()?.broadcast_mul(mask)?.mean_all()?)
}
