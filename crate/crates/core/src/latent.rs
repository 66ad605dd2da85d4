use candle_core::{DType, Tensor};

use crate::error::{input_err, Result};

/// Encoded feature grid. The tensor is stored `[frames, channels, h, w]`
/// (frames act as the batch axis); [`LatentVolume::dims`] reports the
/// logical `(frames, h, w, channels)` order.
#[derive(Debug, Clone)]
pub struct LatentVolume {
    tensor: Tensor,
    stride: usize,
}

impl LatentVolume {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(input_err!("latent must be rank 4, got {:?}", tensor.dims()));
        }
        if stride == 0 {
            return Err(input_err!("latent stride must be positive"));
        }
        let s = tensor.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(input_err!("latent contains non-finite values"));
        }
        Ok(Self { tensor, stride })
    }

    /// Skips the finiteness scan; for tensors produced by trusted model paths.
    pub(crate) fn from_tensor_unchecked(tensor: Tensor, stride: usize) -> Self {
        Self { tensor, stride }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    /// `(frames, h, w, channels)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.tensor.dims();
        (d[0], d[2], d[3], d[1])
    }
}
