//! Texture reconstruction in the 3D Fourier domain of latent features.
//!
//! Grids are `[frames, channels, h, w]` tensors. The transform runs over the
//! frame, row and column axes with unitary normalization, so Parseval holds.
//! A packed spectrum has `2c` channels: the real parts of all channels
//! followed by the imaginary parts.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{config_err, Error, Result};
use crate::nn::layers::{from_tokens, to_tokens};
use crate::nn::{attend, Conv2d, Init, Linear, ParamBuilder};

/// Largest imaginary magnitude tolerated when unpacking back to real features.
pub const IMAG_TOLERANCE: f64 = 1e-4;

/// `(cos, sin)` DFT factors for right-multiplication of row vectors.
fn dft_factors(len: usize, inverse: bool, device: &Device, dtype: DType) -> Result<(Tensor, Tensor)> {
    let norm = 1.0 / (len as f64).sqrt();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut c = vec![0f64; len * len];
    let mut s = vec![0f64; len * len];
    for j in 0..len {
        for k in 0..len {
            let a = 2.0 * PI * ((j * k) % len) as f64 / len as f64;
            c[j * len + k] = a.cos() * norm;
            s[j * len + k] = sign * a.sin() * norm;
        }
    }
    let c = Tensor::from_vec(c, (len, len), device)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(s, (len, len), device)?.to_dtype(dtype)?;
    Ok((c, s))
}

/// Applies a `[len, len]` right factor along `axis` of a 4-D tensor.
fn along_axis(x: &Tensor, axis: usize, m: &Tensor) -> Result<Tensor> {
    let moved = if axis == 3 { x.clone() } else { x.transpose(axis, 3)?.contiguous()? };
    let dims = moved.dims().to_vec();
    let len = dims[3];
    let rows = moved.elem_count() / len;
    let y = moved.reshape((rows, len))?.matmul(m)?.reshape(dims)?;
    Ok(if axis == 3 { y } else { y.transpose(axis, 3)?.contiguous()? })
}

fn dft3(re: &Tensor, im: Option<&Tensor>, inverse: bool) -> Result<(Tensor, Tensor)> {
    let mut re = re.clone();
    let mut im = match im {
        Some(t) => t.clone(),
        None => re.zeros_like()?,
    };
    for axis in [0usize, 2, 3] {
        let len = re.dim(axis)?;
        if len == 1 {
            continue;
        }
        let (c, s) = dft_factors(len, inverse, re.device(), re.dtype())?;
        let rc = along_axis(&re, axis, &c)?;
        let rs = along_axis(&re, axis, &s)?;
        let ic = along_axis(&im, axis, &c)?;
        let is = along_axis(&im, axis, &s)?;
        re = (rc - is)?;
        im = (rs + ic)?;
    }
    Ok((re, im))
}

/// Forward 3D DFT of a real grid `[n, c, h, w]`, packed to `[n, 2c, h, w]`.
pub fn fft_pack(x: &Tensor) -> Result<Tensor> {
    let (re, im) = dft3(x, None, false)?;
    Ok(Tensor::cat(&[&re, &im], 1)?)
}

fn split_packed(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let c2 = f.dim(1)?;
    if c2 % 2 != 0 {
        return Err(config_err!("packed spectrum needs an even channel count, got {c2}"));
    }
    Ok((f.narrow(1, 0, c2 / 2)?, f.narrow(1, c2 / 2, c2 / 2)?))
}

/// Inverse 3D DFT of a packed spectrum. Fails with [`Error::Numerical`] when
/// the result carries an imaginary part above [`IMAG_TOLERANCE`].
pub fn ifft_unpack(f: &Tensor) -> Result<Tensor> {
    let (re, im) = split_packed(f)?;
    let (out_re, out_im) = dft3(&re, Some(&im), true)?;
    let residue = out_im.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(residue < IMAG_TOLERANCE) {
        return Err(Error::Numerical(format!("inverse transform left imaginary residue {residue:.3e}")));
    }
    Ok(out_re)
}

/// Index reversal `k -> (-k) mod len` as a permutation matrix.
fn reversal(len: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; len * len];
    for j in 0..len {
        m[j * len + (len - j) % len] = 1.0;
    }
    Ok(Tensor::from_vec(m, (len, len), device)?.to_dtype(dtype)?)
}

/// Projects a packed spectrum onto its conjugate-symmetric part,
/// `(F(k) + conj F(-k)) / 2`, whose inverse transform is real.
pub fn hermitian_part(f: &Tensor) -> Result<Tensor> {
    let (re, im) = split_packed(f)?;
    let (mut re_r, mut im_r) = (re.clone(), im.clone());
    for axis in [0usize, 2, 3] {
        let len = re.dim(axis)?;
        if len == 1 {
            continue;
        }
        let p = reversal(len, re.device(), re.dtype())?;
        re_r = along_axis(&re_r, axis, &p)?;
        im_r = along_axis(&im_r, axis, &p)?;
    }
    let re_h = ((re + re_r)? * 0.5)?;
    let im_h = ((im - im_r)? * 0.5)?;
    Ok(Tensor::cat(&[&re_h, &im_h], 1)?)
}

#[derive(Debug, Clone)]
struct CoefMlp {
    l1: Linear,
    l2: Linear,
}

impl CoefMlp {
    fn new(pb: &ParamBuilder, input: usize, width: usize) -> Result<Self> {
        Ok(Self { l1: Linear::new(&pb.pp("l1"), input, width)?, l2: Linear::new(&pb.pp("l2"), width, width)? })
    }
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.silu()?)
    }
}

/// Frequency-domain texture refinement of a guidance feature grid, referenced
/// on the patch latent and the latent of the resized global frames.
#[derive(Debug, Clone)]
pub struct TextureModule {
    patch_mlp: CoefMlp,
    global_mlp: CoefMlp,
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    proj: Conv2d,
    width: usize,
    latent_channels: usize,
}

#[derive(Debug, Clone)]
pub struct TextureOutput {
    pub out: Tensor,
    /// `[1, n*h*w, 2*n*h*w]` attention of mid coefficients over
    /// `[patch ; global]` coefficients.
    pub weights: Tensor,
}

impl TextureModule {
    /// `width`: channels of the mid feature; `latent_channels`: channels of
    /// the reference latents; `hidden`: token width of the frequency attention.
    pub fn new(pb: &ParamBuilder, width: usize, latent_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            patch_mlp: CoefMlp::new(&pb.pp("patch_mlp"), 2 * latent_channels, hidden)?,
            global_mlp: CoefMlp::new(&pb.pp("global_mlp"), 2 * latent_channels, hidden)?,
            q: Linear::new(&pb.pp("q"), 2 * width, hidden)?,
            k: Linear::new(&pb.pp("k"), hidden, hidden)?,
            v: Linear::new(&pb.pp("v"), hidden, hidden)?,
            attn_out: Linear::new(&pb.pp("attn_out"), hidden, 2 * width)?,
            proj: Conv2d::with_init(&pb.pp("proj"), width, width, 1, 1, 0, Init::Zeros)?,
            width,
            latent_channels,
        })
    }

    pub fn forward(&self, mid: &Tensor, patch_latent: &Tensor, global_latent: &Tensor) -> Result<TextureOutput> {
        let (n, c, h, w) = mid.dims4()?;
        if c != self.width {
            return Err(config_err!("texture module width {} got mid with {c} channels", self.width));
        }
        for (name, r) in [("patch", patch_latent), ("global", global_latent)] {
            let (rn, rc, rh, rw) = r.dims4()?;
            if (rn, rh, rw) != (n, h, w) || rc != self.latent_channels {
                return Err(config_err!(
                    "{name} latent {:?} does not match mid grid ({n}, {}, {h}, {w})",
                    r.dims(),
                    self.latent_channels
                ));
            }
        }
        let coef_tokens = |x: &Tensor| -> Result<Tensor> {
            // [n, 2c, h, w] -> [1, n*h*w, 2c]
            let t = to_tokens(&fft_pack(x)?)?;
            let width = t.dim(2)?;
            Ok(t.reshape((1, n * h * w, width))?)
        };
        let p = self.patch_mlp.forward(&coef_tokens(patch_latent)?)?;
        let g = self.global_mlp.forward(&coef_tokens(global_latent)?)?;
        let reference = Tensor::cat(&[&p, &g], 1)?;
        let m = coef_tokens(mid)?;
        let att = attend(&self.q.forward(&m)?, &self.k.forward(&reference)?, &self.v.forward(&reference)?, None)?;
        let spec = self.attn_out.forward(&att.out)?.reshape((n, h * w, 2 * c))?;
        let spec = from_tokens(&spec, h, w)?;
        let feat = ifft_unpack(&hermitian_part(&spec)?)?;
        let out = (mid + self.proj.forward(&feat)?)?;
        Ok(TextureOutput { out, weights: att.weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let mut r = rng::stream(seed, "fft-test");
        Tensor::from_vec(rng::normal_vec_f64(&mut r, n), shape, &Device::Cpu).unwrap()
    }

    /// Separable 3D FFT oracle with rustfft over (n, h, w) per channel.
    fn oracle(x: &Tensor) -> Vec<Complex<f64>> {
        let (n, c, h, w) = x.dims4().unwrap();
        let v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&a| Complex::new(a, 0.0)).collect();
        let mut planner = FftPlanner::new();
        let idx = |f: usize, ch: usize, y: usize, xx: usize| ((f * c + ch) * h + y) * w + xx;
        for (len, axis) in [(n, 0), (h, 2), (w, 3)] {
            let fft = planner.plan_fft_forward(len);
            for f in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let start = [f, ch, y, xx];
                            if start[axis] != 0 {
                                continue;
                            }
                            let mut line: Vec<Complex<f64>> = (0..len)
                                .map(|i| {
                                    let mut p = start;
                                    p[axis] = i;
                                    buf[idx(p[0], p[1], p[2], p[3])]
                                })
                                .collect();
                            fft.process(&mut line);
                            for (i, val) in line.into_iter().enumerate() {
                                let mut p = start;
                                p[axis] = i;
                                buf[idx(p[0], p[1], p[2], p[3])] = val;
                            }
                        }
                    }
                }
            }
        }
        let norm = 1.0 / ((n * h * w) as f64).sqrt();
        buf.into_iter().map(|z| z * norm).collect()
    }

    #[test]
    fn matches_rustfft_oracle() {
        let x = randn(1, &[4, 3, 8, 6]);
        let packed = fft_pack(&x).unwrap();
        let (re, im) = split_packed(&packed).unwrap();
        let re = re.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let im = im.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, z) in oracle(&x).into_iter().enumerate() {
            assert!((re[i] - z.re).abs() < 1e-9 && (im[i] - z.im).abs() < 1e-9, "coef {i}");
        }
    }

    #[test]
    fn constant_input_is_dc_only() {
        let v = 0.7;
        let x = (Tensor::ones((2, 1, 4, 4), DType::F64, &Device::Cpu).unwrap() * v).unwrap();
        let f = fft_pack(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((f[0] - v * 32f64.sqrt()).abs() < 1e-12);
        assert!(f[1..].iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn round_trip_parseval_and_linearity() {
        let x = randn(2, &[4, 4, 8, 8]);
        let y = randn(3, &[4, 4, 8, 8]);
        let fx = fft_pack(&x).unwrap();
        let back = ifft_unpack(&fx).unwrap();
        let err = (&back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-10);
        let nx = x.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let nf = fx.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((nx - nf).abs() / nx < 1e-10);
        let combo = ((&x * 2.0).unwrap() + (&y * -0.5).unwrap()).unwrap();
        let lhs = fft_pack(&combo).unwrap();
        let rhs = ((&fx * 2.0).unwrap() + (fft_pack(&y).unwrap() * -0.5).unwrap()).unwrap();
        let d = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-10);
    }

    #[test]
    fn dc_only_spectrum_gives_mean() {
        let x = randn(4, &[2, 2, 4, 4]);
        let f = fft_pack(&x).unwrap();
        let mut mask = vec![0f64; f.elem_count()];
        for ch in 0..2 {
            mask[ch * 16] = 1.0; // real DC of frame-0 row of each channel
        }
        let mask = Tensor::from_vec(mask, f.shape(), &Device::Cpu).unwrap();
        let out = ifft_unpack(&(f * mask).unwrap()).unwrap();
        let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let d = out.broadcast_sub(&mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn zero_spectrum_gives_zero() {
        let out = ifft_unpack(&Tensor::zeros((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(out.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut v = vec![0f64; 2 * 2 * 4 * 4];
        v[16 + 1] = 1.0; // imaginary coefficient at a non-self-conjugate position
        let f = Tensor::from_vec(v, (2, 2, 4, 4), &Device::Cpu).unwrap();
        assert!(matches!(ifft_unpack(&f), Err(Error::Numerical(_))));
        assert!(ifft_unpack(&hermitian_part(&f).unwrap()).is_ok());
    }

    #[test]
    fn texture_module_identity_at_init_and_shape_errors() {
        let store = ParamStore::new(0, Device::Cpu, DType::F64);
        let tm = TextureModule::new(&store.builder("frequency.t"), 3, 2, 8).unwrap();
        let mid = randn(5, &[2, 3, 4, 4]);
        let p = randn(6, &[2, 2, 4, 4]);
        let out = tm.forward(&mid, &p, &p).unwrap();
        let d = (out.out - &mid).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(out.weights.dims(), &[1, 32, 64]);
        let bad = randn(7, &[2, 2, 2, 2]);
        assert!(matches!(tm.forward(&mid, &bad, &p), Err(Error::Config(_))));
    }

    #[test]
    fn texture_gradients_match_finite_differences() {
        let store = ParamStore::new(11, Device::Cpu, DType::F64);
        let pb = store.builder("frequency.t");
        TextureModule::new(&pb, 2, 2, 4).unwrap();
        // a zero projection would hide every path but the residual
        store.insert("frequency.t.proj.weight", &randn(12, &[2, 2, 1, 1])).unwrap();
        let inputs = [randn(13, &[2, 2, 4, 4]), randn(14, &[2, 2, 4, 4]), randn(15, &[2, 2, 4, 4])];
        let probe = randn(16, &[2, 2, 4, 4]);
        let loss = |xs: &[Tensor]| -> Result<Tensor> {
            let tm = TextureModule::new(&pb, 2, 2, 4)?;
            Ok(tm.forward(&xs[0], &xs[1], &xs[2])?.out.mul(&probe)?.sum_all()?)
        };
        for i in 0..3 {
            let var = candle_core::Var::from_tensor(&inputs[i]).unwrap();
            let mut xs = inputs.clone();
            xs[i] = var.as_tensor().clone();
            let grads = loss(&xs).unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap();
            let err = crate::nn::finite_difference_error(&inputs[i], g, 1e-5, |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                Ok(loss(&xs)?.to_scalar::<f64>()?)
            })
            .unwrap();
            assert!(err < 1e-3, "input {i}: relative error {err}");
        }
        for name in ["frequency.t.q.weight", "frequency.t.patch_mlp.l1.weight", "frequency.t.attn_out.weight"] {
            let var = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let base = var.as_tensor().copy().unwrap();
            let grads = loss(&inputs).unwrap().backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap().copy().unwrap();
            let err = crate::nn::finite_difference_error(&base, &g, 1e-5, |x| {
                store.insert(name, x)?;
                let v = loss(&inputs)?.to_scalar::<f64>()?;
                store.insert(name, &base)?;
                Ok(v)
            })
            .unwrap();
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }
}
