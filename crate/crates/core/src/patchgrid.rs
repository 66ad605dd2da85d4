//! Overlapped 3D patch decomposition, extraction and feathered reassembly.
//!
//! Patch starts advance by `patch - overlap` along each axis; the last patch
//! on an axis is clamped flush to the border, so its overlap with the
//! previous one can exceed the configured value. Specs are ordered
//! temporal-major, then row, then column.

use candle_core::Tensor;

use crate::error::{config_err, input_err, Error, Result};
use crate::latent::LatentVolume;
use crate::volume::FrameVolume;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub t0: usize,
    pub t1: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    /// `(x0/W, y0/H, x1/W, y1/H)`
    pub norm_bbox: [f32; 4],
}

impl PatchSpec {
    pub fn new(t: (usize, usize), y: (usize, usize), x: (usize, usize), dims: (usize, usize, usize)) -> Result<Self> {
        let (n, h, w) = dims;
        if !(t.0 < t.1 && t.1 <= n && y.0 < y.1 && y.1 <= h && x.0 < x.1 && x.1 <= w) {
            return Err(input_err!("patch {t:?}x{y:?}x{x:?} outside volume {dims:?}"));
        }
        let mut spec = Self { t0: t.0, t1: t.1, y0: y.0, y1: y.1, x0: x.0, x1: x.1, norm_bbox: [0.0; 4] };
        spec.norm_bbox = normalize_bbox(&spec, (h, w));
        Ok(spec)
    }

    /// Whole-volume spec.
    pub fn full(dims: (usize, usize, usize)) -> Self {
        Self::new((0, dims.0), (0, dims.1), (0, dims.2), dims).expect("non-empty dims")
    }

    pub fn frames(&self) -> usize {
        self.t1 - self.t0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn contains(&self, t: usize, y: usize, x: usize) -> bool {
        (self.t0..self.t1).contains(&t) && (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Maps pixel coordinates onto a grid downscaled by `stride`. Every
    /// coordinate must divide exactly, except an end coordinate lying on a
    /// non-multiple frame border, which rounds up.
    pub fn to_latent(&self, stride: usize, frame_hw: (usize, usize)) -> Result<PatchSpec> {
        let div = |v: usize, border: usize, what: &str| -> Result<usize> {
            if v % stride == 0 {
                Ok(v / stride)
            } else if v == border {
                Ok(v.div_ceil(stride))
            } else {
                Err(Error::Alignment(format!("{what}={v} not divisible by latent stride {stride}")))
            }
        };
        let (h, w) = frame_hw;
        let (lh, lw) = (h.div_ceil(stride), w.div_ceil(stride));
        let y0 = div(self.y0, usize::MAX, "y0")?;
        let y1 = div(self.y1, h, "y1")?;
        let x0 = div(self.x0, usize::MAX, "x0")?;
        let x1 = div(self.x1, w, "x1")?;
        if y1 > lh || x1 > lw {
            return Err(Error::Alignment("latent patch exceeds latent grid".into()));
        }
        // The bbox stays the pixel-space position of the patch in its frame.
        Ok(PatchSpec { t0: self.t0, t1: self.t1, y0, y1, x0, x1, norm_bbox: self.norm_bbox })
    }
}

/// Normalized `(x0/W, y0/H, x1/W, y1/H)` of a spec in an `H x W` frame.
pub fn normalize_bbox(spec: &PatchSpec, frame_hw: (usize, usize)) -> [f32; 4] {
    let (h, w) = (frame_hw.0 as f32, frame_hw.1 as f32);
    [
        spec.x0 as f32 / w,
        spec.y0 as f32 / h,
        spec.x1 as f32 / w,
        spec.y1 as f32 / h,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub specs: Vec<PatchSpec>,
    pub patch: (usize, usize, usize),
    pub overlap: (usize, usize, usize),
    pub frame_dims: (usize, usize, usize),
    /// Number of starts along (frames, rows, cols).
    pub counts: (usize, usize, usize),
}

/// Start offsets along one axis of length `len`.
pub fn axis_starts(len: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < len {
        starts.push(s);
        s += stride;
    }
    let flush = len - patch;
    if starts.last() != Some(&flush) {
        starts.push(flush);
    }
    starts
}

pub fn build_grid(
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    overlap: (usize, usize, usize),
) -> Result<PatchGrid> {
    let (n, h, w) = dims;
    let (pt, ph, pw) = patch;
    let (ot, oy, ox) = overlap;
    if n == 0 || h == 0 || w == 0 {
        return Err(config_err!("empty frame dims {dims:?}"));
    }
    if pt == 0 || ph == 0 || pw == 0 {
        return Err(config_err!("empty patch dims {patch:?}"));
    }
    if pt > n || ph > h || pw > w {
        return Err(config_err!("patch {patch:?} larger than frames {dims:?}"));
    }
    if ot >= pt || oy >= ph || ox >= pw {
        return Err(config_err!("overlap {overlap:?} must be smaller than patch {patch:?}"));
    }
    let ts = axis_starts(n, pt, ot);
    let ys = axis_starts(h, ph, oy);
    let xs = axis_starts(w, pw, ox);
    let mut specs = Vec::with_capacity(ts.len() * ys.len() * xs.len());
    for &t in &ts {
        for &y in &ys {
            for &x in &xs {
                specs.push(PatchSpec::new((t, t + pt), (y, y + ph), (x, x + pw), dims)?);
            }
        }
    }
    Ok(PatchGrid {
        specs,
        patch,
        overlap,
        frame_dims: dims,
        counts: (ts.len(), ys.len(), xs.len()),
    })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.specs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// `(t, row, col)` position of spec `i` in the grid.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let (_, ny, nx) = self.counts;
        (i / (ny * nx), (i / nx) % ny, i % nx)
    }

    pub fn index_of(&self, t: usize, row: usize, col: usize) -> Option<usize> {
        let (nt, ny, nx) = self.counts;
        (t < nt && row < ny && col < nx).then(|| (t * ny + row) * nx + col)
    }

    /// Same grid expressed on a latent lattice downscaled by `stride`.
    pub fn to_latent(&self, stride: usize) -> Result<PatchGrid> {
        let (n, h, w) = self.frame_dims;
        let specs = self
            .specs
            .iter()
            .map(|s| s.to_latent(stride, (h, w)))
            .collect::<Result<Vec<_>>>()?;
        let first = specs.first().ok_or_else(|| config_err!("empty grid"))?;
        Ok(PatchGrid {
            patch: (first.frames(), first.height(), first.width()),
            overlap: (self.overlap.0, self.overlap.1 / stride, self.overlap.2 / stride),
            frame_dims: (n, h.div_ceil(stride), w.div_ceil(stride)),
            counts: self.counts,
            specs,
        })
    }

    /// Separable feather weights of patch `i`, one vector per axis.
    ///
    /// Each margin shared with a neighbour gets the ramp `(d + 0.5) / m`, with
    /// `d` the distance from the patch edge and `m` the overlap with that
    /// neighbour; the rest of the patch has weight 1. Where exactly two
    /// patches overlap the ramps already sum to one.
    pub fn feather_weights(&self, i: usize) -> [Vec<f32>; 3] {
        let (ti, yi, xi) = self.position(i);
        let spec = &self.specs[i];
        let axis = |k: usize, idx: usize, count: usize, lo: usize, hi: usize| -> Vec<f32> {
            let neighbour = |j: usize| {
                let pos = match k {
                    0 => self.index_of(j, yi, xi),
                    1 => self.index_of(ti, j, xi),
                    _ => self.index_of(ti, yi, j),
                };
                let s = &self.specs[pos.expect("neighbour within grid")];
                match k {
                    0 => (s.t0, s.t1),
                    1 => (s.y0, s.y1),
                    _ => (s.x0, s.x1),
                }
            };
            let left = if idx > 0 { neighbour(idx - 1).1.saturating_sub(lo) } else { 0 };
            let right = if idx + 1 < count { hi.saturating_sub(neighbour(idx + 1).0) } else { 0 };
            (lo..hi)
                .map(|p| {
                    let mut wgt = 1.0f32;
                    let from_lo = (p - lo) as f32 + 0.5;
                    let from_hi = (hi - p) as f32 - 0.5;
                    if left > 0 && from_lo < left as f32 {
                        wgt = wgt.min(from_lo / left as f32);
                    }
                    if right > 0 && from_hi < right as f32 {
                        wgt = wgt.min(from_hi / right as f32);
                    }
                    wgt
                })
                .collect()
        };
        let (nt, ny, nx) = self.counts;
        [
            axis(0, ti, nt, spec.t0, spec.t1),
            axis(1, yi, ny, spec.y0, spec.y1),
            axis(2, xi, nx, spec.x0, spec.x1),
        ]
    }
}

/// Volumes that can be cut into grid patches and stitched back together.
pub trait Patchable: Sized {
    fn extract(&self, spec: &PatchSpec) -> Result<Self>;
    fn assemble(patches: &[Self], grid: &PatchGrid) -> Result<Self>;
}

pub fn extract_patch<V: Patchable>(vol: &V, spec: &PatchSpec) -> Result<V> {
    vol.extract(spec)
}

pub fn assemble_patches<V: Patchable>(patches: &[V], grid: &PatchGrid) -> Result<V> {
    V::assemble(patches, grid)
}

/// Weighted accumulation shared by all patchable layouts.
///
/// `index(t, y, x, c)` maps full-volume coordinates to a flat offset in a
/// buffer of `channels` values per site; patch data uses the same layout
/// restricted to the patch.
fn feather_assemble(
    grid: &PatchGrid,
    channels: usize,
    patch_data: &[Vec<f32>],
    channel_last: bool,
) -> Result<Vec<f32>> {
    let (n, h, w) = grid.frame_dims;
    let mut acc = vec![0f64; n * h * w * channels];
    let mut wsum = vec![0f64; n * h * w];
    let full_index = |t: usize, y: usize, x: usize, c: usize| {
        if channel_last {
            ((t * h + y) * w + x) * channels + c
        } else {
            ((t * channels + c) * h + y) * w + x
        }
    };
    for (i, (spec, data)) in grid.specs.iter().zip(patch_data).enumerate() {
        let (pt, ph, pw) = (spec.frames(), spec.height(), spec.width());
        if data.len() != pt * ph * pw * channels {
            return Err(Error::Assembly(format!(
                "patch {i} has {} values, spec needs {}",
                data.len(),
                pt * ph * pw * channels
            )));
        }
        let [wt, wy, wx] = grid.feather_weights(i);
        for t in 0..pt {
            for y in 0..ph {
                for x in 0..pw {
                    let wgt = f64::from(wt[t] * wy[y] * wx[x]);
                    let site = ((spec.t0 + t) * h + spec.y0 + y) * w + spec.x0 + x;
                    wsum[site] += wgt;
                    for c in 0..channels {
                        let pi = if channel_last {
                            ((t * ph + y) * pw + x) * channels + c
                        } else {
                            ((t * channels + c) * ph + y) * pw + x
                        };
                        acc[full_index(spec.t0 + t, spec.y0 + y, spec.x0 + x, c)] += wgt * f64::from(data[pi]);
                    }
                }
            }
        }
    }
    let mut out = vec![0f32; acc.len()];
    for t in 0..n {
        for y in 0..h {
            for x in 0..w {
                let ws = wsum[(t * h + y) * w + x];
                if ws <= 0.0 {
                    return Err(Error::Assembly(format!("site ({t},{y},{x}) not covered by any patch")));
                }
                for c in 0..channels {
                    let k = full_index(t, y, x, c);
                    out[k] = (acc[k] / ws) as f32;
                }
            }
        }
    }
    Ok(out)
}

fn check_count<V>(patches: &[V], grid: &PatchGrid) -> Result<()> {
    if patches.len() != grid.len() {
        return Err(Error::Assembly(format!("{} patches for {} specs", patches.len(), grid.len())));
    }
    Ok(())
}

impl Patchable for FrameVolume {
    fn extract(&self, spec: &PatchSpec) -> Result<Self> {
        self.crop((spec.t0, spec.t1), (spec.y0, spec.y1), (spec.x0, spec.x1))
    }

    fn assemble(patches: &[Self], grid: &PatchGrid) -> Result<Self> {
        check_count(patches, grid)?;
        let channels = patches.first().map(|p| p.channels()).unwrap_or(3);
        for (i, (p, s)) in patches.iter().zip(&grid.specs).enumerate() {
            if p.dims() != (s.frames(), s.height(), s.width(), channels) {
                return Err(Error::Assembly(format!("patch {i} has dims {:?}", p.dims())));
            }
        }
        let data: Vec<Vec<f32>> = patches.iter().map(|p| p.data().to_vec()).collect();
        let out = feather_assemble(grid, channels, &data, true)?;
        let (n, h, w) = grid.frame_dims;
        let fps = patches.first().map(|p| p.fps).unwrap_or(FrameVolume::DEFAULT_FPS);
        Ok(FrameVolume::new_clamped(out, n, h, w, channels)?.with_fps(fps))
    }
}

/// Slices a `[n, c, h, w]` tensor along frames, rows and columns.
pub fn extract_tensor(t: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (n, _, h, w) = t.dims4()?;
    if spec.t1 > n || spec.y1 > h || spec.x1 > w {
        return Err(input_err!("spec {spec:?} outside tensor {:?}", t.dims()));
    }
    Ok(t
        .narrow(0, spec.t0, spec.frames())?
        .narrow(2, spec.y0, spec.height())?
        .narrow(3, spec.x0, spec.width())?
        .contiguous()?)
}

/// Feathered reassembly of `[n, c, h, w]` patch tensors on `grid`'s lattice.
pub fn assemble_tensors(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    check_count(patches, grid)?;
    let first = patches.first().ok_or_else(|| Error::Assembly("no patches".into()))?;
    let channels = first.dim(1)?;
    let mut data = Vec::with_capacity(patches.len());
    for (i, (p, s)) in patches.iter().zip(&grid.specs).enumerate() {
        if p.dims() != [s.frames(), channels, s.height(), s.width()] {
            return Err(Error::Assembly(format!("patch {i} has dims {:?}", p.dims())));
        }
        data.push(p.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    let out = feather_assemble(grid, channels, &data, false)?;
    let (n, h, w) = grid.frame_dims;
    Ok(Tensor::from_vec(out, (n, channels, h, w), first.device())?.to_dtype(first.dtype())?)
}

impl Patchable for LatentVolume {
    /// `spec` is in pixel units and is divided by the latent stride.
    fn extract(&self, spec: &PatchSpec) -> Result<Self> {
        let (_, h, w, _) = self.dims();
        let s = self.stride();
        let lspec = spec.to_latent(s, (h * s, w * s))?;
        Ok(LatentVolume::from_tensor_unchecked(extract_tensor(self.tensor(), &lspec)?, s))
    }

    /// `grid` is in pixel units.
    fn assemble(patches: &[Self], grid: &PatchGrid) -> Result<Self> {
        let stride = patches.first().map(|p| p.stride()).ok_or_else(|| Error::Assembly("no patches".into()))?;
        let lgrid = grid.to_latent(stride)?;
        let tensors: Vec<Tensor> = patches.iter().map(|p| p.tensor().clone()).collect();
        Ok(LatentVolume::from_tensor_unchecked(assemble_tensors(&tensors, &lgrid)?, stride))
    }
}
