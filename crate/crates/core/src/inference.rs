//! Patch-consistent restoration of full-resolution clips.
//!
//! A low-resolution pre-restoration of the whole clip is encoded once as the
//! global residual. At every sampler step it is renoised to the current
//! level and blended into the full-frame latent with a cosine weight; the
//! blend is then tiled, each patch denoised in raster order (optionally
//! attending to cached keys of its left and top-left neighbours) and the
//! patches reassembled with feathered weights.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::error::{config_err, input_err, internal_err, Result};
use crate::model::{FrdmModel, PatchCondition};
use crate::nn::{CacheSession, KvCache, ParamStore};
use crate::patchgrid::{assemble_tensors, build_grid, extract_tensor, PatchGrid, PatchSpec};
use crate::rng::indexed_stream;
use crate::training::checkpoint;
use crate::training::schedule::{gaussian_like, NoiseSchedule};
use crate::training::volume_tensor;
use crate::volume::FrameVolume;

/// `c_t = (1 + cos(pi (T - t) / T)) / 4`: 0.5 at `t = T`, 0 at `t = 0`.
pub fn cosine_weight(t: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(input_err!("horizon must be positive"));
    }
    if t > horizon {
        return Err(input_err!("timestep {t} beyond horizon {horizon}"));
    }
    let x = std::f64::consts::PI * (horizon - t) as f64 / horizon as f64;
    Ok(0.25 * (1.0 + x.cos()))
}

/// `(1 - c) z_rs + c z_gr`.
pub fn grfm_fuse(z_rs: &Tensor, z_gr: &Tensor, c: f64) -> Result<Tensor> {
    if z_rs.dims() != z_gr.dims() {
        return Err(internal_err!("restored latent {:?} vs global residual {:?}", z_rs.dims(), z_gr.dims()));
    }
    Ok((z_rs.affine(1.0 - c, 0.0)? + z_gr.affine(c, 0.0)?)?)
}

/// Sampler state over the full-frame latent at one timestep.
#[derive(Debug, Clone)]
pub struct DenoiseState {
    pub t: usize,
    pub horizon: usize,
    pub z_rs: Tensor,
    pub z_gr: Option<Tensor>,
    pub c_t: f64,
}

/// Advances one latent patch from `t` to `t_prev` (`None` is the clean end).
pub trait PatchDenoiser {
    /// Called once per patch, in grid order, before sampling starts.
    fn prepare(&mut self, _index: usize, _spec: &PatchSpec) -> Result<()> {
        Ok(())
    }

    fn denoise(
        &mut self,
        index: usize,
        z_t: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        cache: Option<&mut CacheSession<'_>>,
    ) -> Result<Tensor>;
}

/// Returns every patch unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl PatchDenoiser for IdentityDenoiser {
    fn denoise(&mut self, _: usize, z_t: &Tensor, _: usize, _: Option<usize>, _: Option<&mut CacheSession<'_>>) -> Result<Tensor> {
        Ok(z_t.clone())
    }
}

/// Replaces every patch with a constant.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDenoiser(pub f64);

impl PatchDenoiser for ConstantDenoiser {
    fn denoise(&mut self, _: usize, z_t: &Tensor, _: usize, _: Option<usize>, _: Option<&mut CacheSession<'_>>) -> Result<Tensor> {
        Ok(z_t.ones_like()?.affine(self.0, 0.0)?)
    }
}

/// Clean global-residual latent, renoised to each sampler level with fresh noise.
pub struct GlobalResidual<'a> {
    pub z0: Tensor,
    pub schedule: &'a NoiseSchedule,
    pub seed: u64,
}

impl GlobalResidual<'_> {
    pub fn at(&self, t: usize, step: usize) -> Result<Tensor> {
        let mut r = indexed_stream(self.seed, "infer.global_residual", step as u64);
        let eps = gaussian_like(self.z0.dims(), &mut r, &self.z0)?;
        self.schedule.add_noise(&self.z0, t, &eps)
    }
}

/// Predecessors whose cached keys patch `i` may read. The neighbour slots are
/// left, top-left, top and top-right; the first `capacity` slots are used and
/// missing neighbours are skipped, so the default of two reads only the left
/// and top-left patches.
pub fn kv_neighbours(grid: &PatchGrid, i: usize, capacity: usize) -> Vec<usize> {
    let (t, row, col) = grid.position(i);
    let candidates = [
        (col > 0).then(|| (row, col - 1)),
        (row > 0 && col > 0).then(|| (row - 1, col - 1)),
        (row > 0).then(|| (row - 1, col)),
        (row > 0).then(|| (row - 1, col + 1)),
    ];
    candidates
        .into_iter()
        .take(capacity)
        .flatten()
        .filter_map(|(r, c)| grid.index_of(t, r, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Predecessor patches readable through the KV-cache; `None` disables it.
    pub kv_capacity: Option<usize>,
}

/// Runs the sampler over `timesteps` (descending) on a tiled latent.
///
/// `z_init` is the full latent already at level `timesteps[0]`; `grid` is in
/// latent units. `observe` sees the assembled latent after every step.
#[allow(clippy::too_many_arguments)]
pub fn sample_tiled(
    z_init: &Tensor,
    grid: &PatchGrid,
    timesteps: &[usize],
    horizon: usize,
    global: Option<&GlobalResidual<'_>>,
    denoiser: &mut dyn PatchDenoiser,
    opts: SamplerOptions,
    mut observe: Option<&mut dyn FnMut(&DenoiseState) -> Result<()>>,
) -> Result<Tensor> {
    let (n, _, h, w) = z_init.dims4()?;
    if grid.frame_dims != (n, h, w) {
        return Err(config_err!("grid over {:?} does not match latent {:?}", grid.frame_dims, z_init.dims()));
    }
    for (i, spec) in grid.specs.iter().enumerate() {
        denoiser.prepare(i, spec)?;
    }
    let mut cache = opts.kv_capacity.map(KvCache::new);
    let mut z = z_init.clone();
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied();
        let c_t = cosine_weight(t, horizon)?;
        let (fused, z_gr) = match global {
            Some(g) => {
                let z_gr = g.at(t, k)?;
                (grfm_fuse(&z, &z_gr, c_t)?, Some(z_gr))
            }
            None => (z.clone(), None),
        };
        if let Some(c) = cache.as_mut() {
            c.begin_timestep(t);
        }
        let mut out = Vec::with_capacity(grid.len());
        for (i, spec) in grid.specs.iter().enumerate() {
            let patch = extract_tensor(&fused, spec)?;
            let next = match cache.as_mut() {
                Some(c) => {
                    let neighbours = kv_neighbours(grid, i, c.capacity());
                    let mut session = CacheSession { cache: c, patch: i, neighbours, timestep: t };
                    denoiser.denoise(i, &patch, t, t_prev, Some(&mut session))?
                }
                None => denoiser.denoise(i, &patch, t, t_prev, None)?,
            };
            out.push(next);
        }
        z = assemble_tensors(&out, grid)?;
        if let Some(f) = observe.as_mut() {
            f(&DenoiseState { t, horizon, z_rs: z.clone(), z_gr, c_t })?;
        }
    }
    Ok(z)
}

/// Per-patch conditioning computed once before sampling.
struct Prepared {
    features: Tensor,
    ctx: crate::backbone::ConditionContext,
}

/// The trained model as a patch denoiser for one clip.
pub struct FrdmDenoiser<'a> {
    model: &'a FrdmModel,
    schedule: &'a NoiseSchedule,
    /// Degraded frames padded to the latent grid, `[n, 3, H, W]`.
    frames: Tensor,
    /// Degraded latent, `[n, c, H/s, W/s]`.
    degraded_latent: Tensor,
    global_latent: Tensor,
    global_frames: Tensor,
    caption: String,
    frame_hw: (usize, usize),
    prepared: Vec<Option<Prepared>>,
}

impl<'a> FrdmDenoiser<'a> {
    /// `frames` must already be padded to a multiple of the latent stride.
    pub fn new(model: &'a FrdmModel, schedule: &'a NoiseSchedule, frames: &FrameVolume, caption: &str, patch_size: usize) -> Result<Self> {
        let g = model.cfg.global_size;
        let x = volume_tensor(frames)?;
        let degraded_latent = encode_chunked(model, &x)?;
        let global_latent = encode_chunked(model, &volume_tensor(&frames.resize(patch_size, patch_size)?)?)?;
        Ok(Self {
            model,
            schedule,
            frames: x,
            degraded_latent,
            global_latent,
            global_frames: volume_tensor(&frames.resize(g, g)?)?,
            caption: caption.to_string(),
            frame_hw: (frames.height(), frames.width()),
            prepared: Vec::new(),
        })
    }

    pub fn degraded_latent(&self) -> &Tensor {
        &self.degraded_latent
    }
}

impl PatchDenoiser for FrdmDenoiser<'_> {
    /// `spec` is in latent units.
    fn prepare(&mut self, index: usize, spec: &PatchSpec) -> Result<()> {
        let s = self.model.cfg.stride();
        let pixel = PatchSpec::new(
            (spec.t0, spec.t1),
            (spec.y0 * s, spec.y1 * s),
            (spec.x0 * s, spec.x1 * s),
            (self.frames.dim(0)?, self.frame_hw.0, self.frame_hw.1),
        )?;
        let features = self.model.preprocess.forward(&extract_tensor(&self.frames, &pixel)?, &self.model.ae)?.features;
        let patch_latent = extract_tensor(&self.degraded_latent, spec)?;
        let global_latent = self.global_latent.narrow(0, spec.t0, spec.frames())?;
        let global_frames = self.global_frames.narrow(0, spec.t0, spec.frames())?;
        let ctx = self.model.context(&PatchCondition {
            global_frames: &global_frames,
            caption: &self.caption,
            patch_latent: &patch_latent,
            global_latent: &global_latent,
            norm_bbox: pixel.norm_bbox,
        })?;
        if self.prepared.len() <= index {
            self.prepared.resize_with(index + 1, || None);
        }
        self.prepared[index] = Some(Prepared { features, ctx });
        Ok(())
    }

    fn denoise(
        &mut self,
        index: usize,
        z_t: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        cache: Option<&mut CacheSession<'_>>,
    ) -> Result<Tensor> {
        let p = self
            .prepared
            .get(index)
            .and_then(Option::as_ref)
            .ok_or_else(|| internal_err!("patch {index} denoised before preparation"))?;
        let (eps, _) = self.model.predict_noise(z_t, t, &p.features, &p.ctx, cache)?;
        self.schedule.ddim_step(z_t, &eps, t, t_prev)
    }
}

fn encode_chunked(model: &FrdmModel, x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let mut parts = Vec::new();
    for t in (0..n).step_by(8) {
        parts.push(model.ae.encode_tensor(&x.narrow(0, t, (t + 8).min(n) - t)?)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn decode_chunked(model: &FrdmModel, z: &Tensor, hw: (usize, usize)) -> Result<FrameVolume> {
    let n = z.dim(0)?;
    let mut parts = Vec::new();
    for t in (0..n).step_by(8) {
        let x = model.ae.decode_tensor(&z.narrow(0, t, (t + 8).min(n) - t)?)?;
        parts.push(x.narrow(2, 0, hw.0)?.narrow(3, 0, hw.1)?.clamp(0.0, 1.0)?);
    }
    FrameVolume::from_tensor(&Tensor::cat(&parts, 0)?)
}

/// Inference settings drawn from a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoreOptions {
    pub seed: u64,
    pub patch: (usize, usize, usize),
    pub overlap: (usize, usize, usize),
    pub sampler_steps: usize,
    pub kv_capacity: Option<usize>,
    pub global_residual: bool,
}

impl From<&RunConfig> for RestoreOptions {
    fn from(c: &RunConfig) -> Self {
        Self {
            seed: c.seed,
            patch: c.patch_dims(),
            overlap: c.overlap_dims(),
            sampler_steps: c.sampler_steps,
            kv_capacity: c.kv_cache.then_some(c.kv_capacity),
            global_residual: c.global_residual,
        }
    }
}

/// Loads the finished stage-2 checkpoint under `cfg.checkpoint_dir`.
pub fn load_model(cfg: &RunConfig) -> Result<FrdmModel> {
    let dir = checkpoint::stage_dir(&cfg.checkpoint_dir, 2);
    let store = ParamStore::new(cfg.seed, Device::Cpu, DType::F32);
    let loaded = checkpoint::load(&dir, &store)?;
    if !loaded.manifest.complete || loaded.manifest.stages_done != [0, 1, 2] {
        return Err(config_err!("checkpoint {} has not finished all training stages", dir.display()));
    }
    if loaded.config.model != cfg.model {
        return Err(config_err!("model settings differ from checkpoint {}", dir.display()));
    }
    FrdmModel::build(&store, &cfg.model)
}

struct Debug<'a> {
    dir: &'a Path,
    label: &'a str,
}

/// Encodes `frames` (padded to the stride), noises to the top sampler level
/// and samples on a grid of `patch`/`overlap` pixels.
fn restore_padded(
    model: &FrdmModel,
    frames: &FrameVolume,
    caption: &str,
    opts: &RestoreOptions,
    patch: (usize, usize, usize),
    overlap: (usize, usize, usize),
    global: Option<&FrameVolume>,
    debug: Option<Debug<'_>>,
) -> Result<Tensor> {
    let schedule = NoiseSchedule::default_for(model.cfg.timesteps)?;
    let s = model.cfg.stride();
    let (n, h, w, _) = frames.dims();
    let grid = build_grid((n, h, w), patch, overlap)?.to_latent(s)?;
    let timesteps = schedule.strided(opts.sampler_steps)?;
    let mut den = FrdmDenoiser::new(model, &schedule, frames, caption, opts.patch.1)?;
    let z_lq = den.degraded_latent().clone();
    let mut r = indexed_stream(opts.seed, "infer.lq", 0);
    let eps = gaussian_like(z_lq.dims(), &mut r, &z_lq)?;
    let z_top = schedule.add_noise(&z_lq, timesteps[0], &eps)?;
    let global = match global {
        Some(v) => Some(GlobalResidual {
            z0: encode_chunked(model, &volume_tensor(v)?)?,
            schedule: &schedule,
            seed: opts.seed,
        }),
        None => None,
    };
    let mut step = 0usize;
    let mut preview = |st: &DenoiseState| -> Result<()> {
        if let Some(d) = &debug {
            let first = st.z_rs.narrow(0, 0, 1)?;
            let img = decode_chunked(model, &first, (h, w))?;
            crate::synthdata::io::write_frame_png(
                &d.dir.join(format!("{}_step{step:03}_t{}.png", d.label, st.t)),
                img.frame(0),
                h,
                w,
                img.channels(),
            )?;
        }
        step += 1;
        Ok(())
    };
    sample_tiled(
        &z_top,
        &grid,
        &timesteps,
        model.cfg.timesteps,
        global.as_ref(),
        &mut den,
        SamplerOptions { kv_capacity: opts.kv_capacity },
        Some(&mut preview),
    )
}

fn pad_to_stride(v: &FrameVolume, s: usize) -> Result<FrameVolume> {
    let (h, w) = (v.height().div_ceil(s) * s, v.width().div_ceil(s) * s);
    if (h, w) == (v.height(), v.width()) {
        Ok(v.clone())
    } else {
        v.pad_reflect(h, w)
    }
}

/// Low-resolution restoration of the whole clip: fit into one patch
/// (aspect preserved), reflect-pad, restore over temporal windows only,
/// crop and resize back.
pub fn pre_restore_global(model: &FrdmModel, video: &FrameVolume, caption: &str, opts: &RestoreOptions, debug_dir: Option<&Path>) -> Result<FrameVolume> {
    let (n, h, w, _) = video.dims();
    let (pt, ps, _) = opts.patch;
    if n < pt {
        return Err(config_err!("clip has {n} frames, fewer than the patch length {pt}"));
    }
    let scale = (ps as f64 / h as f64).min(ps as f64 / w as f64).min(1.0);
    let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
    let small = video.resize(sh, sw)?;
    let padded = if (sh, sw) == (ps, ps) { small } else { small.pad_reflect(ps, ps)? };
    let debug = debug_dir.map(|dir| Debug { dir, label: "global" });
    let z = restore_padded(model, &padded, caption, opts, (pt, ps, ps), (opts.overlap.0, 0, 0), None, debug)?;
    let restored = decode_chunked(model, &z, (ps, ps))?;
    let cropped = restored.crop((0, n), (0, sh), (0, sw))?;
    cropped.resize(h, w)
}

/// Full restoration pipeline; output has the input's dimensions, in [0,1].
pub fn restore_video(model: &FrdmModel, video: &FrameVolume, caption: &str, opts: &RestoreOptions, debug_dir: Option<&Path>) -> Result<FrameVolume> {
    let (n, h, w, c) = video.dims();
    let (pt, ps, _) = opts.patch;
    if n < pt || h < ps || w < ps {
        return Err(config_err!("clip {n}x{h}x{w} is smaller than the patch {pt}x{ps}x{ps}"));
    }
    if let Some(d) = debug_dir {
        std::fs::create_dir_all(d)?;
    }
    let rgb = if c == 1 { FrameVolume::from_tensor(&volume_tensor(video)?)? } else { video.clone() };
    let s = model.cfg.stride();
    let padded = pad_to_stride(&rgb, s)?;
    let global = if opts.global_residual {
        let g = pre_restore_global(model, &rgb, caption, opts, debug_dir)?;
        if let Some(d) = debug_dir {
            crate::synthdata::io::write_frames(&d.join("pre_restored"), &g)?;
        }
        Some(pad_to_stride(&g, s)?)
    } else {
        None
    };
    let debug = debug_dir.map(|dir| Debug { dir, label: "restore" });
    let z = restore_padded(model, &padded, caption, opts, opts.patch, opts.overlap, global.as_ref(), debug)?;
    let out = decode_chunked(model, &z, (h, w))?;
    if c == 1 {
        let lum = out.luminance();
        return FrameVolume::new_clamped(lum, n, h, w, 1);
    }
    Ok(out)
}
