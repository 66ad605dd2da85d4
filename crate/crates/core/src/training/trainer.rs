//! Staged optimization with resumable checkpoints.
//!
//! Stage 0 trains the autoencoder and then the base denoiser on clean
//! latents, stage 1 the preprocessing network, stage 2 the guidance branch
//! with everything pretrained held fixed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::checkpoint::{self, stage_dir, Manifest};
use super::losses::{loss_defect, loss_noise, loss_preprocess, scalar, LossReport, LossWeights};
use super::schedule::{gaussian_like, NoiseSchedule};
use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::model::{FrdmModel, PatchCondition};
use crate::nn::{AdamW, AdamWConfig, FreezePolicy, ParamStore};
use crate::patchgrid::{extract_tensor, PatchSpec};
use crate::rng::indexed_stream;
use crate::synthdata::{DefectMask, DefectSample};
use crate::volume::FrameVolume;

pub const STAGES: u8 = 3;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (with an incomplete checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Completed steps, counting from 1.
    pub step: u64,
    pub report: LossReport,
    pub trainable_grad_norm: f64,
    /// Gradient norm reaching frozen parameters; zero when freezing holds.
    pub frozen_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub records: Vec<StepRecord>,
    pub complete: bool,
    pub frozen_groups: Vec<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Autoencoder,
    Denoiser,
    Preprocess,
    Guidance,
}

impl Phase {
    fn frozen(self) -> (Vec<&'static str>, bool) {
        match self {
            Phase::Autoencoder => (vec!["unet_base", "preprocess", "guidance", "fusion", "frequency"], false),
            Phase::Denoiser => (vec!["autoencoder", "preprocess", "guidance", "fusion", "frequency"], false),
            Phase::Preprocess => (vec!["autoencoder", "unet_base", "guidance", "fusion", "frequency"], false),
            Phase::Guidance => (vec!["autoencoder", "unet_base", "preprocess"], true),
        }
    }

    fn policy(self) -> FreezePolicy {
        let (groups, temporal) = self.frozen();
        FreezePolicy::groups(groups, temporal)
    }

    fn frozen_text(self) -> String {
        let (mut groups, temporal) = self.frozen();
        if temporal {
            groups.push("temporal");
        }
        groups.join(",")
    }

    fn lr(self, cfg: &RunConfig) -> f64 {
        match self {
            Phase::Autoencoder => cfg.lr_ae,
            Phase::Denoiser => cfg.lr_unet,
            Phase::Preprocess => cfg.lr_preprocess,
            Phase::Guidance => cfg.lr_guidance,
        }
    }

    fn log_file(self) -> &'static str {
        match self {
            Phase::Autoencoder => "ae_loss.csv",
            _ => "loss.csv",
        }
    }

    fn csv_header(self) -> &'static str {
        match self {
            Phase::Autoencoder => "step,l_recon",
            _ => LossReport::csv_header(),
        }
    }
}

/// Groups frozen during `stage` (for stage 0, its denoiser phase).
pub fn frozen_groups(stage: u8) -> Vec<&'static str> {
    let phase = match stage {
        0 => Phase::Denoiser,
        1 => Phase::Preprocess,
        _ => Phase::Guidance,
    };
    let (mut g, temporal) = phase.frozen();
    if temporal {
        g.push("temporal");
    }
    g
}

/// Phase and step span `(start, len)` within the stage.
fn phases(stage: u8, cfg: &RunConfig) -> Vec<(Phase, u64, u64)> {
    match stage {
        0 => vec![
            (Phase::Autoencoder, 0, cfg.steps_ae as u64),
            (Phase::Denoiser, cfg.steps_ae as u64, cfg.steps_unet as u64),
        ],
        1 => vec![(Phase::Preprocess, 0, cfg.steps_preprocess as u64)],
        _ => vec![(Phase::Guidance, 0, cfg.steps_guidance as u64)],
    }
}

fn rgb(t: Tensor) -> Result<Tensor> {
    Ok(if t.dim(1)? == 1 { t.repeat((1, 3, 1, 1))? } else { t })
}

pub(crate) fn volume_tensor(v: &FrameVolume) -> Result<Tensor> {
    rgb(v.to_tensor(&Device::Cpu, DType::F32)?)
}

fn mask_tensor(m: &DefectMask, spec: &PatchSpec) -> Result<Tensor> {
    let m = m.crop((spec.t0, spec.t1), (spec.y0, spec.y1), (spec.x0, spec.x1))?;
    let (n, h, w) = m.dims();
    Ok(Tensor::from_vec(m.as_f32(), (n, 1, h, w), &Device::Cpu)?)
}

fn crop_spec(v: &FrameVolume, spec: &PatchSpec) -> Result<Tensor> {
    volume_tensor(&v.crop((spec.t0, spec.t1), (spec.y0, spec.y1), (spec.x0, spec.x1))?)
}

fn check_samples(samples: &[DefectSample], cfg: &RunConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(config_err!("no training samples"));
    }
    let (pt, ps, _) = cfg.patch_dims();
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let (n, h, w, _) = s.clean.dims();
        if n < pt || h < ps || w < ps || h < cfg.ae_crop || w < cfg.ae_crop {
            return Err(config_err!("sample {i} ({n}x{h}x{w}) is smaller than the training patch {pt}x{ps}x{ps}"));
        }
    }
    Ok(())
}

/// Random stride-aligned patch of `cfg.patch_dims()` in a clip.
fn random_patch(r: &mut impl Rng, dims: (usize, usize, usize), cfg: &RunConfig, stride: usize) -> Result<PatchSpec> {
    let (n, h, w) = dims;
    let (pt, ps, _) = cfg.patch_dims();
    let t0 = r.random_range(0..=n - pt);
    let y0 = stride * r.random_range(0..=(h - ps) / stride);
    let x0 = stride * r.random_range(0..=(w - ps) / stride);
    PatchSpec::new((t0, t0 + pt), (y0, y0 + ps), (x0, x0 + ps), dims)
}

fn latent_crop(z: &Tensor, spec: &PatchSpec, stride: usize) -> Result<Tensor> {
    let l = PatchSpec {
        y0: spec.y0 / stride,
        y1: spec.y1 / stride,
        x0: spec.x0 / stride,
        x1: spec.x1 / stride,
        ..*spec
    };
    extract_tensor(z, &l)
}

/// Encodes a clip a few frames at a time.
fn encode_clip(model: &FrdmModel, v: &FrameVolume) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut t = 0;
    while t < v.frames() {
        let e = (t + 8).min(v.frames());
        let chunk = v.crop((t, e), (0, v.height()), (0, v.width()))?;
        parts.push(model.ae.encode_latent(&chunk, &Device::Cpu, DType::F32)?.into_tensor().detach());
        t = e;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Per-clip tensors reused across guidance steps.
struct ClipCache {
    clean_latent: Tensor,
    degraded_latent: Tensor,
    global_latent: Tensor,
    global_frames: Tensor,
}

fn build_clip_cache(model: &FrdmModel, s: &DefectSample, cfg: &RunConfig) -> Result<ClipCache> {
    let ps = cfg.patch_size;
    let g = model.cfg.global_size;
    Ok(ClipCache {
        clean_latent: encode_clip(model, &s.clean)?,
        degraded_latent: encode_clip(model, &s.degraded)?,
        global_latent: encode_clip(model, &s.degraded.resize(ps, ps)?)?,
        global_frames: volume_tensor(&s.degraded.resize(g, g)?)?,
    })
}

fn frozen_grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in store.frozen() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

fn cosine_lr(base: f64, step: u64, len: u64) -> f64 {
    if len == 0 {
        return base;
    }
    let p = step as f64 / len as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Keeps the header and rows up to `step`, or starts a fresh file.
fn open_log(path: &Path, header: &str, keep_until: u64) -> Result<fs::File> {
    let mut kept = vec![header.to_string()];
    if keep_until > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= keep_until))
                    .map(str::to_string),
            );
        }
    }
    let mut f = fs::File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v} at step {step}")))
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    samples: &'a [DefectSample],
    store: ParamStore,
    model: FrdmModel,
    schedule: NoiseSchedule,
    weights: LossWeights,
    clean_latents: Vec<Tensor>,
    clip_caches: Vec<ClipCache>,
}

impl Trainer<'_> {
    fn rebuild(&mut self, phase: Phase) -> Result<()> {
        self.store.set_policy(phase.policy());
        self.model = FrdmModel::build(&self.store, &self.cfg.model)?;
        Ok(())
    }

    /// Fits the latent scale so clean latents have unit standard deviation.
    fn calibrate_latent_scale(&mut self) -> Result<f64> {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0.0;
        for s in self.samples {
            let mut t = 0;
            while t < s.clean.frames() {
                let e = (t + 8).min(s.clean.frames());
                let x = volume_tensor(&s.clean.crop((t, e), (0, s.clean.height()), (0, s.clean.width()))?)?;
                let s_ = self.cfg.model.stride();
                let (_, _, h, w) = x.dims4()?;
                let z = self.model.ae.encode_raw(&x.narrow(2, 0, h / s_ * s_)?.narrow(3, 0, w / s_ * s_)?)?;
                let z = z.to_dtype(DType::F64)?;
                sum += scalar(&z.sum_all()?)?;
                sq += scalar(&z.sqr()?.sum_all()?)?;
                count += z.elem_count() as f64;
                t = e;
            }
        }
        let mean = sum / count;
        let std = (sq / count - mean * mean).max(1e-12).sqrt();
        let scale = 1.0 / std;
        self.store.insert("autoencoder.latent_scale", &Tensor::new(&[scale as f32], &Device::Cpu)?)?;
        log::info!("latent scale set to {scale:.4} (raw std {std:.4})");
        Ok(scale)
    }

    fn prepare(&mut self, phase: Phase) -> Result<()> {
        match phase {
            Phase::Denoiser if self.clean_latents.is_empty() => {
                self.clean_latents =
                    self.samples.iter().map(|s| encode_clip(&self.model, &s.clean)).collect::<Result<_>>()?;
            }
            Phase::Guidance if self.clip_caches.is_empty() => {
                self.clip_caches =
                    self.samples.iter().map(|s| build_clip_cache(&self.model, s, self.cfg)).collect::<Result<_>>()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Loss tensor to minimize plus its report, for one step.
    fn step_loss(&self, phase: Phase, step: u64) -> Result<(Tensor, LossReport)> {
        let cfg = self.cfg;
        let w = &self.weights;
        let stride = cfg.model.stride();
        match phase {
            Phase::Autoencoder => {
                let mut r = indexed_stream(cfg.seed, "train.autoencoder", step);
                let crop = cfg.ae_crop;
                let mut xs = Vec::with_capacity(cfg.batch_frames);
                for _ in 0..cfg.batch_frames {
                    let s = &self.samples[r.random_range(0..self.samples.len())];
                    let (n, h, wd, _) = s.clean.dims();
                    let f = r.random_range(0..n);
                    let y0 = r.random_range(0..=h - crop);
                    let x0 = r.random_range(0..=wd - crop);
                    let src = if r.random_bool(0.25) { &s.degraded } else { &s.clean };
                    xs.push(volume_tensor(&src.crop((f, f + 1), (y0, y0 + crop), (x0, x0 + crop))?)?);
                }
                let x = Tensor::cat(&xs, 0)?;
                let y = self.model.ae.decode_raw(&self.model.ae.encode_raw(&x)?)?;
                let d = (y - &x)?;
                let loss = (d.abs()?.mean_all()? + d.sqr()?.mean_all()?)?;
                let v = scalar(&loss)?;
                Ok((loss, LossReport { l_total: v, ..Default::default() }))
            }
            Phase::Denoiser => {
                let mut r = indexed_stream(cfg.seed, "train.denoiser", step);
                let (pt, ps, _) = cfg.patch_dims();
                let (lp, mut total, mut ln) = (ps / stride, None::<Tensor>, 0.0);
                for _ in 0..cfg.batch_patches {
                    let c = r.random_range(0..self.samples.len());
                    let z = &self.clean_latents[c];
                    let (n, _, lh, lw) = z.dims4()?;
                    let t0 = r.random_range(0..=n - pt);
                    let y0 = r.random_range(0..=lh - lp);
                    let x0 = r.random_range(0..=lw - lp);
                    let z0 = z.narrow(0, t0, pt)?.narrow(2, y0, lp)?.narrow(3, x0, lp)?.contiguous()?;
                    let t = self.schedule.sample_timestep(&mut r);
                    let eps = gaussian_like(z0.dims(), &mut r, &z0)?;
                    let z_t = self.schedule.add_noise(&z0, t, &eps)?;
                    let pred = self.model.unet.forward(&z_t, t, None)?;
                    let l = loss_noise(&eps, &pred)?;
                    ln += scalar(&l)?;
                    total = Some(match total {
                        Some(a) => (a + l)?,
                        None => l,
                    });
                }
                let k = cfg.batch_patches as f64;
                let loss = total.expect("batch_patches > 0").affine(1.0 / k, 0.0)?;
                Ok((loss, LossReport::new(ln / k, 0.0, 0.0, w)))
            }
            Phase::Preprocess => {
                let mut r = indexed_stream(cfg.seed, "train.preprocess", step);
                let (mut total, mut lp) = (None::<Tensor>, 0.0);
                for _ in 0..cfg.batch_patches {
                    let s = &self.samples[r.random_range(0..self.samples.len())];
                    let (n, h, wd, _) = s.clean.dims();
                    let spec = random_patch(&mut r, (n, h, wd), cfg, stride)?;
                    let deg = crop_spec(&s.degraded, &spec)?;
                    let clean = crop_spec(&s.clean, &spec)?;
                    let pyr = self.model.preprocess.pyramid(&deg)?;
                    let l = loss_preprocess(&pyr, &clean, self.model.preprocess.scales())?;
                    lp += scalar(&l)?;
                    total = Some(match total {
                        Some(a) => (a + l)?,
                        None => l,
                    });
                }
                let k = cfg.batch_patches as f64;
                let loss = total.expect("batch_patches > 0").affine(w.alpha_p / k, 0.0)?;
                Ok((loss, LossReport::new(0.0, lp / k, 0.0, w)))
            }
            Phase::Guidance => {
                let mut r = indexed_stream(cfg.seed, "train.guidance", step);
                let (mut total, mut sums) = (None::<Tensor>, [0.0; 3]);
                for _ in 0..cfg.batch_patches {
                    let c = r.random_range(0..self.samples.len());
                    let s = &self.samples[c];
                    let cache = &self.clip_caches[c];
                    let (n, h, wd, _) = s.clean.dims();
                    let spec = random_patch(&mut r, (n, h, wd), cfg, stride)?;
                    let deg = crop_spec(&s.degraded, &spec)?;
                    let clean = crop_spec(&s.clean, &spec)?;
                    let mask = mask_tensor(&s.mask, &spec)?;
                    let pre = self.model.preprocess.forward(&deg, &self.model.ae)?;
                    let l_pre = scalar(&loss_preprocess(&pre.rgb_pyramid, &clean, self.model.preprocess.scales())?)?;
                    let features = pre.features.detach();
                    let z0 = latent_crop(&cache.clean_latent, &spec, stride)?;
                    let patch_latent = latent_crop(&cache.degraded_latent, &spec, stride)?;
                    let global_latent = cache.global_latent.narrow(0, spec.t0, spec.frames())?;
                    let global_frames = cache.global_frames.narrow(0, spec.t0, spec.frames())?;
                    let t = self.schedule.sample_timestep(&mut r);
                    let eps = gaussian_like(z0.dims(), &mut r, &z0)?;
                    let z_t = self.schedule.add_noise(&z0, t, &eps)?;
                    let ctx = self.model.context(&PatchCondition {
                        global_frames: &global_frames,
                        caption: &s.caption,
                        patch_latent: &patch_latent,
                        global_latent: &global_latent,
                        norm_bbox: spec.norm_bbox,
                    })?;
                    let (eps_pred, _) = self.model.predict_noise(&z_t, t, &features, &ctx, None)?;
                    let l_noise = loss_noise(&eps, &eps_pred)?;
                    let x0 = self.schedule.predict_x0(&z_t, &eps_pred, t)?;
                    let l_defect = loss_defect(&self.model.ae.decode_tensor(&x0)?, &clean, &mask)?;
                    sums[0] += scalar(&l_noise)?;
                    sums[1] += l_pre;
                    sums[2] += scalar(&l_defect)?;
                    let l = (l_noise + l_defect.affine(w.alpha_d, 0.0)?)?;
                    total = Some(match total {
                        Some(a) => (a + l)?,
                        None => l,
                    });
                }
                let k = cfg.batch_patches as f64;
                let loss = total.expect("batch_patches > 0").affine(1.0 / k, 0.0)?;
                Ok((loss, LossReport::new(sums[0] / k, sums[1] / k, sums[2] / k, w)))
            }
        }
    }
}

fn prerequisite(stage: u8, cfg: &RunConfig, store: &ParamStore) -> Result<Manifest> {
    let dir = stage_dir(&cfg.checkpoint_dir, stage - 1);
    let loaded = checkpoint::load(&dir, store)
        .map_err(|e| config_err!("stage {stage} needs a finished stage {} checkpoint: {e}", stage - 1))?;
    let m = loaded.manifest;
    let needed: Vec<u8> = (0..stage).collect();
    if !m.complete || m.stages_done != needed {
        return Err(config_err!(
            "stage {stage} needs stages {needed:?} finished, checkpoint {} has {:?}",
            dir.display(),
            m.stages_done
        ));
    }
    if loaded.config.model != cfg.model {
        return Err(config_err!("model settings differ from the stage {} checkpoint", stage - 1));
    }
    Ok(m)
}

/// Runs (or resumes) one training stage on `samples`.
pub fn train(stage: u8, cfg: &RunConfig, samples: &[DefectSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if stage >= STAGES {
        return Err(config_err!("unknown training stage {stage}"));
    }
    cfg.validate()?;
    check_samples(samples, cfg)?;
    let store = ParamStore::new(cfg.seed, Device::Cpu, DType::F32);
    let mut base = if stage > 0 {
        prerequisite(stage, cfg, &store)?
    } else {
        Manifest { stage: 0, step: 0, complete: false, stages_done: vec![], frozen: BTreeMap::new() }
    };
    let dir = stage_dir(&cfg.checkpoint_dir, stage);
    let mut start = 0u64;
    let mut optim_state = None;
    if dir.join("manifest.txt").exists() {
        let m = checkpoint::read_manifest(&dir)?;
        if !m.complete && m.stage == stage {
            let loaded = checkpoint::load(&dir, &store)?;
            if loaded.config.model != cfg.model {
                return Err(config_err!("model settings differ from the checkpoint being resumed"));
            }
            start = m.step;
            optim_state = loaded.optim;
            log::info!("resuming stage {stage} at step {start}");
        }
    }
    let schedule = NoiseSchedule::default_for(cfg.model.timesteps)?;
    let model = FrdmModel::build(&store, &cfg.model)?;
    if stage == 2 && start == 0 {
        let n = FrdmModel::init_guidance_from_base(&store)?;
        log::info!("guidance branch initialized from {n} base parameters");
    }
    let mut tr = Trainer {
        cfg,
        samples,
        store: store.clone(),
        model,
        schedule,
        weights: LossWeights { alpha_p: cfg.alpha_p, alpha_d: cfg.alpha_d },
        clean_latents: Vec::new(),
        clip_caches: Vec::new(),
    };
    let plan = phases(stage, cfg);
    let total: u64 = plan.iter().map(|p| p.2).sum();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut records = Vec::new();
    let last_phase = plan.last().expect("non-empty plan").0;
    let resumed_at = start;

    for &(phase, offset, len) in &plan {
        let end = offset + len;
        if start >= end && !(start == end && len == 0) {
            continue;
        }
        if phase == Phase::Denoiser && start <= offset {
            // Autoencoder finished: fix the latent scale before encoding latents.
            tr.rebuild(phase)?;
            tr.calibrate_latent_scale()?;
        }
        tr.rebuild(phase)?;
        tr.prepare(phase)?;
        let mut optim = AdamW::new(tr.store.trainable(), AdamWConfig { lr: phase.lr(cfg), ..Default::default() })?;
        if let Some(state) = optim_state.take() {
            if start > offset {
                optim.load_state(&state)?;
            }
        }
        let mut log_file = open_log(&dir_ensure(&dir)?.join(phase.log_file()), phase.csv_header(), resumed_at)?;
        let mut s = start.max(offset);
        while s < end && s < stop {
            let local = s - offset;
            optim.cfg.lr = match phase {
                Phase::Autoencoder | Phase::Denoiser => cosine_lr(phase.lr(cfg), local, len),
                _ => phase.lr(cfg),
            };
            let (loss, report) = tr.step_loss(phase, s)?;
            finite(report.l_total, "loss", s + 1)?;
            let grads = loss.backward()?;
            let frozen_norm = frozen_grad_norm(&tr.store, &grads)?;
            let norm = finite(optim.step(&grads)?, "gradient norm", s + 1)?;
            s += 1;
            records.push(StepRecord { step: s, report, trainable_grad_norm: norm, frozen_grad_norm: frozen_norm });
            if s % cfg.log_every as u64 == 0 || s == end {
                let row = match phase {
                    Phase::Autoencoder => format!("{s},{:e}", report.l_total),
                    _ => report.csv_row(s),
                };
                writeln!(log_file, "{row}")?;
                log::info!("stage {stage} step {s}/{total}: {row}");
            }
            let done = s == total;
            if !done && (s % cfg.checkpoint_every as u64 == 0 || s == stop) {
                let m = Manifest { stage, step: s, complete: false, ..base.clone() };
                checkpoint::save(&dir, &tr.store, cfg, &m, Some(&optim.state()?))?;
            }
        }
        if s >= stop && s < total {
            return Ok(TrainOutcome { dir, records, complete: false, frozen_groups: frozen_groups(stage) });
        }
        start = s;
    }

    base.stage = stage;
    base.step = total;
    base.complete = true;
    base.stages_done.push(stage);
    base.frozen.insert(stage, last_phase.frozen_text());
    tr.store.set_policy(FreezePolicy::none());
    checkpoint::save(&dir, &tr.store, cfg, &base, None)?;
    Ok(TrainOutcome { dir, records, complete: true, frozen_groups: frozen_groups(stage) })
}

fn dir_ensure(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir)?;
    Ok(dir)
}
