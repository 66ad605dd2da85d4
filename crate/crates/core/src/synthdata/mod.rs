//! Synthetic training data: degraded / clean / mask triples built by
//! degrading flawless clips and compositing coloured defect templates.

mod composite;
mod degrade;
pub mod io;
mod scene;
mod templates;

use rand::Rng;

pub use composite::{colorize_and_composite, compute_defect_mask, DefectMask, DEFAULT_MASK_THRESHOLD};
pub use degrade::{degrade_quality, DegradeConfig};
pub use io::{list_samples, read_sample, write_sample};
pub use scene::{procedural_clip, stub_caption, ShotMeta, CAMERA_ANGLES, SHOT_SIZES};
pub use templates::{generate_template, DefectKind, DefectTemplate, MAX_SUPPORT_FRACTION};

use crate::error::{config_err, input_err, Result};
use crate::rng;
use crate::volume::FrameVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct DefectSample {
    pub degraded: FrameVolume,
    pub clean: FrameVolume,
    pub mask: DefectMask,
    pub caption: String,
    pub shot_meta: ShotMeta,
    pub seed: u64,
}

impl DefectSample {
    pub fn validate(&self) -> Result<()> {
        let (n, h, w, _) = self.clean.dims();
        if !self.degraded.same_dims(&self.clean) || self.mask.dims() != (n, h, w) {
            return Err(input_err!("degraded, clean and mask dims disagree"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_frames: usize,
    /// Inclusive range for the number of defect templates per sample.
    pub defects: (usize, usize),
    pub kinds: Vec<DefectKind>,
    pub rescale_range: (f32, f32),
    /// `None` disables compression entirely.
    pub quality_range: Option<(u8, u8)>,
    pub grain_range: (f32, f32),
    /// Probability with which each degradation (rescale, compression, grain) is applied.
    pub degrade_prob: f64,
    pub mask_threshold: f32,
    pub caption: Option<String>,
    pub shot_meta: Option<ShotMeta>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_frames: 1,
            defects: (2, 5),
            kinds: DefectKind::ALL.to_vec(),
            rescale_range: (0.5, 1.0),
            quality_range: Some((30, 95)),
            grain_range: (0.0, 0.08),
            degrade_prob: 0.5,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            caption: None,
            shot_meta: None,
        }
    }
}

impl SynthConfig {
    /// No defects and no degradation: the degraded clip equals the clean one.
    pub fn identity() -> Self {
        Self {
            defects: (0, 0),
            rescale_range: (1.0, 1.0),
            quality_range: None,
            grain_range: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.defects.0 > self.defects.1 {
            return Err(config_err!("defect count range is empty"));
        }
        if self.defects.1 > 0 && self.kinds.is_empty() {
            return Err(config_err!("no defect kinds enabled"));
        }
        let (r0, r1) = self.rescale_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 1.0) {
            return Err(config_err!("rescale range {r0}..{r1} not within (0,1]"));
        }
        if let Some((q0, q1)) = self.quality_range {
            if q0 == 0 || q0 > q1 || q1 > 100 {
                return Err(config_err!("quality range {q0}..{q1} invalid"));
            }
        }
        if !(self.grain_range.0 >= 0.0 && self.grain_range.0 <= self.grain_range.1) {
            return Err(config_err!("grain range invalid"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(config_err!("mask threshold must lie in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.degrade_prob) {
            return Err(config_err!("degrade probability must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Everything drawn while synthesizing one sample, for inspection in tests and debugging.
#[derive(Debug, Clone)]
pub struct SynthTrace {
    pub degrade: DegradeConfig,
    pub templates: Vec<DefectTemplate>,
    pub quality_degraded: FrameVolume,
}

fn draw_degrade_config(cfg: &SynthConfig, rng: &mut rng::PortableRng, seed: u64) -> DegradeConfig {
    let uniform = |rng: &mut rng::PortableRng, (lo, hi): (f32, f32)| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let rescale = if rng.random_bool(cfg.degrade_prob) { uniform(rng, cfg.rescale_range) } else { 1.0 };
    let quality = match cfg.quality_range {
        Some((q0, q1)) if rng.random_bool(cfg.degrade_prob) => Some(rng.random_range(q0..=q1)),
        _ => None,
    };
    let grain = if rng.random_bool(cfg.degrade_prob) { uniform(rng, cfg.grain_range) } else { 0.0 };
    DegradeConfig { rescale, quality, grain, seed: rng::derive_seed(seed, "degrade") }
}

pub fn synthesize_sample_traced(
    clean: &FrameVolume,
    rng_seed: u64,
    cfg: &SynthConfig,
) -> Result<(DefectSample, SynthTrace)> {
    cfg.validate()?;
    let (n, h, w, _) = clean.dims();
    if n < cfg.min_frames {
        return Err(input_err!("clip has {n} frames, at least {} required", cfg.min_frames));
    }
    let mut r = rng::stream(rng_seed, "synthesize");
    let degrade = draw_degrade_config(cfg, &mut r, rng_seed);

    let count = if cfg.defects.1 > cfg.defects.0 {
        r.random_range(cfg.defects.0..=cfg.defects.1)
    } else {
        cfg.defects.0
    };
    let templates: Vec<DefectTemplate> = (0..count)
        .map(|_| {
            let kind = cfg.kinds[r.random_range(0..cfg.kinds.len())];
            let mut t = generate_template(kind, n, h, w, &mut r);
            t.prune(cfg.mask_threshold);
            t
        })
        .collect();

    let quality_degraded = degrade_quality(clean, &degrade)?;
    let degraded = colorize_and_composite(&quality_degraded, &templates)?;
    let mask = compute_defect_mask(&templates, cfg.mask_threshold, (n, h, w))?;

    let shot_meta = cfg.shot_meta.clone().unwrap_or_else(|| ShotMeta {
        camera_angle: CAMERA_ANGLES[r.random_range(0..CAMERA_ANGLES.len())].to_string(),
        shot_size: SHOT_SIZES[r.random_range(0..SHOT_SIZES.len())].to_string(),
    });
    let caption = cfg.caption.clone().unwrap_or_else(|| stub_caption(&shot_meta));

    let sample = DefectSample {
        degraded,
        clean: clean.clone(),
        mask,
        caption,
        shot_meta,
        seed: rng_seed,
    };
    Ok((sample, SynthTrace { degrade, templates, quality_degraded }))
}

pub fn synthesize_sample(clean: &FrameVolume, rng_seed: u64, cfg: &SynthConfig) -> Result<DefectSample> {
    synthesize_sample_traced(clean, rng_seed, cfg).map(|(s, _)| s)
}

/// Procedural clean clip plus synthesized defects, keyed entirely by `seed`.
pub fn procedural_sample(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    cfg: &SynthConfig,
) -> Result<DefectSample> {
    let (clean, meta) = procedural_clip(seed, frames, height, width);
    let mut cfg = cfg.clone();
    if cfg.shot_meta.is_none() {
        cfg.shot_meta = Some(meta);
    }
    synthesize_sample(&clean, seed, &cfg)
}

/// Id of the `i`-th generated clip.
pub fn clip_id(i: usize) -> String {
    format!("clip_{i:04}")
}

/// `count` procedural samples; clip `i` draws from a seed derived from `(seed, i)`.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    cfg: &SynthConfig,
) -> Result<Vec<(String, DefectSample)>> {
    (0..count)
        .map(|i| {
            let s = crate::rng::derive_seed(seed, &clip_id(i));
            Ok((clip_id(i), procedural_sample(s, frames, height, width, cfg)?))
        })
        .collect()
}

/// Every sample under `root`, keyed by directory name.
pub fn load_dataset(root: &std::path::Path) -> Result<Vec<(String, DefectSample)>> {
    io::list_samples(root)?
        .into_iter()
        .map(|p| {
            let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, io::read_sample(&p)?))
        })
        .collect()
}
