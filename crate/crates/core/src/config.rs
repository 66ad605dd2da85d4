//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be in
//! the schema; unknown keys and unparsable values are configuration errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,

    pub synth_clips: usize,
    pub synth_frames: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub degrade_prob: f64,

    pub model: BackboneConfig,

    pub patch_frames: usize,
    pub patch_size: usize,
    pub overlap_frames: usize,
    pub overlap_pixels: usize,

    pub lr_ae: f64,
    pub lr_unet: f64,
    pub lr_preprocess: f64,
    pub lr_guidance: f64,
    pub steps_ae: usize,
    pub steps_unet: usize,
    pub steps_preprocess: usize,
    pub steps_guidance: usize,
    /// Frames per autoencoder / preprocess step.
    pub batch_frames: usize,
    pub ae_crop: usize,
    /// Patches whose losses are summed per diffusion step.
    pub batch_patches: usize,
    pub alpha_p: f64,
    pub alpha_d: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,

    pub sampler_steps: usize,
    pub kv_cache: bool,
    pub kv_capacity: usize,
    pub global_residual: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("dataset"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            synth_clips: 32,
            synth_frames: 16,
            synth_height: 64,
            synth_width: 64,
            degrade_prob: 0.5,
            model: BackboneConfig::default(),
            patch_frames: 8,
            patch_size: 64,
            overlap_frames: 4,
            overlap_pixels: 16,
            lr_ae: 1e-3,
            lr_unet: 2e-4,
            lr_preprocess: 1e-4,
            lr_guidance: 5e-5,
            steps_ae: 2000,
            steps_unet: 2000,
            steps_preprocess: 2000,
            steps_guidance: 2000,
            batch_frames: 8,
            ae_crop: 32,
            batch_patches: 1,
            alpha_p: 1.0,
            alpha_d: 81.0,
            log_every: 10,
            checkpoint_every: 500,
            sampler_steps: 20,
            kv_cache: true,
            kv_capacity: 2,
            global_residual: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err!("invalid value {value:?} for key {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err!("invalid boolean {value:?} for key {key}")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v = parse_list(key, value)?;
    v.try_into().map_err(|_| config_err!("key {key} needs exactly {N} comma-separated values"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "synth_clips" => self.synth_clips = parse(key, v)?,
            "synth_frames" => self.synth_frames = parse(key, v)?,
            "synth_height" => self.synth_height = parse(key, v)?,
            "synth_width" => self.synth_width = parse(key, v)?,
            "degrade_prob" => self.degrade_prob = parse(key, v)?,
            "latent_channels" => self.model.latent_channels = parse(key, v)?,
            "ae_widths" => self.model.ae_widths = parse_list(key, v)?,
            "unet_widths" => self.model.unet_widths = parse_array(key, v)?,
            "preprocess_widths" => self.model.preprocess_widths = parse_array(key, v)?,
            "scales" => self.model.scales = parse(key, v)?,
            "fusion_width" => self.model.fusion_width = parse(key, v)?,
            "global_size" => self.model.global_size = parse(key, v)?,
            "frame_patch" => self.model.frame_patch = parse(key, v)?,
            "bands" => self.model.bands = parse(key, v)?,
            "freq_hidden" => self.model.freq_hidden = parse(key, v)?,
            "timesteps" => self.model.timesteps = parse(key, v)?,
            "enable_prompt" => self.model.enable_prompt = parse_bool(key, v)?,
            "enable_frame" => self.model.enable_frame = parse_bool(key, v)?,
            "enable_texture" => self.model.enable_texture = parse_bool(key, v)?,
            "patch_frames" => self.patch_frames = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "overlap_frames" => self.overlap_frames = parse(key, v)?,
            "overlap_pixels" => self.overlap_pixels = parse(key, v)?,
            "lr_ae" => self.lr_ae = parse(key, v)?,
            "lr_unet" => self.lr_unet = parse(key, v)?,
            "lr_preprocess" => self.lr_preprocess = parse(key, v)?,
            "lr_guidance" => self.lr_guidance = parse(key, v)?,
            "steps_ae" => self.steps_ae = parse(key, v)?,
            "steps_unet" => self.steps_unet = parse(key, v)?,
            "steps_preprocess" => self.steps_preprocess = parse(key, v)?,
            "steps_guidance" => self.steps_guidance = parse(key, v)?,
            "batch_frames" => self.batch_frames = parse(key, v)?,
            "ae_crop" => self.ae_crop = parse(key, v)?,
            "batch_patches" => self.batch_patches = parse(key, v)?,
            "alpha_p" => self.alpha_p = parse(key, v)?,
            "alpha_d" => self.alpha_d = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "sampler_steps" => self.sampler_steps = parse(key, v)?,
            "kv_cache" => self.kv_cache = parse_bool(key, v)?,
            "kv_capacity" => self.kv_capacity = parse(key, v)?,
            "global_residual" => self.global_residual = parse_bool(key, v)?,
            _ => return Err(config_err!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`, got {line:?}", no + 1))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = self.model.stride();
        if self.patch_frames == 0 || self.patch_size == 0 {
            return Err(config_err!("patch dims must be positive"));
        }
        if self.patch_size % s != 0 || self.overlap_pixels % s != 0 {
            return Err(config_err!("patch size and pixel overlap must be multiples of the latent stride {s}"));
        }
        if self.patch_size % 8 != 0 {
            return Err(config_err!("patch size must be a multiple of 8"));
        }
        if self.overlap_frames >= self.patch_frames || self.overlap_pixels >= self.patch_size {
            return Err(config_err!("overlaps must be smaller than the patch"));
        }
        if !(0.0..=1.0).contains(&self.degrade_prob) {
            return Err(config_err!("degrade_prob must be in [0,1]"));
        }
        if self.alpha_p < 0.0 || self.alpha_d < 0.0 {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if self.sampler_steps == 0 || self.sampler_steps > self.model.timesteps {
            return Err(config_err!("sampler_steps must be in 1..=timesteps"));
        }
        if self.batch_frames == 0 || self.batch_patches == 0 || self.ae_crop % s != 0 || self.ae_crop == 0 {
            return Err(config_err!("batch sizes must be positive and ae_crop a multiple of the stride"));
        }
        Ok(())
    }

    /// Serializes every schema key; `parse_str(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("checkpoint_dir", self.checkpoint_dir.display().to_string());
        kv("synth_clips", self.synth_clips.to_string());
        kv("synth_frames", self.synth_frames.to_string());
        kv("synth_height", self.synth_height.to_string());
        kv("synth_width", self.synth_width.to_string());
        kv("degrade_prob", self.degrade_prob.to_string());
        kv("latent_channels", m.latent_channels.to_string());
        kv("ae_widths", join(&m.ae_widths));
        kv("unet_widths", join(&m.unet_widths));
        kv("preprocess_widths", join(&m.preprocess_widths));
        kv("scales", m.scales.to_string());
        kv("fusion_width", m.fusion_width.to_string());
        kv("global_size", m.global_size.to_string());
        kv("frame_patch", m.frame_patch.to_string());
        kv("bands", m.bands.to_string());
        kv("freq_hidden", m.freq_hidden.to_string());
        kv("timesteps", m.timesteps.to_string());
        kv("enable_prompt", m.enable_prompt.to_string());
        kv("enable_frame", m.enable_frame.to_string());
        kv("enable_texture", m.enable_texture.to_string());
        kv("patch_frames", self.patch_frames.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("overlap_frames", self.overlap_frames.to_string());
        kv("overlap_pixels", self.overlap_pixels.to_string());
        kv("lr_ae", self.lr_ae.to_string());
        kv("lr_unet", self.lr_unet.to_string());
        kv("lr_preprocess", self.lr_preprocess.to_string());
        kv("lr_guidance", self.lr_guidance.to_string());
        kv("steps_ae", self.steps_ae.to_string());
        kv("steps_unet", self.steps_unet.to_string());
        kv("steps_preprocess", self.steps_preprocess.to_string());
        kv("steps_guidance", self.steps_guidance.to_string());
        kv("batch_frames", self.batch_frames.to_string());
        kv("ae_crop", self.ae_crop.to_string());
        kv("batch_patches", self.batch_patches.to_string());
        kv("alpha_p", self.alpha_p.to_string());
        kv("alpha_d", self.alpha_d.to_string());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("sampler_steps", self.sampler_steps.to_string());
        kv("kv_cache", self.kv_cache.to_string());
        kv("kv_capacity", self.kv_capacity.to_string());
        kv("global_residual", self.global_residual.to_string());
        s
    }

    pub fn patch_dims(&self) -> (usize, usize, usize) {
        (self.patch_frames, self.patch_size, self.patch_size)
    }

    pub fn overlap_dims(&self) -> (usize, usize, usize) {
        (self.overlap_frames, self.overlap_pixels, self.overlap_pixels)
    }
}
