//! `frdm` subcommands: dataset synthesis, staged training, restoration and
//! evaluation. All relative paths resolve against `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use frdm_core::config::RunConfig;
use frdm_core::inference::{load_model, restore_video, RestoreOptions};
use frdm_core::metrics::{ClipMetrics, MetricReport};
use frdm_core::synthdata::io::{read_frames, write_frame_png, write_frames, MANIFEST};
use frdm_core::synthdata::{load_dataset, read_sample, synth_dataset, write_sample, DefectMask, SynthConfig};
use frdm_core::training::{train, TrainOptions};
use frdm_core::{Error, FrameVolume, Result};

const DEFAULT_CAPTION: &str = "old film footage";

#[derive(Debug, Parser)]
#[command(name = "frdm", about = "Patch-based diffusion restoration of old film")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root for every relative path.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: u8,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Restore a clip (a frame directory or a dataset sample).
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        caption: Option<String>,
        /// Output frame directory.
        #[arg(long, default_value = "restored")]
        output: PathBuf,
        /// Receives the pre-restored reference and per-step previews.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
    },
    /// Score restorations against the dataset's clean clips.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of restored clips named like the samples; restored on
        /// the fly when omitted.
        #[arg(long)]
        restored: Option<PathBuf>,
    },
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

/// Loads the configuration with overrides and resolves its paths.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(&resolve(Path::new("."), p))?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    cfg.dataset = resolve(&common.out, &cfg.dataset);
    cfg.checkpoint_dir = resolve(&common.out, &cfg.checkpoint_dir);
    Ok(cfg)
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let scfg = SynthConfig { degrade_prob: cfg.degrade_prob, ..SynthConfig::default() };
    let samples = synth_dataset(cfg.seed, cfg.synth_clips, cfg.synth_frames, cfg.synth_height, cfg.synth_width, &scfg)?;
    for (id, s) in &samples {
        write_sample(s, &cfg.dataset.join(id))?;
    }
    println!("wrote {} clips to {}", samples.len(), cfg.dataset.display());
    Ok(())
}

fn load_input(path: &Path, caption: Option<String>) -> Result<(FrameVolume, String)> {
    if path.join(MANIFEST).is_file() {
        let s = read_sample(path)?;
        Ok((s.degraded, caption.unwrap_or(s.caption)))
    } else {
        Ok((read_frames(path)?, caption.unwrap_or_else(|| DEFAULT_CAPTION.to_string())))
    }
}

/// Degraded | restored | clean | mask overlay, side by side.
pub fn preview_grid(degraded: &FrameVolume, restored: &FrameVolume, clean: &FrameVolume, mask: &DefectMask, frame: usize) -> (Vec<f32>, usize, usize) {
    let (_, h, w, _) = clean.dims();
    let rgb = |v: &FrameVolume, y: usize, x: usize| -> [f32; 3] {
        let c = v.channels();
        let p = &v.frame(frame)[(y * w + x) * c..(y * w + x + 1) * c];
        if c == 3 {
            [p[0], p[1], p[2]]
        } else {
            [p[0]; 3]
        }
    };
    let gw = 4 * w;
    let mut out = vec![0f32; h * gw * 3];
    for y in 0..h {
        for x in 0..w {
            let on = mask.get(frame, y, x);
            let d = rgb(degraded, y, x);
            let overlay = if on { [1.0, 0.0, 0.0] } else { d.map(|v| v * 0.5) };
            for (k, px) in [d, rgb(restored, y, x), rgb(clean, y, x), overlay].into_iter().enumerate() {
                let o = (y * gw + k * w + x) * 3;
                out[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    (out, h, gw)
}

fn eval(cfg: &RunConfig, out: &Path, restored_dir: Option<PathBuf>) -> Result<MetricReport> {
    let samples = load_dataset(&cfg.dataset)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no samples under {}", cfg.dataset.display())));
    }
    let restored_dir = match restored_dir {
        Some(d) => resolve(out, &d),
        None => {
            let model = load_model(cfg)?;
            let opts = RestoreOptions::from(cfg);
            let dir = out.join("restored");
            for (id, s) in &samples {
                let r = restore_video(&model, &s.degraded, &s.caption, &opts, None)?;
                write_frames(&dir.join(id), &r)?;
                log::info!("restored {id}");
            }
            dir
        }
    };
    let previews = out.join("previews");
    fs::create_dir_all(&previews)?;
    let mut report = MetricReport::default();
    let mut baseline = MetricReport::default();
    for (id, s) in &samples {
        let restored = read_frames(&restored_dir.join(id))?;
        if !restored.same_dims(&s.clean) {
            return Err(Error::Input(format!("restored clip {id} has dims {:?}, clean {:?}", restored.dims(), s.clean.dims())));
        }
        report.clips.push(ClipMetrics::compute(id, &restored, &s.clean, &s.mask)?);
        baseline.clips.push(ClipMetrics::compute(id, &s.degraded, &s.clean, &s.mask)?);
        let (grid, h, w) = preview_grid(&s.degraded, &restored, &s.clean, &s.mask, 0);
        write_frame_png(&previews.join(format!("{id}.png")), &grid, h, w, 3)?;
    }
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    fs::write(out.join("baseline_metrics.csv"), baseline.to_csv())?;
    let summary = format!(
        "clips: {}\nrestored: psnr_full {:.3} psnr_masked {:.3} ssim_full {:.4}\n\
         degraded: psnr_full {:.3} psnr_masked {:.3} ssim_full {:.4}\n\
         not computed: LPIPS, BRISQUE and FVD (they need pretrained networks)\n",
        report.clips.len(),
        report.mean_psnr_full(),
        report.mean_psnr_masked(),
        report.mean_ssim_full(),
        baseline.mean_psnr_full(),
        baseline.mean_psnr_masked(),
        baseline.mean_ssim_full(),
    );
    fs::write(out.join("report.txt"), &summary)?;
    print!("{summary}");
    Ok(report)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => synth(&load_config(&common)?),
        Command::Train { common, stage, stop_after } => {
            let cfg = load_config(&common)?;
            let samples: Vec<_> = load_dataset(&cfg.dataset)?.into_iter().map(|(_, s)| s).collect();
            let outcome = train(stage, &cfg, &samples, &TrainOptions { stop_after })?;
            let state = if outcome.complete { "finished" } else { "paused" };
            println!("stage {stage} {state}; checkpoint in {}", outcome.dir.display());
            Ok(())
        }
        Command::Restore { common, input, caption, output, debug_dir } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg)?;
            let (video, caption) = load_input(&resolve(&common.out, &input), caption)?;
            let debug = debug_dir.map(|d| resolve(&common.out, &d));
            let restored = restore_video(&model, &video, &caption, &RestoreOptions::from(&cfg), debug.as_deref())?;
            let dest = resolve(&common.out, &output);
            write_frames(&dest, &restored)?;
            println!("wrote {} frames to {}", restored.frames(), dest.display());
            Ok(())
        }
        Command::Eval { common, restored } => {
            let cfg = load_config(&common)?;
            eval(&cfg, &common.out, restored).map(|_| ())
        }
    }
}

/// Parses `argv` and runs; returns the process exit code (2 for usage and
/// configuration errors, 1 for other failures).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
