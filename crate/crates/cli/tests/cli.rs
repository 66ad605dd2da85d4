use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use frdm_core::synthdata::io::{read_frames, write_frames};

const TINY: &str = "\
seed = 3
synth_clips = 2
synth_frames = 4
synth_height = 64
synth_width = 64
ae_widths = 8,8,8,8
unet_widths = 8,16
preprocess_widths = 4,4,4,4
fusion_width = 8
global_size = 16
frame_patch = 8
freq_hidden = 8
timesteps = 100
patch_frames = 2
patch_size = 32
overlap_frames = 1
overlap_pixels = 16
steps_ae = 3
steps_unet = 3
steps_preprocess = 3
steps_guidance = 3
batch_frames = 2
ae_crop = 16
log_every = 1
sampler_steps = 2
";

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    (dir, conf)
}

fn frdm(cmd: &str, conf: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut argv = vec!["frdm".to_string(), cmd.into(), "--config".into(), conf.display().to_string()];
    argv.extend(["--out".into(), out.display().to_string()]);
    argv.extend(extra.iter().map(|s| s.to_string()));
    frdm_cli::run(argv)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_twice_gives_identical_datasets() {
    let (dir, conf) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(frdm("synth", &conf, &a, &[]), 0);
    assert_eq!(frdm("synth", &conf, &b, &[]), 0);
    let (ta, tb) = (tree(&a.join("dataset")), tree(&b.join("dataset")));
    assert!(ta.keys().any(|p| p.ends_with("manifest.txt")));
    assert_eq!(ta, tb);
    assert_eq!(frdm("synth", &conf, &b, &["--seed", "4"]), 0);
    assert_ne!(ta, tree(&b.join("dataset")));
}

#[test]
fn eval_of_the_clean_clips_is_perfect() {
    let (dir, conf) = setup();
    let out = dir.path();
    assert_eq!(frdm("synth", &conf, out, &[]), 0);
    for id in ["clip_0000", "clip_0001"] {
        let clean = read_frames(&out.join("dataset").join(id).join("clean")).unwrap();
        write_frames(&out.join("perfect").join(id), &clean).unwrap();
    }
    assert_eq!(frdm("eval", &conf, out, &["--restored", "perfect"]), 0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("clip_id,psnr_full,psnr_masked,ssim_full"));
    let mean: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(mean[0], "mean");
    assert_eq!(mean[1].parse::<f64>().unwrap(), 99.0);
    assert_eq!(mean[3].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("baseline_metrics.csv").exists());
    assert!(out.join("previews/clip_0000.png").exists());
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("LPIPS"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let (dir, conf) = setup();
    let out = dir.path();
    assert_eq!(frdm("synth", &conf, out, &["--set", "no_such_key=1"]), 2);
    assert_eq!(frdm("synth", &conf, out, &["--set", "patch_size=abc"]), 2);
    assert_eq!(frdm("synth", &conf, out, &[]), 0);
    assert_eq!(frdm("train", &conf, out, &["--stage", "1"]), 2, "stage 1 without stage 0");
    assert_eq!(frdm("restore", &conf, out, &["--input", "nowhere"]), 2, "no checkpoint");
    assert_eq!(frdm_cli::run(["frdm", "bogus"]), 2);
}

#[test]
fn train_then_restore_a_64px_clip() {
    let (dir, conf) = setup();
    let out = dir.path();
    assert_eq!(frdm("synth", &conf, out, &[]), 0);
    for stage in ["0", "1", "2"] {
        assert_eq!(frdm("train", &conf, out, &["--stage", stage]), 0, "stage {stage}");
    }
    assert!(out.join("checkpoints/stage0/ae_loss.csv").exists());
    assert!(out.join("checkpoints/stage2/loss.csv").exists());
    let code = frdm("restore", &conf, out, &["--input", "dataset/clip_0000", "--output", "r", "--debug-dir", "dbg"]);
    assert_eq!(code, 0);
    let restored = read_frames(&out.join("r")).unwrap();
    assert_eq!((restored.frames(), restored.height(), restored.width()), (4, 64, 64));
    assert!(restored.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(fs::read_dir(out.join("dbg")).unwrap().count() > 0);
}
