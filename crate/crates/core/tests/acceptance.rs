//! Acceptance criteria, one line per criterion.
//!
//! Runs without the libtest harness so the result lines are always printed.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p frdm-core --test acceptance -- 1 4 9`.
//!
//! Criterion 8 trains the toy model from `configs/toy.conf`. Finished stage
//! checkpoints are kept under `FRDM_TOY_DIR` (default: cargo's test tmpdir) and
//! reused on later runs; unfinished stages resume.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use frdm_core::backbone::{BackboneConfig, BLOCK_ORDER};
use frdm_core::config::RunConfig;
use frdm_core::frequency::{fft_pack, ifft_unpack, TextureModule};
use frdm_core::inference::{
    cosine_weight, grfm_fuse, load_model, restore_video, sample_tiled, IdentityDenoiser, RestoreOptions, SamplerOptions,
};
use frdm_core::metrics::{ClipMetrics, MetricReport};
use frdm_core::model::{FrdmModel, PatchCondition};
use frdm_core::nn::attention::cached_attend;
use frdm_core::nn::{attend, finite_difference_error, CacheSession, CrossAttention, KvCache, ParamStore};
use frdm_core::patchgrid::{assemble_patches, build_grid, extract_patch};
use frdm_core::rng::{self, indexed_stream};
use frdm_core::synthdata::{load_dataset, synth_dataset, write_sample, DefectSample, SynthConfig};
use frdm_core::training::checkpoint::{self, stage_dir};
use frdm_core::training::{loss_defect, loss_noise, loss_preprocess, loss_total, train, LossWeights, TrainOptions};
use frdm_core::FrameVolume;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn randn(seed: u64, label: &str, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, label);
    Tensor::from_vec(rng::normal_vec_f64(&mut r, n), shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny_model() -> BackboneConfig {
    BackboneConfig {
        ae_widths: vec![8, 8, 8, 8],
        unet_widths: [8, 16],
        preprocess_widths: [4, 4, 4, 4],
        fusion_width: 8,
        global_size: 16,
        frame_patch: 8,
        freq_hidden: 8,
        timesteps: 100,
        ..BackboneConfig::default()
    }
}

/// Small run: 2 clips of 4 frames at 32x32, 16-px patches.
fn tiny_run(root: &Path) -> RunConfig {
    RunConfig {
        seed: 5,
        dataset: root.join("dataset"),
        checkpoint_dir: root.join("checkpoints"),
        synth_clips: 2,
        synth_frames: 4,
        synth_height: 32,
        synth_width: 32,
        model: tiny_model(),
        patch_frames: 2,
        patch_size: 16,
        overlap_frames: 1,
        overlap_pixels: 8,
        steps_ae: 5,
        steps_unet: 5,
        steps_preprocess: 5,
        steps_guidance: 5,
        batch_frames: 2,
        ae_crop: 16,
        log_every: 5,
        checkpoint_every: 1000,
        sampler_steps: 2,
        ..RunConfig::default()
    }
}

fn synth(cfg: &RunConfig, seed: u64, count: usize) -> Vec<(String, DefectSample)> {
    let scfg = SynthConfig { degrade_prob: cfg.degrade_prob, ..SynthConfig::default() };
    synth_dataset(seed, count, cfg.synth_frames, cfg.synth_height, cfg.synth_width, &scfg).unwrap()
}

fn samples_of(set: &[(String, DefectSample)]) -> Vec<DefectSample> {
    set.iter().map(|(_, s)| s.clone()).collect()
}

fn stage_finished(cfg: &RunConfig, stage: u8) -> bool {
    checkpoint::read_manifest(&stage_dir(&cfg.checkpoint_dir, stage))
        .map(|m| m.complete && m.stages_done == (0..=stage).collect::<Vec<_>>())
        .unwrap_or(false)
}

/// Trains every stage that has no finished checkpoint yet.
fn train_all(cfg: &RunConfig, samples: &[DefectSample]) -> Result<Vec<u8>, String> {
    let mut trained = Vec::new();
    for stage in 0..3u8 {
        if stage_finished(cfg, stage) {
            continue;
        }
        let out = train(stage, cfg, samples, &TrainOptions::default()).map_err(|e| format!("stage {stage}: {e}"))?;
        if !out.complete {
            return Err(format!("stage {stage} stopped early"));
        }
        trained.push(stage);
    }
    Ok(trained)
}

fn load_params(dir: &Path) -> BTreeMap<String, Vec<f32>> {
    let store = ParamStore::new(0, Device::Cpu, DType::F32);
    checkpoint::load(dir, &store).unwrap();
    store
        .all()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut bytes = fs::read(&p).unwrap();
                if p.extension().is_some_and(|e| e == "txt") {
                    // stored run configs name the run's own directory
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text.replace(&*dir.to_string_lossy(), "<root>").into_bytes();
                }
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let horizon = 1000;
    for (t, want) in [(1000, 0.5), (500, 0.25), (0, 0.0)] {
        let c = cosine_weight(t, horizon).map_err(|e| e.to_string())?;
        ensure!(c == want, "c({t}) = {c}, expected {want}");
    }
    let shape = [3, 4, 5, 6];
    let z_rs = randn(1, "c1.rs", &shape);
    let z_gr = randn(1, "c1.gr", &shape);
    let mut worst = 0f64;
    for t in [1000, 950, 731, 500, 250, 13, 0] {
        let c = cosine_weight(t, horizon).unwrap();
        let c_oracle = (1.0 + (std::f64::consts::PI * (horizon - t) as f64 / horizon as f64).cos()) / 4.0;
        ensure!((c - c_oracle).abs() < 1e-15, "c({t}) = {c}, oracle {c_oracle}");
        let fused = values(&grfm_fuse(&z_rs, &z_gr, c).unwrap());
        for ((f, a), b) in fused.iter().zip(values(&z_rs)).zip(values(&z_gr)) {
            worst = worst.max((f - ((1.0 - c_oracle) * a + c_oracle * b)).abs());
        }
    }
    ensure!(worst < 1e-7, "grfm_fuse deviates from the scalar oracle by {worst:e}");
    Ok(format!("endpoints exact, fuse max error {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let (n, c, h, w) = (2usize, 3usize, 8usize, 8usize);
    let idx = |b: usize, ch: usize, y: usize, x: usize, hh: usize, ww: usize| ((b * c + ch) * hh + y) * ww + x;
    let eps = randn(2, "c2.eps", &[n, c, h, w]);
    let eps_pred = randn(2, "c2.pred", &[n, c, h, w]);
    let (e, p) = (values(&eps), values(&eps_pred));
    let mut s = 0.0;
    for i in 0..e.len() {
        s += (e[i] - p[i]) * (e[i] - p[i]);
    }
    let noise_oracle = s / e.len() as f64;
    let l_noise = scalar(&loss_noise(&eps, &eps_pred).unwrap());
    ensure!((l_noise - noise_oracle).abs() < 1e-7, "loss_noise {l_noise} vs oracle {noise_oracle}");

    let gt = randn(2, "c2.gt", &[n, c, h, w]);
    let g = values(&gt);
    let pyramid: Vec<Tensor> = (0..3).map(|j| randn(2, &format!("c2.pyr{j}"), &[n, c, h >> j, w >> j])).collect();
    let mut pre_oracle = 0.0;
    for (j, pred) in pyramid.iter().enumerate() {
        let f = 1usize << j;
        let (sh, sw) = (h / f, w / f);
        let pv = values(pred);
        let mut sum = 0.0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..sh {
                    for x in 0..sw {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += g[idx(b, ch, y * f + dy, x * f + dx, h, w)];
                            }
                        }
                        sum += (pv[idx(b, ch, y, x, sh, sw)] - acc / (f * f) as f64).abs();
                    }
                }
            }
        }
        pre_oracle += sum / (n * c * sh * sw) as f64;
    }
    let l_pre = scalar(&loss_preprocess(&pyramid, &gt, 3).unwrap());
    ensure!((l_pre - pre_oracle).abs() < 1e-7, "loss_preprocess {l_pre} vs oracle {pre_oracle}");

    let mut r = rng::stream(2, "c2.mask");
    let mask_v: Vec<f64> = (0..n * h * w).map(|_| if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask_v.clone(), (n, 1, h, w), &Device::Cpu).unwrap();
    let mut sum = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = idx(b, ch, y, x, h, w);
                    sum += (p[i] - g[i]).abs() * mask_v[(b * h + y) * w + x];
                }
            }
        }
    }
    let defect_oracle = sum / (n * c * h * w) as f64;
    let l_def = scalar(&loss_defect(&eps_pred, &gt, &mask).unwrap());
    ensure!((l_def - defect_oracle).abs() < 1e-7, "loss_defect {l_def} vs oracle {defect_oracle}");

    let wts = LossWeights::default();
    ensure!(wts.alpha_p == 1.0 && wts.alpha_d == 81.0, "default weights {wts:?}");
    let total = loss_total(l_noise, l_pre, l_def, &wts);
    ensure!(total == l_noise + 1.0 * l_pre + 81.0 * l_def, "loss_total {total} is not l_noise + l_pre + 81 l_def");
    Ok(format!("noise {l_noise:.6}, preprocess {l_pre:.6}, defect {l_def:.6}, total {total:.6}"))
}

fn criterion_3() -> Outcome {
    let mut worst_rt = 0f64;
    let mut worst_parseval = 0f64;
    for seed in 0..5 {
        let x = randn(seed, "c3.x", &[4, 4, 8, 8]);
        let f = fft_pack(&x).unwrap();
        let back = ifft_unpack(&f).map_err(|e| e.to_string())?;
        let scale = values(&x).iter().fold(0f64, |m, v| m.max(v.abs()));
        worst_rt = worst_rt.max(max_abs_diff(&back, &x) / scale);
        let ex = scalar(&x.sqr().unwrap().sum_all().unwrap());
        let ef = scalar(&f.sqr().unwrap().sum_all().unwrap());
        worst_parseval = worst_parseval.max((ex - ef).abs() / ex);
    }
    ensure!(worst_rt < 1e-5, "round trip relative error {worst_rt:e}");
    ensure!(worst_parseval < 1e-5, "Parseval relative error {worst_parseval:e}");

    let store = ParamStore::new(11, Device::Cpu, DType::F64);
    let pb = store.builder("frequency.t");
    TextureModule::new(&pb, 2, 2, 4).unwrap();
    // a zero output projection would leave only the residual path
    store.insert("frequency.t.proj.weight", &randn(12, "c3.proj", &[2, 2, 1, 1])).unwrap();
    let inputs: Vec<Tensor> = (0..3).map(|i| randn(13 + i, "c3.in", &[2, 2, 4, 4])).collect();
    let probe = randn(16, "c3.probe", &[2, 2, 4, 4]);
    let loss = |xs: &[Tensor]| -> frdm_core::Result<Tensor> {
        let tm = TextureModule::new(&pb, 2, 2, 4)?;
        Ok(tm.forward(&xs[0], &xs[1], &xs[2])?.out.mul(&probe)?.sum_all()?)
    };
    let mut worst_fd = 0f64;
    for i in 0..3 {
        let var = Var::from_tensor(&inputs[i]).unwrap();
        let mut xs = inputs.clone();
        xs[i] = var.as_tensor().clone();
        let grads = loss(&xs).unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).ok_or("no gradient for an input")?;
        let err = finite_difference_error(&inputs[i], g, 1e-5, |x| {
            let mut xs = inputs.clone();
            xs[i] = x.clone();
            Ok(loss(&xs)?.to_scalar::<f64>()?)
        })
        .unwrap();
        worst_fd = worst_fd.max(err);
    }
    let names: Vec<String> = store.names().into_iter().filter(|n| !n.ends_with("bias")).collect();
    for name in &names {
        let var = store.get(name).unwrap();
        let base = var.as_tensor().copy().unwrap();
        let grads = loss(&inputs).unwrap().backward().unwrap();
        let g = grads.get(var.as_tensor()).ok_or(format!("no gradient for {name}"))?.copy().unwrap();
        let err = finite_difference_error(&base, &g, 1e-5, |x| {
            store.insert(name, x)?;
            let v = loss(&inputs)?.to_scalar::<f64>()?;
            store.insert(name, &base)?;
            Ok(v)
        })
        .unwrap();
        worst_fd = worst_fd.max(err);
    }
    ensure!(worst_fd < 1e-3, "texture gradient relative error {worst_fd:e}");
    Ok(format!(
        "round trip {worst_rt:.1e}, Parseval {worst_parseval:.1e}, texture FD {worst_fd:.1e} over 3 inputs and {} weights",
        names.len()
    ))
}

fn criterion_4() -> Outcome {
    let mut r = indexed_stream(4, "c4", 0);
    let mut patches_seen = 0;
    let mut worst = 0f32;
    for k in 0..200 {
        let dims = (r.random_range(1..=12usize), r.random_range(1..=40usize), r.random_range(1..=40usize));
        let patch = (r.random_range(1..=dims.0), r.random_range(1..=dims.1), r.random_range(1..=dims.2));
        let overlap = (r.random_range(0..patch.0), r.random_range(0..patch.1), r.random_range(0..patch.2));
        let channels = if r.random::<bool>() { 3 } else { 1 };
        let grid = build_grid(dims, patch, overlap).map_err(|e| format!("config {k}: {e}"))?;
        let mut covered = vec![false; dims.0 * dims.1 * dims.2];
        for s in &grid.specs {
            for t in s.t0..s.t1 {
                for y in s.y0..s.y1 {
                    for x in s.x0..s.x1 {
                        covered[(t * dims.1 + y) * dims.2 + x] = true;
                    }
                }
            }
        }
        ensure!(covered.iter().all(|&c| c), "config {k} {dims:?}/{patch:?}/{overlap:?} leaves voxels uncovered");
        let data: Vec<f32> = (0..dims.0 * dims.1 * dims.2 * channels).map(|_| r.random::<f32>()).collect();
        let vol = FrameVolume::new(data, dims.0, dims.1, dims.2, channels).unwrap();
        let parts: Vec<FrameVolume> = grid.specs.iter().map(|s| extract_patch(&vol, s).unwrap()).collect();
        let back = assemble_patches(&parts, &grid).map_err(|e| format!("config {k}: {e}"))?;
        let err = back.data().iter().zip(vol.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        ensure!(err <= 1e-6, "config {k} {dims:?}/{patch:?}/{overlap:?}: round trip error {err:e}");
        worst = worst.max(err);
        patches_seen += grid.len();
    }
    Ok(format!("200 configs, {patches_seen} patches, max round trip error {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let cfg = tiny_model();
    let store = ParamStore::new(6, Device::Cpu, DType::F32);
    let model = FrdmModel::build(&store, &cfg).unwrap();
    let (n, c, hw) = (2usize, cfg.latent_channels, 4usize);
    let f32t = |t: Tensor| t.to_dtype(DType::F32).unwrap();
    let z_t = f32t(randn(7, "c5.z", &[n, c, hw, hw]));
    let features = f32t(randn(7, "c5.feat", &[n, c, hw, hw]));
    let patch_latent = f32t(randn(7, "c5.patch", &[n, c, hw, hw]));
    let global_latent = f32t(randn(7, "c5.global", &[n, c, hw, hw]));
    let g = cfg.global_size;
    let global_frames = f32t(randn(7, "c5.frames", &[n, 3, g, g]).affine(0.1, 0.5).unwrap());
    let ctx = model
        .context(&PatchCondition {
            global_frames: &global_frames,
            caption: "a wide shot of a street",
            patch_latent: &patch_latent,
            global_latent: &global_latent,
            norm_bbox: [0.0, 0.0, 0.5, 0.5],
        })
        .unwrap();
    let mut bit_equal = 0;
    for t in [0usize, 37, 99] {
        let base = model.unet.forward(&z_t, t, None).unwrap();
        let (guided, res) = model.predict_noise(&z_t, t, &features, &ctx, None).unwrap();
        let expected: Vec<String> =
            (0..2).flat_map(|l| BLOCK_ORDER.iter().map(move |b| format!("level{l}.{b}"))).collect();
        ensure!(res.trace == expected, "guidance ran {:?}", res.trace);
        let (a, b) = (base.flatten_all().unwrap().to_vec1::<f32>().unwrap(), guided.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        ensure!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "guided output differs from base at t={t}");
        for r in &res.levels {
            ensure!(values(r).iter().all(|&v| v == 0.0), "nonzero residual at t={t}");
        }
        bit_equal += 1;
    }

    // The per-level fusion and frequency blocks, bound to the model's own parameters.
    let root = store.root();
    let mut blocks = 0;
    for (i, &w) in cfg.unet_widths.iter().enumerate() {
        let side = hw >> i;
        let x = f32t(randn(8 + i as u64, "c5.x", &[n, w, side, side]));
        let lvl = format!("level{i}");
        let pool = |t: &Tensor| if i == 0 { t.clone() } else { t.avg_pool2d(2).unwrap() };
        let prompt = CrossAttention::new(&root.pp("fusion").pp(&lvl).pp("prompt_xattn"), w, cfg.fusion_width).unwrap();
        let p = ctx.prompt.as_ref().unwrap();
        let out = prompt.forward(&x, &p.tokens, Some(&p.mask)).unwrap().out;
        ensure!(max_abs_diff(&out, &x) == 0.0, "{lvl} prompt cross-attention is not an identity");
        let frame = CrossAttention::new(&root.pp("fusion").pp(&lvl).pp("frame_xattn"), w, cfg.fusion_width).unwrap();
        let out = frame.forward(&x, &ctx.frame.as_ref().unwrap().tokens, None).unwrap().out;
        ensure!(max_abs_diff(&out, &x) == 0.0, "{lvl} frame cross-attention is not an identity");
        let tex = TextureModule::new(&root.pp("frequency").pp(&lvl), w, c, cfg.freq_hidden).unwrap();
        let out = tex.forward(&x, &pool(&patch_latent), &pool(&global_latent)).unwrap().out;
        ensure!(max_abs_diff(&out, &x) == 0.0, "{lvl} texture module is not an identity");
        blocks += 3;
    }
    ensure!(store.num_params(None) > 0, "empty model");
    Ok(format!("guided == base bit-for-bit at {bit_equal} timesteps, {blocks} fusion/frequency blocks exact identities"))
}

fn criterion_6() -> Outcome {
    let mut worst = 0f64;
    let mut cases = 0;
    for trial in 0..20u64 {
        let mut r = indexed_stream(6, "c6", trial);
        let d = r.random_range(2..=16usize);
        let b = r.random_range(1..=3usize);
        let patches = r.random_range(2..=4usize);
        let lens: Vec<usize> = (0..patches).map(|_| r.random_range(1..=12usize)).collect();
        let mk = |p: usize, what: &str| randn(trial, &format!("c6.{what}{p}"), &[b, lens[p], d]);
        let qs: Vec<Tensor> = (0..patches).map(|p| mk(p, "q")).collect();
        let ks: Vec<Tensor> = (0..patches).map(|p| mk(p, "k")).collect();
        let vs: Vec<Tensor> = (0..patches).map(|p| mk(p, "v")).collect();
        let mut cache = KvCache::new(patches);
        cache.begin_timestep(40);
        for p in 0..patches {
            let neighbours: Vec<usize> = (0..p).collect();
            let mut session = CacheSession { cache: &mut cache, patch: p, neighbours: neighbours.clone(), timestep: 40 };
            let inc = cached_attend(&qs[p], &ks[p], &vs[p], &mut session, "layer").map_err(|e| e.to_string())?;
            let mut kk: Vec<&Tensor> = neighbours.iter().map(|&n| &ks[n]).collect();
            let mut vv: Vec<&Tensor> = neighbours.iter().map(|&n| &vs[n]).collect();
            kk.push(&ks[p]);
            vv.push(&vs[p]);
            let one = attend(&qs[p], &Tensor::cat(&kk, 1).unwrap(), &Tensor::cat(&vv, 1).unwrap(), None).unwrap();
            worst = worst.max(max_abs_diff(&inc.out, &one.out));
            cases += 1;
        }
    }
    ensure!(worst < 1e-5, "cached attention differs from one-shot by {worst:e}");
    Ok(format!("{cases} cached queries, max difference {worst:.1e}"))
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(tmp.path());
    cfg.steps_guidance = 50;
    let samples = samples_of(&synth(&cfg, cfg.seed, cfg.synth_clips));
    for stage in 0..2 {
        train(stage, &cfg, &samples, &TrainOptions::default()).map_err(|e| format!("stage {stage}: {e}"))?;
    }
    let out = train(2, &cfg, &samples, &TrainOptions::default()).map_err(|e| format!("stage 2: {e}"))?;
    ensure!(out.complete && out.records.len() == 50, "stage 2 ran {} steps", out.records.len());
    for r in &out.records {
        ensure!(r.frozen_grad_norm == 0.0, "step {}: frozen gradient norm {}", r.step, r.frozen_grad_norm);
        ensure!(r.trainable_grad_norm > 0.0, "step {}: no gradient reached the trainable groups", r.step);
    }
    let before = load_params(&stage_dir(&cfg.checkpoint_dir, 1));
    let after = load_params(&stage_dir(&cfg.checkpoint_dir, 2));
    let mut frozen = 0;
    let mut moved = 0;
    for (name, v) in &after {
        let temporal = name.split('.').any(|p| p == "temporal");
        let pinned = ["autoencoder.", "unet_base.", "preprocess."].iter().any(|g| name.starts_with(g));
        if pinned || temporal {
            // guidance temporal layers start as copies of the base ones
            let origin = match name.strip_prefix("guidance.") {
                Some(rest) => format!("unet_base.{rest}"),
                None => name.clone(),
            };
            ensure!(before.get(&origin) == Some(v), "frozen parameter {name} changed during stage 2");
            frozen += 1;
        } else if before.get(name) != Some(v) {
            moved += 1;
        }
    }
    ensure!(moved > 0, "no trainable parameter moved");
    Ok(format!("50 steps, frozen grad norm 0 at every step, {frozen} frozen tensors unchanged, {moved} trainable tensors updated"))
}

fn toy_dir() -> PathBuf {
    std::env::var_os("FRDM_TOY_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("toy"))
}

/// Held-out clips use their own seed so they never coincide with training clips.
const HELDOUT_SEED: u64 = 1000;
const HELDOUT_CLIPS: usize = 8;

fn criterion_8() -> Outcome {
    let root = toy_dir();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
    let mut cfg = RunConfig::from_file(&conf).map_err(|e| e.to_string())?;
    cfg.dataset = root.join("dataset");
    cfg.checkpoint_dir = root.join("checkpoints");
    let heldout_dir = root.join("heldout");
    for (dir, seed, count) in [(&cfg.dataset, cfg.seed, cfg.synth_clips), (&heldout_dir, HELDOUT_SEED, HELDOUT_CLIPS)] {
        for (id, s) in synth(&cfg, seed, count) {
            write_sample(&s, &dir.join(id)).unwrap();
        }
    }
    // Train and evaluate on the written clips, as the command-line pipeline does.
    let train_set = samples_of(&load_dataset(&cfg.dataset).unwrap());
    let started = Instant::now();
    let trained = train_all(&cfg, &train_set)?;
    let model = load_model(&cfg).map_err(|e| e.to_string())?;
    let opts = RestoreOptions::from(&cfg);
    let (mut restored, mut baseline) = (MetricReport { clips: vec![] }, MetricReport { clips: vec![] });
    for (id, s) in load_dataset(&heldout_dir).unwrap() {
        let r = restore_video(&model, &s.degraded, &s.caption, &opts, None).map_err(|e| e.to_string())?;
        restored.clips.push(ClipMetrics::compute(&id, &r, &s.clean, &s.mask).unwrap());
        baseline.clips.push(ClipMetrics::compute(&id, &s.degraded, &s.clean, &s.mask).unwrap());
    }
    let gain = restored.mean_psnr_masked() - baseline.mean_psnr_masked();
    let drop = baseline.mean_psnr_full() - restored.mean_psnr_full();
    let detail = format!(
        "masked PSNR {:.2} -> {:.2} dB ({gain:+.2}), full PSNR {:.2} -> {:.2} dB ({:+.2}); stages trained this run {trained:?} in {:.0} s, dir {}",
        baseline.mean_psnr_masked(),
        restored.mean_psnr_masked(),
        baseline.mean_psnr_full(),
        restored.mean_psnr_full(),
        -drop,
        started.elapsed().as_secs_f64(),
        root.display()
    );
    fs::write(root.join("metrics.csv"), restored.to_csv()).unwrap();
    fs::write(root.join("baseline_metrics.csv"), baseline.to_csv()).unwrap();
    ensure!(restored.clips.len() == HELDOUT_CLIPS, "evaluated {} clips", restored.clips.len());
    ensure!(gain >= 3.0 && drop <= 0.5, "{detail}");
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let cases = [((4, 3, 64, 64), (2, 32, 32), (1, 8, 8)), ((6, 3, 96, 160), (4, 48, 64), (2, 16, 24)), ((8, 4, 256, 384), (4, 64, 96), (2, 16, 32))];
    let mut worst = 0f64;
    for (k, &((n, c, h, w), patch, overlap)) in cases.iter().enumerate() {
        let z = randn(k as u64, "c9", &[n, c, h, w]).to_dtype(DType::F32).unwrap();
        let grid = build_grid((n, h, w), patch, overlap).unwrap();
        for kv in [None, Some(2)] {
            let out = sample_tiled(&z, &grid, &[950, 500, 0], 1000, None, &mut IdentityDenoiser, SamplerOptions { kv_capacity: kv }, None)
                .map_err(|e| e.to_string())?;
            ensure!(out.dims() == z.dims(), "shape {:?} -> {:?}", z.dims(), out.dims());
            let d = max_abs_diff(&out, &z);
            ensure!(d < 1e-5, "{h}x{w}: tiled identity deviates by {d:e}");
            worst = worst.max(d);
        }
    }
    Ok(format!("3 resolutions up to 256x384, max deviation {worst:.1e}"))
}

fn criterion_10() -> Outcome {
    let run = |root: &Path| -> Result<(Vec<(String, DefectSample)>, BTreeMap<PathBuf, Vec<u8>>, Vec<f32>), String> {
        let cfg = tiny_run(root);
        let set = synth(&cfg, cfg.seed, cfg.synth_clips);
        for (id, s) in &set {
            write_sample(s, &cfg.dataset.join(id)).unwrap();
        }
        train_all(&cfg, &samples_of(&load_dataset(&cfg.dataset).unwrap()))?;
        let model = load_model(&cfg).map_err(|e| e.to_string())?;
        let s = &set[0].1;
        let restored = restore_video(&model, &s.degraded, &s.caption, &RestoreOptions::from(&cfg), None).map_err(|e| e.to_string())?;
        Ok((set, tree_bytes(root), restored.into_data()))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (set_a, files_a, out_a) = run(a.path())?;
    let (set_b, files_b, out_b) = run(b.path())?;
    let cfg = tiny_run(a.path());
    let steps = cfg.steps_ae + cfg.steps_unet + cfg.steps_preprocess + cfg.steps_guidance;
    ensure!(set_a == set_b, "synthesized samples differ");
    ensure!(files_a.keys().eq(files_b.keys()), "runs wrote different files");
    for (p, bytes) in &files_a {
        ensure!(files_b[p] == *bytes, "{} differs between runs", p.display());
    }
    ensure!(out_a.iter().zip(&out_b).all(|(x, y)| x.to_bits() == y.to_bits()), "restored frames differ");
    Ok(format!("synth, {steps} training steps and restore bit-identical; {} files compared", files_a.len()))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "formula exactness", criterion_1),
        (2, "loss suite", criterion_2),
        (3, "frequency module", criterion_3),
        (4, "patch geometry", criterion_4),
        (5, "zero-init transparency", criterion_5),
        (6, "kv-cache equivalence", criterion_6),
        (7, "freeze contract", criterion_7),
        (8, "end-to-end toy experiment", criterion_8),
        (9, "tiling transparency", criterion_9),
        (10, "determinism", criterion_10),
    ];
    // failures are reported on the criterion line instead
    std::panic::set_hook(Box::new(|_| {}));
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
