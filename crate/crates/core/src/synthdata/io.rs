//! On-disk dataset layout.
//!
//! ```text
//! <root>/<sample_id>/degraded/000000.png   16-bit frames
//! <root>/<sample_id>/clean/000000.png      16-bit frames
//! <root>/<sample_id>/mask/000000.png       1-bit masks
//! <root>/<sample_id>/manifest.txt          `key: value` lines
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::FrameVolume;

use super::{DefectMask, DefectSample, ShotMeta};

pub const MANIFEST: &str = "manifest.txt";

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset { path: path.to_path_buf(), reason: reason.into() }
}

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes one frame (channel-last, values in [0,1]) as a 16-bit PNG.
pub fn write_frame_png(path: &Path, frame: &[f32], height: usize, width: usize, channels: usize) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = frame.iter().flat_map(|&v| to_u16(v).to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

fn write_mask_png(path: &Path, frame: &[u8], height: usize, width: usize) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header()?;
    let stride = width.div_ceil(8);
    let mut bytes = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if frame[y * width + x] == 1 {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

struct Decoded {
    samples: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(corrupt(path, format!("unsupported colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|b| f32::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| f32::from(b) / 255.0).collect(),
        other => return Err(corrupt(path, format!("unexpected bit depth {other:?}"))),
    };
    Ok(Decoded { samples, height: h, width: w, channels })
}

/// Reads a grayscale PNG as `(values, height, width)` with values in [0,1].
pub fn read_gray_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let d = decode_png(path)?;
    if d.channels != 1 {
        return Err(corrupt(path, "expected a grayscale image"));
    }
    Ok((d.samples, d.height, d.width))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(corrupt(dir, "missing frame directory"));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn write_frames(dir: &Path, vol: &FrameVolume) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in 0..vol.frames() {
        write_frame_png(&dir.join(frame_name(f)), vol.frame(f), vol.height(), vol.width(), vol.channels())?;
    }
    Ok(())
}

/// Reads an image-sequence directory into a volume.
pub fn read_frames(dir: &Path) -> Result<FrameVolume> {
    let paths = sorted_pngs(dir)?;
    if paths.is_empty() {
        return Err(corrupt(dir, "no frames"));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for p in &paths {
        let d = decode_png(p)?;
        let this = (d.height, d.width, d.channels);
        if *dims.get_or_insert(this) != this {
            return Err(corrupt(p, "frame size differs from the first frame"));
        }
        data.extend(d.samples);
    }
    let (h, w, c) = dims.unwrap_or_default();
    FrameVolume::new(data, paths.len(), h, w, c).map_err(|e| corrupt(dir, e.to_string()))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_sample(sample: &DefectSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir)?;
    write_frames(&dir.join("degraded"), &sample.degraded)?;
    write_frames(&dir.join("clean"), &sample.clean)?;
    let mask_dir = dir.join("mask");
    fs::create_dir_all(&mask_dir)?;
    for f in 0..sample.mask.frames() {
        write_mask_png(&mask_dir.join(frame_name(f)), sample.mask.frame(f), sample.mask.height(), sample.mask.width())?;
    }
    let (n, h, w, c) = sample.clean.dims();
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST))?);
    writeln!(m, "caption: {}", escape(&sample.caption))?;
    writeln!(m, "fps: {}", sample.clean.fps)?;
    writeln!(m, "camera_angle: {}", escape(&sample.shot_meta.camera_angle))?;
    writeln!(m, "shot_size: {}", escape(&sample.shot_meta.shot_size))?;
    writeln!(m, "seed: {}", sample.seed)?;
    writeln!(m, "frames: {n}")?;
    writeln!(m, "height: {h}")?;
    writeln!(m, "width: {w}")?;
    writeln!(m, "channels: {c}")?;
    m.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|_| corrupt(path, "missing manifest"))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| corrupt(path, format!("line {} is not `key: value`", lineno + 1)))?;
        map.insert(k.trim().to_string(), unescape(v));
    }
    Ok(map)
}

pub fn read_sample(dir: &Path) -> Result<DefectSample> {
    let manifest_path = dir.join(MANIFEST);
    let manifest = read_manifest(&manifest_path)?;
    let field = |k: &str| {
        manifest
            .get(k)
            .cloned()
            .ok_or_else(|| corrupt(&manifest_path, format!("manifest lacks `{k}`")))
    };
    let fps: f32 = field("fps")?.trim().parse().map_err(|_| corrupt(&manifest_path, "bad fps"))?;
    let seed: u64 = field("seed")?.trim().parse().map_err(|_| corrupt(&manifest_path, "bad seed"))?;

    let degraded = read_frames(&dir.join("degraded"))?.with_fps(fps);
    let clean = read_frames(&dir.join("clean"))?.with_fps(fps);
    let mask_paths = sorted_pngs(&dir.join("mask"))?;
    if degraded.frames() != clean.frames() || mask_paths.len() != clean.frames() {
        return Err(corrupt(
            dir,
            format!(
                "frame counts differ: degraded {}, clean {}, mask {}",
                degraded.frames(),
                clean.frames(),
                mask_paths.len()
            ),
        ));
    }
    if let Some(n) = manifest.get("frames") {
        if n.trim().parse::<usize>().ok() != Some(clean.frames()) {
            return Err(corrupt(dir, "manifest frame count disagrees with frames on disk"));
        }
    }
    if !degraded.same_dims(&clean) {
        return Err(corrupt(dir, "degraded and clean frame sizes differ"));
    }
    let mut mask_data = Vec::with_capacity(clean.frames() * clean.height() * clean.width());
    for p in &mask_paths {
        let (vals, h, w) = read_gray_png(p)?;
        if (h, w) != (clean.height(), clean.width()) {
            return Err(corrupt(p, "mask size differs from frames"));
        }
        mask_data.extend(vals.into_iter().map(|v| u8::from(v > 0.5)));
    }
    let mask = DefectMask::new(mask_data, clean.frames(), clean.height(), clean.width())?;
    Ok(DefectSample {
        degraded,
        clean,
        mask,
        caption: field("caption")?,
        shot_meta: ShotMeta { camera_angle: field("camera_angle")?, shot_size: field("shot_size")? },
        seed,
    })
}

/// Sample directories under a dataset root, sorted by name.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{procedural_sample, SynthConfig};

    #[test]
    fn round_trip_within_quantization() {
        let tmp = tempfile::tempdir().unwrap();
        let s = procedural_sample(12, 3, 16, 24, &SynthConfig::default()).unwrap();
        let mut s = s;
        s.caption = "line one\nline two: with colon".into();
        write_sample(&s, tmp.path()).unwrap();
        let r = read_sample(tmp.path()).unwrap();
        assert_eq!(r.mask, s.mask);
        assert_eq!(r.caption, s.caption);
        assert_eq!(r.shot_meta, s.shot_meta);
        assert_eq!(r.seed, s.seed);
        for (a, b) in r.degraded.data().iter().zip(s.degraded.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        for (a, b) in r.clean.data().iter().zip(s.clean.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn missing_manifest_is_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let s = procedural_sample(1, 2, 8, 8, &SynthConfig::default()).unwrap();
        write_sample(&s, tmp.path()).unwrap();
        fs::remove_file(tmp.path().join(MANIFEST)).unwrap();
        assert!(matches!(read_sample(tmp.path()), Err(Error::CorruptDataset { .. })));
    }

    #[test]
    fn frame_count_mismatch_is_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let s = procedural_sample(2, 3, 8, 8, &SynthConfig::default()).unwrap();
        write_sample(&s, tmp.path()).unwrap();
        fs::remove_file(tmp.path().join("mask").join(frame_name(2))).unwrap();
        assert!(matches!(read_sample(tmp.path()), Err(Error::CorruptDataset { .. })));
    }

    #[test]
    fn odd_width_masks_are_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..2 * 5 * 11).map(|i| u8::from(i % 3 == 0)).collect();
        let mask = DefectMask::new(data, 2, 5, 11).unwrap();
        for f in 0..2 {
            let p = tmp.path().join(frame_name(f));
            write_mask_png(&p, mask.frame(f), 5, 11).unwrap();
            let (vals, h, w) = read_gray_png(&p).unwrap();
            assert_eq!((h, w), (5, 11));
            let bits: Vec<u8> = vals.iter().map(|&v| u8::from(v > 0.5)).collect();
            assert_eq!(bits, mask.frame(f));
        }
    }
}
