//! Separable triangle-filter resampling.
//!
//! Upscaling is plain bilinear interpolation with half-pixel centers; when
//! downscaling the triangle support widens with the scale factor so the
//! filter also antialiases.

struct Taps {
    start: usize,
    weights: Vec<f32>,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let sum: f64 = w.iter().sum();
            if sum > 0.0 {
                w.iter_mut().for_each(|v| *v /= sum);
            } else {
                // Degenerate single-tap case.
                w.iter_mut().for_each(|v| *v = 0.0);
                let nearest = (center.floor() as usize).clamp(lo, hi - 1) - lo;
                w[nearest] = 1.0;
            }
            Taps {
                start: lo,
                weights: w.into_iter().map(|v| v as f32).collect(),
            }
        })
        .collect()
}

/// Resizes one channel-last frame `[h, w, c]` to `[out_h, out_w, c]`.
pub fn resize(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w * c);
    let htaps = taps(w, out_w);
    let mut tmp = vec![0f32; h * out_w * c];
    for y in 0..h {
        for (x, t) in htaps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, wt) in t.weights.iter().enumerate() {
                    acc += wt * src[(y * w + t.start + k) * c + ch];
                }
                tmp[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    let vtaps = taps(h, out_h);
    let mut out = vec![0f32; out_h * out_w * c];
    for (y, t) in vtaps.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, wt) in t.weights.iter().enumerate() {
                    acc += wt * tmp[((t.start + k) * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_exact() {
        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(resize(&src, 3, 4, 1, 3, 4), src);
    }

    #[test]
    fn constant_stays_constant() {
        let src = vec![0.25f32; 10 * 14 * 3];
        for (oh, ow) in [(5, 7), (20, 28), (3, 11)] {
            let out = resize(&src, 10, 14, 3, oh, ow);
            assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn weights_are_normalized() {
        for (i, o) in [(64, 32), (32, 64), (7, 3), (3, 7), (5, 5)] {
            for t in taps(i, o) {
                let s: f32 = t.weights.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
