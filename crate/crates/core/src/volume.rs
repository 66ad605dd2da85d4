//! Frame volumes: clips stored as `[frames, height, width, channels]` grids.

use candle_core::{DType, Device, Tensor};

use crate::error::{input_err, Result};
use crate::resample;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameVolume {
    data: Vec<f32>,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pub fps: f32,
}

impl FrameVolume {
    pub const DEFAULT_FPS: f32 = 24.0;

    /// Builds a volume from frame-major, channel-last data. Values must lie in [0,1].
    pub fn new(
        data: Vec<f32>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(input_err!(
                "empty frame volume {frames}x{height}x{width}"
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(input_err!("channels must be 1 or 3, got {channels}"));
        }
        if data.len() != frames * height * width * channels {
            return Err(input_err!(
                "data length {} does not match {frames}x{height}x{width}x{channels}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(input_err!("frame value {v} outside [0,1]"));
        }
        Ok(Self {
            data,
            frames,
            height,
            width,
            channels,
            fps: Self::DEFAULT_FPS,
        })
    }

    /// Like [`FrameVolume::new`] but clamps into [0,1]; non-finite values are rejected.
    pub fn new_clamped(
        mut data: Vec<f32>,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(input_err!("non-finite frame value"));
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(data, frames, height, width, channels)
    }

    pub fn filled(value: f32, frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            vec![value; frames * height * width * channels],
            frames,
            height,
            width,
            channels,
        )
    }

    pub fn with_fps(mut self, fps: f32) -> Self {
        self.fps = fps;
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    /// `(frames, height, width, channels)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }
    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(f, y, x, c)]
    }
    /// Writes a value, clamped into [0,1] to keep the range invariant.
    #[inline]
    pub fn set(&mut self, f: usize, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(f, y, x, c);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn same_dims(&self, other: &FrameVolume) -> bool {
        self.dims() == other.dims()
    }

    /// Sub-volume copy over half-open frame/row/column ranges.
    pub fn crop(&self, t: (usize, usize), y: (usize, usize), x: (usize, usize)) -> Result<Self> {
        if t.0 >= t.1 || y.0 >= y.1 || x.0 >= x.1 || t.1 > self.frames || y.1 > self.height || x.1 > self.width {
            return Err(input_err!(
                "crop {t:?}x{y:?}x{x:?} outside volume {:?}",
                self.dims()
            ));
        }
        let c = self.channels;
        let row = (x.1 - x.0) * c;
        let mut data = Vec::with_capacity((t.1 - t.0) * (y.1 - y.0) * row);
        for f in t.0..t.1 {
            for yy in y.0..y.1 {
                let start = self.index(f, yy, x.0, 0);
                data.extend_from_slice(&self.data[start..start + row]);
            }
        }
        Ok(Self {
            data,
            frames: t.1 - t.0,
            height: y.1 - y.0,
            width: x.1 - x.0,
            channels: c,
            fps: self.fps,
        })
    }

    /// Spatial resize of every frame with the antialiased triangle filter.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.frames * height * width * self.channels);
        for f in 0..self.frames {
            data.extend(resample::resize(
                self.frame(f),
                self.height,
                self.width,
                self.channels,
                height,
                width,
            ));
        }
        Ok(Self::new_clamped(data, self.frames, height, width, self.channels)?.with_fps(self.fps))
    }

    /// Reflect-pads each frame at the bottom/right to `height x width`.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(input_err!("pad target smaller than volume"));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(self.frames * height * width * c);
        for f in 0..self.frames {
            for y in 0..height {
                let sy = reflect_index(y, self.height);
                for x in 0..width {
                    let sx = reflect_index(x, self.width);
                    let i = self.index(f, sy, sx, 0);
                    data.extend_from_slice(&self.data[i..i + c]);
                }
            }
        }
        Ok(Self {
            data,
            frames: self.frames,
            height,
            width,
            channels: c,
            fps: self.fps,
        })
    }

    /// Single-channel luminance (BT.601 weights); grayscale volumes are returned as is.
    pub fn luminance(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Tensor of shape `[frames, channels, height, width]`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (n, h, w, c) = self.dims();
        let t = Tensor::from_slice(&self.data, (n, h, w, c), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`FrameVolume::to_tensor`]; values are clamped to [0,1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let data = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new_clamped(data, n, h, w, c)
    }
}

/// Mirror index without edge repetition (`dcb|abcd|cba`).
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(FrameVolume::new(vec![1.5], 1, 1, 1, 1).is_err());
        assert!(FrameVolume::new(vec![0.0; 2], 1, 1, 1, 2).is_err());
        assert!(FrameVolume::new(vec![], 0, 1, 1, 1).is_err());
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 3).map(|i| i as f32 / 100.0).collect();
        let v = FrameVolume::new(data, 2, 3, 4, 3).unwrap();
        let t = v.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 4]);
        let back = FrameVolume::from_tensor(&t).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn reflect_padding_mirrors_without_repeat() {
        assert_eq!(
            (0..7).map(|i| reflect_index(i, 4)).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 2, 1, 0]
        );
        let v = FrameVolume::new(vec![0.0, 0.5, 1.0], 1, 1, 3, 1).unwrap();
        let p = v.pad_reflect(1, 5).unwrap();
        assert_eq!(p.data(), &[0.0, 0.5, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn crop_extracts_expected_values() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let v = FrameVolume::new(data, 1, 4, 4, 1).unwrap();
        let c = v.crop((0, 1), (1, 3), (2, 4)).unwrap();
        assert_eq!(c.data(), &[6.0 / 16.0, 7.0 / 16.0, 10.0 / 16.0, 11.0 / 16.0]);
    }
}
