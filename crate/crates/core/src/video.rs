use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N` frames of `C x H x W` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub frame_rate: f64,
}

impl VideoClip {
    pub const DEFAULT_FRAME_RATE: f64 = 8.0;

    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("clip must be [N, C, H, W], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::Shape("clip needs at least 2 frames".into()));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("clip frames".into()));
        }
        if frames.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument("clip values must lie in [0, 1]".into()));
        }
        Ok(Self {
            frames,
            frame_rate: Self::DEFAULT_FRAME_RATE,
        })
    }

    /// Clamps into `[0, 1]` first; used for decoded samples.
    pub fn from_clamped(frames: Tensor) -> Result<Self> {
        Self::new(frames.map(|x| x.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame(&self, i: usize) -> Tensor {
        self.frames.outer(i)
    }

    fn frame_rgb8(&self, i: usize) -> Vec<u8> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let f = self.frame(i);
        let mut out = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            for ch in 0..3 {
                let src = if c == 3 { ch } else { 0 };
                out.push((f.data()[src * h * w + p] * 255.0).round() as u8);
            }
        }
        out
    }

    /// Writes `frame_%04d.png` (8-bit RGB) into `dir`.
    pub fn save_pngs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for i in 0..self.n_frames() {
            let img = RgbImage::from_raw(self.width() as u32, self.height() as u32, self.frame_rgb8(i))
                .expect("buffer sized from clip dimensions");
            img.save(dir.join(format!("frame_{i:04}.png")))?;
        }
        Ok(())
    }

    pub fn load_pngs(dir: &Path, n_frames: usize) -> Result<Self> {
        let mut frames = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            let img = image::open(dir.join(format!("frame_{i:04}.png")))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (p, px) in img.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + p] = px[ch] as f64 / 255.0;
                }
            }
            frames.push(Tensor::from_parts(&[3, h, w], data));
        }
        Self::new(Tensor::stack(&frames)?)
    }

    /// Looping animated preview.
    pub fn save_gif(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = GifEncoder::new(file);
        enc.set_repeat(Repeat::Infinite)?;
        let delay = Delay::from_numer_denom_ms(1000, self.frame_rate.max(1.0) as u32);
        for i in 0..self.n_frames() {
            let rgb = self.frame_rgb8(i);
            let rgba: Vec<u8> = rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
            let img = RgbaImage::from_raw(self.width() as u32, self.height() as u32, rgba)
                .expect("buffer sized from clip dimensions");
            enc.encode_frame(Frame::from_parts(img, 0, 0, delay))?;
        }
        Ok(())
    }

    /// Mean absolute difference between consecutive frames.
    pub fn flicker(&self) -> f64 {
        let n = self.n_frames();
        let per = self.frames.len() / n;
        let d = self.frames.data();
        let mut acc = 0.0;
        for i in 0..n - 1 {
            acc += d[i * per..(i + 1) * per]
                .iter()
                .zip(&d[(i + 1) * per..(i + 2) * per])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        acc / ((n - 1) * per) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_range_and_frames() {
        assert!(VideoClip::new(Tensor::full(&[1, 3, 2, 2], 0.5)).is_err());
        assert!(VideoClip::new(Tensor::full(&[2, 3, 2, 2], 1.5)).is_err());
        assert!(VideoClip::from_clamped(Tensor::full(&[2, 3, 2, 2], 1.5)).is_ok());
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i % 256) as f64 / 255.0).collect();
        let clip = VideoClip::new(Tensor::new(&[2, 3, 4, 5], data).unwrap()).unwrap();
        clip.save_pngs(dir.path()).unwrap();
        let back = VideoClip::load_pngs(dir.path(), 2).unwrap();
        assert_eq!(back, clip);
        clip.save_gif(&dir.path().join("p.gif")).unwrap();
    }

    #[test]
    fn static_clip_has_zero_flicker() {
        let clip = VideoClip::new(Tensor::full(&[4, 3, 2, 2], 0.3)).unwrap();
        assert_eq!(clip.flicker(), 0.0);
    }
}
