//! Training-time augmentation: random area crop, flips, brightness and
//! contrast jitter, then per-channel normalization.

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Range of the crop's area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Brightness factor is drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor is drawn from `1 ± contrast`.
    pub contrast: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.8, 1.0),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    /// No crop, no flips, no jitter: augmentation reduces to normalization.
    pub fn identity() -> Self {
        Self { crop_scale: (1.0, 1.0), hflip_prob: 0.0, vflip_prob: 0.0, brightness: 0.0, contrast: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, j) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(0.0..1.0).contains(&j) {
                return Err(Error::config(format!("{name} jitter must lie in [0, 1), got {j}")));
            }
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }
}

fn dims(img: &Tensor<f32>) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let src = img.data();
    let data = (0..c * h * w).map(|i| {
        let (row, x) = (i / w, i % w);
        src[row * w + (w - 1 - x)]
    });
    Tensor::new(&[c, h, w], data.collect()).expect("shape preserved")
}

pub fn vflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let src = img.data();
    let data = (0..c * h * w).map(|i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        src[(ch * h + (h - 1 - y)) * w + x]
    });
    Tensor::new(&[c, h, w], data.collect()).expect("shape preserved")
}

/// `(x - mean_c) / std_c` per channel.
pub fn normalize(img: &Tensor<f32>, cfg: &AugmentConfig) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let plane = h * w;
    let mut out = img.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate().take(c) {
        let (m, s) = (cfg.mean[ch.min(2)] as f32, cfg.std[ch.min(2)] as f32);
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Crops the `side×side` window at `(top, left)` and resizes it back to the
/// full `h×w` frame.
fn crop_resize(img: &Tensor<f32>, top: usize, left: usize, ch_side: usize, cw_side: usize) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let src = img.data();
    let crop = ImageBuffer::<Rgb<f32>, Vec<f32>>::from_fn(cw_side as u32, ch_side as u32, |x, y| {
        let at = |ch: usize| src[(ch.min(c - 1) * h + top + y as usize) * w + left + x as usize];
        Rgb([at(0), at(1), at(2)])
    });
    let resized = image::imageops::resize(&crop, w as u32, h as u32, FilterType::Triangle);
    let mut data = vec![0f32; c * h * w];
    for (i, px) in resized.pixels().enumerate() {
        for ch in 0..c {
            data[ch * h * w + i] = px[ch.min(2)];
        }
    }
    Tensor::new(&[c, h, w], data).expect("shape preserved")
}

/// Applies the random training transform to a `[3,H,W]` image in `[0,1]`.
/// The output always has the input's shape.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let mut out = img.clone();

    let (lo, hi) = cfg.crop_scale;
    let area = if hi > lo { rng.gen_range(lo..=hi) } else { hi };
    let side_h = ((area.sqrt() * h as f64).round() as usize).clamp(1, h);
    let side_w = ((area.sqrt() * w as f64).round() as usize).clamp(1, w);
    if side_h < h || side_w < w {
        let top = rng.gen_range(0..=h - side_h);
        let left = rng.gen_range(0..=w - side_w);
        out = crop_resize(&out, top, left, side_h, side_w);
    }

    if rng.gen_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if rng.gen_bool(cfg.vflip_prob) {
        out = vflip(&out);
    }

    if cfg.brightness > 0.0 {
        let b = rng.gen_range(1.0 - cfg.brightness..=1.0 + cfg.brightness) as f32;
        out.data_mut().iter_mut().for_each(|v| *v *= b);
    }
    if cfg.contrast > 0.0 {
        let k = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32;
        let mean = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.numel().max(1) as f64;
        let mean = mean as f32;
        out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
    }
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    normalize(&out, cfg)
}
