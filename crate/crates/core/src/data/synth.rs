//! Synthetic stand-in for the X-ray data.
//!
//! Normal images are smooth low-frequency fields with values in
//! `[0.10, 0.35]`; pneumonia images sit on a base of at least `0.50` and add
//! bright Gaussian blobs. Every pneumonia image is therefore brighter on
//! average than every normal image.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::fusion::Class;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `NxR`: `N` images per class at `R×R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub per_class: usize,
    pub resolution: usize,
}

impl std::str::FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("synthetic spec {s:?} must look like 100x32"));
        let (n, r) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let per_class = n.trim().parse().map_err(|_| bad())?;
        let resolution = r.trim().parse().map_err(|_| bad())?;
        if per_class == 0 || resolution == 0 {
            return Err(bad());
        }
        Ok(Self { per_class, resolution })
    }
}

impl std::fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.per_class, self.resolution)
    }
}

const FIELD_AMPLITUDE: f64 = 0.05;

/// Sum of three random sinusoids with total amplitude at most
/// `FIELD_AMPLITUDE`.
fn smooth_field(rng: &mut ChaCha8Rng, res: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let n = res as f64;
    (0..res * res)
        .map(|i| {
            let (y, x) = ((i / res) as f64 / n, (i % res) as f64 / n);
            waves.iter().map(|(fy, fx, ph)| (2.0 * PI * (fy * y + fx * x) + ph).sin()).sum::<f64>()
                * FIELD_AMPLITUDE
                / 3.0
        })
        .collect()
}

fn synth_image(class: Class, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let field = smooth_field(rng, res);
    match class {
        Class::Normal => {
            let base = rng.gen_range(0.15..0.30);
            field.iter().map(|f| base + f).collect()
        }
        Class::Pneumonia => {
            let base = rng.gen_range(0.55..0.65);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let cy = rng.gen_range(0.2..0.8) * res as f64;
                    let cx = rng.gen_range(0.2..0.8) * res as f64;
                    let sigma = rng.gen_range(0.08..0.2) * res as f64;
                    (cy, cx, sigma, rng.gen_range(0.2..0.4))
                })
                .collect();
            (0..res * res)
                .map(|i| {
                    let (y, x) = ((i / res) as f64, (i % res) as f64);
                    let bump: f64 = blobs
                        .iter()
                        .map(|(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                        .sum();
                    (base + field[i] + bump).min(1.0)
                })
                .collect()
        }
    }
}

/// `per_class` images of each class, alternating Normal/Pneumonia.
pub fn synth_dataset(per_class: usize, resolution: usize, rng: &RngState) -> Result<Vec<LabeledImage>> {
    if per_class == 0 || resolution == 0 {
        return Err(Error::config("synthetic dataset needs at least one image per class and a positive resolution"));
    }
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        for class in Class::ALL {
            let mut stream = rng.stream_at((2 * i + class.index()) as u64);
            let gray = synth_image(class, resolution, &mut stream);
            let mut data = Vec::with_capacity(3 * gray.len());
            for _ in 0..3 {
                data.extend(gray.iter().map(|&v| v as f32));
            }
            out.push(LabeledImage {
                pixels: Tensor::new(&[3, resolution, resolution], data)?,
                label: class,
                source: format!("synth/{}/{i:05}", class.dir_name()),
            });
        }
    }
    Ok(out)
}

/// Writes `<root>/train` and `<root>/test` in the standard layout as 8-bit
/// grayscale PNGs; the test split gets a quarter as many images (at least
/// one per class) from an independent stream.
pub fn write_layout(root: &Path, spec: SynthSpec, rng: &RngState) -> Result<[usize; 2]> {
    let test_per_class = (spec.per_class / 4).max(1);
    let parts = [("train", spec.per_class, rng.derive(0)), ("test", test_per_class, rng.derive(1))];
    for (split, n, state) in parts {
        for class in Class::ALL {
            std::fs::create_dir_all(root.join(split).join(class.dir_name()))?;
        }
        for img in synth_dataset(n, spec.resolution, &state)? {
            let res = spec.resolution as u32;
            let plane = &img.pixels.data()[..(res * res) as usize];
            let gray = GrayImage::from_fn(res, res, |x, y| {
                let v = plane[(y * res + x) as usize];
                Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
            });
            let name = img.source.rsplit('/').next().unwrap_or("img");
            gray.save(root.join(split).join(img.label.dir_name()).join(format!("{name}.png")))?;
        }
    }
    Ok([spec.per_class, test_per_class])
}
