//! Dataset ingestion, stratified splitting, batching and the synthetic
//! stand-in dataset.
//!
//! On-disk layout: `<root>/{train,test}/{NORMAL,PNEUMONIA}/*.{jpeg,jpg,png}`.

mod augment;
mod synth;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fusion::Class;
use crate::tensor::Tensor;

pub use augment::{augment, hflip, normalize, vflip, AugmentConfig};
pub use synth::{synth_dataset, write_layout, SynthSpec};

/// One decoded image: `[3,H,W]` pixels in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: Class,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<Skipped>,
}

impl SkipReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedSplit {
    pub images: Vec<LabeledImage>,
    pub skipped: SkipReport,
}

impl LoadedSplit {
    /// `[normal, pneumonia]` image counts.
    pub fn class_counts(&self) -> [usize; 2] {
        class_counts(self.images.iter().map(|i| i.label))
    }

    pub fn labels(&self) -> Vec<Class> {
        self.images.iter().map(|i| i.label).collect()
    }
}

pub fn class_counts(labels: impl IntoIterator<Item = Class>) -> [usize; 2] {
    let mut counts = [0; 2];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

const EXTENSIONS: [&str; 3] = ["jpeg", "jpg", "png"];

fn path_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Path { path: path.to_path_buf(), reason: reason.into() }
}

/// Lists image files under `dir/{NORMAL,PNEUMONIA}` in name order. Files
/// with other extensions go straight to the skip report.
pub fn scan_split(dir: &Path) -> Result<(Vec<(PathBuf, Class)>, SkipReport)> {
    if !dir.is_dir() {
        return Err(path_err(dir, "dataset directory does not exist"));
    }
    let mut files = Vec::new();
    let mut report = SkipReport::default();
    for class in Class::ALL {
        let class_dir = dir.join(class.dir_name());
        if !class_dir.is_dir() {
            return Err(path_err(&class_dir, "class directory missing"));
        }
        let mut entries = std::fs::read_dir(&class_dir)
            .map_err(|e| path_err(&class_dir, e.to_string()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        let before = files.len();
        for path in entries {
            if !path.is_file() {
                continue;
            }
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if ext.as_deref().is_some_and(|e| EXTENSIONS.contains(&e)) {
                files.push((path, class));
            } else {
                report.skipped.push(Skipped {
                    path: path.display().to_string(),
                    reason: "unsupported file extension".into(),
                });
            }
        }
        if files.len() == before {
            log::warn!("class directory {} is empty", class_dir.display());
        }
    }
    Ok((files, report))
}

/// Decodes one file to `[3,res,res]` in `[0,1]`; grayscale is replicated to
/// three channels.
pub fn decode_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let side = resolution as u32;
    let img = if img.dimensions() == (side, side) {
        img
    } else {
        image::imageops::resize(&img, side, side, FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, resolution, resolution], data)
}

/// Loads one split directory (e.g. `<root>/train`). Undecodable files are
/// logged and listed in the skip report instead of failing the load.
pub fn load_split(dir: &Path, resolution: usize) -> Result<LoadedSplit> {
    if resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    let (files, mut skipped) = scan_split(dir)?;
    let decoded = exec::map_indexed(files.len(), |i| decode_image(&files[i].0, resolution));
    let mut images = Vec::with_capacity(files.len());
    for ((path, label), result) in files.into_iter().zip(decoded) {
        match result {
            Ok(pixels) => images.push(LabeledImage { pixels, label, source: path.display().to_string() }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.skipped.push(Skipped { path: path.display().to_string(), reason: e.to_string() });
            }
        }
    }
    let counts = class_counts(images.iter().map(|i| i.label));
    log::info!("{}: {} normal, {} pneumonia", dir.display(), counts[0], counts[1]);
    Ok(LoadedSplit { images, skipped })
}

/// Loads `<root>/<split>`.
pub fn load_dataset(root: &Path, split: &str, resolution: usize) -> Result<LoadedSplit> {
    if !root.is_dir() {
        return Err(path_err(root, "dataset root does not exist"));
    }
    load_split(&root.join(split), resolution)
}

/// Train/validation membership as indices into the source list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Train share of a class with `n` samples: round-half-up of `ratio·n`.
pub fn train_share(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// Per-class split: each class is shuffled with `rng`, its first
/// `train_share(n_c)` members go to train and the rest to val. Both lists
/// come back in ascending index order.
pub fn stratified_split(labels: &[Class], ratio: f64, rng: &mut ChaCha8Rng) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new() };
    for class in Class::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            log::warn!("class {class:?} has no samples; its split slices are empty");
        }
        members.shuffle(rng);
        let k = train_share(members.len(), ratio);
        split.train.extend_from_slice(&members[..k]);
        split.val.extend_from_slice(&members[k..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Groups `indices` into batches of `batch_size`, keeping the final partial
/// batch. With `shuffle` the order is a permutation drawn from it.
pub fn batch_indices(indices: &[usize], batch_size: usize, shuffle: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order = indices.to_vec();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A collated mini-batch: `images` is `[B,3,H,W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Stacks the given samples into a batch, mapping each through `transform`
/// (augmentation or plain normalization). `transform` receives the sample's
/// position within the batch so callers can derive per-sample streams.
pub fn collate<F>(images: &[LabeledImage], members: &[usize], transform: F) -> Result<Batch>
where
    F: Fn(usize, &LabeledImage) -> Tensor<f32> + Sync + Send,
{
    let tensors = exec::map_indexed(members.len(), |pos| transform(pos, &images[members[pos]]));
    let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
    Ok(Batch {
        images: Tensor::stack(&refs)?,
        labels: members.iter().map(|&i| images[i].label.index()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn kaggle_counts_round_rule() {
        assert_eq!((train_share(1341, 0.8), train_share(3875, 0.8)), (1073, 3100));
        assert_eq!(train_share(10, 0.8), 8);
        assert_eq!(train_share(5, 0.5), 3);
    }

    #[test]
    fn batches_keep_the_tail() {
        let idx: Vec<usize> = (0..20).collect();
        let sizes: Vec<usize> = batch_indices(&idx, 8, None).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 8, 4]);
        assert_eq!(batch_indices(&idx, 8, None).unwrap().concat(), idx);
    }

    #[test]
    fn shuffled_batches_follow_the_stream() {
        let idx: Vec<usize> = (0..20).collect();
        let s = RngState::new(5);
        let a = batch_indices(&idx, 8, Some(&mut s.stream_at(1))).unwrap();
        let b = batch_indices(&idx, 8, Some(&mut s.stream_at(1))).unwrap();
        let c = batch_indices(&idx, 8, Some(&mut s.stream_at(2))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_of_ten_and_ten() {
        let labels: Vec<Class> = (0..20).map(|i| if i < 10 { Class::Normal } else { Class::Pneumonia }).collect();
        let split = stratified_split(&labels, 0.8, &mut RngState::new(1).stream_at(0)).unwrap();
        assert_eq!(class_counts(split.train.iter().map(|&i| labels[i])), [8, 8]);
        assert_eq!(class_counts(split.val.iter().map(|&i| labels[i])), [2, 2]);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let mut rng = RngState::new(1).stream_at(0);
        assert!(matches!(stratified_split(&[Class::Normal], 1.0, &mut rng), Err(Error::Config(_))));
    }
}
