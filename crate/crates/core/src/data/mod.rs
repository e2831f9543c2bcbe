//! Dataset files, in-memory samples and model checkpoints.
//!
//! A dataset directory holds `images/NNNNN.ppm` (P6), `labels/NNNNN.pgm`
//! (P5, one class id per pixel, 255 = ignore) and a `manifest.json` with the
//! generating spec, the train/val split and class names.

pub mod checkpoint;
pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::nn::IN_CHANNELS;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use synth::{generate, SynthSpec};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// An RGB image with per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationSample {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub image: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SegmentationSample {
    pub fn new(width: usize, height: usize, image: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if image.len() != width * height * 3 || labels.len() != width * height {
            return Err(Error::Data(format!(
                "sample buffers do not match {width}×{height}: image {} bytes, labels {} bytes",
                image.len(),
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            image,
            labels,
        })
    }

    pub fn contains_any(&self, classes: &[usize]) -> bool {
        self.labels.iter().any(|&l| l != IGNORE && classes.contains(&(l as usize)))
    }

    /// Mirror image and labels left to right.
    pub fn flipped(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut image = vec![0; self.image.len()];
        let mut labels = vec![0; self.labels.len()];
        for y in 0..h {
            for x in 0..w {
                let (src, dst) = (y * w + x, y * w + (w - 1 - x));
                labels[dst] = self.labels[src];
                image[dst * 3..dst * 3 + 3].copy_from_slice(&self.image[src * 3..src * 3 + 3]);
            }
        }
        Self {
            width: w,
            height: h,
            image,
            labels,
        }
    }
}

/// Reads a P6 image and its P5 label map and checks they pair up.
pub fn load_sample(image_path: &Path, label_path: &Path) -> Result<SegmentationSample> {
    let img = pnm::read(image_path, 3)?;
    let lab = pnm::read(label_path, 1)?;
    if (img.width, img.height) != (lab.width, lab.height) {
        return Err(Error::Parse {
            path: label_path.to_path_buf(),
            kind: ParseErrorKind::Pairing {
                image: (img.width, img.height),
                labels: (lab.width, lab.height),
            },
        });
    }
    SegmentationSample::new(img.width, img.height, img.pixels, lab.pixels)
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Labelled pixel count per class over the whole dataset.
    pub histogram: Vec<u64>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        let n = manifest.train.len() + manifest.val.len();
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let s = load_sample(
                &root.join("images").join(format!("{i:05}.ppm")),
                &root.join("labels").join(format!("{i:05}.pgm")),
            )?;
            if let Some(&bad) = s.labels.iter().find(|&&l| l != IGNORE && l as usize >= manifest.spec.num_classes) {
                return Err(Error::Data(format!("sample {i} has label {bad} outside {} classes", manifest.spec.num_classes)));
            }
            samples.push(s);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    /// An in-memory dataset (no files), split 80/20 by index.
    pub fn from_spec(spec: &SynthSpec) -> Result<Self> {
        let samples = synth::render(spec)?;
        let n = samples.len();
        let n_train = n * 4 / 5;
        Ok(Self {
            root: PathBuf::new(),
            manifest: Manifest {
                spec: spec.clone(),
                class_names: spec.class_names(),
                train: (0..n_train).collect(),
                val: (n_train..n).collect(),
                histogram: Vec::new(),
            },
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    pub fn train(&self) -> Vec<&SegmentationSample> {
        self.manifest.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn val(&self) -> Vec<&SegmentationSample> {
        self.manifest.val.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// Maps 8-bit intensities to roughly `[-2, 2]`.
pub fn normalize<S: Scalar>(v: u8) -> S {
    S::of((v as f64 - 127.5) / 63.75)
}

/// Stacks samples into a `[B, 3, H, W]` tensor and a flat label vector.
pub fn to_batch<S: Scalar>(samples: &[&SegmentationSample]) -> Result<(Tensor<S>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot batch zero samples".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(samples.len() * IN_CHANNELS * w * h);
    let mut labels = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.width, s.height) != (w, h) {
            return Err(Error::Data("samples in a batch differ in size".into()));
        }
        for c in 0..IN_CHANNELS {
            data.extend(s.image.iter().skip(c).step_by(3).map(|&v| normalize::<S>(v)));
        }
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), IN_CHANNELS, h, w], data)?, labels))
}

/// Shuffled mini-batches of indices.
pub fn batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
