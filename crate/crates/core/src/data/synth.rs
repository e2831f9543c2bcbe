//! Synthetic shape-segmentation datasets.
//!
//! Every image is a textured background with one to three filled shapes.
//! Each non-background class has its own geometry and colour; optional twin
//! pairs share both and differ only by a fine checkerboard modulation, so
//! two classes look nearly identical at a glance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm::{self, Raster};
use super::{Manifest, SegmentationSample, IGNORE};
use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};

/// Checkerboard amplitude that distinguishes the second class of a twin pair.
pub const TWIN_CUE: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeKind {
    const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::Cross => {
                (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// Appearance of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    /// Per-instance uniform colour shift, in intensity units.
    #[serde(default = "default_jitter")]
    pub color_jitter: f64,
    /// Minimum and maximum radius in pixels.
    pub size_range: [f64; 2],
    /// Amplitude of a 2-pixel checkerboard laid over the fill.
    #[serde(default)]
    pub checker: f64,
}

fn default_jitter() -> f64 {
    12.0
}

const PALETTE: [[u8; 3]; 8] = [
    [210, 40, 40],
    [40, 180, 60],
    [50, 70, 215],
    [225, 205, 40],
    [190, 50, 190],
    [40, 195, 200],
    [240, 130, 20],
    [120, 60, 20],
];

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Shape classes plus background.
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Per non-background class. Empty selects the built-in palette.
    #[serde(default)]
    pub shapes: Vec<ShapeSpec>,
    /// Standard deviation of per-pixel Gaussian noise, intensity units.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    /// `[a, b]`: class `b` copies class `a`'s look plus a checkerboard texture.
    #[serde(default)]
    pub twin_pairs: Vec<[usize; 2]>,
    /// When false every instance in an image belongs to the same class.
    #[serde(default = "default_true")]
    pub mixed_classes: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    8.0
}

fn default_true() -> bool {
    true
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            samples_per_class: 40,
            image_size: 32,
            shapes: Vec::new(),
            noise_level: default_noise(),
            twin_pairs: Vec::new(),
            mixed_classes: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Background plus two classes that form a twin pair.
    pub fn twin_demo() -> Self {
        Self {
            num_classes: 3,
            twin_pairs: vec![[1, 2]],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("synth.{field}: {why}")));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes", format!("must be in 2..=255, got {}", self.num_classes));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class", "must be at least 1".into());
        }
        if self.image_size < 8 {
            return bad("image_size", format!("must be at least 8, got {}", self.image_size));
        }
        if !self.shapes.is_empty() && self.shapes.len() != self.num_classes - 1 {
            return bad(
                "shapes",
                format!("needs one entry per non-background class ({}), got {}", self.num_classes - 1, self.shapes.len()),
            );
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.size_range[0] > 0.0 && s.size_range[0] <= s.size_range[1]) {
                return bad("shapes", format!("entry {i} has invalid size_range {:?}", s.size_range));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level", format!("must be non-negative, got {}", self.noise_level));
        }
        for p in &self.twin_pairs {
            if p[0] == p[1] || p.iter().any(|&c| c == 0 || c >= self.num_classes) {
                return bad("twin_pairs", format!("invalid pair {p:?}"));
            }
        }
        Ok(())
    }

    /// Class appearances after defaults and twin pairs are applied.
    pub fn resolved_shapes(&self) -> Vec<ShapeSpec> {
        let side = self.image_size as f64;
        let mut shapes: Vec<ShapeSpec> = if self.shapes.is_empty() {
            (0..self.num_classes - 1)
                .map(|i| ShapeSpec {
                    kind: ShapeKind::ALL[i % ShapeKind::ALL.len()],
                    color: PALETTE[i % PALETTE.len()],
                    color_jitter: default_jitter(),
                    size_range: [side * 0.16, side * 0.3],
                    checker: 0.0,
                })
                .collect()
        } else {
            self.shapes.clone()
        };
        for &[a, b] in &self.twin_pairs {
            let mut twin = shapes[a - 1].clone();
            twin.checker = TWIN_CUE;
            shapes[b - 1] = twin;
        }
        shapes
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for (i, s) in self.resolved_shapes().iter().enumerate() {
            let suffix = if s.checker > 0.0 { "-checked" } else { "" };
            names.push(format!("{}-{:?}{}", i + 1, s.kind, suffix).to_lowercase());
        }
        names
    }

    pub fn total_images(&self) -> usize {
        self.samples_per_class * (self.num_classes - 1)
    }
}

/// Renders one class instance without noise on a black canvas; used to
/// measure how alike twin classes are.
pub fn prototype(shape: &ShapeSpec, side: usize) -> Vec<u8> {
    let mut img = vec![0u8; side * side * 3];
    let c = side as f64 / 2.0;
    let r = 0.5 * (shape.size_range[0] + shape.size_range[1]);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            if shape.kind.contains(dx, dy, r) {
                let cue = checker(x, y, shape.checker);
                for ch in 0..3 {
                    img[(y * side + x) * 3 + ch] = clamp(shape.color[ch] as f64 + cue);
                }
            }
        }
    }
    img
}

fn checker(x: usize, y: usize, amp: f64) -> f64 {
    if amp == 0.0 {
        0.0
    } else if ((x / 2) + (y / 2)) % 2 == 0 {
        amp
    } else {
        -amp
    }
}

fn clamp(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Geometry of one drawn shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Instance {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.kind.contains(x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy, self.radius)
    }
}

/// Generates every sample in memory. The output depends only on `spec`.
pub fn render(spec: &SynthSpec) -> Result<Vec<SegmentationSample>> {
    Ok(render_detailed(spec)?.into_iter().map(|(s, _)| s).collect())
}

/// Like [`render`], also returning the shapes drawn into each image in
/// drawing order.
pub fn render_detailed(spec: &SynthSpec) -> Result<Vec<(SegmentationSample, Vec<Instance>)>> {
    spec.validate()?;
    let shapes = spec.resolved_shapes();
    let side = spec.image_size;
    let classes = spec.num_classes - 1;
    let mut rng = SeededRng::new(spec.seed, Stream::Data);
    let mut out = Vec::with_capacity(spec.total_images());
    for i in 0..spec.total_images() {
        let primary = 1 + i % classes;
        let extra = rng.below(0, 3);
        let mut instances: Vec<usize> = (0..extra)
            .map(|_| if spec.mixed_classes { 1 + rng.below(0, classes) } else { primary })
            .collect();
        instances.push(primary);

        let mut image = background(&mut rng, side);
        let mut labels = vec![0u8; side * side];
        let mut drawn = Vec::with_capacity(instances.len());
        for &class in &instances {
            let shape = &shapes[class - 1];
            let r = rng.range(shape.size_range[0], shape.size_range[1]);
            let cx = rng.range(r * 0.6, side as f64 - r * 0.6);
            let cy = rng.range(r * 0.6, side as f64 - r * 0.6);
            let shift = rng.range(-shape.color_jitter, shape.color_jitter);
            drawn.push(Instance {
                class,
                kind: shape.kind,
                cx,
                cy,
                radius: r,
            });
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if !shape.kind.contains(dx, dy, r) {
                        continue;
                    }
                    let cue = checker(x, y, shape.checker);
                    for ch in 0..3 {
                        image[(y * side + x) * 3 + ch] = shape.color[ch] as f64 + shift + cue;
                    }
                    labels[y * side + x] = class as u8;
                }
            }
        }
        let image: Vec<u8> = image
            .into_iter()
            .map(|v| clamp(v + rng.normal(0.0, spec.noise_level)))
            .collect();
        out.push((SegmentationSample::new(side, side, image, labels)?, drawn));
    }
    Ok(out)
}

/// Low-contrast greyish background with sinusoidal stripes.
fn background(rng: &mut SeededRng, side: usize) -> Vec<f64> {
    let base = rng.range(70.0, 130.0);
    let tint = [rng.range(-8.0, 8.0), rng.range(-8.0, 8.0), rng.range(-8.0, 8.0)];
    let angle = rng.range(0.0, std::f64::consts::PI);
    let freq = rng.range(0.3, 1.2);
    let amp = rng.range(4.0, 14.0);
    let (s, c) = angle.sin_cos();
    let mut img = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let stripe = amp * ((x as f64 * c + y as f64 * s) * freq).sin();
            for ch in 0..3 {
                img[(y * side + x) * 3 + ch] = base + tint[ch] + stripe;
            }
        }
    }
    img
}

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and `manifest.json`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let samples = render(spec)?;
    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    for dir in [&images, &labels] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}");
        pnm::write(
            &images.join(format!("{name}.ppm")),
            &Raster {
                width: s.width,
                height: s.height,
                channels: 3,
                pixels: s.image.clone(),
            },
        )?;
        pnm::write(
            &labels.join(format!("{name}.pgm")),
            &Raster {
                width: s.width,
                height: s.height,
                channels: 1,
                pixels: s.labels.clone(),
            },
        )?;
    }
    let n = samples.len();
    let n_train = n * 4 / 5;
    let mut histogram = vec![0u64; spec.num_classes];
    for s in &samples {
        for &l in &s.labels {
            if l != IGNORE {
                histogram[l as usize] += 1;
            }
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        class_names: spec.class_names(),
        train: (0..n_train).collect(),
        val: (n_train..n).collect(),
        histogram,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
