//! Seeded synthetic segmentation scenes.
//!
//! Each sample is a `[H, W, 3]` image plus a full-resolution label map.
//! A scene holds one to four axis-aligned rectangles and ellipses, each
//! painted in a distinct foreground class over the background class 0;
//! the image is the per-class palette color plus optional Gaussian pixel
//! noise. Scenes whose background share leaves [20%, 90%] are resampled,
//! so every dataset has learnable amounts of both background and shapes.
//!
//! Determinism: sample `idx` of dataset seed `s` is generated from the
//! derived stream `(derive(s, DATA), idx)` and from nothing else, so any
//! sample can be regenerated in isolation and datasets never depend on
//! generation order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{self, tags};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How many resample attempts a scene gets before the constraints are
/// declared impossible.
const MAX_SCENE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub seed: u64,
    pub n: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub num_classes: usize,
    /// Gaussian pixel-noise sigma; 0 disables noise entirely.
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[H, W, 3]`, palette color + noise, not clamped.
    pub image: Tensor,
    /// Row-major `[H, W]` class ids, all `< num_classes`.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// A shape as placed by the generator, kept so tests can rebuild the
/// label mask independently of the painting code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: u32,
    /// Rectangle bounds `[y0, y1) x [x0, x1)`; for ellipses the bounding
    /// box of the painted region.
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PlacedShape {
    /// Membership test used by both the painter and the test oracles.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || y >= self.y1 || x < self.x0 || x >= self.x1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let cy = (self.y0 + self.y1) as f64 / 2.0;
                let cx = (self.x0 + self.x1) as f64 / 2.0;
                let ry = (self.y1 - self.y0) as f64 / 2.0;
                let rx = (self.x1 - self.x0) as f64 / 2.0;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Deterministic palette; color components in [0, 1].
///
/// Background is a dark gray; foreground classes walk the hue wheel in
/// golden-angle steps so any two class colors stay far apart.
pub fn class_color(class: u32) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = (class as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generate one sample (and the shapes it was built from) for the given
/// index, independent of every other index.
pub fn generate_sample(spec: &DataSpec, idx: usize) -> Result<(Sample, Vec<PlacedShape>)> {
    validate_spec(spec)?;
    let mut rng = rng::stream(rng::derive_seed(spec.seed, tags::DATA), idx as u64);
    let (h, w) = (spec.img_h, spec.img_w);

    let mut labels = Vec::new();
    let mut shapes = Vec::new();
    let mut placed = false;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        shapes = sample_shapes(spec, &mut rng);
        labels = vec![0u32; h * w];
        for shape in &shapes {
            for y in shape.y0..shape.y1 {
                for x in shape.x0..shape.x1 {
                    if shape.contains(y, x) {
                        labels[y * w + x] = shape.class;
                    }
                }
            }
        }
        let bg = labels.iter().filter(|&&c| c == 0).count() as f64 / (h * w) as f64;
        if (0.2..=0.9).contains(&bg) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Config(format!(
            "could not place shapes with a 20-90% background share on a {h}x{w} canvas \
             after {MAX_SCENE_ATTEMPTS} attempts"
        )));
    }

    let mut pixels = Vec::with_capacity(h * w * 3);
    let sigma = spec.noise;
    for &class in &labels {
        let color = class_color(class);
        for channel in color {
            let noise = if sigma > 0.0 { rng::trunc_normal(&mut rng, sigma) } else { 0.0 };
            pixels.push(channel + noise);
        }
    }
    let image = Tensor::new(&[h, w, 3], pixels)?;
    Ok((Sample { image, labels }, shapes))
}

fn sample_shapes(spec: &DataSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedShape> {
    let (h, w) = (spec.img_h, spec.img_w);
    let max_shapes = 4.min(spec.num_classes - 1);
    let count = rng.random_range(1..=max_shapes);
    // Each shape takes a distinct foreground class.
    let mut classes: Vec<u32> = (1..spec.num_classes as u32).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    (0..count)
        .map(|s| {
            let sh = rng.random_range(h.div_ceil(6).max(2)..=h / 2);
            let sw = rng.random_range(w.div_ceil(6).max(2)..=w / 2);
            let y0 = rng.random_range(0..=h - sh);
            let x0 = rng.random_range(0..=w - sw);
            let kind = if rng.random_range(0..2) == 0 {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            PlacedShape { kind, class: classes[s], y0, y1: y0 + sh, x0, x1: x0 + sw }
        })
        .collect()
}

fn validate_spec(spec: &DataSpec) -> Result<()> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "dataset needs at least 2 classes (background + 1), got {}",
            spec.num_classes
        )));
    }
    if spec.img_h < 4 || spec.img_w < 4 {
        return Err(Error::Config(format!(
            "dataset canvas {}x{} is too small",
            spec.img_h, spec.img_w
        )));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {}", spec.noise)));
    }
    Ok(())
}

pub fn generate_dataset(spec: &DataSpec) -> Result<SyntheticDataset> {
    let samples = (0..spec.n)
        .map(|idx| generate_sample(spec, idx).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { spec: *spec, samples })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel count per class over the whole dataset, at full resolution.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.spec.num_classes];
        for sample in &self.samples {
            for &c in &sample.labels {
                hist[c as usize] += 1;
            }
        }
        hist
    }
}

/// Nearest-neighbor downsample of a label map (used to build the H/4
/// training/evaluation targets). Each output cell reads the input pixel
/// under its center.
pub fn downsample_labels(
    labels: &[u32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<u32>> {
    if labels.len() != in_h * in_w {
        return Err(Error::dim(
            "downsample_labels",
            format!("label buffer holds {} values, expected {}x{}", labels.len(), in_h, in_w),
        ));
    }
    if out_h == 0 || out_w == 0 || out_h > in_h || out_w > in_w {
        return Err(Error::dim(
            "downsample_labels",
            format!("cannot downsample {in_h}x{in_w} to {out_h}x{out_w}"),
        ));
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = (((oy as f64 + 0.5) * sy) as usize).min(in_h - 1);
        for ox in 0..out_w {
            let x = (((ox as f64 + 0.5) * sx) as usize).min(in_w - 1);
            out.push(labels[y * in_w + x]);
        }
    }
    Ok(out)
}
