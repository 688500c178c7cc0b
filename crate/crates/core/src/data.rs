//! Image samples, the synthetic stain-like generator, the on-disk dataset
//! layout and group-aware splitting.
//!
//! Layout: `root/images/<id>.png` plus `root/annotations.json`. Masks are
//! run-length encoded as row-major `[value, start, length]` triples
//! covering every pixel.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cbhvt_tensor::Array;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::heads::LYMPHOCYTE;
use crate::region::BBox;

pub const ANNOTATION_FORMAT_VERSION: u32 = 1;
/// Network input side for ingested data.
pub const CANONICAL_SIZE: u32 = 256;
pub const LYSTO_SIZE: u32 = 267;
pub const NUCLICK_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Lysto,
    Nuclick,
    LyonRoi,
}

impl DataSource {
    /// Side length the format declares, if any.
    pub fn declared_size(self) -> Option<u32> {
        match self {
            DataSource::Lysto => Some(LYSTO_SIZE),
            DataSource::Nuclick => Some(NUCLICK_SIZE),
            DataSource::Synthetic | DataSource::LyonRoi => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != DataSource::LyonRoi
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "lysto" => Ok(DataSource::Lysto),
            "nuclick" => Ok(DataSource::Nuclick),
            "lyon_roi" => Ok(DataSource::LyonRoi),
            _ => config_err(format!("unknown dataset format {s:?}; valid: synthetic, lysto, nuclick, lyon_roi")),
        }
    }
}

/// Full-image binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight pixel-edge bounding box of the nonzero pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != u32::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> Mask {
        let mut out = Mask::new(width, height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as u32).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as u32).min(self.width - 1);
                out.data[(y * width + x) as usize] = self.get(sx, sy);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width as usize) {
            row.reverse();
        }
        out
    }
}

/// Row-major runs `[value, start, length]` covering every pixel.
pub fn encode_rle(mask: &Mask) -> Vec<[u32; 3]> {
    let mut runs: Vec<[u32; 3]> = Vec::new();
    for (i, &v) in mask.data.iter().enumerate() {
        let v = u32::from(v != 0);
        match runs.last_mut() {
            Some(r) if r[0] == v => r[2] += 1,
            _ => runs.push([v, i as u32, 1]),
        }
    }
    runs
}

pub fn decode_rle(runs: &[[u32; 3]], width: u32, height: u32) -> Result<Mask> {
    let mut mask = Mask::new(width, height);
    let mut next = 0u64;
    for &[v, start, len] in runs {
        if v > 1 {
            return data_err(format!("run value {v} is not binary"));
        }
        if u64::from(start) != next {
            return data_err(format!("run starts at {start}, expected {next}"));
        }
        let end = next + u64::from(len);
        if end > mask.data.len() as u64 {
            return data_err(format!("runs overflow a {width}x{height} mask"));
        }
        mask.data[next as usize..end as usize].fill(v as u8);
        next = end;
    }
    if next != mask.data.len() as u64 {
        return data_err(format!("runs cover {next} of {} pixels", mask.data.len()));
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Samples sharing a group (e.g. a patient) never straddle splits.
    pub group: String,
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
    pub masks: Vec<Mask>,
    pub labels: Vec<usize>,
    pub source: DataSource,
    /// False for inference-only data.
    pub labeled: bool,
}

impl ImageSample {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Boxes must bound their masks exactly for synthetic data and to
    /// within one pixel otherwise.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.masks.len() || self.boxes.len() != self.labels.len() {
            return data_err(format!(
                "{}: {} boxes, {} masks, {} labels",
                self.id,
                self.boxes.len(),
                self.masks.len(),
                self.labels.len()
            ));
        }
        let tol = if self.source == DataSource::Synthetic { 1e-9 } else { 1.0 + 1e-9 };
        for (i, (b, m)) in self.boxes.iter().zip(&self.masks).enumerate() {
            if (m.width, m.height) != (self.width(), self.height()) {
                return data_err(format!("{}: mask {i} is {}x{}", self.id, m.width, m.height));
            }
            let Some(t) = m.bounding_box() else {
                return data_err(format!("{}: mask {i} is empty", self.id));
            };
            let diff = b.to_array().iter().zip(t.to_array()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            if diff > tol {
                return data_err(format!("{}: box {i} {:?} does not bound its mask {:?}", self.id, b.to_array(), t.to_array()));
            }
        }
        Ok(())
    }

    /// `[3, H, W]` network input scaled to `[-0.5, 0.5]`.
    pub fn to_array(&self) -> Array {
        let (w, h) = (self.width() as usize, self.height() as usize);
        let raw = self.image.as_raw();
        Array::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            raw[p * 3 + c] as f64 / 255.0 - 0.5
        })
    }

    pub fn flip_horizontal(&self) -> ImageSample {
        let w = self.width() as f64;
        ImageSample {
            image: image::imageops::flip_horizontal(&self.image),
            boxes: self.boxes.iter().map(|b| BBox::new(w - b.x2, b.y1, w - b.x1, b.y2)).collect(),
            masks: self.masks.iter().map(Mask::flip_horizontal).collect(),
            ..self.clone()
        }
    }

    /// Bilinear image resize; boxes scaled per axis and masks resized by
    /// nearest neighbour.
    pub fn resized(&self, width: u32, height: u32) -> ImageSample {
        if (width, height) == (self.width(), self.height()) {
            return self.clone();
        }
        let sx = width as f64 / self.width() as f64;
        let sy = height as f64 / self.height() as f64;
        ImageSample {
            image: image::imageops::resize(&self.image, width, height, image::imageops::FilterType::Triangle),
            boxes: self.boxes.iter().map(|b| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)).collect(),
            masks: self.masks.iter().map(|m| m.resize_nearest(width, height)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainPalette {
    /// Per-channel `[lo, hi]` ranges.
    pub foreground: [[u8; 2]; 3],
    pub background: [[u8; 2]; 3],
    pub artifact: [[u8; 2]; 3],
}

impl Default for StainPalette {
    fn default() -> Self {
        Self {
            foreground: [[110, 150], [60, 95], [35, 70]],
            background: [[225, 245], [180, 205], [200, 225]],
            artifact: [[70, 110], [70, 110], [130, 170]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: u32,
    pub blobs_per_image: (usize, usize),
    pub radius_px: (f64, f64),
    /// Largest relative deviation of an ellipse semi-axis from the radius.
    pub max_elongation: f64,
    pub cluster_probability: f64,
    pub artifact_probability: f64,
    /// Half-width of the uniform per-pixel noise, in intensity levels.
    pub noise_amplitude: f64,
    pub stain_palette: StainPalette,
    pub images_per_group: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 16,
            image_size: 256,
            blobs_per_image: (3, 8),
            radius_px: (7.0, 12.0),
            max_elongation: 0.15,
            cluster_probability: 0.3,
            artifact_probability: 0.5,
            noise_amplitude: 8.0,
            stain_palette: StainPalette::default(),
            images_per_group: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.blobs_per_image.0 <= self.blobs_per_image.1
            && self.radius_px.0 <= self.radius_px.1
            && self.radius_px.0 > 0.0
            && self.stain_palette.foreground.iter().chain(&self.stain_palette.background).chain(&self.stain_palette.artifact).all(|r| r[0] <= r[1]);
        if !ranges_ok {
            return config_err("synthetic ranges need min <= max and positive radii");
        }
        for (name, p) in [("cluster_probability", self.cluster_probability), ("artifact_probability", self.artifact_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.max_elongation) || self.noise_amplitude < 0.0 {
            return config_err("max_elongation must lie in [0, 1) and noise_amplitude be non-negative");
        }
        if self.image_size < 32 || self.images_per_group == 0 {
            return config_err("image_size must be at least 32 and images_per_group positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    /// Normalized radial position, 0 at the center and 1 on the rim.
    fn radial(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    fn reach(&self) -> f64 {
        self.a.max(self.b)
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn channel(rng: &mut ChaCha8Rng, range: [u8; 2]) -> f64 {
    rng.random_range(range[0] as f64..=range[1] as f64)
}

fn color(rng: &mut ChaCha8Rng, ranges: &[[u8; 2]; 3]) -> [f64; 3] {
    [channel(rng, ranges[0]), channel(rng, ranges[1]), channel(rng, ranges[2])]
}

fn place_blobs(cfg: &SynthConfig, rng: &mut ChaCha8Rng, count: usize, id: &str) -> Result<Vec<Ellipse>> {
    let size = cfg.image_size as f64;
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.random_range(cfg.radius_px.0..=cfg.radius_px.1);
            let e = cfg.max_elongation;
            let (a, b) = if e > 0.0 {
                (r * rng.random_range(1.0 - e..=1.0 + e), r * rng.random_range(1.0 - e..=1.0 + e))
            } else {
                (r, r)
            };
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let reach = a.max(b);
            let cluster = !blobs.is_empty() && rng.random::<f64>() < cfg.cluster_probability;
            let (cx, cy) = if cluster {
                let host = blobs[rng.random_range(0..blobs.len())];
                let d = (host.reach() + reach) * rng.random_range(0.8..0.95);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                (host.cx + d * phi.cos(), host.cy + d * phi.sin())
            } else {
                (rng.random_range(reach + 1.0..size - reach - 1.0), rng.random_range(reach + 1.0..size - reach - 1.0))
            };
            if cx < reach + 1.0 || cy < reach + 1.0 || cx > size - reach - 1.0 || cy > size - reach - 1.0 {
                continue;
            }
            let min_gap = if cluster { 0.8 } else { 1.0 };
            let clear = blobs.iter().all(|o| {
                let d = (o.cx - cx).hypot(o.cy - cy);
                d >= min_gap * (o.reach() + reach) + if cluster { 0.0 } else { 2.0 }
            });
            if clear {
                blobs.push(Ellipse { cx, cy, a, b, theta });
                placed = true;
                break;
            }
        }
        if !placed {
            return data_err(format!(
                "{id}: could not place blob {} of {count} after {PLACEMENT_ATTEMPTS} attempts; lower blobs_per_image or radius_px",
                k + 1
            ));
        }
    }
    Ok(blobs)
}

fn synth_one(cfg: &SynthConfig, index: usize) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = format!("synth_{index:05}");
    let size = cfg.image_size;
    let pal = &cfg.stain_palette;

    let count = rng.random_range(cfg.blobs_per_image.0..=cfg.blobs_per_image.1);
    let blobs = place_blobs(cfg, &mut rng, count, &id)?;

    let background = color(&mut rng, &pal.background);
    let mut canvas: Vec<[f64; 3]> = vec![background; (size * size) as usize];

    // Unlabeled distractors: thin elongated bluish streaks under the cells.
    if rng.random::<f64>() < cfg.artifact_probability {
        let n = rng.random_range(1..=3);
        for _ in 0..n {
            let a = rng.random_range(15.0..40.0);
            let art = Ellipse {
                cx: rng.random_range(0.0..size as f64),
                cy: rng.random_range(0.0..size as f64),
                a,
                b: rng.random_range(1.5..3.5),
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            let c = color(&mut rng, &pal.artifact);
            paint(&mut canvas, size, &art, |_| c);
        }
    }

    // Later blobs occlude earlier ones, so masks are the visible regions.
    let mut owner: Vec<Option<usize>> = vec![None; (size * size) as usize];
    for (k, e) in blobs.iter().enumerate() {
        let c = color(&mut rng, &pal.foreground);
        paint(&mut canvas, size, e, |r| {
            let shade = 0.8 + 0.25 * r;
            [c[0] * shade, c[1] * shade, c[2] * shade]
        });
        for_each_inside(size, e, |p| owner[p] = Some(k));
    }

    let mut masks: Vec<Mask> = (0..blobs.len()).map(|_| Mask::new(size, size)).collect();
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = o {
            masks[*k].data[p] = 1;
        }
    }
    let mut boxes = Vec::with_capacity(masks.len());
    for (k, m) in masks.iter().enumerate() {
        boxes.push(m.bounding_box().ok_or_else(|| Error::Data(format!("{id}: blob {k} fully occluded")))?);
    }

    let mut image = RgbImage::new(size, size);
    let amp = cfg.noise_amplitude;
    for (p, px) in image.pixels_mut().enumerate() {
        for (ch, v) in px.0.iter_mut().enumerate() {
            let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            *v = (canvas[p][ch] + noise).round().clamp(0.0, 255.0) as u8;
        }
    }

    let labels = vec![LYMPHOCYTE; boxes.len()];
    let sample = ImageSample {
        id,
        group: format!("group_{:05}", index / cfg.images_per_group),
        image,
        boxes,
        masks,
        labels,
        source: DataSource::Synthetic,
        labeled: true,
    };
    sample.validate()?;
    Ok(sample)
}

fn for_each_inside(size: u32, e: &Ellipse, mut f: impl FnMut(usize)) {
    let r = e.reach();
    let lo = |c: f64| ((c - r - 1.0).floor().max(0.0)) as u32;
    let hi = |c: f64| ((c + r + 1.0).ceil().max(0.0) as u32).min(size);
    for y in lo(e.cy)..hi(e.cy) {
        for x in lo(e.cx)..hi(e.cx) {
            if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                f((y * size + x) as usize);
            }
        }
    }
}

fn paint(canvas: &mut [[f64; 3]], size: u32, e: &Ellipse, shade: impl Fn(f64) -> [f64; 3]) {
    for_each_inside(size, e, |p| {
        let (x, y) = ((p as u32 % size) as f64 + 0.5, (p as u32 / size) as f64 + 0.5);
        canvas[p] = shade(e.radial(x, y));
    });
}

/// Deterministic per seed: image `i` draws from its own stream.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| synth_one(cfg, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationFile {
    format_version: u32,
    format: DataSource,
    images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    file: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
    #[serde(default)]
    labels: Vec<usize>,
    #[serde(default)]
    masks: Vec<Vec<[u32; 3]>>,
}

pub fn save_dataset(samples: &[ImageSample], root: &Path, format: DataSource) -> Result<()> {
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.png", s.id);
        let path = images_dir.join(&file);
        s.image.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        records.push(ImageRecord {
            id: s.id.clone(),
            file,
            width: s.width(),
            height: s.height(),
            group: (s.group != s.id).then(|| s.group.clone()),
            boxes: s.boxes.iter().map(|b| b.to_array()).collect(),
            labels: s.labels.clone(),
            masks: s.masks.iter().map(encode_rle).collect(),
        });
    }
    let ann = AnnotationFile {
        format_version: ANNOTATION_FORMAT_VERSION,
        format,
        images: records,
    };
    let path = root.join("annotations.json");
    let text = serde_json::to_string(&ann).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8())
}

fn record_to_sample(rec: ImageRecord, images_dir: &Path, ann_path: &Path, format: DataSource) -> Result<ImageSample> {
    let field_err = |field: &str, msg: String| Error::Data(format!("{}: image {:?} field {field}: {msg}", ann_path.display(), rec.id));
    let image = load_png(&images_dir.join(&rec.file))?;
    if (image.width(), image.height()) != (rec.width, rec.height) {
        return Err(field_err(
            "width/height",
            format!("declared {}x{}, file is {}x{}", rec.width, rec.height, image.width(), image.height()),
        ));
    }
    if rec.masks.len() != rec.boxes.len() || rec.labels.len() != rec.boxes.len() {
        return Err(field_err(
            "masks/labels",
            format!("{} boxes, {} masks, {} labels", rec.boxes.len(), rec.masks.len(), rec.labels.len()),
        ));
    }
    let masks = rec
        .masks
        .iter()
        .enumerate()
        .map(|(i, runs)| decode_rle(runs, rec.width, rec.height).map_err(|e| field_err(&format!("masks[{i}]"), e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let boxes: Vec<BBox> = rec.boxes.iter().map(|&b| BBox::from(b)).collect();
    if let Some(i) = boxes.iter().position(|b| !b.to_array().iter().all(|v| v.is_finite()) || !b.is_valid()) {
        return Err(field_err(&format!("boxes[{i}]"), "not a valid [x1, y1, x2, y2]".into()));
    }
    Ok(ImageSample {
        group: rec.group.clone().unwrap_or_else(|| rec.id.clone()),
        id: rec.id,
        image,
        boxes,
        masks,
        labels: rec.labels,
        source: format,
        labeled: format.is_labeled(),
    })
}

/// Loads and validates a dataset. Ingested images whose size differs from
/// the canonical input are resized to it; sizes that disagree with the
/// declared format also log a warning.
pub fn load_dataset(root: &Path, format: DataSource) -> Result<Vec<ImageSample>> {
    let images_dir = root.join("images");
    let ann_path = root.join("annotations.json");
    let mut samples = if ann_path.exists() {
        let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::json(&ann_path, e))?;
        if ann.format_version != ANNOTATION_FORMAT_VERSION {
            return data_err(format!(
                "{}: field format_version is {}, expected {ANNOTATION_FORMAT_VERSION}",
                ann_path.display(),
                ann.format_version
            ));
        }
        ann.images
            .into_iter()
            .map(|rec| record_to_sample(rec, &images_dir, &ann_path, format))
            .collect::<Result<Vec<_>>>()?
    } else if format == DataSource::LyonRoi {
        list_pngs(&images_dir)?
            .into_iter()
            .map(|path| {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                Ok(ImageSample {
                    group: id.clone(),
                    id,
                    image: load_png(&path)?,
                    boxes: vec![],
                    masks: vec![],
                    labels: vec![],
                    source: format,
                    labeled: false,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        return Err(Error::io(&ann_path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    };
    if format != DataSource::Synthetic {
        for s in &mut samples {
            let size = (s.width(), s.height());
            if let Some(d) = format.declared_size() {
                if size != (d, d) {
                    log::warn!("{}: {}x{} differs from the declared {d}x{d}; resizing", s.id, size.0, size.1);
                }
            }
            if size != (CANONICAL_SIZE, CANONICAL_SIZE) {
                *s = s.resized(CANONICAL_SIZE, CANONICAL_SIZE);
            }
        }
    }
    for s in &samples {
        s.validate()?;
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Group counts per split by the largest-remainder rule; ties go to the
/// earlier split.
pub fn split_counts(groups: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * groups as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = groups - counts.iter().sum::<usize>().min(groups);
    for i in order {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Shuffles group keys with `seed` and deals whole groups to the splits.
pub fn split_dataset(samples: Vec<ImageSample>, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config_err(format!("split fractions {fractions:?} must be non-negative and sum to 1"));
    }
    let groups: Vec<String> = samples.iter().map(|s| s.group.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
    if groups.len() < wanted {
        return data_err(format!("{} groups cannot fill {wanted} splits", groups.len()));
    }
    let mut shuffled = groups;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_counts(shuffled.len(), fractions);
    let assign: BTreeMap<String, usize> = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, g)| (g, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 }))
        .collect();
    let mut split = Split::default();
    for s in samples {
        match assign[&s.group] {
            0 => split.train.push(s),
            1 => split.val.push(s),
            _ => split.test.push(s),
        }
    }
    Ok(split)
}
