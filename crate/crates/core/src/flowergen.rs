//! Procedural flower benchmark with pixel-exact ground-truth masks.
//!
//! Classes are defined by a controlled discriminative feature (head color,
//! stem color, or a part: balls vs thorns); everything else is held fixed,
//! so the mask marks exactly the pixels that carry class information.
//! Geometry is driven deterministically by the frame index, emulating
//! viewpoint change with stem sway and petal phase.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataSample, LabeledDataset};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FlowerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("frame {frame} out of range for {frames} frames per class")]
    BadFrame { frame: usize, frames: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowerError + '_ {
    move |source| FlowerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowerVariant {
    Single6,
    Double12,
    Part2,
}

impl FlowerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            FlowerVariant::Single6 => "single-6c",
            FlowerVariant::Double12 => "double-12c",
            FlowerVariant::Part2 => "part-2c",
        }
    }

    pub fn parse(s: &str) -> Option<FlowerVariant> {
        match s {
            "single-6c" => Some(FlowerVariant::Single6),
            "double-12c" => Some(FlowerVariant::Double12),
            "part-2c" => Some(FlowerVariant::Part2),
            _ => None,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            FlowerVariant::Single6 => 6,
            FlowerVariant::Double12 => 12,
            FlowerVariant::Part2 => 2,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            FlowerVariant::Single6 => PALETTE.iter().map(|p| format!("head_{}", p.0)).collect(),
            FlowerVariant::Double12 => PALETTE
                .iter()
                .map(|p| format!("head_{}", p.0))
                .chain(PALETTE.iter().map(|p| format!("stem_{}", p.0)))
                .collect(),
            FlowerVariant::Part2 => vec!["balls".into(), "thorns".into()],
        }
    }
}

const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [230, 30, 30]),
    ("green", [30, 230, 30]),
    ("blue", [30, 30, 230]),
    ("yellow", [230, 230, 30]),
    ("magenta", [230, 30, 230]),
    ("cyan", [30, 230, 230]),
];

const BACKGROUND: [u8; 3] = [235, 235, 235];
const STEM_GREEN: [u8; 3] = [45, 110, 45];
const LEAF_GREEN: [u8; 3] = [60, 130, 60];
const HEAD_GRAY: [u8; 3] = [128, 128, 128];
const PART_COLOR: [u8; 3] = [150, 75, 40];

#[derive(Debug, Clone, Copy)]
pub struct FlowerSpec {
    pub variant: FlowerVariant,
    pub side: usize,
    pub frames_per_class: usize,
    pub augment: bool,
    pub seed: u64,
}

impl FlowerSpec {
    /// 40 raw frames at 300x300, each augmented into 25 samples (5 crops
    /// of 250x250, each rotated 5/10/15/20/25 degrees): 1000 per class.
    pub fn full(variant: FlowerVariant, seed: u64) -> FlowerSpec {
        FlowerSpec { variant, side: 300, frames_per_class: 40, augment: true, seed }
    }

    /// Desk-scale profile: 100 frames per class rendered directly at 64,
    /// no augmentation.
    pub fn mini(variant: FlowerVariant, seed: u64) -> FlowerSpec {
        FlowerSpec { variant, side: 64, frames_per_class: 100, augment: false, seed }
    }

    pub fn mini_profile(&self) -> FlowerSpec {
        FlowerSpec::mini(self.variant, self.seed)
    }

    pub fn samples_per_class(&self) -> usize {
        if self.augment {
            self.frames_per_class * 25
        } else {
            self.frames_per_class
        }
    }
}

// paint owners, later paint wins
const OWNER_NONE: u8 = 0;
const OWNER_STEM: u8 = 1;
const OWNER_LEAF: u8 = 2;
const OWNER_HEAD: u8 = 3;
const OWNER_PART: u8 = 4;

struct Geometry {
    stem: Vec<(f64, f64)>,
    head_center: (f64, f64),
    head_radius: f64,
    petal_phase: f64,
    leaves: Vec<((f64, f64), f64, f64, f64)>, // center, semi-major, semi-minor, angle
    balls: Vec<(f64, f64)>,
    ball_radius: f64,
    thorns: Vec<[(f64, f64); 3]>,
}

fn bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), s: f64) -> (f64, f64) {
    let u = 1.0 - s;
    (
        u * u * p0.0 + 2.0 * u * s * p1.0 + s * s * p2.0,
        u * u * p0.1 + 2.0 * u * s * p1.1 + s * s * p2.1,
    )
}

fn geometry(frames: usize, t: usize) -> Geometry {
    let ph = 2.0 * PI * t as f64 / frames as f64;
    let sway = 0.07 * ph.sin();
    let head_center = (0.5 + sway, 0.30);
    let head_radius = 0.15 + 0.015 * (1.7 * ph + 0.4).sin();
    let petal_phase = 2.0 * ph;

    let p0 = (0.5, 0.95);
    let p1 = (0.5 + 0.4 * sway, 0.62);
    let p2 = head_center;
    let stem: Vec<(f64, f64)> = (0..=32).map(|i| bezier(p0, p1, p2, i as f64 / 32.0)).collect();

    let tangent = |s: f64| {
        let a = bezier(p0, p1, p2, (s - 0.01).max(0.0));
        let b = bezier(p0, p1, p2, (s + 0.01).min(1.0));
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let n = (dx * dx + dy * dy).sqrt();
        (dx / n, dy / n)
    };
    let mut leaves = Vec::new();
    for (k, &(s, side_sign)) in [(0.25, -1.0), (0.42, 1.0)].iter().enumerate() {
        let anchor = bezier(p0, p1, p2, s);
        let (tx, ty) = tangent(s);
        let (nx, ny) = (-ty * side_sign, tx * side_sign);
        let center = (anchor.0 + 0.09 * nx, anchor.1 + 0.09 * ny);
        let tilt = ny.atan2(nx) + (0.09 + 0.05 * (ph + k as f64).sin());
        leaves.push((center, 0.085, 0.032, tilt));
    }

    let ball_radius = 0.035;
    let balls: Vec<(f64, f64)> = (0..6)
        .map(|k| {
            let a = petal_phase * 0.25 + PI / 6.0 + k as f64 * PI / 3.0;
            (
                head_center.0 + 0.95 * head_radius * a.cos(),
                head_center.1 + 0.95 * head_radius * a.sin(),
            )
        })
        .collect();

    let mut thorns = Vec::new();
    for k in 0..10 {
        let s = 0.08 + 0.05 * k as f64;
        let side_sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let anchor = bezier(p0, p1, p2, s);
        let (tx, ty) = tangent(s);
        let (nx, ny) = (-ty * side_sign, tx * side_sign);
        let base_off = 0.02; // start at the stem surface
        let half_base = 0.03;
        let height = 0.085;
        let b0 = (
            anchor.0 + base_off * nx - half_base * tx,
            anchor.1 + base_off * ny - half_base * ty,
        );
        let b1 = (
            anchor.0 + base_off * nx + half_base * tx,
            anchor.1 + base_off * ny + half_base * ty,
        );
        let tip = (anchor.0 + (base_off + height) * nx, anchor.1 + (base_off + height) * ny);
        thorns.push([b0, b1, tip]);
    }

    Geometry { stem, head_center, head_radius, petal_phase, leaves, balls, ball_radius, thorns }
}

fn dist_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (abx, aby) = (b.0 - a.0, b.1 - a.1);
        let (apx, apy) = (p.0 - a.0, p.1 - a.1);
        let len2 = abx * abx + aby * aby;
        let s = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (dx, dy) = (apx - s * abx, apy - s * aby);
        best = best.min((dx * dx + dy * dy).sqrt());
    }
    best
}

fn in_ellipse(p: (f64, f64), center: (f64, f64), a: f64, b: f64, angle: f64) -> bool {
    let (dx, dy) = (p.0 - center.0, p.1 - center.1);
    let (c, s) = (angle.cos(), angle.sin());
    let x = dx * c + dy * s;
    let y = -dx * s + dy * c;
    (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
}

fn in_triangle(p: (f64, f64), tri: &[(f64, f64); 3]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign(p, tri[0], tri[1]);
    let d2 = sign(p, tri[1], tri[2]);
    let d3 = sign(p, tri[2], tri[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Which part is discriminative for a class, and the head/stem colors.
fn class_paint(variant: FlowerVariant, class: usize) -> ([u8; 3], [u8; 3], u8) {
    match variant {
        FlowerVariant::Single6 => (PALETTE[class].1, STEM_GREEN, OWNER_HEAD),
        FlowerVariant::Double12 => {
            if class < 6 {
                (PALETTE[class].1, STEM_GREEN, OWNER_HEAD)
            } else {
                (HEAD_GRAY, PALETTE[class - 6].1, OWNER_STEM)
            }
        }
        FlowerVariant::Part2 => (HEAD_GRAY, STEM_GREEN, OWNER_PART),
    }
}

/// Deterministic render of one frame: 3-channel image in [0,1] and the
/// discriminative-part mask.
pub fn render_frame(spec: &FlowerSpec, class: usize, t: usize) -> Result<(Tensor, Vec<bool>), FlowerError> {
    let classes = spec.variant.class_count();
    if class >= classes {
        return Err(FlowerError::BadClass { class, classes });
    }
    if t >= spec.frames_per_class {
        return Err(FlowerError::BadFrame { frame: t, frames: spec.frames_per_class });
    }

    let geo = geometry(spec.frames_per_class, t);
    let (head_color, stem_color, mask_owner) = class_paint(spec.variant, class);
    let with_balls = spec.variant == FlowerVariant::Part2 && class == 0;
    let with_thorns = spec.variant == FlowerVariant::Part2 && class == 1;

    let side = spec.side;
    let mut image = Tensor::zeros(1, 3, side, side);
    let mut mask = vec![false; side * side];
    let stem_half = 0.026;

    for py in 0..side {
        for px in 0..side {
            let p = ((px as f64 + 0.5) / side as f64, (py as f64 + 0.5) / side as f64);
            let mut owner = OWNER_NONE;
            if dist_to_polyline(p, &geo.stem) <= stem_half {
                owner = OWNER_STEM;
            }
            for &(c, a, b, ang) in &geo.leaves {
                if in_ellipse(p, c, a, b, ang) {
                    owner = OWNER_LEAF;
                }
            }
            let (dx, dy) = (p.0 - geo.head_center.0, p.1 - geo.head_center.1);
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            if r <= geo.head_radius * (0.72 + 0.28 * (8.0 * theta + geo.petal_phase).cos()) {
                owner = OWNER_HEAD;
            }
            if with_balls {
                for &(bx, by) in &geo.balls {
                    let (ddx, ddy) = (p.0 - bx, p.1 - by);
                    if (ddx * ddx + ddy * ddy).sqrt() <= geo.ball_radius {
                        owner = OWNER_PART;
                    }
                }
            }
            if with_thorns {
                for tri in &geo.thorns {
                    if in_triangle(p, tri) {
                        owner = OWNER_PART;
                    }
                }
            }

            let color = match owner {
                OWNER_STEM => stem_color,
                OWNER_LEAF => LEAF_GREEN,
                OWNER_HEAD => head_color,
                OWNER_PART => PART_COLOR,
                _ => BACKGROUND,
            };
            for ch in 0..3 {
                image.set(0, ch, py, px, color[ch] as f32 / 255.0);
            }
            if owner == mask_owner {
                mask[py * side + px] = true;
            }
        }
    }
    Ok((image, mask))
}

/// Direct subarray crop of image and mask.
pub fn crop_sample(image: &Tensor, mask: &[bool], y0: usize, x0: usize, out_side: usize) -> (Tensor, Vec<bool>) {
    let (_, c, _, w) = image.shape();
    let mut out = Tensor::zeros(1, c, out_side, out_side);
    let mut om = vec![false; out_side * out_side];
    for ch in 0..c {
        for y in 0..out_side {
            for x in 0..out_side {
                out.set(0, ch, y, x, image.at(0, ch, y0 + y, x0 + x));
            }
        }
    }
    for y in 0..out_side {
        for x in 0..out_side {
            om[y * out_side + x] = mask[(y0 + y) * w + (x0 + x)];
        }
    }
    (out, om)
}

/// Rotation about the image center: bilinear for the image, nearest for the
/// mask, zero fill outside.
pub fn rotate_sample(image: &Tensor, mask: &[bool], degrees: f64) -> (Tensor, Vec<bool>) {
    let (_, c, h, w) = image.shape();
    let rad = degrees * PI / 180.0;
    let (cosr, sinr) = (rad.cos(), rad.sin());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(1, c, h, w);
    let mut om = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse rotation: destination -> source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cosr - dx * sinr;
            let sx = cx + dy * sinr + dx * cosr;
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                continue;
            }
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            for ch in 0..c {
                let sample = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        image.at(0, ch, yy as usize, xx as usize) as f64
                    }
                };
                let v = sample(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + sample(y0, x0 + 1.0) * (1.0 - wy) * wx
                    + sample(y0 + 1.0, x0) * wy * (1.0 - wx)
                    + sample(y0 + 1.0, x0 + 1.0) * wy * wx;
                out.set(0, ch, y, x, v as f32);
            }
            let ny = sy.round();
            let nx = sx.round();
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                om[y * w + x] = mask[ny as usize * w + nx as usize];
            }
        }
    }
    (out, om)
}

#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub crop: usize,
    pub angle: u32,
    /// True when the original crop lost the whole mask and was replaced by
    /// the center crop at the same angle.
    pub center_fallback: bool,
}

const CROP_SIDE: usize = 250;
const ANGLES: [u32; 5] = [5, 10, 15, 20, 25];

/// 5 crops (four corners + center) x 5 rotation angles = 25 samples.
pub fn augment(image: &Tensor, mask: &[bool]) -> Vec<AugmentedSample> {
    let (_, _, h, _) = image.shape();
    let off = h - CROP_SIDE;
    let corners = [(0, 0), (0, off), (off, 0), (off, off), (off / 2, off / 2)];
    let mut out = Vec::with_capacity(25);
    for (ci, &(y0, x0)) in corners.iter().enumerate() {
        let (cimg, cmask) = crop_sample(image, mask, y0, x0, CROP_SIDE);
        for &angle in &ANGLES {
            let (rimg, rmask) = rotate_sample(&cimg, &cmask, angle as f64);
            if rmask.iter().any(|&b| b) {
                out.push(AugmentedSample { image: rimg, mask: rmask, crop: ci, angle, center_fallback: false });
            } else {
                let (fimg, fmask) = crop_sample(image, mask, off / 2, off / 2, CROP_SIDE);
                let (rimg, rmask) = rotate_sample(&fimg, &fmask, angle as f64);
                out.push(AugmentedSample { image: rimg, mask: rmask, crop: ci, angle, center_fallback: true });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub label: usize,
    pub fold: usize,
    pub frame: usize,
    pub crop: usize,
    pub angle: u32,
    pub center_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub side: usize,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

pub fn write_png_rgb(image: &Tensor, path: &Path) -> Result<(), FlowerError> {
    let (_, _, h, w) = image.shape();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((image.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path).map_err(|e| FlowerError::Image { path: path.to_path_buf(), msg: e.to_string() })
}

fn write_png_mask(mask: &[bool], side: usize, path: &Path) -> Result<(), FlowerError> {
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, bytes).expect("sized buffer");
    img.save(path).map_err(|e| FlowerError::Image { path: path.to_path_buf(), msg: e.to_string() })
}

const FOLD_COUNT: usize = 5;

/// Renders the whole dataset under `<out_dir>/<variant>/`: per-class image
/// and mask PNGs plus `manifest.json` with labels and 5 stratified folds.
pub fn generate_dataset(spec: &FlowerSpec, out_dir: &Path) -> Result<DatasetManifest, FlowerError> {
    let class_names = spec.variant.class_names();
    let root = out_dir.join(spec.variant.name());
    let mut samples = Vec::new();

    let out_side = if spec.augment { CROP_SIDE } else { spec.side };
    for (label, name) in class_names.iter().enumerate() {
        let class_dir = root.join(name);
        let mask_dir = class_dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
        for t in 0..spec.frames_per_class {
            let (image, mask) = render_frame(spec, label, t)?;
            let emitted: Vec<AugmentedSample> = if spec.augment {
                augment(&image, &mask)
            } else {
                vec![AugmentedSample { image, mask, crop: 0, angle: 0, center_fallback: false }]
            };
            for s in emitted {
                let file = format!("img_{}_{}_{}.png", t, s.crop, s.angle);
                write_png_rgb(&s.image, &class_dir.join(&file))?;
                write_png_mask(&s.mask, out_side, &mask_dir.join(&file))?;
                samples.push(SampleRecord {
                    image: format!("{name}/{file}"),
                    mask: format!("{name}/masks/{file}"),
                    label,
                    fold: 0,
                    frame: t,
                    crop: s.crop,
                    angle: s.angle,
                    center_fallback: s.center_fallback,
                });
            }
        }
    }

    // stratified 5-fold assignment, seeded independently of geometry
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    for label in 0..class_names.len() {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            samples[i].fold = pos % FOLD_COUNT;
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        variant: spec.variant.name().to_string(),
        seed: spec.seed,
        side: out_side,
        classes: class_names,
        samples,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FlowerError::Manifest(e.to_string()))?;
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads a generated tree back into memory; mask paths and folds are kept
/// on the samples for evaluation.
pub fn load_dataset(out_dir: &Path, variant: FlowerVariant) -> Result<(LabeledDataset, DatasetManifest), FlowerError> {
    let root = out_dir.join(variant.name());
    let mpath = root.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| FlowerError::Manifest(e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let ipath = root.join(&rec.image);
        let image = load_rgb(&ipath)?;
        samples.push(DataSample {
            image,
            label: rec.label,
            mask_path: Some(root.join(&rec.mask)),
            fold: Some(rec.fold),
        });
    }
    Ok((LabeledDataset { samples, class_names: manifest.classes.clone() }, manifest))
}

pub fn load_rgb(path: &Path) -> Result<Tensor, FlowerError> {
    let img = image::open(path)
        .map_err(|e| FlowerError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32).0;
            for ch in 0..3 {
                t.set(0, ch, y, x, p[ch] as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Binary mask from a {0, 255} grayscale PNG.
pub fn load_mask(path: &Path) -> Result<Vec<bool>, FlowerError> {
    let img = image::open(path)
        .map_err(|e| FlowerError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_luma8();
    Ok(img.pixels().map(|p| p.0[0] > 127).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: FlowerVariant) -> FlowerSpec {
        FlowerSpec { variant, side: 64, frames_per_class: 8, augment: false, seed: 7 }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = tiny(FlowerVariant::Single6);
        let (a_img, a_mask) = render_frame(&spec, 2, 3).unwrap();
        let (b_img, b_mask) = render_frame(&spec, 2, 3).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
    }

    #[test]
    fn mask_area_fraction_in_bounds() {
        for variant in [FlowerVariant::Single6, FlowerVariant::Double12, FlowerVariant::Part2] {
            let spec = tiny(variant);
            for class in 0..variant.class_count() {
                for t in (0..spec.frames_per_class).step_by(3) {
                    let (_, mask) = render_frame(&spec, class, t).unwrap();
                    let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
                    assert!(
                        (0.02..=0.35).contains(&frac),
                        "{} class {class} t {t}: fraction {frac}",
                        variant.name()
                    );
                }
            }
        }
    }

    #[test]
    fn classes_differ_only_inside_mask_union() {
        for (variant, a, b) in [
            (FlowerVariant::Single6, 0, 3),
            (FlowerVariant::Double12, 1, 8),
            (FlowerVariant::Part2, 0, 1),
        ] {
            let spec = tiny(variant);
            let (img_a, mask_a) = render_frame(&spec, a, 2).unwrap();
            let (img_b, mask_b) = render_frame(&spec, b, 2).unwrap();
            let side = spec.side;
            for y in 0..side {
                for x in 0..side {
                    let inside = mask_a[y * side + x] || mask_b[y * side + x];
                    if !inside {
                        for ch in 0..3 {
                            assert_eq!(
                                img_a.at(0, ch, y, x),
                                img_b.at(0, ch, y, x),
                                "{} ({y},{x}) outside mask union",
                                variant.name()
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single6_mask_pixels_carry_the_class_color() {
        let spec = tiny(FlowerVariant::Single6);
        let (img, mask) = render_frame(&spec, 0, 0).unwrap(); // red head
        let side = spec.side;
        let mut count = 0;
        for y in 0..side {
            for x in 0..side {
                if mask[y * side + x] {
                    assert_eq!(img.at(0, 0, y, x), 230.0 / 255.0);
                    assert_eq!(img.at(0, 1, y, x), 30.0 / 255.0);
                    count += 1;
                }
            }
        }
        assert!(count > 0);
    }

    #[test]
    fn crop_is_subarray_copy() {
        let spec = tiny(FlowerVariant::Single6);
        let (img, mask) = render_frame(&spec, 1, 1).unwrap();
        let (c, cm) = crop_sample(&img, &mask, 10, 4, 32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(c.at(0, 0, y, x), img.at(0, 0, 10 + y, 4 + x));
                assert_eq!(cm[y * 32 + x], mask[(10 + y) * 64 + (4 + x)]);
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let spec = tiny(FlowerVariant::Part2);
        let (img, mask) = render_frame(&spec, 0, 0).unwrap();
        let (r, rm) = rotate_sample(&img, &mask, 0.0);
        for (a, b) in img.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(mask, rm);
    }

    #[test]
    fn augmentation_yields_25_nonempty_masked_samples() {
        let spec = FlowerSpec { variant: FlowerVariant::Single6, side: 300, frames_per_class: 40, augment: true, seed: 1 };
        let (img, mask) = render_frame(&spec, 0, 0).unwrap();
        let out = augment(&img, &mask);
        assert_eq!(out.len(), 25);
        for s in &out {
            assert_eq!(s.image.shape(), (1, 3, 250, 250));
            assert!(s.mask.iter().any(|&b| b), "crop {} angle {}", s.crop, s.angle);
        }
    }

    #[test]
    fn generated_tree_loads_back_with_balanced_folds() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FlowerSpec { variant: FlowerVariant::Part2, side: 64, frames_per_class: 10, augment: false, seed: 3 };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 20);
        let (ds, m2) = load_dataset(dir.path(), FlowerVariant::Part2).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(m2.samples.len(), 20);
        assert_eq!(ds.fold_count(), FOLD_COUNT);
        for class in 0..2 {
            for fold in 0..FOLD_COUNT {
                let n = ds
                    .samples
                    .iter()
                    .filter(|s| s.label == class && s.fold == Some(fold))
                    .count();
                assert_eq!(n, 2, "class {class} fold {fold}");
            }
        }
        // mask paths resolve
        for s in &ds.samples {
            let mask = load_mask(s.mask_path.as_ref().unwrap()).unwrap();
            assert!(mask.iter().any(|&b| b));
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = FlowerSpec { variant: FlowerVariant::Single6, side: 64, frames_per_class: 3, augment: false, seed: 11 };
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&spec, da.path()).unwrap();
        generate_dataset(&spec, db.path()).unwrap();
        let rel = ["manifest.json", "head_red/img_0_0_0.png", "head_blue/masks/img_2_0_0.png"];
        for r in rel {
            let a = std::fs::read(da.path().join("single-6c").join(r)).unwrap();
            let b = std::fs::read(db.path().join("single-6c").join(r)).unwrap();
            assert_eq!(a, b, "{r}");
        }
    }

    #[test]
    fn image_png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny(FlowerVariant::Single6);
        let (img, _) = render_frame(&spec, 4, 5).unwrap();
        let path = dir.path().join("x.png");
        write_png_rgb(&img, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(img, back);
    }
}
