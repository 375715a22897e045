//! Datasets: a deterministic synthetic shapes-on-gradients generator with
//! exact ground-truth masks, plus image-folder ingestion for real
//! foreground/background sets.

use crate::error::{Error, Result};
use crate::networks::SUPPORTED_RESOLUTIONS;
use crate::rng::{Stream, StreamState};
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fraction of pixels the synthetic foreground object(s) must cover.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.10, 0.40);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    Synthetic { seed: u64, size: usize },
    Folders { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub resolution: usize,
}

impl DatasetSpec {
    /// Parse `synthetic://<seed>/<size>` or a folder root containing
    /// `foreground/` and `background/` (and optionally `masks/`).
    pub fn parse(s: &str, resolution: usize) -> Result<Self> {
        let kind = if let Some(rest) = s.strip_prefix("synthetic://") {
            let mut parts = rest.split('/');
            let seed = parts
                .next()
                .and_then(|p| p.parse::<u64>().ok())
                .ok_or_else(|| Error::Config(format!("bad synthetic dataset spec '{}'", s)))?;
            let size = parts
                .next()
                .and_then(|p| p.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("bad synthetic dataset spec '{}'", s)))?;
            DatasetKind::Synthetic { seed, size }
        } else {
            DatasetKind::Folders { root: PathBuf::from(s) }
        };
        let spec = DatasetSpec { kind, resolution };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "unsupported resolution {} (supported: {:?})",
                self.resolution, SUPPORTED_RESOLUTIONS
            )));
        }
        Ok(())
    }
}

/// One training example: foreground source image, an independent background,
/// and (synthetic or eval sets) the exact binary mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub foreground: Tensor<f32>, // 3×H×W
    pub background: Tensor<f32>, // 3×H×W
    pub gt_mask: Option<Tensor<f32>>, // 1×H×W, binary
}

type Rgb = [f64; 3];

fn put_pixel(data: &mut [f32], hw: usize, i: usize, c: Rgb) {
    data[i] = c[0].clamp(0.0, 1.0) as f32;
    data[hw + i] = c[1].clamp(0.0, 1.0) as f32;
    data[2 * hw + i] = c[2].clamp(0.0, 1.0) as f32;
}

struct GradientField {
    c0: Rgb,
    c1: Rgb,
    dir: (f64, f64),
    waves: Vec<(f64, f64, f64, f64)>, // (fx, fy, phase, amplitude)
}

/// The two background roles share the gradient+noise family but differ in
/// texture character, the way a photo's own backdrop differs from a separate
/// background collection. Pasting leftover source background onto a new
/// background is then locally visible, which is what lets the adversary
/// punish oversized masks.
enum BackgroundRole {
    SourceBackdrop, // behind the foreground object
    PasteSet,       // the independent background image
}

impl GradientField {
    fn sample(rng: &mut Stream, role: BackgroundRole) -> Self {
        let color = |r: &mut Stream| -> Rgb {
            [
                r.rng().gen_range(0.0..1.0),
                r.rng().gen_range(0.0..1.0),
                r.rng().gen_range(0.0..1.0),
            ]
        };
        let c0 = color(rng);
        let c1 = color(rng);
        let theta: f64 = rng.rng().gen_range(0.0..std::f64::consts::TAU);
        let (n_waves, freq, amp) = match role {
            BackgroundRole::SourceBackdrop => (2, 1.0..3.0, 0.01..0.04),
            BackgroundRole::PasteSet => (3, 2.5..6.0, 0.05..0.11),
        };
        let waves = (0..n_waves)
            .map(|_| {
                (
                    rng.rng().gen_range(freq.clone()),
                    rng.rng().gen_range(freq.clone()),
                    rng.rng().gen_range(0.0..std::f64::consts::TAU),
                    rng.rng().gen_range(amp.clone()),
                )
            })
            .collect();
        GradientField {
            c0,
            c1,
            dir: (theta.cos(), theta.sin()),
            waves,
        }
    }

    fn at(&self, x: f64, y: f64, res: f64) -> Rgb {
        let t = ((x * self.dir.0 + y * self.dir.1) / res + 1.0) / 2.0;
        let t = t.clamp(0.0, 1.0);
        let mut noise = 0.0;
        for &(fx, fy, phase, amp) in &self.waves {
            noise += amp
                * (std::f64::consts::TAU * (fx * x + fy * y) / res + phase).cos();
        }
        [
            self.c0[0] + (self.c1[0] - self.c0[0]) * t + noise,
            self.c0[1] + (self.c1[1] - self.c0[1]) * t + noise,
            self.c0[2] + (self.c1[2] - self.c0[2]) * t + noise,
        ]
    }

    /// Min RGB distance from `c` to the segment c0..c1.
    fn color_distance(&self, c: Rgb) -> f64 {
        let d = [
            self.c1[0] - self.c0[0],
            self.c1[1] - self.c0[1],
            self.c1[2] - self.c0[2],
        ];
        let v = [c[0] - self.c0[0], c[1] - self.c0[1], c[2] - self.c0[2]];
        let dd: f64 = d.iter().map(|x| x * x).sum();
        let t = if dd <= 1e-12 {
            0.0
        } else {
            ((v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / dd).clamp(0.0, 1.0)
        };
        let p = [
            self.c0[0] + d[0] * t,
            self.c0[1] + d[1] * t,
            self.c0[2] + d[2] * t,
        ];
        ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt()
    }
}

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        rot: f64,
    },
    Polygon {
        // convex, vertices counter-clockwise
        verts: Vec<(f64, f64)>,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, a, b, rot } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (rot.cos(), rot.sin());
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { verts } => {
                let n = verts.len();
                for i in 0..n {
                    let (x0, y0) = verts[i];
                    let (x1, y1) = verts[(i + 1) % n];
                    if (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Shapes stay at least this fraction of the image away from every border,
/// comfortably inside the graph-cut seed box (border inset 1/16).
const SHAPE_MARGIN: f64 = 0.125;
const SHAPE_MAX_RADIUS: f64 = 0.24;

fn sample_shapes(rng: &mut Stream, res: f64, target_frac: f64, count: usize) -> Vec<Shape> {
    let each = target_frac / count as f64;
    let c_lo = SHAPE_MARGIN + SHAPE_MAX_RADIUS;
    let c_hi = 1.0 - c_lo;
    (0..count)
        .map(|_| {
            let cx = rng.rng().gen_range(c_lo..c_hi) * res;
            let cy = rng.rng().gen_range(c_lo..c_hi) * res;
            if rng.rng().gen_bool(0.5) {
                let ratio: f64 = rng.rng().gen_range(0.5..1.0);
                let mut b = (each * res * res / (std::f64::consts::PI * ratio)).sqrt();
                b = b.min(SHAPE_MAX_RADIUS * res);
                // keep the requested area when the long axis hits the cap
                let a = (each * res * res / (std::f64::consts::PI * b))
                    .min(SHAPE_MAX_RADIUS * res);
                Shape::Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    rot: rng.rng().gen_range(0.0..std::f64::consts::PI),
                }
            } else {
                let k = rng.rng().gen_range(3..=6usize);
                // regular-ish polygon area ~ 0.5 k r^2 sin(2π/k); solve r for the target
                let sin_term = (std::f64::consts::TAU / k as f64).sin();
                let r0 = (2.0 * each * res * res / (k as f64 * sin_term)).sqrt();
                let verts = (0..k)
                    .map(|i| {
                        let ang = std::f64::consts::TAU * i as f64 / k as f64
                            + rng.rng().gen_range(-0.2..0.2);
                        let r = (r0 * rng.rng().gen_range(0.8..1.2))
                            .min(SHAPE_MAX_RADIUS * res);
                        (cx + r * ang.cos(), cy + r * ang.sin())
                    })
                    .collect();
                Shape::Polygon { verts }
            }
        })
        .collect()
}

/// Deterministic synthetic sample: gradient backgrounds, 1-2 filled shapes
/// with a striped texture whose color is guaranteed far from the foreground
/// image's own background, and the exact binary rasterization as the mask.
pub fn synth_sample(seed: u64, index: u64, resolution: usize) -> Sample {
    let res = resolution;
    let hw = res * res;
    let mut rng = Stream::child(seed, "synth", index);

    let fg_field = GradientField::sample(&mut rng, BackgroundRole::SourceBackdrop);
    let bg_field = GradientField::sample(&mut rng, BackgroundRole::PasteSet);

    // object color well separated from the foreground image's own background
    let mut obj_color: Rgb = [0.0; 3];
    for _ in 0..256 {
        obj_color = [
            rng.rng().gen_range(0.0..1.0),
            rng.rng().gen_range(0.0..1.0),
            rng.rng().gen_range(0.0..1.0),
        ];
        if fg_field.color_distance(obj_color) >= 0.45 {
            break;
        }
    }
    let stripe_dir: f64 = rng.rng().gen_range(0.0..std::f64::consts::PI);
    let stripe_freq: f64 = rng.rng().gen_range(3.0..8.0);

    // rasterize shapes until the covered fraction lands in range
    let n_shapes = if rng.rng().gen_bool(0.35) { 2 } else { 1 };
    let mut mask = vec![0.0f32; hw];
    let mut ok = false;
    for _attempt in 0..64 {
        let target = if n_shapes == 2 {
            rng.rng().gen_range(0.16..0.30)
        } else {
            rng.rng().gen_range(0.12..0.20)
        };
        let shapes = sample_shapes(&mut rng, res as f64, target, n_shapes);
        mask.fill(0.0);
        let mut count = 0usize;
        for y in 0..res {
            for x in 0..res {
                if shapes
                    .iter()
                    .any(|s| s.contains(x as f64 + 0.5, y as f64 + 0.5))
                {
                    mask[y * res + x] = 1.0;
                    count += 1;
                }
            }
        }
        let frac = count as f64 / hw as f64;
        if (FG_FRACTION_RANGE.0..=FG_FRACTION_RANGE.1).contains(&frac) {
            ok = true;
            break;
        }
    }
    if !ok {
        // guaranteed fallback: centered ellipse covering ~20%
        let b = (0.2 * (hw as f64) / std::f64::consts::PI).sqrt();
        let e = Shape::Ellipse {
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            a: b,
            b,
            rot: 0.0,
        };
        mask.fill(0.0);
        for y in 0..res {
            for x in 0..res {
                if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * res + x] = 1.0;
                }
            }
        }
    }

    let mut fg = vec![0.0f32; 3 * hw];
    let mut bg = vec![0.0f32; 3 * hw];
    let (sc, ss) = (stripe_dir.cos(), stripe_dir.sin());
    for y in 0..res {
        for x in 0..res {
            let i = y * res + x;
            let (xf, yf) = (x as f64, y as f64);
            put_pixel(&mut bg, hw, i, bg_field.at(xf, yf, res as f64));
            if mask[i] > 0.5 {
                let phase =
                    std::f64::consts::TAU * stripe_freq * (xf * sc + yf * ss) / res as f64;
                let stripe = 0.06 * phase.cos();
                put_pixel(
                    &mut fg,
                    hw,
                    i,
                    [
                        obj_color[0] + stripe,
                        obj_color[1] + stripe,
                        obj_color[2] + stripe,
                    ],
                );
            } else {
                put_pixel(&mut fg, hw, i, fg_field.at(xf, yf, res as f64));
            }
        }
    }

    Sample {
        foreground: Tensor::from_vec(&[3, res, res], fg).expect("shape consistent"),
        background: Tensor::from_vec(&[3, res, res], bg).expect("shape consistent"),
        gt_mask: Some(Tensor::from_vec(&[1, res, res], mask).expect("shape consistent")),
    }
}

/// Fully materialized dataset: foreground and background lists are indexed
/// independently.
pub struct Dataset {
    pub spec: DatasetSpec,
    pub foregrounds: Vec<Tensor<f32>>,
    pub backgrounds: Vec<Tensor<f32>>,
    pub gt_masks: Option<Vec<Tensor<f32>>>,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
        spec.validate()?;
        match &spec.kind {
            DatasetKind::Synthetic { seed, size } => {
                let samples: Vec<Sample> = (0..*size as u64)
                    .into_par_iter()
                    .map(|i| synth_sample(*seed, i, spec.resolution))
                    .collect();
                Ok(Dataset {
                    spec: spec.clone(),
                    foregrounds: samples.iter().map(|s| s.foreground.clone()).collect(),
                    backgrounds: samples.iter().map(|s| s.background.clone()).collect(),
                    gt_masks: Some(
                        samples
                            .into_iter()
                            .map(|s| s.gt_mask.expect("synthetic always has ground truth"))
                            .collect(),
                    ),
                })
            }
            DatasetKind::Folders { root } => load_folder_pairs(root, spec),
        }
    }

    pub fn len(&self) -> usize {
        self.foregrounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foregrounds.is_empty()
    }
}

/// Decode every readable image under `dir`, center-cropped square and
/// bilinearly resized to `resolution`, in lexicographic filename order.
/// Undecodable files are skipped with a warning on stderr.
fn load_image_dir(dir: &Path, resolution: usize, gray: bool) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping undecodable image {}: {}", path.display(), e);
                continue;
            }
        };
        let rgb = img.into_rgb8();
        let (w, h) = (rgb.width(), rgb.height());
        let side = w.min(h);
        let (x0, y0) = ((w - side) / 2, (h - side) / 2);
        let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
        let resized = image::imageops::resize(
            &cropped,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        );
        let hw = resolution * resolution;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if gray {
            let mut data = vec![0.0f32; hw];
            for (i, p) in resized.pixels().enumerate() {
                let lum = (p.0[0] as f32 + p.0[1] as f32 + p.0[2] as f32) / (3.0 * 255.0);
                data[i] = if lum > 0.5 { 1.0 } else { 0.0 };
            }
            out.push((stem, Tensor::from_vec(&[1, resolution, resolution], data)?));
        } else {
            let mut data = vec![0.0f32; 3 * hw];
            for (i, p) in resized.pixels().enumerate() {
                data[i] = p.0[0] as f32 / 255.0;
                data[hw + i] = p.0[1] as f32 / 255.0;
                data[2 * hw + i] = p.0[2] as f32 / 255.0;
            }
            out.push((stem, Tensor::from_vec(&[3, resolution, resolution], data)?));
        }
    }
    Ok(out)
}

fn load_folder_pairs(root: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let fg_dir = root.join("foreground");
    let bg_dir = root.join("background");
    let fgs = load_image_dir(&fg_dir, spec.resolution, false)?;
    let bgs = load_image_dir(&bg_dir, spec.resolution, false)?;
    if fgs.is_empty() {
        return Err(Error::Data(format!(
            "no decodable foreground images in {}",
            fg_dir.display()
        )));
    }
    if bgs.is_empty() {
        return Err(Error::Data(format!(
            "no decodable background images in {}",
            bg_dir.display()
        )));
    }
    let mask_dir = root.join("masks");
    let gt_masks = if mask_dir.is_dir() {
        let masks = load_image_dir(&mask_dir, spec.resolution, true)?;
        let mut aligned = Vec::with_capacity(fgs.len());
        for (stem, _) in &fgs {
            let m = masks
                .iter()
                .find(|(ms, _)| ms == stem)
                .ok_or_else(|| Error::Data(format!("no mask for foreground '{}'", stem)))?;
            aligned.push(m.1.clone());
        }
        Some(aligned)
    } else {
        None
    };
    Ok(Dataset {
        spec: spec.clone(),
        foregrounds: fgs.into_iter().map(|(_, t)| t).collect(),
        backgrounds: bgs.into_iter().map(|(_, t)| t).collect(),
        gt_masks,
    })
}

/// Assembled batch. Foreground indices are recorded so pseudo-labels can be
/// cached per source image.
pub struct Batch {
    pub foregrounds: Tensor<f32>, // N×3×H×W
    pub backgrounds: Tensor<f32>, // N×3×H×W
    pub gt_masks: Option<Tensor<f32>>, // N×1×H×W
    pub fg_indices: Vec<usize>,
}

/// Epoch-respecting sampler: foregrounds drawn without replacement per epoch,
/// backgrounds i.i.d. uniform. All state is in (permutation, cursor, stream),
/// so it checkpoints exactly.
pub struct BatchSampler {
    stream: Stream,
    perm: Vec<u32>,
    cursor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerState {
    pub perm: Vec<u32>,
    pub cursor: usize,
    pub stream: StreamState,
}

impl BatchSampler {
    pub fn new(n: usize, mut stream: Stream) -> Self {
        let perm = shuffled(n, &mut stream);
        BatchSampler {
            stream,
            perm,
            cursor: 0,
        }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            perm: self.perm.clone(),
            cursor: self.cursor,
            stream: self.stream.state(),
        }
    }

    pub fn restore(&mut self, st: &SamplerState) {
        self.perm = st.perm.clone();
        self.cursor = st.cursor;
        self.stream.restore(&st.stream);
    }

    pub fn next_batch(&mut self, ds: &Dataset, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if ds.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let res = ds.spec.resolution;
        let hw = res * res;
        let mut fg = Tensor::zeros(&[batch_size, 3, res, res]);
        let mut bg = Tensor::zeros(&[batch_size, 3, res, res]);
        let mut gts = ds
            .gt_masks
            .as_ref()
            .map(|_| Tensor::zeros(&[batch_size, 1, res, res]));
        let mut fg_indices = Vec::with_capacity(batch_size);
        for b in 0..batch_size {
            if self.cursor >= self.perm.len() {
                self.perm = shuffled(ds.len(), &mut self.stream);
                self.cursor = 0;
            }
            let fi = self.perm[self.cursor] as usize;
            self.cursor += 1;
            let bi = self.stream.rng().gen_range(0..ds.backgrounds.len());
            fg.data_mut()[b * 3 * hw..(b + 1) * 3 * hw]
                .copy_from_slice(ds.foregrounds[fi].data());
            bg.data_mut()[b * 3 * hw..(b + 1) * 3 * hw]
                .copy_from_slice(ds.backgrounds[bi].data());
            if let Some(g) = &mut gts {
                g.data_mut()[b * hw..(b + 1) * hw]
                    .copy_from_slice(ds.gt_masks.as_ref().unwrap()[fi].data());
            }
            fg_indices.push(fi);
        }
        Ok(Batch {
            foregrounds: fg,
            backgrounds: bg,
            gt_masks: gts,
            fg_indices,
        })
    }
}

fn shuffled(n: usize, stream: &mut Stream) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = stream.rng().gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
