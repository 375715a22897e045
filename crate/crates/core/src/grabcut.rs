//! Iterative graph-cut segmentation: alternating GMM color-model fits and
//! exact min-cuts over a pixel grid, seeded by a border-margin box.
//!
//! Produces the binary pseudo-labels that supervise the discriminator's
//! per-pixel head. Labels are deterministic in (image, seed), so they are
//! computed once per image and cached on disk keyed by image content hash.

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, Color, Gmm};
use crate::maxflow::{min_cut, SegGraph, CLAMP_CAP};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug)]
pub struct GrabcutConfig {
    /// GMM components per color model.
    pub components: usize,
    /// Smoothness strength.
    pub gamma: f64,
    /// Refinement rounds (cut + model refit).
    pub iterations: usize,
    /// Seed box: full image inset by this fraction of each dimension per side.
    pub box_inset_frac: f64,
    /// EM iterations for the initial model fits.
    pub em_iters_init: usize,
    /// Warm-start EM iterations per refinement round.
    pub em_iters_refine: usize,
    /// Stop when fewer than this fraction of pixels change label.
    pub converge_frac: f64,
}

impl Default for GrabcutConfig {
    fn default() -> Self {
        GrabcutConfig {
            components: 5,
            gamma: 50.0,
            iterations: 5,
            box_inset_frac: 1.0 / 16.0,
            em_iters_init: 10,
            em_iters_refine: 3,
            converge_frac: 0.001,
        }
    }
}

/// Seed rectangle; pixels outside it are clamped to background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize, // exclusive
    pub y1: usize, // exclusive
}

impl UserBox {
    pub fn inset(width: usize, height: usize, frac: f64) -> Self {
        let dx = ((width as f64 * frac) as usize).max(1);
        let dy = ((height as f64 * frac) as usize).max(1);
        UserBox {
            x0: dx,
            y0: dy,
            x1: width.saturating_sub(dx),
            y1: height.saturating_sub(dy),
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::Contract(format!(
                "degenerate box [{},{})x[{},{}) in {}x{} image",
                self.x0, self.x1, self.y0, self.y1, width, height
            )));
        }
        Ok(())
    }
}

/// Binary segmentation output with provenance. `mask` is 1×1×H×W holding
/// exactly 0.0 or 1.0. Cache hits carry `iterations_run == 0` and an empty
/// energy trace; the mask itself is what downstream training consumes.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    pub mask: Tensor<f32>,
    pub iterations_run: usize,
    pub final_energy: f64,
    pub energy_trace: Vec<f64>,
    pub degenerate: bool,
}

impl PseudoLabel {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

fn image_pixels(image: &Tensor<f32>) -> Result<(Vec<Color>, usize, usize)> {
    if image.shape().len() != 4 || image.dim(0) != 1 || image.dim(1) != 3 {
        return Err(Error::ShapeMismatch {
            op: "grabcut",
            detail: format!("expected 1x3xHxW image, got {:?}", image.shape()),
        });
    }
    image.ensure_finite("grabcut input")?;
    let (h, w) = (image.dim(2), image.dim(3));
    let hw = h * w;
    let d = image.data();
    let pixels = (0..hw)
        .map(|i| {
            [
                d[i] as f64,
                d[hw + i] as f64,
                d[2 * hw + i] as f64,
            ]
        })
        .collect();
    Ok((pixels, h, w))
}

/// Mean squared color difference over the 8-neighborhood, inverted into the
/// smoothness falloff rate. Flat images get beta = 0 (all arcs equal).
pub fn compute_beta(pixels: &[Color], h: usize, w: usize) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let d2 = |a: &Color, b: &Color| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                sum += d2(&pixels[p], &pixels[p + 1]);
                count += 1;
            }
            if y + 1 < h {
                sum += d2(&pixels[p], &pixels[p + w]);
                count += 1;
                if x + 1 < w {
                    sum += d2(&pixels[p], &pixels[p + w + 1]);
                    count += 1;
                }
                if x > 0 {
                    sum += d2(&pixels[p], &pixels[p + w - 1]);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return 0.0;
    }
    let expected = sum / count as f64;
    if expected <= 1e-12 {
        0.0
    } else {
        1.0 / (2.0 * expected)
    }
}

/// Assemble the pixel graph: mixture negative log-likelihood data terms
/// inside the box, hard background clamps outside, and contrast-weighted
/// smoothness arcs gamma·exp(−beta·‖z_i−z_j‖²)/dist over the 8-neighborhood.
#[allow(clippy::too_many_arguments)]
pub fn build_graph(
    pixels: &[Color],
    h: usize,
    w: usize,
    gmm_fg: &Gmm,
    gmm_bg: &Gmm,
    user_box: &UserBox,
    beta: f64,
    gamma: f64,
) -> Result<SegGraph> {
    user_box.validate(w, h)?;
    if gamma <= 0.0 {
        return Err(Error::Contract(format!("gamma must be > 0, got {}", gamma)));
    }
    let n = h * w;
    let mut g = SegGraph::new(n);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if user_box.contains(x, y) {
                // cost of labeling background / foreground
                g.source_cap[p] = -gmm_bg.log_likelihood_one(&pixels[p]);
                g.sink_cap[p] = -gmm_fg.log_likelihood_one(&pixels[p]);
                // negative log-likelihoods can dip below zero for very
                // peaked models; shift both terminals equally to keep
                // capacities non-negative without changing the argmin
                let min = g.source_cap[p].min(g.sink_cap[p]).min(0.0);
                g.source_cap[p] -= min;
                g.sink_cap[p] -= min;
            } else {
                g.source_cap[p] = 0.0;
                g.sink_cap[p] = CLAMP_CAP;
            }
        }
    }
    let d2 = |a: &Color, b: &Color| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let sqrt2 = std::f64::consts::SQRT_2;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut arc = |q: usize, dist: f64| {
                let wgt = gamma * (-beta * d2(&pixels[p], &pixels[q])).exp() / dist;
                g.edges.push((p as u32, q as u32, wgt));
            };
            if x + 1 < w {
                arc(p + 1, 1.0);
            }
            if y + 1 < h {
                arc(p + w, 1.0);
                if x + 1 < w {
                    arc(p + w + 1, sqrt2);
                }
                if x > 0 {
                    arc(p + w - 1, sqrt2);
                }
            }
        }
    }
    Ok(g)
}

/// Raw segmentation energy of a labeling: mixture negative log-likelihood
/// data terms (background model for the clamped ring) plus the contrast
/// smoothness. Unlike the graph capacities this carries no per-pixel shift,
/// so values are comparable across refinement rounds.
#[allow(clippy::too_many_arguments)]
pub fn labeling_energy(
    pixels: &[Color],
    h: usize,
    w: usize,
    labels: &[bool],
    gmm_fg: &Gmm,
    gmm_bg: &Gmm,
    beta: f64,
    gamma: f64,
) -> f64 {
    let mut e = 0.0;
    for (z, &l) in pixels.iter().zip(labels) {
        e -= if l {
            gmm_fg.log_likelihood_one(z)
        } else {
            gmm_bg.log_likelihood_one(z)
        };
    }
    let d2 = |a: &Color, b: &Color| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let sqrt2 = std::f64::consts::SQRT_2;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut pay = |q: usize, dist: f64| {
                if labels[p] != labels[q] {
                    e += gamma * (-beta * d2(&pixels[p], &pixels[q])).exp() / dist;
                }
            };
            if x + 1 < w {
                pay(p + 1, 1.0);
            }
            if y + 1 < h {
                pay(p + w, 1.0);
                if x + 1 < w {
                    pay(p + w + 1, sqrt2);
                }
                if x > 0 {
                    pay(p + w - 1, sqrt2);
                }
            }
        }
    }
    e
}

fn collect_label_pixels(pixels: &[Color], labels: &[bool], which: bool) -> Vec<Color> {
    pixels
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == which)
        .map(|(z, _)| *z)
        .collect()
}

/// Run the full segmenter with the default configuration.
pub fn grabcut(image: &Tensor<f32>, iterations: usize, seed: u64) -> Result<PseudoLabel> {
    let cfg = GrabcutConfig {
        iterations,
        ..GrabcutConfig::default()
    };
    grabcut_with(image, &cfg, seed)
}

pub fn grabcut_with(image: &Tensor<f32>, cfg: &GrabcutConfig, seed: u64) -> Result<PseudoLabel> {
    if cfg.iterations == 0 {
        return Err(Error::Contract("grabcut needs at least one iteration".into()));
    }
    let (pixels, h, w) = image_pixels(image)?;
    let n = h * w;
    let user_box = UserBox::inset(w, h, cfg.box_inset_frac);
    user_box.validate(w, h)?;

    let mut labels: Vec<bool> = (0..n)
        .map(|p| user_box.contains(p % w, p / w))
        .collect();
    let beta = compute_beta(&pixels, h, w);

    let fg_pixels = collect_label_pixels(&pixels, &labels, true);
    let bg_pixels = collect_label_pixels(&pixels, &labels, false);
    if fg_pixels.is_empty() || bg_pixels.is_empty() {
        return Err(Error::Contract(
            "seed box must leave pixels on both sides".into(),
        ));
    }
    let k_fg = cfg.components.min(fg_pixels.len());
    let k_bg = cfg.components.min(bg_pixels.len());
    let mut gmm_fg = fit_gmm(&fg_pixels, k_fg, cfg.em_iters_init, derive_seed(seed, "fg"))?;
    let mut gmm_bg = fit_gmm(&bg_pixels, k_bg, cfg.em_iters_init, derive_seed(seed, "bg"))?;

    let mut energy_trace = Vec::with_capacity(cfg.iterations);
    let mut iterations_run = 0;
    let mut degenerate = false;

    for _ in 0..cfg.iterations {
        let graph = build_graph(&pixels, h, w, &gmm_fg, &gmm_bg, &user_box, beta, cfg.gamma)?;
        let cut = min_cut(&graph)?;
        iterations_run += 1;
        energy_trace.push(labeling_energy(
            &pixels, h, w, &cut.labels, &gmm_fg, &gmm_bg, beta, cfg.gamma,
        ));
        let changed = cut
            .labels
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a != b)
            .count();
        labels = cut.labels;

        let fg_now = collect_label_pixels(&pixels, &labels, true);
        if fg_now.is_empty() {
            degenerate = true;
            break;
        }
        if changed < ((n as f64) * cfg.converge_frac).ceil() as usize {
            break;
        }
        // warm-started model refinement keeps the energy non-increasing
        let bg_now = collect_label_pixels(&pixels, &labels, false);
        gmm_fg.em_steps(&fg_now, cfg.em_iters_refine);
        gmm_bg.em_steps(&bg_now, cfg.em_iters_refine);
    }

    let mask = Tensor::from_vec(
        &[1, 1, h, w],
        labels.iter().map(|&l| if l { 1.0f32 } else { 0.0 }).collect(),
    )?;
    Ok(PseudoLabel {
        mask,
        iterations_run,
        final_energy: *energy_trace.last().unwrap(),
        energy_trace,
        degenerate,
    })
}

/// Cache path for an image: sha256 of its raw little-endian f32 bytes.
pub fn cache_path(cache_dir: &Path, image: &Tensor<f32>) -> PathBuf {
    let mut hasher = Sha256::new();
    for v in image.data() {
        hasher.update(v.to_le_bytes());
    }
    cache_dir.join(format!("{:x}.png", hasher.finalize()))
}

/// Disk-cached segmentation. The cache stores only the binary mask (8-bit
/// PNG, 0/255); provenance fields are zeroed on cache hits.
pub fn cached_pseudo_label(
    image: &Tensor<f32>,
    cfg: &GrabcutConfig,
    seed: u64,
    cache_dir: &Path,
) -> Result<PseudoLabel> {
    let path = cache_path(cache_dir, image);
    if path.exists() {
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("bad cached pseudo-label {}: {}", path.display(), e)))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f32> = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(&[1, 1, h, w], data)?;
        let degenerate = mask.data().iter().all(|&v| v == 0.0);
        return Ok(PseudoLabel {
            mask,
            iterations_run: 0,
            final_energy: 0.0,
            energy_trace: Vec::new(),
            degenerate,
        });
    }
    let label = grabcut_with(image, cfg, seed)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let (h, w) = (label.mask.dim(2), label.mask.dim(3));
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0[0] = if label.mask.data()[i] > 0.5 { 255 } else { 0 };
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {}", tmp.display(), e)))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(label)
}
