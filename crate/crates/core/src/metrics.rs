//! Evaluation metrics: Fréchet distance between feature distributions and
//! mean IoU against ground-truth masks.
//!
//! Features come from a fixed, seeded, randomly-initialized conv encoder
//! rather than a pretrained classifier, so distances are comparable within a
//! run but not against published tables.

use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::losses::iou;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Feature dimension of the proxy extractor.
pub const FEATURE_DIM: usize = 128;
const EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, FEATURE_DIM];
const EXTRACTOR_SLOPE: f32 = 0.2;

/// Gaussian fit (mean + covariance) of a feature set.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// d×d row-major covariance, population normalization (1/n) so that
    /// duplicating the sample multiset leaves the stats unchanged.
    pub sigma: Vec<f64>,
    pub n: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors) with A = V diag(w) V^T and V stored
/// row-major (V[i*d + j] is component i of eigenvector j).
pub fn sym_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let mip = m[i * d + p];
                    let miq = m[i * d + q];
                    m[i * d + p] = c * mip - s * miq;
                    m[i * d + q] = s * mip + c * miq;
                }
                for j in 0..d {
                    let mpj = m[p * d + j];
                    let mqj = m[q * d + j];
                    m[p * d + j] = c * mpj - s * mqj;
                    m[q * d + j] = s * mpj + c * mqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let w = (0..d).map(|i| m[i * d + i]).collect();
    (w, v)
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues within
/// -1e-8 of zero are clamped; anything more negative fails the PSD contract.
pub fn matrix_sqrt_psd(s: &[f64], d: usize) -> Result<Vec<f64>> {
    if s.len() != d * d {
        return Err(Error::ShapeMismatch {
            op: "matrix_sqrt_psd",
            detail: format!("expected {}x{} matrix, got {} elements", d, d, s.len()),
        });
    }
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..d {
        for j in (i + 1)..d {
            if (s[i * d + j] - s[j * d + i]).abs() > 1e-8 * scale {
                return Err(Error::Contract(format!(
                    "matrix not symmetric at ({}, {}): {} vs {}",
                    i,
                    j,
                    s[i * d + j],
                    s[j * d + i]
                )));
            }
        }
    }
    let (w, v) = sym_eigen(s, d);
    let mut sw = Vec::with_capacity(d);
    for &lambda in &w {
        if lambda < -1e-6 * scale {
            return Err(Error::Contract(format!(
                "matrix not PSD: eigenvalue {}",
                lambda
            )));
        }
        sw.push(lambda.max(0.0).sqrt());
    }
    // R = V diag(sqrt(w)) V^T
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v[i * d + k] * sw[k] * v[j * d + k];
            }
            r[i * d + j] = acc;
        }
    }
    Ok(r)
}

/// Fréchet distance between two Gaussian fits:
/// ‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2}). Roundoff negatives clamp to 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            detail: format!("feature dims {} vs {}", d, b.mu.len()),
        });
    }
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(&b.mu)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    // Tr((Σa Σb)^{1/2}) = Σ sqrt(eig(Ra Σb Ra)) with Ra = Σa^{1/2}
    let ra = matrix_sqrt_psd(&a.sigma, d)?;
    let mut tmp = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += ra[i * d + k] * b.sigma[k * d + j];
            }
            tmp[i * d + j] = acc;
        }
    }
    let mut inner = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += tmp[i * d + k] * ra[k * d + j];
            }
            inner[i * d + j] = acc;
        }
    }
    // enforce symmetry lost to roundoff before the eigensolve
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let (w, _) = sym_eigen(&inner, d);
    let tr_sqrt: f64 = w.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + tr(&a.sigma) + tr(&b.sigma) - 2.0 * tr_sqrt).max(0.0))
}

/// Fixed random conv encoder: 4 stride-2 convs with leaky-ReLU, global
/// average pooled to FEATURE_DIM. Weights depend only on the seed.
pub struct FeatureExtractor {
    kernels: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut stream = Stream::new(seed, "feat-init");
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &EXTRACTOR_WIDTHS {
            let fan_in = (in_ch * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = out_ch * in_ch * 9;
            kernels.push(
                Tensor::from_vec(
                    &[out_ch, in_ch, 3, 3],
                    (0..n).map(|_| (stream.normal() * std) as f32).collect(),
                )
                .expect("shape consistent"),
            );
            biases.push(Tensor::zeros(&[out_ch]));
            in_ch = out_ch;
        }
        FeatureExtractor { kernels, biases }
    }

    /// N×3×H×W → N×FEATURE_DIM feature matrix (row-major).
    pub fn features(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        if images.shape().len() != 4 || images.dim(1) != 3 {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                detail: format!("expected Nx3xHxW, got {:?}", images.shape()),
            });
        }
        let mut x = images.clone();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            x = conv2d_forward(&x, k, Some(b), 2, 1)?;
            for v in x.data_mut() {
                if *v < 0.0 {
                    *v *= EXTRACTOR_SLOPE;
                }
            }
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hw = (h * w) as f64;
        let mut out = vec![0.0f64; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut s = 0.0f64;
                for v in &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                    s += *v as f64;
                }
                out[i * c + ch] = s / hw;
            }
        }
        Ok(out)
    }
}

/// Gaussian statistics of the extractor's features over an image set.
pub fn extract_features(images: &Tensor<f32>, extractor_seed: u64) -> Result<FeatureStats> {
    let n = images.dim(0);
    if n < 2 {
        return Err(Error::Data(format!(
            "feature statistics need at least 2 images, got {}",
            n
        )));
    }
    let extractor = FeatureExtractor::new(extractor_seed);
    let feats = extractor.features(images)?;
    Ok(stats_from_features(&feats, n))
}

pub fn stats_from_features(feats: &[f64], n: usize) -> FeatureStats {
    let d = feats.len() / n;
    let mut mu = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mu[j] += feats[i * d + j];
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut sigma = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &feats[i * d..(i + 1) * d];
        for a in 0..d {
            let da = row[a] - mu[a];
            for b in a..d {
                sigma[a * d + b] += da * (row[b] - mu[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = sigma[a * d + b] / n as f64;
            sigma[a * d + b] = v;
            sigma[b * d + a] = v;
        }
    }
    FeatureStats { mu, sigma, n }
}

/// Per-image mean IoU report.
#[derive(Clone, Copy, Debug)]
pub struct MiouReport {
    /// 2-class mIoU: mean over images of (foreground IoU + background IoU)/2.
    pub miou: f64,
    /// Plain foreground IoU, mean over images.
    pub fg_iou: f64,
}

/// Score predicted masks against ground truth. Predictions are binarized at
/// 0.5; ground truth is expected binary. Two empty masks count as IoU 1.
pub fn miou(pred_masks: &[Tensor<f32>], gt_masks: &[Tensor<f32>]) -> Result<MiouReport> {
    if pred_masks.len() != gt_masks.len() || pred_masks.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            detail: format!(
                "{} predictions vs {} ground-truth masks",
                pred_masks.len(),
                gt_masks.len()
            ),
        });
    }
    let mut acc2 = 0.0;
    let mut acc_fg = 0.0;
    for (p, g) in pred_masks.iter().zip(gt_masks) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                detail: format!("{:?} vs {:?}", p.shape(), g.shape()),
            });
        }
        let fg = iou(p, g, 0.5)?;
        let p_inv = p.map(|v| 1.0 - v);
        let g_inv = g.map(|v| 1.0 - v);
        let bg = iou(&p_inv, &g_inv, 0.5)?;
        acc2 += 0.5 * (fg + bg);
        acc_fg += fg;
    }
    Ok(MiouReport {
        miou: acc2 / pred_masks.len() as f64,
        fg_iou: acc_fg / pred_masks.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sqrt_of_identity_is_identity() {
        let d = 4;
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            s[i * d + i] = 1.0;
        }
        let r = matrix_sqrt_psd(&s, d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r[i * d + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = vec![4.0, 0.0, 0.0, 9.0];
        let r = matrix_sqrt_psd(&s, 2).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12);
        assert!((r[3] - 3.0).abs() < 1e-12);
        assert!(r[1].abs() < 1e-12 && r[2].abs() < 1e-12);
    }

    #[test]
    fn sqrt_reconstruction_error_is_tiny() {
        let mut stream = crate::rng::Stream::new(17, "psd");
        for d in [2usize, 8, 16] {
            // S = A^T A is PSD
            let a: Vec<f64> = (0..d * d).map(|_| stream.rng().gen_range(-1.0..1.0)).collect();
            let mut s = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += a[k * d + i] * a[k * d + j];
                    }
                    s[i * d + j] = acc;
                }
            }
            let r = matrix_sqrt_psd(&s, d).unwrap();
            let mut err = 0.0;
            let mut norm = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += r[i * d + k] * r[k * d + j];
                    }
                    err += (acc - s[i * d + j]).powi(2);
                    norm += s[i * d + j].powi(2);
                }
            }
            let rel = (err / norm).sqrt();
            assert!(rel < 1e-8, "d={}: rel frobenius {}", d, rel);
        }
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let s = vec![1.0, 0.5, -0.5, 1.0];
        assert!(matrix_sqrt_psd(&s, 2).is_err());
        let s = vec![1.0, 0.0, 0.0, -1.0];
        assert!(matrix_sqrt_psd(&s, 2).is_err());
    }

    fn diag_stats(mu: &[f64], var: f64) -> FeatureStats {
        let d = mu.len();
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            sigma[i * d + i] = var;
        }
        FeatureStats {
            mu: mu.to_vec(),
            sigma,
            n: 10,
        }
    }

    #[test]
    fn frechet_zero_for_identical_stats() {
        let a = diag_stats(&[0.3, -0.7, 1.1], 0.5);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        // means 0 vs 1, unit variances: (0-1)^2 + (1 + 1 - 2) = 1
        let a = diag_stats(&[0.0], 1.0);
        let b = diag_stats(&[1.0], 1.0);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "d = {}", d);
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        // equal means, I vs 4I in 2-D: Tr(I + 4I - 2*2I) = 2
        let a = diag_stats(&[0.0, 0.0], 1.0);
        let b = diag_stats(&[0.0, 0.0], 4.0);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-6, "d = {}", d);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut stream = crate::rng::Stream::new(3, "sym");
        let feats_a: Vec<f64> = (0..40 * 8).map(|_| stream.rng().gen_range(-1.0..1.0)).collect();
        let feats_b: Vec<f64> = (0..40 * 8).map(|_| stream.rng().gen_range(-0.5..1.5)).collect();
        let a = stats_from_features(&feats_a, 40);
        let b = stats_from_features(&feats_b, 40);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-6, "{} vs {}", ab, ba);
    }

    #[test]
    fn duplicating_the_image_multiset_keeps_stats() {
        let mut stream = crate::rng::Stream::new(5, "dup");
        let imgs = Tensor::from_vec(
            &[3, 3, 32, 32],
            (0..3 * 3 * 32 * 32).map(|_| stream.rng().gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut doubled = Tensor::zeros(&[6, 3, 32, 32]);
        doubled.data_mut()[..imgs.len()].copy_from_slice(imgs.data());
        doubled.data_mut()[imgs.len()..].copy_from_slice(imgs.data());
        let a = extract_features(&imgs, 77).unwrap();
        let b = extract_features(&doubled, 77).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extractor_is_deterministic_and_128_dimensional() {
        for res in [32usize, 48, 64, 128] {
            let imgs = Tensor::full(&[2, 3, res, res], 0.25f32);
            let a = extract_features(&imgs, 9).unwrap();
            let b = extract_features(&imgs, 9).unwrap();
            assert_eq!(a.mu.len(), FEATURE_DIM);
            assert_eq!(a.sigma.len(), FEATURE_DIM * FEATURE_DIM);
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.sigma, b.sigma);
        }
        assert!(extract_features(&Tensor::full(&[1, 3, 32, 32], 0.5f32), 9).is_err());
    }

    #[test]
    fn miou_perfect_and_degenerate_cases() {
        let gt = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 1.0, 0.0, 0.0]).unwrap();
        let r = miou(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.fg_iou, 1.0);
        // all-foreground prediction vs half-foreground truth on 2x2:
        // fg IoU = 2/4, bg IoU = 0/2 -> mIoU = 0.25
        let pred = Tensor::full(&[1, 1, 2, 2], 1.0f32);
        let r = miou(&[pred], &[gt]).unwrap();
        assert!((r.miou - 0.25).abs() < 1e-12);
        assert!((r.fg_iou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn miou_matches_brute_force_counting() {
        let mut stream = crate::rng::Stream::new(23, "miou");
        for _ in 0..50 {
            let bits_p: Vec<f32> = (0..64).map(|_| stream.rng().gen_range(0..2) as f32).collect();
            let bits_g: Vec<f32> = (0..64).map(|_| stream.rng().gen_range(0..2) as f32).collect();
            let p = Tensor::from_vec(&[1, 1, 8, 8], bits_p.clone()).unwrap();
            let g = Tensor::from_vec(&[1, 1, 8, 8], bits_g.clone()).unwrap();
            let r = miou(&[p], &[g]).unwrap();
            let count = |pv: f32, gv: f32| {
                bits_p
                    .iter()
                    .zip(&bits_g)
                    .filter(|(a, b)| **a == pv && **b == gv)
                    .count() as f64
            };
            let fg = {
                let (i, u) = (count(1.0, 1.0), count(1.0, 1.0) + count(1.0, 0.0) + count(0.0, 1.0));
                if u == 0.0 { 1.0 } else { i / u }
            };
            let bg = {
                let (i, u) = (count(0.0, 0.0), count(0.0, 0.0) + count(0.0, 1.0) + count(1.0, 0.0));
                if u == 0.0 { 1.0 } else { i / u }
            };
            assert!((r.miou - 0.5 * (fg + bg)).abs() < 1e-12);
            assert!((r.fg_iou - fg).abs() < 1e-12);
        }
    }
}
