//! Full-covariance Gaussian mixture over RGB colors, fitted by EM.
//!
//! Used as the foreground/background color models of the graph-cut
//! segmenter. Covariances carry a fixed ridge so degenerate clusters (all
//! pixels identical) stay positive definite instead of failing.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;

/// Ridge added to every fitted covariance.
pub const COV_REG: f64 = 1e-4;

pub type Color = [f64; 3];

#[derive(Clone, Debug)]
pub struct Component {
    pub weight: f64,
    pub mean: Color,
    pub cov: [[f64; 3]; 3],
    inv_cov: [[f64; 3]; 3],
    /// log of the normalization constant: -0.5 * log((2π)^3 det Σ)
    log_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Gmm {
    pub components: Vec<Component>,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let d = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
        ],
    ]
}

impl Component {
    fn with_params(weight: f64, mean: Color, mut cov: [[f64; 3]; 3]) -> Self {
        for i in 0..3 {
            cov[i][i] += COV_REG;
        }
        let det = det3(&cov);
        debug_assert!(det > 0.0, "regularized covariance must be PD, det = {}", det);
        let inv_cov = inv3(&cov, det);
        let log_norm = -0.5 * ((2.0 * std::f64::consts::PI).powi(3) * det).ln();
        Component {
            weight,
            mean,
            cov,
            inv_cov,
            log_norm,
        }
    }

    /// log N(z | mean, cov)
    pub fn log_pdf(&self, z: &Color) -> f64 {
        let d = [z[0] - self.mean[0], z[1] - self.mean[1], z[2] - self.mean[2]];
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                q += d[i] * self.inv_cov[i][j] * d[j];
            }
        }
        self.log_norm - 0.5 * q
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    /// log p(z) under the mixture.
    pub fn log_likelihood_one(&self, z: &Color) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if c.weight > 0.0 {
                    c.weight.ln() + c.log_pdf(z)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_likelihood(&self, pixels: &[Color]) -> f64 {
        pixels.iter().map(|z| self.log_likelihood_one(z)).sum()
    }

    /// Run EM in place for `iters` iterations, warm-starting from the current
    /// parameters. Each iteration can only raise the data log-likelihood (up
    /// to the covariance ridge).
    pub fn em_steps(&mut self, pixels: &[Color], iters: usize) {
        let k = self.components.len();
        let n = pixels.len();
        if n == 0 {
            return;
        }
        let mut resp = vec![0.0f64; k];
        for _ in 0..iters {
            let mut weights = vec![0.0f64; k];
            let mut means = vec![[0.0f64; 3]; k];
            let mut scatters = vec![[[0.0f64; 3]; 3]; k];
            for z in pixels {
                // E-step responsibilities in log domain
                for (ci, c) in self.components.iter().enumerate() {
                    resp[ci] = if c.weight > 0.0 {
                        c.weight.ln() + c.log_pdf(z)
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                let lse = log_sum_exp(&resp);
                for ci in 0..k {
                    let r = (resp[ci] - lse).exp();
                    weights[ci] += r;
                    for i in 0..3 {
                        means[ci][i] += r * z[i];
                    }
                }
            }
            // M-step: means first, then scatter around the new means
            let mut new_means = vec![[0.0f64; 3]; k];
            for ci in 0..k {
                if weights[ci] > 1e-12 {
                    for i in 0..3 {
                        new_means[ci][i] = means[ci][i] / weights[ci];
                    }
                } else {
                    new_means[ci] = self.components[ci].mean;
                }
            }
            for z in pixels {
                for (ci, c) in self.components.iter().enumerate() {
                    resp[ci] = if c.weight > 0.0 {
                        c.weight.ln() + c.log_pdf(z)
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                let lse = log_sum_exp(&resp);
                for ci in 0..k {
                    let r = (resp[ci] - lse).exp();
                    let d = [
                        z[0] - new_means[ci][0],
                        z[1] - new_means[ci][1],
                        z[2] - new_means[ci][2],
                    ];
                    for i in 0..3 {
                        for j in 0..3 {
                            scatters[ci][i][j] += r * d[i] * d[j];
                        }
                    }
                }
            }
            for ci in 0..k {
                if weights[ci] > 1e-12 {
                    let mut cov = [[0.0f64; 3]; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            cov[i][j] = scatters[ci][i][j] / weights[ci];
                        }
                    }
                    self.components[ci] =
                        Component::with_params(weights[ci] / n as f64, new_means[ci], cov);
                } else {
                    // dead component: keep shape, decay weight to zero
                    let old = self.components[ci].clone();
                    let mut cov = old.cov;
                    for (i, row) in cov.iter_mut().enumerate() {
                        row[i] -= COV_REG; // with_params re-adds the ridge
                    }
                    self.components[ci] = Component::with_params(0.0, old.mean, cov);
                }
            }
            // renormalize weights against dead-component drift
            let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
            if wsum > 0.0 {
                for c in &mut self.components {
                    c.weight /= wsum;
                }
            }
        }
    }
}

/// Fit a K-component mixture to the pixel set: seeded kmeans++-style mean
/// selection, then `iters` EM iterations.
pub fn fit_gmm(pixels: &[Color], k: usize, iters: usize, seed: u64) -> Result<Gmm> {
    if k == 0 {
        return Err(Error::Contract("fit_gmm requires K >= 1".into()));
    }
    if pixels.len() < k {
        return Err(Error::Contract(format!(
            "fit_gmm requires at least K={} pixels, got {}",
            k,
            pixels.len()
        )));
    }
    let mut stream = Stream::new(seed, "gmm-init");
    let n = pixels.len();

    // kmeans++ seeding
    let mut centers: Vec<Color> = Vec::with_capacity(k);
    centers.push(pixels[stream.rng().gen_range(0..n)]);
    let mut d2 = vec![0.0f64; n];
    while centers.len() < k {
        let mut total = 0.0;
        for (i, z) in pixels.iter().enumerate() {
            let mut best = f64::INFINITY;
            for c in &centers {
                let d = (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2) + (z[2] - c[2]).powi(2);
                best = best.min(d);
            }
            d2[i] = best;
            total += best;
        }
        let next = if total <= 0.0 {
            pixels[stream.rng().gen_range(0..n)]
        } else {
            let mut target = stream.rng().gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pixels[pick]
        };
        centers.push(next);
    }

    // initial covariance: overall data scatter
    let mut mean = [0.0f64; 3];
    for z in pixels {
        for i in 0..3 {
            mean[i] += z[i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for z in pixels {
        let d = [z[0] - mean[0], z[1] - mean[1], z[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n as f64;
            }
        }
    }

    let mut gmm = Gmm {
        components: centers
            .into_iter()
            .map(|c| Component::with_params(1.0 / k as f64, c, cov))
            .collect(),
    };
    gmm.em_steps(pixels, iters);
    Ok(gmm)
}
