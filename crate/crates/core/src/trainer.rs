//! Training orchestration: alternating discriminator/generator updates, the
//! IoU-gated loss schedule, checkpointing, and periodic evaluation.
//!
//! Determinism contract: a run is a pure function of its config. All RNG
//! flows from the config seed through named streams, pseudo-labels are a pure
//! function of image content, and checkpoints restore the exact trajectory.

use crate::archive::Archive;
use crate::compositing::composite;
use crate::data::{BatchSampler, Batch, Dataset, DatasetSpec, SamplerState};
use crate::error::{Error, Result};
use crate::grabcut::{cached_pseudo_label, grabcut_with, GrabcutConfig};
use crate::graph::Graph;
use crate::losses::{batch_mean_iou, lambda_schedule, LossBundle, MASK_THRESHOLD};
use crate::metrics::{frechet_distance, miou, stats_from_features, FeatureExtractor, FeatureStats, MiouReport};
use crate::networks::{
    discriminator_forward, generator_forward, init_network, insert_params, ArchConfig, NetKind,
    NetworkParams,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{derive_seed, Stream, StreamState, STREAM_DATA, STREAM_NOISE};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Pseudo-labels are a function of image content alone, so they use a fixed
/// seed: runs with different training seeds share the on-disk cache.
pub const PSEUDO_LABEL_SEED: u64 = 0x5eed_1abe1;

/// Masks whose mean falls outside [this, 1-this] count as degenerate
/// (all-background / all-foreground collapse).
pub const DEGENERATE_MASK_MARGIN: f64 = 0.02;

const EVAL_BATCH: usize = 16;
const FEATURE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ss-cpgan")]
    SsCpgan,
    #[serde(rename = "cpgan-baseline")]
    CpganBaseline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: String,
    pub resolution: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub mode: Mode,
    /// Ablation: train the decoder toward m_US instead of 1 - m_US.
    pub non_inverted_target: bool,
    /// Ablation: add the decoder BCE on real foreground images as well.
    pub real_image_decoder_loss: bool,
    /// Force the schedule output to a fixed weight (must be 0, 0.1 or 0.5).
    pub lambda_override: Option<f64>,
    pub gen_base_width: usize,
    pub gen_depth: Option<usize>,
    pub disc_base_width: usize,
    pub disc_depth: Option<usize>,
    pub extractor_seed: u64,
    pub pseudo_cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub run_name: String,
    /// Resume from the newest checkpoint in the run directory when present.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "synthetic://11/2000".into(),
            resolution: 48,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            total_steps: 5000,
            eval_every: 500,
            checkpoint_every: 1000,
            seed: 0,
            mode: Mode::SsCpgan,
            non_inverted_target: false,
            real_image_decoder_loss: false,
            lambda_override: None,
            gen_base_width: 8,
            gen_depth: None,
            disc_base_width: 8,
            disc_depth: None,
            extractor_seed: 90210,
            pseudo_cache_dir: PathBuf::from("cache/pseudolabels"),
            out_dir: PathBuf::from("runs"),
            run_name: "run".into(),
        resume: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "eval_every and checkpoint_every must be >= 1".into(),
            ));
        }
        if let Some(l) = self.lambda_override {
            if !(l == 0.0 || l == 0.1 || l == 0.5) {
                return Err(Error::Config(format!(
                    "lambda_override must be 0, 0.1 or 0.5, got {}",
                    l
                )));
            }
        }
        self.gen_arch().validate()?;
        self.disc_arch().validate()?;
        Ok(())
    }

    pub fn gen_arch(&self) -> ArchConfig {
        ArchConfig {
            resolution: self.resolution,
            base_width: self.gen_base_width,
            depth: self
                .gen_depth
                .unwrap_or_else(|| 3.min(ArchConfig::max_depth(self.resolution))),
        }
    }

    pub fn disc_arch(&self) -> ArchConfig {
        ArchConfig {
            resolution: self.resolution,
            base_width: self.disc_base_width,
            depth: self
                .disc_depth
                .unwrap_or_else(|| 4.min(ArchConfig::max_depth(self.resolution))),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// The effective schedule weight for a measured IoU.
    pub fn effective_lambda(&self, schedule_iou: f64) -> Result<f64> {
        match self.mode {
            Mode::CpganBaseline => Ok(0.0),
            Mode::SsCpgan => match self.lambda_override {
                Some(l) => Ok(l),
                None => lambda_schedule(schedule_iou),
            },
        }
    }
}

/// Everything that evolves during a run.
pub struct TrainState {
    pub gen: NetworkParams,
    pub disc: NetworkParams,
    pub adam_gen: AdamState<f32>,
    pub adam_disc: AdamState<f32>,
    pub step: u64,
    pub sampler: BatchSampler,
    pub noise: Stream,
}

/// One CSV row. Evaluation columns are present only on eval steps.
#[derive(Clone, Debug, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub losses: LossBundle,
    pub proxy_fid: Option<f64>,
    pub miou: Option<f64>,
    pub fg_iou: Option<f64>,
    pub degenerate_frac: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,L_D,L_G,L_ss,lambda,schedule_iou,proxy_fid,miou,fg_iou,degenerate_frac,wall_ms";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.losses.loss_d,
            self.losses.loss_g,
            self.losses.loss_ss,
            self.losses.lambda,
            self.losses.schedule_iou,
            opt(self.proxy_fid),
            opt(self.miou),
            opt(self.fg_iou),
            opt(self.degenerate_frac),
            self.wall_ms
        )
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub state: TrainState,
    grabcut_cfg: GrabcutConfig,
    /// per-image pseudo-label cache: (mask 1×H×W, degenerate)
    pseudo: Vec<Option<(Tensor<f32>, bool)>>,
    extractor: FeatureExtractor,
    real_stats: Option<FeatureStats>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = DatasetSpec::parse(&config.dataset, config.resolution)?;
        let dataset = Dataset::load(&spec)?;
        if dataset.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let gen = init_network(NetKind::Generator, &config.gen_arch(), derive_seed(config.seed, "gen"))?;
        let disc = init_network(
            NetKind::Discriminator,
            &config.disc_arch(),
            derive_seed(config.seed, "disc"),
        )?;
        let adam_gen = AdamState::new(config.adam(), &gen.shapes());
        let adam_disc = AdamState::new(config.adam(), &disc.shapes());
        let sampler = BatchSampler::new(dataset.len(), Stream::new(config.seed, STREAM_DATA));
        let noise = Stream::new(config.seed, STREAM_NOISE);
        let n = dataset.len();
        let extractor = FeatureExtractor::new(config.extractor_seed);
        Ok(Trainer {
            config,
            dataset,
            state: TrainState {
                gen,
                disc,
                adam_gen,
                adam_disc,
                step: 0,
                sampler,
                noise,
            },
            grabcut_cfg: GrabcutConfig::default(),
            pseudo: vec![None; n],
            extractor,
            real_stats: None,
        })
    }

    /// Pseudo-labels for the batch's foreground indices, computed through the
    /// disk cache on first touch.
    fn ensure_pseudo_labels(&mut self, indices: &[usize]) -> Result<()> {
        let mut missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| self.pseudo[i].is_none())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let cfg = self.grabcut_cfg;
        let cache_dir = self.config.pseudo_cache_dir.clone();
        let res = self.config.resolution;
        let computed: Vec<(usize, Result<(Tensor<f32>, bool)>)> = missing
            .par_iter()
            .map(|&i| {
                let fg = &self.dataset.foregrounds[i];
                let img = Tensor::from_vec(&[1, 3, res, res], fg.data().to_vec())
                    .expect("shape consistent");
                let label = cached_pseudo_label(&img, &cfg, PSEUDO_LABEL_SEED, &cache_dir)
                    .map(|l| {
                        let mask =
                            Tensor::from_vec(&[1, res, res], l.mask.data().to_vec()).expect("shape");
                        (mask, l.degenerate)
                    });
                (i, label)
            })
            .collect();
        for (i, label) in computed {
            self.pseudo[i] = Some(label?);
        }
        Ok(())
    }

    /// One alternating update: discriminator first, then generator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRecord> {
        let t0 = std::time::Instant::now();
        self.ensure_pseudo_labels(&batch.fg_indices)?;
        let cfg = &self.config;
        let n = cfg.batch_size;
        let res = cfg.resolution;
        let hw = res * res;

        // generator forward with gradient tracking; the mask value doubles as
        // the detached mask for the discriminator update
        let mut g_graph = Graph::<f32>::new();
        let gen_nodes = insert_params(&mut g_graph, &self.state.gen, true);
        let fg_node = g_graph.constant(batch.foregrounds.clone());
        let mask_node = generator_forward(&mut g_graph, &self.state.gen, &gen_nodes, fg_node)?;
        let mask_value = g_graph.value(mask_node).clone();
        mask_value.ensure_finite("generator mask")?;

        let composite_detached = composite(&batch.foregrounds, &batch.backgrounds, &mask_value)?;

        // assemble decoder targets and validity weights from the pseudo-labels
        let mut target = Tensor::zeros(&[n, 1, res, res]);
        let mut weight = Tensor::zeros(&[n, 1, res, res]);
        let mut pseudo_batch = Tensor::zeros(&[n, 1, res, res]);
        let mut n_valid = 0usize;
        for (b, &fi) in batch.fg_indices.iter().enumerate() {
            let (mask, degenerate) = self.pseudo[fi].as_ref().expect("pseudo-label computed");
            pseudo_batch.data_mut()[b * hw..(b + 1) * hw].copy_from_slice(mask.data());
            if *degenerate {
                continue; // weight stays zero: sample excluded from the SS loss
            }
            n_valid += 1;
            for j in 0..hw {
                let m = mask.data()[j];
                target.data_mut()[b * hw + j] = if cfg.non_inverted_target { m } else { 1.0 - m };
                weight.data_mut()[b * hw + j] = 1.0;
            }
        }

        // discriminator update
        let mut d_graph = Graph::<f32>::new();
        let disc_nodes = insert_params(&mut d_graph, &self.state.disc, true);
        let real_node = d_graph.constant(batch.foregrounds.clone());
        let fake_node = d_graph.constant(composite_detached.clone());
        let real_out = discriminator_forward(
            &mut d_graph,
            &self.state.disc,
            &disc_nodes,
            real_node,
            cfg.real_image_decoder_loss,
        )?;
        let fake_out =
            discriminator_forward(&mut d_graph, &self.state.disc, &disc_nodes, fake_node, true)?;
        let ones = d_graph.constant(Tensor::full(&[n, 1], 1.0));
        let zeros = d_graph.constant(Tensor::zeros(&[n, 1]));
        let l_real = d_graph.bce_with_logits(real_out.global_logits, ones)?;
        let l_fake = d_graph.bce_with_logits(fake_out.global_logits, zeros)?;
        let l_d_node = d_graph.axpby(l_real, 1.0, l_fake, 1.0)?;

        let pix_logits = fake_out.perpixel_logits.expect("decoder head requested");
        let pix_map = d_graph.sigmoid(pix_logits);
        let target_node = d_graph.constant(target.clone());
        let weight_node = d_graph.constant(weight);
        let mut l_ss_node = d_graph.bce_weighted(pix_map, target_node, weight_node)?;
        if cfg.real_image_decoder_loss {
            let real_pix = real_out.perpixel_logits.expect("real decoder requested");
            let real_map = d_graph.sigmoid(real_pix);
            // same loss against the (non-inverted) pseudo-label on the real image
            let real_target = d_graph.constant(pseudo_batch.clone());
            let weight2 = d_graph.constant(Tensor::full(&[n, 1, res, res], 1.0));
            let l_real_pix = d_graph.bce_weighted(real_map, real_target, weight2)?;
            l_ss_node = d_graph.axpby(l_ss_node, 1.0, l_real_pix, 1.0)?;
        }

        // schedule: agreement between the decoder's map and its target
        let schedule_iou = if n_valid > 0 {
            let map_val = d_graph.value(pix_map);
            let mut acc = 0.0;
            for (b, &fi) in batch.fg_indices.iter().enumerate() {
                let (_, degenerate) = self.pseudo[fi].as_ref().unwrap();
                if *degenerate {
                    continue;
                }
                let m = Tensor::from_vec(
                    &[1, 1, res, res],
                    map_val.data()[b * hw..(b + 1) * hw].to_vec(),
                )?;
                let t = Tensor::from_vec(
                    &[1, 1, res, res],
                    target.data()[b * hw..(b + 1) * hw].to_vec(),
                )?;
                acc += batch_mean_iou(&m, &t, MASK_THRESHOLD)?;
            }
            acc / n_valid as f64
        } else {
            1.0 // nothing to supervise on: behave as if fully agreed
        };
        let lambda = cfg.effective_lambda(schedule_iou)?;

        let l_ss = d_graph.value(l_ss_node).item() as f64;
        let total_node = match cfg.mode {
            // baseline: the self-supervised path is absent from the loss graph
            Mode::CpganBaseline => l_d_node,
            Mode::SsCpgan => d_graph.axpby(l_d_node, 1.0, l_ss_node, lambda)?,
        };
        let loss_d = d_graph.value(l_d_node).item() as f64;
        let loss_d_total = d_graph.value(total_node).item() as f64;
        if !loss_d_total.is_finite() || !l_ss.is_finite() {
            return Err(Error::NonFinite {
                context: "discriminator loss",
                detail: format!(
                    "step {}: L_D' = {}, L_ss = {}, batch indices {:?}",
                    self.state.step + 1,
                    loss_d_total,
                    l_ss,
                    batch.fg_indices
                ),
            });
        }
        d_graph.backward(total_node)?;
        let disc_grads: Vec<Option<Tensor<f32>>> = disc_nodes
            .ids
            .iter()
            .map(|&id| d_graph.grad(id).cloned())
            .collect();
        adam_step(
            &self.state.disc.names.clone(),
            &mut self.state.disc.tensors,
            &disc_grads,
            &mut self.state.adam_disc,
        )?;

        // generator update against the refreshed discriminator
        let disc_nodes_g = insert_params(&mut g_graph, &self.state.disc, false);
        let bg_node = g_graph.constant(batch.backgrounds.clone());
        let ic_node = g_graph.composite(fg_node, bg_node, mask_node)?;
        let fake_for_g = discriminator_forward(
            &mut g_graph,
            &self.state.disc,
            &disc_nodes_g,
            ic_node,
            false,
        )?;
        let ones_g = g_graph.constant(Tensor::full(&[n, 1], 1.0));
        let l_g_node = g_graph.bce_with_logits(fake_for_g.global_logits, ones_g)?;
        let loss_g = g_graph.value(l_g_node).item() as f64;
        if !loss_g.is_finite() {
            return Err(Error::NonFinite {
                context: "generator loss",
                detail: format!(
                    "step {}: L_G = {}, batch indices {:?}",
                    self.state.step + 1,
                    loss_g,
                    batch.fg_indices
                ),
            });
        }
        g_graph.backward(l_g_node)?;
        let gen_grads: Vec<Option<Tensor<f32>>> = gen_nodes
            .ids
            .iter()
            .map(|&id| g_graph.grad(id).cloned())
            .collect();
        adam_step(
            &self.state.gen.names.clone(),
            &mut self.state.gen.tensors,
            &gen_grads,
            &mut self.state.adam_gen,
        )?;

        self.state.step += 1;
        Ok(MetricsRecord {
            step: self.state.step,
            losses: LossBundle {
                loss_d,
                loss_g,
                loss_ss: l_ss,
                lambda,
                loss_d_total,
                schedule_iou,
            },
            proxy_fid: None,
            miou: None,
            fg_iou: None,
            degenerate_frac: None,
            wall_ms: t0.elapsed().as_millis() as u64,
        })
    }

    /// Generator masks over an image list, batched in index order.
    fn infer_masks(&self, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        infer_masks(&self.state.gen, images, EVAL_BATCH)
    }

    fn real_feature_stats(&mut self) -> Result<FeatureStats> {
        if let Some(s) = &self.real_stats {
            return Ok(s.clone());
        }
        let stats = feature_stats_over(&self.extractor, &self.dataset.foregrounds)?;
        self.real_stats = Some(stats.clone());
        Ok(stats)
    }

    /// Full-set evaluation on the current parameters.
    pub fn evaluate_now(&mut self) -> Result<EvalNumbers> {
        let masks = self.infer_masks(&self.dataset.foregrounds)?;
        let real = self.real_feature_stats()?;
        eval_numbers(
            &self.extractor,
            &real,
            &self.dataset,
            &masks,
        )
    }

    fn write_samples(&self, path: &Path) -> Result<()> {
        let count = 8.min(self.dataset.len());
        let fgs: Vec<Tensor<f32>> = self.dataset.foregrounds[..count].to_vec();
        let masks = self.infer_masks(&fgs)?;
        let comps: Vec<Tensor<f32>> = (0..count)
            .map(|i| {
                let res = self.config.resolution;
                let fg4 = Tensor::from_vec(&[1, 3, res, res], fgs[i].data().to_vec())?;
                let bg4 = Tensor::from_vec(
                    &[1, 3, res, res],
                    self.dataset.backgrounds[i % self.dataset.backgrounds.len()]
                        .data()
                        .to_vec(),
                )?;
                let m4 = Tensor::from_vec(&[1, 1, res, res], masks[i].data().to_vec())?;
                composite(&fg4, &bg4, &m4)
            })
            .collect::<Result<_>>()?;
        write_sample_grid(path, &fgs, &masks, &comps, self.config.resolution)
    }
}

/// Batched generator inference over single-image tensors (3×H×W each).
pub fn infer_masks(
    gen: &NetworkParams,
    images: &[Tensor<f32>],
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let res = gen.arch.resolution;
    let hw = res * res;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let n = chunk.len();
        let mut t = Tensor::zeros(&[n, 3, res, res]);
        for (b, img) in chunk.iter().enumerate() {
            if img.shape() != [3, res, res] {
                return Err(Error::Config(format!(
                    "checkpoint expects {}x{} images, dataset provides {:?}",
                    res,
                    res,
                    img.shape()
                )));
            }
            t.data_mut()[b * 3 * hw..(b + 1) * 3 * hw].copy_from_slice(img.data());
        }
        let mut g = Graph::<f32>::new();
        let nodes = insert_params(&mut g, gen, false);
        let x = g.constant(t);
        let mask = generator_forward(&mut g, gen, &nodes, x)?;
        let mv = g.value(mask);
        for b in 0..n {
            out.push(Tensor::from_vec(
                &[1, res, res],
                mv.data()[b * hw..(b + 1) * hw].to_vec(),
            )?);
        }
    }
    Ok(out)
}

fn feature_stats_over(extractor: &FeatureExtractor, images: &[Tensor<f32>]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Data(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    let mut feats = Vec::with_capacity(images.len() * crate::metrics::FEATURE_DIM);
    for chunk in images.chunks(FEATURE_CHUNK) {
        let n = chunk.len();
        let mut t = Tensor::zeros(&[n, shape[0], shape[1], shape[2]]);
        let per = shape.iter().product::<usize>();
        for (b, img) in chunk.iter().enumerate() {
            t.data_mut()[b * per..(b + 1) * per].copy_from_slice(img.data());
        }
        feats.extend(extractor.features(&t)?);
    }
    Ok(stats_from_features(&feats, images.len()))
}

/// Evaluation numbers shared by in-training evals and the eval command.
#[derive(Clone, Debug)]
pub struct EvalNumbers {
    pub proxy_fid: f64,
    pub miou: Option<MiouReport>,
    pub inverted: Option<MiouReport>,
    pub degenerate_frac: f64,
    pub mask_mean_hist: [usize; 10],
    pub n_images: usize,
}

/// Mask-mean histogram (10 bins over [0,1]) and the fraction of masks whose
/// mean lies outside [DEGENERATE_MASK_MARGIN, 1 - DEGENERATE_MASK_MARGIN].
pub fn mask_stats(masks: &[Tensor<f32>]) -> ([usize; 10], f64) {
    let mut hist = [0usize; 10];
    let mut degenerate = 0usize;
    for m in masks {
        let mean = m.mean();
        let bin = ((mean * 10.0) as usize).min(9);
        hist[bin] += 1;
        if !(DEGENERATE_MASK_MARGIN..=1.0 - DEGENERATE_MASK_MARGIN).contains(&mean) {
            degenerate += 1;
        }
    }
    (hist, degenerate as f64 / masks.len().max(1) as f64)
}

fn eval_numbers(
    extractor: &FeatureExtractor,
    real_stats: &FeatureStats,
    dataset: &Dataset,
    masks: &[Tensor<f32>],
) -> Result<EvalNumbers> {
    let res = dataset.spec.resolution;
    let n = masks.len();
    // composites pair foreground i with background i (mod the background count)
    let comps: Vec<Tensor<f32>> = (0..n)
        .map(|i| {
            let fg4 = Tensor::from_vec(&[1, 3, res, res], dataset.foregrounds[i].data().to_vec())?;
            let bg4 = Tensor::from_vec(
                &[1, 3, res, res],
                dataset.backgrounds[i % dataset.backgrounds.len()].data().to_vec(),
            )?;
            let m4 = Tensor::from_vec(&[1, 1, res, res], masks[i].data().to_vec())?;
            let c = composite(&fg4, &bg4, &m4)?;
            Tensor::from_vec(&[3, res, res], c.data().to_vec())
        })
        .collect::<Result<_>>()?;
    let fake_stats = feature_stats_over(extractor, &comps)?;
    let proxy_fid = frechet_distance(real_stats, &fake_stats)?;
    let (hist, degenerate_frac) = mask_stats(masks);

    let (miou_report, inverted) = match &dataset.gt_masks {
        Some(gts) => {
            let report = miou(masks, gts)?;
            let inv_masks: Vec<Tensor<f32>> = masks.iter().map(|m| m.map(|v| 1.0 - v)).collect();
            let inv = miou(&inv_masks, gts)?;
            (Some(report), Some(inv))
        }
        None => (None, None),
    };

    Ok(EvalNumbers {
        proxy_fid,
        miou: miou_report,
        inverted,
        degenerate_frac,
        mask_mean_hist: hist,
        n_images: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_counting_uses_the_documented_margin() {
        let mk = |mean: f32| Tensor::full(&[1, 4, 4], mean);
        let masks = vec![mk(0.01), mk(0.025), mk(0.5), mk(0.975), mk(0.99), mk(0.0)];
        let (hist, frac) = mask_stats(&masks);
        // 0.01, 0.99 and 0.0 are outside [0.02, 0.98]
        assert!((frac - 3.0 / 6.0).abs() < 1e-12);
        assert_eq!(hist.iter().sum::<usize>(), 6);
        assert_eq!(hist[0], 3); // 0.01, 0.025, 0.0
        assert_eq!(hist[5], 1); // 0.5
        assert_eq!(hist[9], 2); // 0.975, 0.99
    }
}

// ---------------------------------------------------------------------------
// checkpointing

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    step: u64,
    seed: u64,
    gen_arch: ArchConfig,
    disc_arch: ArchConfig,
    adam: AdamConfig,
    adam_gen_steps: u64,
    adam_disc_steps: u64,
    sampler: SamplerState,
    noise: StreamState,
}

pub fn save_checkpoint(state: &TrainState, seed: u64, adam: AdamConfig, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (name, t) in state.gen.names.iter().zip(&state.gen.tensors) {
        entries.push((name.clone(), t.clone()));
    }
    for (name, t) in state.disc.names.iter().zip(&state.disc.tensors) {
        entries.push((name.clone(), t.clone()));
    }
    let moments = [
        ("adam_gen/m", &state.adam_gen.first_moment, &state.gen.names),
        ("adam_gen/v", &state.adam_gen.second_moment, &state.gen.names),
        ("adam_disc/m", &state.adam_disc.first_moment, &state.disc.names),
        ("adam_disc/v", &state.adam_disc.second_moment, &state.disc.names),
    ];
    for (prefix, tensors, names) in moments {
        for (name, t) in names.iter().zip(tensors.iter()) {
            entries.push((format!("{}/{}", prefix, name), t.clone()));
        }
    }
    let meta = CheckpointMeta {
        format: 1,
        step: state.step,
        seed,
        gen_arch: state.gen.arch,
        disc_arch: state.disc.arch,
        adam,
        adam_gen_steps: state.adam_gen.step_count,
        adam_disc_steps: state.adam_disc.step_count,
        sampler: state.sampler.state(),
        noise: state.noise.state(),
    };
    let archive = Archive {
        entries,
        meta: serde_json::to_vec(&meta).expect("meta serializes"),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    archive.write_to(path)
}

pub struct LoadedCheckpoint {
    pub gen: NetworkParams,
    pub disc: NetworkParams,
    pub adam_gen: AdamState<f32>,
    pub adam_disc: AdamState<f32>,
    pub step: u64,
    pub seed: u64,
    pub sampler: SamplerState,
    pub noise: StreamState,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let archive = Archive::read_from(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&archive.meta)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {}", e)))?;
    if meta.format != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {}",
            meta.format
        )));
    }
    let gen = NetworkParams::from_archive(NetKind::Generator, &meta.gen_arch, &archive)?;
    let disc = NetworkParams::from_archive(NetKind::Discriminator, &meta.disc_arch, &archive)?;
    let load_moments = |prefix: &str, params: &NetworkParams| -> Result<Vec<Tensor<f32>>> {
        params
            .names
            .iter()
            .map(|name| {
                archive
                    .get(&format!("{}/{}", prefix, name))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("missing moment {}/{}", prefix, name)))
            })
            .collect()
    };
    let adam_gen = AdamState {
        cfg: meta.adam,
        first_moment: load_moments("adam_gen/m", &gen)?,
        second_moment: load_moments("adam_gen/v", &gen)?,
        step_count: meta.adam_gen_steps,
    };
    let adam_disc = AdamState {
        cfg: meta.adam,
        first_moment: load_moments("adam_disc/m", &disc)?,
        second_moment: load_moments("adam_disc/v", &disc)?,
        step_count: meta.adam_disc_steps,
    };
    Ok(LoadedCheckpoint {
        gen,
        disc,
        adam_gen,
        adam_disc,
        step: meta.step,
        seed: meta.seed,
        sampler: meta.sampler,
        noise: meta.noise,
    })
}

// ---------------------------------------------------------------------------
// the training loop

fn find_latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let entries = std::fs::read_dir(dir).ok()?;
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, e.path()));
            }
        }
    }
    best
}

/// Run (or resume) a full training run. Returns the run directory.
pub fn train(config: &TrainConfig) -> Result<PathBuf> {
    config.validate()?;
    let run_dir = config.run_dir();
    let ckpt_dir = run_dir.join("checkpoints");
    let samples_dir = run_dir.join("samples");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let mut trainer = Trainer::new(config.clone())?;

    // config echo with every default resolved
    let config_path = run_dir.join("config.json");
    let echo = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&config_path, echo).map_err(|e| Error::io(&config_path, e))?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut existing_rows: Vec<String> = Vec::new();

    // resume from the newest checkpoint when asked and available
    if config.resume {
        if let Some((step, path)) = find_latest_checkpoint(&ckpt_dir) {
            if step < config.total_steps {
                let loaded = load_checkpoint(&path)?;
                if loaded.seed != config.seed {
                    return Err(Error::Config(format!(
                        "checkpoint at {} was trained with seed {}, config says {}",
                        path.display(),
                        loaded.seed,
                        config.seed
                    )));
                }
                trainer.state.gen = loaded.gen;
                trainer.state.disc = loaded.disc;
                trainer.state.adam_gen = loaded.adam_gen;
                trainer.state.adam_disc = loaded.adam_disc;
                trainer.state.step = loaded.step;
                trainer.state.sampler.restore(&loaded.sampler);
                trainer.state.noise.restore(&loaded.noise);
                // keep only metric rows at or before the checkpoint
                if let Ok(text) = std::fs::read_to_string(&metrics_path) {
                    existing_rows = text
                        .lines()
                        .skip(1)
                        .filter(|line| {
                            line.split(',')
                                .next()
                                .and_then(|s| s.parse::<u64>().ok())
                                .map(|s| s <= step)
                                .unwrap_or(false)
                        })
                        .map(str::to_string)
                        .collect();
                }
            } else if step >= config.total_steps {
                return Ok(run_dir); // already complete
            }
        }
    }

    let mut csv = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(csv, "{}", METRICS_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    for row in &existing_rows {
        writeln!(csv, "{}", row).map_err(|e| Error::io(&metrics_path, e))?;
    }

    while trainer.state.step < config.total_steps {
        let batch = trainer
            .state
            .sampler
            .next_batch(&trainer.dataset, config.batch_size)?;
        let mut record = trainer.train_step(&batch)?;
        let step = trainer.state.step;

        if step % config.eval_every == 0 || step == config.total_steps {
            let eval = trainer.evaluate_now()?;
            record.proxy_fid = Some(eval.proxy_fid);
            record.miou = eval.miou.map(|r| r.miou);
            record.fg_iou = eval.miou.map(|r| r.fg_iou);
            record.degenerate_frac = Some(eval.degenerate_frac);
            trainer.write_samples(&samples_dir.join(format!("step_{}.png", step)))?;
        }
        writeln!(csv, "{}", record.to_csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        csv.flush().map_err(|e| Error::io(&metrics_path, e))?;

        if step % config.checkpoint_every == 0 || step == config.total_steps {
            save_checkpoint(
                &trainer.state,
                config.seed,
                config.adam(),
                &ckpt_dir.join(format!("step_{}.ckpt", step)),
            )?;
        }
    }
    Ok(run_dir)
}

// ---------------------------------------------------------------------------
// standalone evaluation

#[derive(Serialize)]
pub struct EvalReport {
    pub miou: Option<f64>,
    pub fg_iou: Option<f64>,
    pub proxy_fid: f64,
    pub n_images: usize,
    pub checkpoint: String,
    pub dataset: String,
    pub extractor_seed: u64,
    pub degenerate_frac: f64,
    pub mask_mean_hist: [usize; 10],
    pub inverted_miou: Option<f64>,
    pub inverted_fg_iou: Option<f64>,
    pub step: u64,
}

/// Evaluate a checkpoint against a dataset spec string.
pub fn evaluate(checkpoint: &Path, dataset_str: &str, extractor_seed: u64) -> Result<EvalReport> {
    let loaded = load_checkpoint(checkpoint)?;
    let res = loaded.gen.arch.resolution;
    let spec = DatasetSpec::parse(dataset_str, res)?;
    let dataset = Dataset::load(&spec)?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if let Some(first) = dataset.foregrounds.first() {
        if first.dim(1) != res {
            return Err(Error::Config(format!(
                "checkpoint resolution {} does not match dataset resolution {}",
                res,
                first.dim(1)
            )));
        }
    }
    let masks = infer_masks(&loaded.gen, &dataset.foregrounds, EVAL_BATCH)?;
    let extractor = FeatureExtractor::new(extractor_seed);
    let real = feature_stats_over(&extractor, &dataset.foregrounds)?;
    let nums = eval_numbers(&extractor, &real, &dataset, &masks)?;
    Ok(EvalReport {
        miou: nums.miou.map(|r| r.miou),
        fg_iou: nums.miou.map(|r| r.fg_iou),
        proxy_fid: nums.proxy_fid,
        n_images: nums.n_images,
        checkpoint: checkpoint.display().to_string(),
        dataset: dataset_str.to_string(),
        extractor_seed,
        degenerate_frac: nums.degenerate_frac,
        mask_mean_hist: nums.mask_mean_hist,
        inverted_miou: nums.inverted.map(|r| r.miou),
        inverted_fg_iou: nums.inverted.map(|r| r.fg_iou),
        step: loaded.step,
    })
}

/// Run grabcut over a free-standing image batch (used by the CLI).
pub fn pseudo_label_image(image: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    let label = grabcut_with(image, &GrabcutConfig::default(), seed)?;
    Ok(label.mask)
}

// ---------------------------------------------------------------------------
// sample sheet rendering

fn write_sample_grid(
    path: &Path,
    fgs: &[Tensor<f32>],
    masks: &[Tensor<f32>],
    comps: &[Tensor<f32>],
    res: usize,
) -> Result<()> {
    let n = fgs.len();
    let pad = 2u32;
    let cell = res as u32;
    let width = n as u32 * (cell + pad) + pad;
    let height = 3 * (cell + pad) + pad;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([30, 30, 30]));
    let hw = res * res;
    let put = |img: &mut image::RgbImage, col: usize, row: usize, data: &dyn Fn(usize) -> [u8; 3]| {
        let x0 = pad + col as u32 * (cell + pad);
        let y0 = pad + row as u32 * (cell + pad);
        for y in 0..res {
            for x in 0..res {
                let c = data(y * res + x);
                img.put_pixel(x0 + x as u32, y0 + y as u32, image::Rgb(c));
            }
        }
    };
    let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..n {
        let fg = &fgs[i];
        put(&mut img, i, 0, &|j| {
            [to8(fg.data()[j]), to8(fg.data()[hw + j]), to8(fg.data()[2 * hw + j])]
        });
        let m = &masks[i];
        put(&mut img, i, 1, &|j| {
            let v = to8(m.data()[j]);
            [v, v, v]
        });
        let c = &comps[i];
        let cd = c.data();
        put(&mut img, i, 2, &|j| {
            [to8(cd[j]), to8(cd[hw + j]), to8(cd[2 * hw + j])]
        });
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {}", path.display(), e)))
}
