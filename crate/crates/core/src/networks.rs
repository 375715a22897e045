//! The mask generator and the U-Net discriminator.
//!
//! Both nets share the same U shape: a conv stem, `depth` conv+avgpool encoder
//! stages, and a mirrored upsample+concat+conv decoder. The generator adds
//! batch normalization after every conv and ends in a 1-channel sigmoid mask
//! head. The discriminator uses plain convs (no normalization), a global
//! real/fake logit head (1x1 conv + global average over the bottleneck) and a
//! per-pixel logit head at input resolution fed by the decoder.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{Stream, STREAM_INIT};
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

pub const SUPPORTED_RESOLUTIONS: &[usize] = &[32, 48, 64, 128, 256];
/// Encoder widths double per stage up to this multiple of the base width.
const WIDTH_CAP_FACTOR: usize = 8;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Leaky-ReLU slope used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Initial generator mask level: head bias is set to logit of this value.
const INIT_MASK_LEVEL: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Generator,
    Discriminator,
}

/// Resolution, base width and number of downsampling stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl ArchConfig {
    /// Largest depth such that the bottleneck stays at least 4x4 and every
    /// pooling stage sees even extents.
    pub fn max_depth(resolution: usize) -> usize {
        let mut d = 0;
        while resolution.is_multiple_of(1 << (d + 1)) && (resolution >> (d + 1)) >= 4 {
            d += 1;
        }
        d
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.resolution >> self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "unsupported resolution {} (supported: {:?})",
                self.resolution, SUPPORTED_RESOLUTIONS
            )));
        }
        self.validate_depth_only()
    }

    fn validate_depth_only(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if !self.resolution.is_multiple_of(1 << self.depth) || self.bottleneck_extent() < 4 {
            return Err(Error::Config(format!(
                "depth {} incompatible with resolution {}: bottleneck extent would be {} (< 4 or fractional)",
                self.depth,
                self.resolution,
                self.resolution as f64 / (1u64 << self.depth) as f64
            )));
        }
        Ok(())
    }
}

/// Indices of one conv (+ optional bias / batch-norm) into the flat parameter
/// list.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: usize,
    pub b: Option<usize>,
    pub bn: Option<(usize, usize)>, // (gamma, beta)
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: usize,
}

/// Deterministic layer plan shared by init, forward and serialization.
#[derive(Clone, Debug)]
pub struct Layout {
    pub stem: ConvLayer,
    pub enc: Vec<ConvLayer>,
    pub global_head: Option<ConvLayer>,
    pub dec: Vec<ConvLayer>, // dec[i] produces the feature at level i (full res = 0)
    pub head: ConvLayer,
    pub enc_widths: Vec<usize>, // widths at levels 0..=depth
    pub dec_widths: Vec<usize>,
}

/// Flat named parameter collection for one network.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    pub kind: NetKind,
    pub arch: ArchConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
#[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
        bias: bool,
        bn: bool,
    ) -> ConvLayer {
        let w = self.names.len();
        self.names.push(format!("{}/conv.w", prefix));
        self.shapes.push(vec![out_ch, in_ch, k, k]);
        let b = if bias {
            self.names.push(format!("{}/conv.b", prefix));
            self.shapes.push(vec![out_ch]);
            Some(self.names.len() - 1)
        } else {
            None
        };
        let bn = if bn {
            self.names.push(format!("{}/bn.g", prefix));
            self.shapes.push(vec![out_ch]);
            self.names.push(format!("{}/bn.b", prefix));
            self.shapes.push(vec![out_ch]);
            Some((self.names.len() - 2, self.names.len() - 1))
        } else {
            None
        };
        ConvLayer {
            w,
            b,
            bn,
            in_ch,
            out_ch,
            k,
            pad,
        }
    }
}

/// Build the layer plan for a network. Generator convs carry batch norm and no
/// bias; discriminator convs carry bias and no norm. Decoder widths are half
/// the encoder widths, which keeps the upsampling path cheap without hurting
/// mask fidelity at these scales.
pub fn layout(kind: NetKind, arch: &ArchConfig) -> Layout {
    layout_full(kind, arch).0
}

fn layout_full(kind: NetKind, arch: &ArchConfig) -> (Layout, Vec<String>, Vec<Vec<usize>>) {
    let prefix = match kind {
        NetKind::Generator => "gen",
        NetKind::Discriminator => "disc",
    };
    let use_bn = kind == NetKind::Generator;
    let cap = arch.base_width * WIDTH_CAP_FACTOR;
    let enc_widths: Vec<usize> = (0..=arch.depth)
        .map(|i| (arch.base_width << i).min(cap))
        .collect();
    let dec_widths: Vec<usize> = enc_widths.iter().map(|w| (w / 2).max(4)).collect();

    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let stem = b.conv(&format!("{}/stem", prefix), 3, enc_widths[0], 3, 1, !use_bn, use_bn);
    let enc: Vec<ConvLayer> = (1..=arch.depth)
        .map(|i| {
            b.conv(
                &format!("{}/enc{}", prefix, i),
                enc_widths[i - 1],
                enc_widths[i],
                3,
                1,
                !use_bn,
                use_bn,
            )
        })
        .collect();
    let global_head = match kind {
        NetKind::Discriminator => Some(b.conv(
            &format!("{}/glob", prefix),
            enc_widths[arch.depth],
            1,
            1,
            0,
            true,
            false,
        )),
        NetKind::Generator => None,
    };
    // dec[i] consumes concat(upsampled deeper feature, encoder skip at level i)
    let dec: Vec<ConvLayer> = (0..arch.depth)
        .map(|i| {
            let deeper = if i + 1 == arch.depth {
                enc_widths[arch.depth]
            } else {
                dec_widths[i + 1]
            };
            b.conv(
                &format!("{}/dec{}", prefix, i),
                deeper + enc_widths[i],
                dec_widths[i],
                3,
                1,
                !use_bn,
                use_bn,
            )
        })
        .collect();
    let head = b.conv(&format!("{}/head", prefix), dec_widths[0], 1, 1, 0, true, false);

    debug_assert_eq!(b.names.len(), b.shapes.len());
    (
        Layout {
            stem,
            enc,
            global_head,
            dec,
            head,
            enc_widths,
            dec_widths,
        },
        b.names,
        b.shapes,
    )
}

fn param_shapes(kind: NetKind, arch: &ArchConfig) -> (Vec<String>, Vec<Vec<usize>>) {
    let (_, names, shapes) = layout_full(kind, arch);
    (names, shapes)
}

/// Deterministic fan-in-scaled initialization from the "init" stream of
/// `seed`. Conv weights are normal with std sqrt(2 / fan_in); the generator
/// head starts near-flat with its bias at logit(INIT_MASK_LEVEL) so fresh
/// masks sit well inside (0,1).
pub fn init_network(kind: NetKind, arch: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    init_network_any(kind, arch, seed)
}

/// As `init_network` but without the supported-resolution list check; depth
/// compatibility is still enforced. Used by diagnostics on tiny inputs.
#[doc(hidden)]
pub fn init_network_any(kind: NetKind, arch: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    arch.validate_depth_only()?;
    let (names, shapes) = param_shapes(kind, arch);
    let mut stream = Stream::new(seed, STREAM_INIT);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in names.iter().zip(&shapes) {
        let t = if name.ends_with("/bn.g") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with("/bn.b") {
            Tensor::zeros(shape)
        } else if name.ends_with("/conv.b") {
            if kind == NetKind::Generator && name.contains("/head/") {
                let bias = (INIT_MASK_LEVEL / (1.0 - INIT_MASK_LEVEL)).ln();
                Tensor::full(shape, bias as f32)
            } else {
                Tensor::zeros(shape)
            }
        } else {
            // conv weight, shape [out, in, k, k]
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let std = if kind == NetKind::Generator && name.contains("/head/") {
                0.05
            } else {
                (2.0 / fan_in).sqrt()
            };
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| (stream.normal() * std) as f32).collect();
            Tensor::from_vec(shape, data)?
        };
        tensors.push(t);
    }
    Ok(NetworkParams {
        kind,
        arch: *arch,
        names,
        tensors,
    })
}

impl NetworkParams {
    pub fn layout(&self) -> Layout {
        layout(self.kind, &self.arch)
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn to_archive(&self) -> Archive {
        Archive {
            entries: self
                .names
                .iter()
                .cloned()
                .zip(self.tensors.iter().cloned())
                .collect(),
            meta: Vec::new(),
        }
    }

    /// Rebuild params from archive entries; names and shapes must match the
    /// layout for (kind, arch) exactly.
    pub fn from_archive(kind: NetKind, arch: &ArchConfig, ar: &Archive) -> Result<Self> {
        let (names, shapes) = param_shapes(kind, arch);
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = ar.get(name).ok_or_else(|| {
                Error::Format(format!("archive is missing parameter '{}'", name))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            tensors.push(t.clone());
        }
        Ok(NetworkParams {
            kind,
            arch: *arch,
            names,
            tensors,
        })
    }
}

/// Node ids of one network's parameters inside a graph, in layout order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

/// Insert all parameters of a network into a graph as leaves.
pub fn insert_params<T: Elem>(
    g: &mut Graph<T>,
    params: &NetworkParams,
    requires_grad: bool,
) -> ParamNodes {
    let ids = params
        .tensors
        .iter()
        .map(|t| {
            let cast: Tensor<T> = Tensor::from_vec(
                t.shape(),
                t.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
            )
            .expect("shape/data agree");
            g.leaf(cast, requires_grad)
        })
        .collect();
    ParamNodes { ids }
}

fn apply_conv<T: Elem>(
    g: &mut Graph<T>,
    layer: &ConvLayer,
    p: &ParamNodes,
    x: NodeId,
    activation: bool,
) -> Result<NodeId> {
    let mut y = g.conv2d(x, p.ids[layer.w], layer.b.map(|i| p.ids[i]), 1, layer.pad)?;
    if let Some((gamma, beta)) = layer.bn {
        y = g.batch_norm(y, p.ids[gamma], p.ids[beta], BN_EPS)?;
    }
    if activation {
        y = g.leaky_relu(y, LEAKY_SLOPE);
    }
    Ok(y)
}

fn check_input<T: Elem>(g: &Graph<T>, arch: &ArchConfig, x: NodeId, what: &str) -> Result<()> {
    let t = g.value(x);
    if t.shape().len() != 4 || t.dim(1) != 3 || t.dim(2) != arch.resolution || t.dim(3) != arch.resolution
    {
        return Err(Error::Config(format!(
            "{} expects Nx3x{}x{} input, got {:?}",
            what,
            arch.resolution,
            arch.resolution,
            t.shape()
        )));
    }
    Ok(())
}

/// Shared U-shaped trunk: returns the bottleneck feature and the full-res
/// decoder output feature.
fn unet_trunk<T: Elem>(
    g: &mut Graph<T>,
    l: &Layout,
    p: &ParamNodes,
    x: NodeId,
    with_decoder: bool,
) -> Result<(NodeId, Option<NodeId>)> {
    let mut skips = Vec::with_capacity(l.enc.len() + 1);
    let mut cur = apply_conv(g, &l.stem, p, x, true)?;
    skips.push(cur);
    for e in &l.enc {
        let pooled = g.avg_pool2(cur)?;
        cur = apply_conv(g, e, p, pooled, true)?;
        skips.push(cur);
    }
    let bottleneck = cur;
    if !with_decoder {
        return Ok((bottleneck, None));
    }
    let mut dec_feat = bottleneck;
    for i in (0..l.dec.len()).rev() {
        let up = g.upsample_nearest2(dec_feat)?;
        let cat = g.concat_channels(up, skips[i])?;
        dec_feat = apply_conv(g, &l.dec[i], p, cat, true)?;
    }
    Ok((bottleneck, Some(dec_feat)))
}

/// Generator forward: N×3×H×W image → N×1×H×W soft mask in (0,1).
pub fn generator_forward<T: Elem>(
    g: &mut Graph<T>,
    params: &NetworkParams,
    p: &ParamNodes,
    image: NodeId,
) -> Result<NodeId> {
    debug_assert_eq!(params.kind, NetKind::Generator);
    check_input(g, &params.arch, image, "generator")?;
    let l = params.layout();
    let (_, dec) = unet_trunk(g, &l, p, image, true)?;
    let logits = apply_conv(g, &l.head, p, dec.expect("decoder requested"), false)?;
    Ok(g.sigmoid(logits))
}

pub struct DiscOutput {
    /// N×1 real/fake logits from the encoder head.
    pub global_logits: NodeId,
    /// N×1×H×W per-pixel logits from the decoder head, when requested.
    pub perpixel_logits: Option<NodeId>,
}

/// Discriminator forward. The decoder half can be skipped when only the
/// global head is needed; the global value is unaffected either way.
pub fn discriminator_forward<T: Elem>(
    g: &mut Graph<T>,
    params: &NetworkParams,
    p: &ParamNodes,
    image: NodeId,
    with_decoder: bool,
) -> Result<DiscOutput> {
    debug_assert_eq!(params.kind, NetKind::Discriminator);
    check_input(g, &params.arch, image, "discriminator")?;
    let l = params.layout();
    let (bottleneck, dec) = unet_trunk(g, &l, p, image, with_decoder)?;
    let gh = l.global_head.as_ref().expect("discriminator has a global head");
    let glob_map = apply_conv(g, gh, p, bottleneck, false)?;
    let global_logits = g.global_avg_pool(glob_map)?;
    let perpixel_logits = match dec {
        Some(d) => Some(apply_conv(g, &l.head, p, d, false)?),
        None => None,
    };
    Ok(DiscOutput {
        global_logits,
        perpixel_logits,
    })
}
