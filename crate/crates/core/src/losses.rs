//! Adversarial losses, the self-supervised decoder loss, the IoU-gated
//! lambda schedule and the IoU computation it relies on.
//!
//! All loss functions here are scalar wrappers over the graph ops, so test
//! values and training gradients come from the same code path.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Elem, Tensor};

/// Default binarization threshold for soft masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Scalar losses of one training step plus the schedule inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_ss: f64,
    pub lambda: f64,
    pub loss_d_total: f64,
    pub schedule_iou: f64,
}

/// Discriminator objective in BCE form: real images toward 1, composites
/// toward 0. Minimizing this maximizes the usual minimax objective.
pub fn discriminator_loss<T: Elem>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(real_logits.clone());
    let f = g.constant(fake_logits.clone());
    let ones = g.constant(Tensor::full(real_logits.shape(), T::ONE));
    let zeros = g.constant(Tensor::zeros(fake_logits.shape()));
    let lr = g.bce_with_logits(r, ones)?;
    let lf = g.bce_with_logits(f, zeros)?;
    let total = g.axpby(lr, 1.0, lf, 1.0)?;
    Ok(g.value(total).item().to_f64())
}

/// Non-saturating generator objective: composites toward "real".
pub fn generator_loss<T: Elem>(fake_logits: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fake_logits.clone());
    let ones = g.constant(Tensor::full(fake_logits.shape(), T::ONE));
    let l = g.bce_with_logits(f, ones)?;
    Ok(g.value(l).item().to_f64())
}

/// Cross entropy between the decoder's per-pixel map on the composite and the
/// inverted pseudo-label. `invert_target` is on by default; the off position
/// exists only for ablation.
pub fn self_supervised_loss<T: Elem>(
    perpixel_map: &Tensor<T>,
    pseudo_mask: &Tensor<T>,
    invert_target: bool,
) -> Result<f64> {
    if perpixel_map.shape() != pseudo_mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "self_supervised_loss",
            detail: format!(
                "map {:?} vs pseudo-label {:?}",
                perpixel_map.shape(),
                pseudo_mask.shape()
            ),
        });
    }
    let mut g = Graph::new();
    let m = g.constant(perpixel_map.clone());
    let target = if invert_target {
        pseudo_mask.map(|v| T::ONE - v)
    } else {
        pseudo_mask.clone()
    };
    let t = g.constant(target);
    let l = g.bce(m, t)?;
    Ok(g.value(l).item().to_f64())
}

/// Total discriminator loss: base adversarial term plus the weighted
/// self-supervised term.
pub fn total_discriminator_loss(loss_d: f64, loss_ss: f64, lambda: f64) -> Result<f64> {
    if !(lambda == 0.0 || lambda == 0.1 || lambda == 0.5) {
        return Err(Error::Contract(format!(
            "lambda must be one of {{0, 0.1, 0.5}}, got {}",
            lambda
        )));
    }
    Ok(loss_d + lambda * loss_ss)
}

/// IoU-gated weight for the self-supervised loss. Low agreement leans hard on
/// the pseudo-labels, high agreement turns them off so they cannot drag the
/// predictions down. The band edges 0.2 and 0.8 both map to the middle value.
pub fn lambda_schedule(iou: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Contract(format!("iou {} outside [0,1]", iou)));
    }
    Ok(if iou < 0.2 {
        0.5
    } else if iou <= 0.8 {
        0.1
    } else {
        0.0
    })
}

/// Intersection-over-union of two masks after binarizing at `threshold`
/// (foreground is value > threshold). Two empty masks agree perfectly: 1.0.
pub fn iou<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, threshold: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let t = T::from_f64(threshold);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (fa, fb) = (x > t, y > t);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean of per-sample IoU over a batch of N×1×H×W masks.
pub fn batch_mean_iou<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, threshold: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batch_mean_iou",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let n = a.dim(0);
    let per = a.len() / n;
    let mut acc = 0.0;
    for i in 0..n {
        let sa = Tensor::from_vec(&[per], a.data()[i * per..(i + 1) * per].to_vec())?;
        let sb = Tensor::from_vec(&[per], b.data()[i * per..(i + 1) * per].to_vec())?;
        acc += iou(&sa, &sb, threshold)?;
    }
    Ok(acc / n as f64)
}
