//! Adam optimizer and the finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub cfg: AdamConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Elem> AdamState<T> {
    pub fn new(cfg: AdamConfig, param_shapes: &[&[usize]]) -> Self {
        AdamState {
            cfg,
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update over a named parameter list.
///
/// `grads[i] == None` is treated as an exactly-zero gradient (the parameter
/// was not on the loss path); moments still decay. A non-finite gradient
/// aborts the whole step before touching any parameter.
pub fn adam_step<T: Elem>(
    names: &[String],
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != names.len()
    {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "param '{}' has shape {:?}, grad {:?}",
                        names[i],
                        params[i].shape(),
                        g.shape()
                    ),
                });
            }
            if let Some((j, v)) = g.find_non_finite() {
                return Err(Error::NonFinite {
                    context: "adam_step gradient",
                    detail: format!("param '{}' element {} is {}", names[i], j, v),
                });
            }
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - state.cfg.beta2.powi(t as i32);
    let lr = T::from_f64(state.cfg.lr);
    let b1 = T::from_f64(state.cfg.beta1);
    let b2 = T::from_f64(state.cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - state.cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - state.cfg.beta2);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(state.cfg.eps);

    for i in 0..params.len() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params[i].data_mut();
        match &grads[i] {
            Some(g) => {
                for ((pv, (mv, vv)), gv) in
                    p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
                {
                    *mv = b1 * *mv + one_m_b1 * *gv;
                    *vv = b2 * *vv + one_m_b2 * *gv * *gv;
                    let mhat = *mv * inv_bc1;
                    let vhat = *vv * inv_bc2;
                    *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                }
            }
            None => {
                for (pv, (mv, vv)) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())) {
                    *mv = b1 * *mv;
                    *vv = b2 * *vv;
                    let mhat = *mv * inv_bc1;
                    let vhat = *vv * inv_bc2;
                    *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Result of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of a scalar-valued graph function against
/// central finite differences, element by element, in double precision.
///
/// Relative error per coordinate is |a−n| / max(|a|, |n|, 1e-6).
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_elem: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_elem: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
