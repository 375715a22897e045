//! Composite-image construction: the per-pixel convex blend of a foreground
//! and a background through a soft mask.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// One compositing step's tensors, kept together for inspection.
#[derive(Clone, Debug)]
pub struct CompositeBatch<T = f32> {
    pub foreground: Tensor<T>,
    pub background: Tensor<T>,
    pub mask: Tensor<T>,
    pub composite: Tensor<T>,
}

/// mask·fg + (1−mask)·bg with the N×1×H×W mask broadcast over channels.
///
/// Mask values must lie in [0,1]; anything else is a contract violation.
pub fn composite<T: Elem>(
    foreground: &Tensor<T>,
    background: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if foreground.shape() != background.shape() {
        return Err(Error::ShapeMismatch {
            op: "composite",
            detail: format!(
                "foreground {:?} vs background {:?}",
                foreground.shape(),
                background.shape()
            ),
        });
    }
    if foreground.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "composite",
            detail: format!("expected NCHW, got {:?}", foreground.shape()),
        });
    }
    let (n, c, h, w) = (
        foreground.dim(0),
        foreground.dim(1),
        foreground.dim(2),
        foreground.dim(3),
    );
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "composite",
            detail: format!("mask {:?}, expected [{}, 1, {}, {}]", mask.shape(), n, 1, h),
        });
    }
    if let Some(bad) = mask
        .data()
        .iter()
        .find(|&&v| !(v >= T::ZERO && v <= T::ONE))
    {
        return Err(Error::Contract(format!(
            "mask value {} outside [0,1]",
            bad
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(foreground.shape());
    let (fd, bd, md) = (foreground.data(), background.data(), mask.data());
    let od = out.data_mut();
    for i in 0..n {
        let mrow = &md[i * hw..(i + 1) * hw];
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let m = mrow[j];
                od[base + j] = m * fd[base + j] + (T::ONE - m) * bd[base + j];
            }
        }
    }
    Ok(out)
}

pub fn composite_batch<T: Elem>(
    foreground: Tensor<T>,
    background: Tensor<T>,
    mask: Tensor<T>,
) -> Result<CompositeBatch<T>> {
    let out = composite(&foreground, &background, &mask)?;
    Ok(CompositeBatch {
        foreground,
        background,
        mask,
        composite: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::optim::gradient_check;
    use rand::Rng;

    fn rand_img(rng: &mut crate::rng::Stream, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.rng().gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mask_one_returns_foreground_exactly() {
        let mut rng = crate::rng::Stream::new(1, "t");
        let fg = rand_img(&mut rng, &[2, 3, 4, 4]);
        let bg = rand_img(&mut rng, &[2, 3, 4, 4]);
        let m = Tensor::full(&[2, 1, 4, 4], 1.0);
        let out = composite(&fg, &bg, &m).unwrap();
        assert_eq!(out.data(), fg.data());
    }

    #[test]
    fn mask_zero_returns_background_exactly() {
        let mut rng = crate::rng::Stream::new(2, "t");
        let fg = rand_img(&mut rng, &[2, 3, 4, 4]);
        let bg = rand_img(&mut rng, &[2, 3, 4, 4]);
        let m = Tensor::zeros(&[2, 1, 4, 4]);
        let out = composite(&fg, &bg, &m).unwrap();
        assert_eq!(out.data(), bg.data());
    }

    #[test]
    fn scalar_blend_matches_hand_value() {
        let fg = Tensor::full(&[1, 1, 1, 1], 0.8f64);
        let bg = Tensor::full(&[1, 1, 1, 1], 0.4);
        let m = Tensor::full(&[1, 1, 1, 1], 0.25);
        let out = composite(&fg, &bg, &m).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let mut rng = crate::rng::Stream::new(3, "t");
        let img = rand_img(&mut rng, &[1, 3, 5, 5]);
        let m = rand_img(&mut rng, &[1, 1, 5, 5]);
        let out = composite(&img, &img, &m).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - i).abs() < 1e-15);
        }
    }

    #[test]
    fn output_stays_between_inputs() {
        let mut rng = crate::rng::Stream::new(4, "t");
        for _ in 0..20 {
            let fg = rand_img(&mut rng, &[1, 3, 6, 6]);
            let bg = rand_img(&mut rng, &[1, 3, 6, 6]);
            let m = rand_img(&mut rng, &[1, 1, 6, 6]);
            let out = composite(&fg, &bg, &m).unwrap();
            let hw = 36;
            for ch in 0..3 {
                for j in 0..hw {
                    let (f, b, o) = (
                        fg.data()[ch * hw + j],
                        bg.data()[ch * hw + j],
                        out.data()[ch * hw + j],
                    );
                    assert!(o >= f.min(b) - 1e-12 && o <= f.max(b) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_mask_is_a_contract_violation() {
        let fg = Tensor::full(&[1, 3, 2, 2], 0.5f32);
        let bg = Tensor::full(&[1, 3, 2, 2], 0.5f32);
        for bad in [-0.1f32, 1.1, f32::NAN] {
            let mut m = Tensor::full(&[1, 1, 2, 2], 0.5f32);
            m.data_mut()[0] = bad;
            assert!(composite(&fg, &bg, &m).is_err(), "mask value {}", bad);
        }
    }

    #[test]
    fn mask_gradient_equals_fg_minus_bg() {
        let mut rng = crate::rng::Stream::new(5, "t");
        let fg = rand_img(&mut rng, &[1, 3, 3, 3]);
        let bg = rand_img(&mut rng, &[1, 3, 3, 3]);
        let m = rand_img(&mut rng, &[1, 1, 3, 3]);

        // loss = mean(I_C): analytic mask grad is sum_c (fg - bg) / M
        let mut g = Graph::<f64>::new();
        let f_id = g.constant(fg.clone());
        let b_id = g.constant(bg.clone());
        let m_id = g.leaf(m.clone(), true);
        let ic = g.composite(f_id, b_id, m_id).unwrap();
        let loss = g.mean_all(ic);
        g.backward(loss).unwrap();
        let grad = g.grad(m_id).unwrap();
        let hw = 9;
        for j in 0..hw {
            let expect: f64 = (0..3)
                .map(|c| fg.data()[c * hw + j] - bg.data()[c * hw + j])
                .sum::<f64>()
                / 27.0;
            assert!((grad.data()[j] - expect).abs() < 1e-12);
        }

        // and the same path against finite differences
        let report = gradient_check(
            |g: &mut Graph<f64>, ids| {
                let f = g.constant(fg.clone());
                let b = g.constant(bg.clone());
                let ic = g.composite(f, b, ids[0])?;
                Ok(g.mean_all(ic))
            },
            &[m],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{:?}", report);
    }
}
