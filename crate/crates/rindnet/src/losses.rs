//! Training objectives.
//!
//! The edge loss weights each pixel by class balance (alpha1 = |E-|/|E|,
//! computed per map) and by a beta^(error^gamma1) attention factor; the
//! attention loss is a focal loss over the five-way per-pixel targets with
//! 255-tagged entries excluded; the total is the lambda-weighted sum.
//! Predictions are clamped to [1e-6, 1 - 1e-6] before logs. Reduction is a
//! sum over pixels (and planes), then a mean over the batch.

use candle_core::Tensor;

use crate::error::{Error, Result};

const CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct EdgeLossParams {
    pub beta: f64,
    pub gamma1: f64,
}

impl Default for EdgeLossParams {
    fn default() -> Self {
        EdgeLossParams {
            beta: 4.0,
            gamma1: 0.5,
        }
    }
}

impl EdgeLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 || self.gamma1 <= 0.0 {
            return Err(Error::Config("edge loss needs beta > 0 and gamma1 > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FocalLossParams {
    pub alpha2: f64,
    pub gamma2: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        FocalLossParams {
            alpha2: 0.5,
            gamma2: 2.0,
        }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha2) || self.gamma2 < 0.0 {
            return Err(Error::Config(
                "focal loss needs alpha2 in (0,1) and gamma2 >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn check_unit_range(y: &Tensor) -> Result<()> {
    let min: f64 = y.min_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
    let max: f64 = y.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
    if !(min.is_finite() && max.is_finite()) || min < 0.0 || max > 1.0 {
        return Err(Error::Numeric(format!(
            "predictions must lie in [0,1] before clamping, got range [{min}, {max}]"
        )));
    }
    Ok(())
}

fn as_maps(t: &Tensor) -> Result<Tensor> {
    // fold any leading dims so the result is [N, H, W] with one map per row
    match t.dims().len() {
        2 => Ok(t.unsqueeze(0)?),
        3 => Ok(t.clone()),
        4 => {
            let (b, k, h, w) = t.dims4()?;
            Ok(t.reshape((b * k, h, w))?)
        }
        n => Err(Error::Data(format!("expected 2/3/4-d tensor, got {n}-d"))),
    }
}

/// Per-map loss sums, one scalar per `[H, W]` map.
fn edge_loss_sums(y: &Tensor, e: &Tensor, p: &EdgeLossParams) -> Result<Tensor> {
    p.validate()?;
    check_unit_range(y)?;
    let y = y.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)?;
    let e = e.to_dtype(y.dtype())?;
    let (n, h, w) = y.dims3()?;
    let ln_beta = p.beta.ln();

    // alpha1 = |E-| / |E| computed independently per map
    let alpha1 = e
        .neg()?
        .affine(1.0, 1.0)?
        .mean_keepdim(2)?
        .mean_keepdim(1)?; // [N,1,1]

    let log_y = y.log()?;
    let log_1y = y.neg()?.affine(1.0, 1.0)?.log()?;
    let w_pos = y.neg()?.affine(1.0, 1.0)?.powf(p.gamma1)?.affine(ln_beta, 0.0)?.exp()?;
    let w_neg = y.powf(p.gamma1)?.affine(ln_beta, 0.0)?.exp()?;

    let pos = e.mul(&w_pos)?.mul(&log_y)?.broadcast_mul(&alpha1)?;
    let neg = e
        .neg()?
        .affine(1.0, 1.0)?
        .mul(&w_neg)?
        .mul(&log_1y)?
        .broadcast_mul(&alpha1.neg()?.affine(1.0, 1.0)?)?;

    let per_map = (pos + neg)?.reshape((n, h * w))?.sum(1)?.neg()?;
    Ok(per_map)
}

/// Class-balanced attention edge loss for one prediction/label plane.
/// Accepts `[H, W]` or `[B, H, W]`; sum over pixels, mean over the batch.
pub fn edge_loss_single(y: &Tensor, e: &Tensor, p: &EdgeLossParams) -> Result<Tensor> {
    if y.dims() != e.dims() {
        return Err(Error::Data(format!(
            "prediction {:?} and label {:?} shapes differ",
            y.dims(),
            e.dims()
        )));
    }
    let sums = edge_loss_sums(&as_maps(y)?, &as_maps(e)?, p)?;
    Ok(sums.mean(0)?)
}

/// Four-plane edge loss: the per-plane losses summed, with alpha1 computed
/// independently per plane. Accepts `[4, H, W]` or `[B, 4, H, W]`.
pub fn edge_loss(y_set: &Tensor, e_set: &Tensor, p: &EdgeLossParams) -> Result<Tensor> {
    if y_set.dims() != e_set.dims() {
        return Err(Error::Data(format!(
            "prediction {:?} and label {:?} shapes differ",
            y_set.dims(),
            e_set.dims()
        )));
    }
    let (b, k) = match y_set.dims() {
        [k, _, _] => (1, *k),
        [b, k, _, _] => (*b, *k),
        d => return Err(Error::Data(format!("expected [K,H,W] or [B,K,H,W], got {d:?}"))),
    };
    let sums = edge_loss_sums(&as_maps(y_set)?, &as_maps(e_set)?, p)?; // [B*K]
    Ok(sums.reshape((b, k))?.sum(1)?.mean(0)?)
}

/// Focal loss over attention maps against {0, 1, 255} targets; 255 entries
/// are excluded from the sum. `a` must be softmax-normalized across channels
/// (checked, tolerance 1e-3). Accepts `[K, H, W]` or `[B, K, H, W]`.
pub fn focal_attention_loss(a: &Tensor, t: &Tensor, p: &FocalLossParams) -> Result<Tensor> {
    p.validate()?;
    if a.dims() != t.dims() {
        return Err(Error::Data(format!(
            "attention {:?} and target {:?} shapes differ",
            a.dims(),
            t.dims()
        )));
    }
    let (a4, t4) = match a.dims().len() {
        3 => (a.unsqueeze(0)?, t.unsqueeze(0)?),
        4 => (a.clone(), t.clone()),
        n => return Err(Error::Data(format!("expected 3/4-d attention, got {n}-d"))),
    };
    let sums = a4.sum(1)?; // [B,H,W]
    let dev: f64 = sums
        .affine(1.0, -1.0)?
        .abs()?
        .max_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar()?;
    if dev > 1e-3 {
        return Err(Error::Numeric(format!(
            "attention maps are not normalized: channel sums deviate by {dev:.2e}"
        )));
    }

    let t4 = t4.to_dtype(a4.dtype())?;
    let mask = t4.le(1.5)?.to_dtype(a4.dtype())?;
    let t01 = t4.mul(&mask)?;
    let ac = a4.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)?;

    let log_a = ac.log()?;
    let log_1a = ac.neg()?.affine(1.0, 1.0)?.log()?;
    let pos = t01
        .mul(&ac.neg()?.affine(1.0, 1.0)?.powf(p.gamma2)?)?
        .mul(&log_a)?
        .affine(p.alpha2, 0.0)?;
    let neg = t01
        .neg()?
        .affine(1.0, 1.0)?
        .mul(&ac.powf(p.gamma2)?)?
        .mul(&log_1a)?
        .affine(1.0 - p.alpha2, 0.0)?;

    let (b, k, h, w) = a4.dims4()?;
    let per_sample = (pos + neg)?
        .mul(&mask)?
        .reshape((b, k * h * w))?
        .sum(1)?
        .neg()?;
    Ok(per_sample.mean(0)?)
}

/// Total objective: `lambda * L_e + (1 - lambda) * L_att`.
pub fn total_loss(l_e: &Tensor, l_att: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_e.affine(lambda, 0.0)? + l_att.affine(1.0 - lambda, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn hand_evaluated_two_pixel_case() {
        // E=[1,0], Y=[0.5,0.5], beta=4, gamma1=0.5:
        // alpha1 = 1/2, both terms 0.5 * 4^(0.5^0.5) * (-ln 0.5) = 0.923656
        let y = Tensor::from_slice(&[0.5f64, 0.5], (1, 2), &dev()).unwrap();
        let e = Tensor::from_slice(&[1.0f64, 0.0], (1, 2), &dev()).unwrap();
        let loss = scalar(&edge_loss_single(&y, &e, &EdgeLossParams::default()).unwrap());
        assert!((loss - 1.84731).abs() < 1e-4, "loss {loss}");
    }

    #[test]
    fn near_perfect_prediction_is_near_zero() {
        let y = Tensor::from_slice(&[1.0 - 1e-6f64, 1e-6], (1, 2), &dev()).unwrap();
        let e = Tensor::from_slice(&[1.0f64, 0.0], (1, 2), &dev()).unwrap();
        let loss = scalar(&edge_loss_single(&y, &e, &EdgeLossParams::default()).unwrap());
        assert!(loss < 1e-5, "loss {loss}");
    }

    #[test]
    fn all_edge_map_zeroes_alpha1_and_loss() {
        let y = Tensor::from_slice(&[0.3f64, 0.9, 0.5, 0.1], (2, 2), &dev()).unwrap();
        let e = Tensor::ones((2, 2), DType::F64, &dev()).unwrap();
        let loss = scalar(&edge_loss_single(&y, &e, &EdgeLossParams::default()).unwrap());
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn four_identical_planes_quadruple_the_single_loss() {
        let y1 = Tensor::from_slice(&[0.5f64, 0.5], (1, 2), &dev()).unwrap();
        let e1 = Tensor::from_slice(&[1.0f64, 0.0], (1, 2), &dev()).unwrap();
        let single = scalar(&edge_loss_single(&y1, &e1, &EdgeLossParams::default()).unwrap());
        let y4 = Tensor::stack(&[&y1, &y1, &y1, &y1], 0).unwrap();
        let e4 = Tensor::stack(&[&e1, &e1, &e1, &e1], 0).unwrap();
        let total = scalar(&edge_loss(&y4, &e4, &EdgeLossParams::default()).unwrap());
        assert!((total - 4.0 * single).abs() < 1e-9, "{total} vs {}", 4.0 * single);
    }

    #[test]
    fn one_perfect_plane_leaves_sum_of_others() {
        let y_half = Tensor::from_slice(&[0.5f64, 0.5], (1, 2), &dev()).unwrap();
        let e1 = Tensor::from_slice(&[1.0f64, 0.0], (1, 2), &dev()).unwrap();
        let y_perfect = Tensor::from_slice(&[1.0 - 1e-6f64, 1e-6], (1, 2), &dev()).unwrap();
        let single = scalar(&edge_loss_single(&y_half, &e1, &EdgeLossParams::default()).unwrap());
        let y4 = Tensor::stack(&[&y_perfect, &y_half, &y_half, &y_half], 0).unwrap();
        let e4 = Tensor::stack(&[&e1, &e1, &e1, &e1], 0).unwrap();
        let total = scalar(&edge_loss(&y4, &e4, &EdgeLossParams::default()).unwrap());
        assert!((total - 3.0 * single).abs() < 1e-4, "{total} vs {}", 3.0 * single);
    }

    #[test]
    fn perturbing_one_plane_only_moves_that_plane() {
        let mut vals = vec![0.3f64, 0.7, 0.6, 0.2];
        let e = Tensor::from_slice(&[1.0f64, 0.0, 1.0, 0.0], (4, 1, 1), &dev()).unwrap();
        let y = Tensor::from_slice(&vals, (4, 1, 1), &dev()).unwrap();
        let base = scalar(&edge_loss(&y, &e, &EdgeLossParams::default()).unwrap());
        let base_r = scalar(
            &edge_loss_single(
                &y.narrow(0, 0, 1).unwrap().squeeze(0).unwrap(),
                &e.narrow(0, 0, 1).unwrap().squeeze(0).unwrap(),
                &EdgeLossParams::default(),
            )
            .unwrap(),
        );
        vals[0] = 0.8;
        let y2 = Tensor::from_slice(&vals, (4, 1, 1), &dev()).unwrap();
        let moved = scalar(&edge_loss(&y2, &e, &EdgeLossParams::default()).unwrap());
        let moved_r = scalar(
            &edge_loss_single(
                &y2.narrow(0, 0, 1).unwrap().squeeze(0).unwrap(),
                &e.narrow(0, 0, 1).unwrap().squeeze(0).unwrap(),
                &EdgeLossParams::default(),
            )
            .unwrap(),
        );
        assert!(((moved - base) - (moved_r - base_r)).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_prediction_is_an_argument_error() {
        let y = Tensor::from_slice(&[1.2f64, 0.5], (1, 2), &dev()).unwrap();
        let e = Tensor::from_slice(&[1.0f64, 0.0], (1, 2), &dev()).unwrap();
        let err = edge_loss_single(&y, &e, &EdgeLossParams::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn focal_scalar_entry_matches_hand_value() {
        // T=1, A=0.9: 0.5 * 0.01 * (-ln 0.9) = 5.26803e-4. Fill the other
        // channels so the softmax-sum contract holds, ignoring them via 255.
        let a = Tensor::from_slice(&[0.9f64, 0.05, 0.05], (3, 1, 1), &dev()).unwrap();
        let t = Tensor::from_slice(&[1.0f64, 255.0, 255.0], (3, 1, 1), &dev()).unwrap();
        let loss = scalar(&focal_attention_loss(&a, &t, &FocalLossParams::default()).unwrap());
        assert!((loss - 5.268e-4).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn confident_correct_prediction_vanishes() {
        let a = Tensor::from_slice(&[1.0f64 - 1e-9, 1e-9], (2, 1, 1), &dev()).unwrap();
        let t = Tensor::from_slice(&[1.0f64, 0.0], (2, 1, 1), &dev()).unwrap();
        let loss = scalar(&focal_attention_loss(&a, &t, &FocalLossParams::default()).unwrap());
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn all_ignored_target_gives_zero_loss() {
        let a = Tensor::from_slice(&[0.2f64, 0.8], (2, 1, 1), &dev()).unwrap();
        let t = Tensor::full(255.0f64, (2, 1, 1), &dev()).unwrap();
        let loss = scalar(&focal_attention_loss(&a, &t, &FocalLossParams::default()).unwrap());
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn masked_entries_do_not_affect_the_loss() {
        // pixel 1 is ignored in both channels; changing only its attention
        // values (keeping them normalized) must not move the loss
        let a1 = Tensor::from_slice(&[0.6f64, 0.3, 0.4, 0.7], (2, 1, 2), &dev()).unwrap();
        let a2 = Tensor::from_slice(&[0.6f64, 0.9, 0.4, 0.1], (2, 1, 2), &dev()).unwrap();
        let t = Tensor::from_slice(&[1.0f64, 255.0, 0.0, 255.0], (2, 1, 2), &dev()).unwrap();
        let l1 = scalar(&focal_attention_loss(&a1, &t, &FocalLossParams::default()).unwrap());
        let l2 = scalar(&focal_attention_loss(&a2, &t, &FocalLossParams::default()).unwrap());
        assert_eq!(l1, l2);
    }

    #[test]
    fn unnormalized_attention_is_rejected() {
        let a = Tensor::from_slice(&[0.9f64, 0.9], (2, 1, 1), &dev()).unwrap();
        let t = Tensor::from_slice(&[1.0f64, 0.0], (2, 1, 1), &dev()).unwrap();
        let err = focal_attention_loss(&a, &t, &FocalLossParams::default()).unwrap_err();
        assert!(err.to_string().contains("not normalized"), "{err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let le = Tensor::full(2.0f64, (), &dev()).unwrap();
        let la = Tensor::full(1.0f64, (), &dev()).unwrap();
        assert!((scalar(&total_loss(&le, &la, 0.1).unwrap()) - 1.1).abs() < 1e-12);
        assert!((scalar(&total_loss(&le, &la, 1.0).unwrap()) - 2.0).abs() < 1e-12);
        assert!((scalar(&total_loss(&le, &la, 0.0).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative_on_random_input() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..5 {
            let yv: Vec<f64> = (0..64).map(|_| next().clamp(1e-4, 1.0 - 1e-4)).collect();
            let ev: Vec<f64> = (0..64).map(|_| f64::from(next() > 0.5)).collect();
            let y = Tensor::from_vec(yv, (4, 4, 4), &dev()).unwrap();
            let e = Tensor::from_vec(ev, (4, 4, 4), &dev()).unwrap();
            assert!(scalar(&edge_loss(&y, &e, &EdgeLossParams::default()).unwrap()) >= 0.0);
        }
    }

    #[test]
    fn truth_beats_uniform_prediction() {
        let e = Tensor::from_slice(&[1.0f64, 0.0, 0.0, 1.0, 0.0, 0.0], (1, 6), &dev()).unwrap();
        let truth = e.clamp(1e-6, 1.0 - 1e-6).unwrap();
        let uniform = Tensor::full(0.5f64, (1, 6), &dev()).unwrap();
        let p = EdgeLossParams::default();
        let lt = scalar(&edge_loss_single(&truth, &e, &p).unwrap());
        let lu = scalar(&edge_loss_single(&uniform, &e, &p).unwrap());
        assert!(lt < lu, "{lt} !< {lu}");
    }

    /// Central finite differences on a scalar-valued closure over flat f64
    /// data.
    fn finite_diff(
        data: &[f64],
        shape: (usize, usize, usize),
        f: &dyn Fn(&Tensor) -> f64,
    ) -> Vec<f64> {
        let h = 1e-4;
        let mut grads = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let mut plus = data.to_vec();
            plus[i] += h;
            let mut minus = data.to_vec();
            minus[i] -= h;
            let tp = Tensor::from_vec(plus, shape, &dev()).unwrap();
            let tm = Tensor::from_vec(minus, shape, &dev()).unwrap();
            grads.push((f(&tp) - f(&tm)) / (2.0 * h));
        }
        grads
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let denom = a.abs().max(n.abs()).max(1e-8);
                (a - n).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn edge_loss_gradient_matches_finite_differences() {
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let shape = (4, 8, 8);
        let yv: Vec<f64> = (0..256).map(|_| 0.05 + 0.9 * next()).collect();
        let ev: Vec<f64> = (0..256).map(|_| f64::from(next() > 0.7)).collect();
        let e = Tensor::from_vec(ev, shape, &dev()).unwrap();
        let p = EdgeLossParams::default();

        let y_var = Var::from_tensor(&Tensor::from_vec(yv.clone(), shape, &dev()).unwrap()).unwrap();
        let loss = edge_loss(y_var.as_tensor(), &e, &p).unwrap();
        let grads = loss.backward().unwrap();
        let analytic: Vec<f64> = grads
            .get(y_var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();

        let f = |y: &Tensor| scalar(&edge_loss(y, &e, &p).unwrap());
        let numeric = finite_diff(&yv, shape, &f);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let (k, h, w) = (5, 8, 8);
        // softmax-normalized maps built by hand
        let mut av = vec![0.0f64; k * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut logits: Vec<f64> = (0..k).map(|_| next() * 2.0 - 1.0).collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (*l - m).exp()).sum();
                for (c, l) in logits.iter_mut().enumerate() {
                    av[c * h * w + y * w + x] = (*l - m).exp() / z;
                }
            }
        }
        let tv: Vec<f64> = (0..k * h * w)
            .map(|i| {
                let r = next();
                if r < 0.1 {
                    255.0
                } else {
                    f64::from(i % 7 == 0)
                }
            })
            .collect();
        let t = Tensor::from_vec(tv, (k, h, w), &dev()).unwrap();
        let p = FocalLossParams::default();

        let a_var = Var::from_tensor(&Tensor::from_vec(av.clone(), (k, h, w), &dev()).unwrap()).unwrap();
        let loss = focal_attention_loss(a_var.as_tensor(), &t, &p).unwrap();
        let grads = loss.backward().unwrap();
        let analytic: Vec<f64> = grads
            .get(a_var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();

        let f = |a: &Tensor| scalar(&focal_attention_loss(a, &t, &p).unwrap());
        let numeric = finite_diff(&av, (k, h, w), &f);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
