//! Adaptive threshold loss: pixel BCE on the probability map plus two dice
//! terms, one against the map binarized softly at the dataset threshold and
//! one at the image threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::BBox;
use crate::tensor::{Tape, Var};
use crate::threshold::step;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Pixel-averaged binary cross-entropy.
pub fn scel(tape: &mut Tape, m: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "scel", m, gt)?;
    let mc = tape.clamp(m, EPS, 1.0 - EPS);
    let log_m = tape.log(mc)?;
    let one_minus = tape.rsub_scalar(1.0, mc);
    let log_1m = tape.log(one_minus)?;
    let gt_1m = tape.rsub_scalar(1.0, gt);
    let pos = tape.mul(gt, log_m)?;
    let neg = tape.mul(gt_1m, log_1m)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean_all(total);
    Ok(tape.neg(mean))
}

/// `1 − 2·Σxy / (Σx + Σy)` over the whole tensor.
pub fn dice(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, "dice", x, y)?;
    let denom_value: f64 = tape.value(x).data().iter().sum::<f64>() + tape.value(y).data().iter().sum::<f64>();
    if denom_value == 0.0 {
        return Err(Error::Degenerate {
            op: "dice",
            detail: "both inputs are all zero".into(),
        });
    }
    let xy = tape.mul(x, y)?;
    let inter = tape.sum_all(xy);
    let sx = tape.sum_all(x);
    let sy = tape.sum_all(y);
    let denom = tape.add(sx, sy)?;
    let ratio = tape.div(inter, denom)?;
    let scaled = tape.mul_scalar(ratio, 2.0);
    Ok(tape.rsub_scalar(1.0, scaled))
}

/// Dice computed separately for every item along axis 0; returns `[B]`.
pub fn dice_per_item(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, "dice", x, y)?;
    let shape = tape.shape(x).to_vec();
    if shape.is_empty() {
        return Err(Error::shape("dice_per_item", &shape, &[0]));
    }
    let per: usize = shape[1..].iter().product();
    let (xd, yd) = (tape.value(x).data(), tape.value(y).data());
    for b in 0..shape[0] {
        let r = b * per..(b + 1) * per;
        let s: f64 = xd[r.clone()].iter().sum::<f64>() + yd[r].iter().sum::<f64>();
        if s == 0.0 {
            return Err(Error::Degenerate {
                op: "dice",
                detail: format!("item {b}: both inputs are all zero"),
            });
        }
    }
    let axes: Vec<usize> = (1..shape.len()).collect();
    let xy = tape.mul(x, y)?;
    let inter = tape.sum(xy, &axes)?;
    let sx = tape.sum(x, &axes)?;
    let sy = tape.sum(y, &axes)?;
    let denom = tape.add(sx, sy)?;
    let ratio = tape.div(inter, denom)?;
    let scaled = tape.mul_scalar(ratio, 2.0);
    Ok(tape.rsub_scalar(1.0, scaled))
}

/// Loss for a single map with scalar thresholds `t_dth` and `t_ith`.
pub fn ath_loss(
    tape: &mut Tape,
    m: Var,
    gt: Var,
    t_dth: Var,
    t_ith: Var,
    w: LossWeights,
    k: f64,
) -> Result<Var> {
    w.validate()?;
    let mut loss = scel(tape, m, gt)?;
    for (weight, t) in [(w.alpha, t_dth), (w.beta, t_ith)] {
        if weight == 0.0 {
            continue;
        }
        let soft = step(tape, m, t, k)?;
        let d = dice(tape, soft, gt)?;
        let term = tape.mul_scalar(d, weight);
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Mean over the batch of per-image losses. `m` and `gt` are `[B×h×w]`,
/// `t_dth` is a single threshold and `t_ith` holds one threshold per image
/// (or a single shared one).
pub fn ath_loss_batch(
    tape: &mut Tape,
    m: Var,
    gt: Var,
    t_dth: Var,
    t_ith: Var,
    w: LossWeights,
    k: f64,
) -> Result<Var> {
    w.validate()?;
    // every image has the same pixel count, so the mean of per-image means is
    // the global mean
    let mut loss = scel(tape, m, gt)?;
    for (weight, t) in [(w.alpha, t_dth), (w.beta, t_ith)] {
        if weight == 0.0 {
            continue;
        }
        let soft = step(tape, m, t, k)?;
        let d = dice_per_item(tape, soft, gt)?;
        let d = tape.mean_all(d);
        let term = tape.mul_scalar(d, weight);
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Loss restricted to the bounding-box crop of one ground-truth instance on
/// an `[h×w]` map.
pub fn instance_ath_loss(
    tape: &mut Tape,
    m: Var,
    gt: Var,
    bbox: BBox,
    t_dth: Var,
    t_ith: Var,
    w: LossWeights,
    k: f64,
) -> Result<Var> {
    same_shape(tape, "instance_ath_loss", m, gt)?;
    let shape = tape.shape(m).to_vec();
    if shape.len() != 2 || bbox.y1 > shape[0] || bbox.x1 > shape[1] || bbox.is_empty() {
        return Err(Error::Contract(format!(
            "bbox {bbox:?} does not fit a map of shape {shape:?}"
        )));
    }
    let crop = |tape: &mut Tape, v: Var| -> Result<Var> {
        let rows = tape.slice(v, 0, bbox.y0, bbox.y1 - bbox.y0)?;
        tape.slice(rows, 1, bbox.x0, bbox.x1 - bbox.x0)
    };
    let mc = crop(tape, m)?;
    let gc = crop(tape, gt)?;
    ath_loss(tape, mc, gc, t_dth, t_ith, w, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::threshold::DEFAULT_STEEPNESS as K;

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn scel_known_values() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full([4], 0.5));
        let gt = tape.constant(Tensor::from_vec(vec![1., 0., 1., 1.]));
        let l = scel(&mut tape, m, gt).unwrap();
        assert!((val(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let m = tape.constant(Tensor::from_vec(vec![0.9, 0.1]));
        let gt = tape.constant(Tensor::from_vec(vec![1., 0.]));
        let l = scel(&mut tape, m, gt).unwrap();
        assert!((val(&tape, l) - 0.105361).abs() < 1e-5);

        let m = tape.constant(Tensor::from_vec(vec![1., 0., 1.]));
        let gt = tape.constant(Tensor::from_vec(vec![1., 0., 1.]));
        let l = scel(&mut tape, m, gt).unwrap();
        assert!(val(&tape, l) <= 1e-6);
    }

    #[test]
    fn scel_shape_mismatch() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full([4], 0.5));
        let gt = tape.constant(Tensor::full([2, 2], 1.0));
        assert!(matches!(scel(&mut tape, m, gt), Err(Error::Shape { .. })));
    }

    #[test]
    fn dice_known_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1., 1., 0., 0.]));
        let y = tape.constant(Tensor::from_vec(vec![0., 1., 1., 0.]));
        let d = dice(&mut tape, x, y).unwrap();
        assert_eq!(val(&tape, d), 0.5);
        let d = dice(&mut tape, x, x).unwrap();
        assert_eq!(val(&tape, d), 0.0);

        let soft = tape.constant(Tensor::full([100], EPS));
        let ones = tape.constant(Tensor::full([100], 1.0));
        let d = dice(&mut tape, soft, ones).unwrap();
        assert!(val(&tape, d) > 1.0 - 1e-6);
    }

    #[test]
    fn dice_degenerate_inputs() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(dice(&mut tape, z, z), Err(Error::Degenerate { .. })));
        let a = tape.constant(Tensor::new([2, 2], vec![1., 0., 0., 0.]).unwrap());
        assert!(matches!(dice_per_item(&mut tape, a, a), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn dice_per_item_matches_dice() {
        let mut tape = Tape::new();
        let xs = Tensor::from_fn([3, 2, 2], |i| ((i * 7) % 5) as f64 / 4.0);
        let ys = Tensor::from_fn([3, 2, 2], |i| ((i * 3) % 2) as f64);
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let per = dice_per_item(&mut tape, x, y).unwrap();
        let per = tape.value(per).data().to_vec();
        for b in 0..3 {
            let xb = tape.constant(Tensor::from_vec(xs.data()[b * 4..b * 4 + 4].to_vec()));
            let yb = tape.constant(Tensor::from_vec(ys.data()[b * 4..b * 4 + 4].to_vec()));
            let d = dice(&mut tape, xb, yb).unwrap();
            assert!((val(&tape, d) - per[b]).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_has_small_loss() {
        let mut tape = Tape::new();
        let gt_t = Tensor::from_fn([8, 8], |i| ((i / 8 >= 2 && i / 8 < 6) && (i % 8 >= 1)) as u8 as f64);
        let m_t = Tensor::from_fn([8, 8], |i| {
            if gt_t.data()[i] > 0.5 {
                1.0 - EPS
            } else {
                EPS
            }
        });
        let m = tape.constant(m_t);
        let gt = tape.constant(gt_t);
        let half = tape.scalar(0.5);
        let l = ath_loss(&mut tape, m, gt, half, half, LossWeights::default(), K).unwrap();
        assert!(val(&tape, l) <= 0.01);
    }

    #[test]
    fn zero_weights_reduce_to_scel_exactly() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_fn([4, 4], |i| (i as f64 + 0.5) / 16.0));
        let gt = tape.constant(Tensor::from_fn([4, 4], |i| (i % 3 == 0) as u8 as f64));
        let t = tape.scalar(0.4);
        let w = LossWeights { alpha: 0.0, beta: 0.0 };
        let l = ath_loss(&mut tape, m, gt, t, t, w, K).unwrap();
        let s = scel(&mut tape, m, gt).unwrap();
        assert_eq!(val(&tape, l).to_bits(), val(&tape, s).to_bits());
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { alpha: -0.1, beta: 0.5 };
        assert!(w.validate().is_err());
    }

    #[test]
    fn instance_crop_equals_manual_crop() {
        let mut tape = Tape::new();
        let mt = Tensor::from_fn([6, 6], |i| (i as f64 + 1.0) / 40.0);
        let gt_t = Tensor::from_fn([6, 6], |i| (i / 6 >= 2 && i / 6 < 4 && i % 6 >= 1 && i % 6 < 5) as u8 as f64);
        let m = tape.constant(mt.clone());
        let gt = tape.constant(gt_t.clone());
        let t = tape.scalar(0.5);
        let bbox = BBox { y0: 1, x0: 0, y1: 5, x1: 6 };
        let l = instance_ath_loss(&mut tape, m, gt, bbox, t, t, LossWeights::default(), K).unwrap();

        let mc = tape.constant(Tensor::new([4, 6], mt.data()[6..30].to_vec()).unwrap());
        let gc = tape.constant(Tensor::new([4, 6], gt_t.data()[6..30].to_vec()).unwrap());
        let l2 = ath_loss(&mut tape, mc, gc, t, t, LossWeights::default(), K).unwrap();
        assert_eq!(val(&tape, l), val(&tape, l2));

        let bad = BBox { y0: 0, x0: 0, y1: 7, x1: 2 };
        assert!(instance_ath_loss(&mut tape, m, gt, bad, t, t, LossWeights::default(), K).is_err());
    }
}
