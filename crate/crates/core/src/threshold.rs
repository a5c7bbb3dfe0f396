//! Two-level learnable segmentation thresholds.
//!
//! The dataset-level threshold is `sigmoid(t_d)` for a single trainable
//! logit. The image-level threshold shifts that logit by a linear readout of
//! the per-image token embedding: `sigmoid(t_d + ⟨w, t_out[b]⟩ + b)`.
//! Training sees thresholds through the smooth step
//! `1 / (1 + exp(−k(m − t)))`; inference binarizes with the strict test
//! `m > t`.

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Bound, ParamId, ParamStore};
use crate::raster::{BinaryMask, ProbMap};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Steepness of the smooth step used during training.
pub const DEFAULT_STEEPNESS: f64 = 50.0;

/// Trainable threshold parameters, registered in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdParams {
    /// Pre-sigmoid dataset threshold logit (scalar).
    pub t_d: ParamId,
    /// Threshold token fed to the attention block, length C.
    pub token: ParamId,
    /// Projection from the token embedding to a logit offset, length C.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub k: f64,
}

impl ThresholdParams {
    /// Registers `t_d = 0` (dataset threshold 0.5), and token / projection
    /// drawn from `U(±1/√C)`; the projection bias starts at zero.
    pub fn register(store: &mut ParamStore, channels: usize, k: f64, rng: &mut Rng) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("steepness k must be positive, got {k}")));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let t_d = store.add("threshold.t_d", Tensor::scalar(0.0));
        let token = store.add("threshold.token", uniform_init(&[channels], bound, rng));
        let proj_w = store.add("threshold.proj_w", uniform_init(&[channels], bound, rng));
        let proj_b = store.add("threshold.proj_b", Tensor::scalar(0.0));
        Ok(Self {
            t_d,
            token,
            proj_w,
            proj_b,
            k,
        })
    }

    pub fn dataset_value(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.t_d).data()[0])
    }

    pub fn dataset(&self, tape: &mut Tape, bound: &Bound) -> Var {
        dataset_threshold(tape, bound[self.t_d])
    }

    pub fn image(&self, tape: &mut Tape, bound: &Bound, t_out: Var) -> Result<Var> {
        image_threshold(
            tape,
            bound[self.t_d],
            bound[self.proj_w],
            bound[self.proj_b],
            t_out,
        )
    }
}

pub fn dataset_threshold(tape: &mut Tape, t_d: Var) -> Var {
    tape.sigmoid(t_d)
}

/// Per-image thresholds `[B]` from token embeddings `t_out[B×C]`.
pub fn image_threshold(tape: &mut Tape, t_d: Var, proj_w: Var, proj_b: Var, t_out: Var) -> Result<Var> {
    let s = tape.shape(t_out).to_vec();
    let c = tape.value(proj_w).numel();
    if s.len() != 2 || s[1] != c {
        return Err(Error::shape("image_threshold", &s, tape.shape(proj_w)));
    }
    let w = tape.reshape(proj_w, &[c, 1])?;
    let offset = tape.matmul(t_out, w)?;
    let offset = tape.reshape(offset, &[s[0]])?;
    let offset = tape.add(offset, proj_b)?;
    let logit = tape.add(offset, t_d)?;
    Ok(tape.sigmoid(logit))
}

/// Smooth binarization `1/(1+exp(−k(m−t)))`. `t` is a single threshold or one
/// per leading-axis item of `m`.
pub fn step(tape: &mut Tape, m: Var, t: Var, k: f64) -> Result<Var> {
    let tn = tape.value(t).numel();
    let diff = if tn == 1 {
        tape.sub(m, t)?
    } else {
        let neg = tape.neg(t);
        tape.axis_add(m, neg, 0)?
    };
    let scaled = tape.mul_scalar(diff, k);
    Ok(tape.sigmoid(scaled))
}

pub fn step_value(m: f64, t: f64, k: f64) -> f64 {
    sigmoid(k * (m - t))
}

/// Hard binarization: a pixel is foreground iff its probability is strictly
/// above `t`.
pub fn binarize(map: &ProbMap, t: f64) -> BinaryMask {
    BinaryMask {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|&v| v > t).collect(),
    }
}
