//! Global-information enhancement block.
//!
//! The coarsest feature map is flattened into a sequence of `h·w` pixel
//! tokens, the threshold token is prepended, and the sequence passes through
//! `N` pre-norm transformer layers. Positional information comes from a
//! depthwise 3×3 convolution over the pixel part of the value tensor only;
//! the threshold token has no spatial position and gets no positional term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, uniform_init, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeConfig {
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub ffn_ratio: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GeConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 4,
            repeats: 2,
            ffn_ratio: 4,
            height: 16,
            width: 16,
        }
    }
}

impl GeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.repeats == 0 {
            return bad("GE repeats must be at least 1".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("GE spatial dims must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width + 1
    }
}

/// Parameters of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GeLayer {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub lepe_k: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeBlock {
    pub cfg: GeConfig,
    pub layers: Vec<GeLayer>,
}

pub struct GeOutput {
    /// Enhanced features, `[B×C×h×w]`.
    pub o5: Var,
    /// Threshold token embedding per image, `[B×C]`.
    pub t_out: Var,
    /// Attention weights of every layer, `[B·heads × L × L]`.
    pub attention: Vec<Var>,
}

impl GeBlock {
    pub fn register(store: &mut ParamStore, cfg: GeConfig, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c * cfg.ffn_ratio;
        let bc = 1.0 / (c as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let layers = (0..cfg.repeats)
            .map(|i| {
                let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{i}.{name}"), t);
                GeLayer {
                    ln1_g: add("ln1_g", Tensor::full([c], 1.0)),
                    ln1_b: add("ln1_b", Tensor::zeros([c])),
                    qkv_w: add("qkv_w", uniform_init(&[c, 3 * c], bc, rng)),
                    qkv_b: add("qkv_b", Tensor::zeros([3 * c])),
                    lepe_k: add("lepe_k", uniform_init(&[c, 1, 3, 3], 1.0 / 3.0, rng)),
                    proj_w: add("proj_w", uniform_init(&[c, c], bc, rng)),
                    proj_b: add("proj_b", Tensor::zeros([c])),
                    ln2_g: add("ln2_g", Tensor::full([c], 1.0)),
                    ln2_b: add("ln2_b", Tensor::zeros([c])),
                    ffn_w1: add("ffn_w1", uniform_init(&[c, hidden], bc, rng)),
                    ffn_b1: add("ffn_b1", Tensor::zeros([hidden])),
                    ffn_w2: add("ffn_w2", uniform_init(&[hidden, c], bh, rng)),
                    ffn_b2: add("ffn_b2", Tensor::zeros([c])),
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    /// Runs the block on `c5[B×C×h×w]` with threshold token `t_in[C]`.
    ///
    /// `key_bias` (length `h·w+1`) is added to every attention logit column;
    /// a large negative entry hides that key from all queries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        c5: Var,
        t_in: Var,
        key_bias: Option<&[f64]>,
    ) -> Result<GeOutput> {
        let cfg = self.cfg;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let s = tape.shape(c5).to_vec();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("ge_forward", &s, &[0, c, h, w]));
        }
        if tape.value(t_in).numel() != c {
            return Err(Error::shape("ge_forward token", tape.shape(t_in), &[c]));
        }
        let b = s[0];
        let hw = h * w;
        let flat = tape.reshape(c5, &[b, c, hw])?;
        let pix = tape.permute(flat, &[0, 2, 1])?;
        let tok = tape.reshape(t_in, &[1, 1, c])?;
        let toks = vec![tok; b];
        let tok = tape.concat(&toks, 0)?;
        let mut seq = tape.concat(&[tok, pix], 1)?;

        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n1 = tape.layernorm(seq, bound[layer.ln1_g], bound[layer.ln1_b], 2)?;
            let (a, weights) = mhsa(tape, bound, layer, n1, &cfg, key_bias)?;
            attention.push(weights);
            seq = tape.add(seq, a)?;
            let n2 = tape.layernorm(seq, bound[layer.ln2_g], bound[layer.ln2_b], 2)?;
            let f = ffn(
                tape,
                n2,
                [
                    bound[layer.ffn_w1],
                    bound[layer.ffn_b1],
                    bound[layer.ffn_w2],
                    bound[layer.ffn_b2],
                ],
            )?;
            seq = tape.add(seq, f)?;
        }

        let parts = tape.split(seq, &[1, hw], 1)?;
        let t_out = tape.reshape(parts[0], &[b, c])?;
        let o5 = tape.permute(parts[1], &[0, 2, 1])?;
        let o5 = tape.reshape(o5, &[b, c, h, w])?;
        Ok(GeOutput { o5, t_out, attention })
    }
}

/// `[B×L×C]` → `[B·heads×L×d]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d = s[2] / heads;
    let r = tape.reshape(x, &[s[0], s[1], heads, d])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0] * heads, s[1], d])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[batch, heads, s[1], s[2]])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch, s[1], heads * s[2]])
}

/// Multi-head self-attention with the masked positional term. Returns the
/// projected output `[B×L×C]` and the attention weights `[B·heads×L×L]`.
pub fn mhsa(
    tape: &mut Tape,
    bound: &Bound,
    layer: &GeLayer,
    x: Var,
    cfg: &GeConfig,
    key_bias: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let c = cfg.channels;
    if s.len() != 3 || s[1] != cfg.seq_len() || s[2] != c {
        return Err(Error::shape("mhsa", &s, &[0, cfg.seq_len(), c]));
    }
    let b = s[0];
    let qkv = linear(tape, x, bound[layer.qkv_w], bound[layer.qkv_b])?;
    let q = tape.slice(qkv, 2, 0, c)?;
    let k = tape.slice(qkv, 2, c, c)?;
    let v = tape.slice(qkv, 2, 2 * c, c)?;

    let qh = split_heads(tape, q, cfg.heads)?;
    let kh = split_heads(tape, k, cfg.heads)?;
    let vh = split_heads(tape, v, cfg.heads)?;
    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scores = tape.matmul(qh, kt)?;
    let mut scores = tape.mul_scalar(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
    if let Some(bias) = key_bias {
        if bias.len() != cfg.seq_len() {
            return Err(Error::shape("mhsa key bias", &[bias.len()], &[cfg.seq_len()]));
        }
        let bv = tape.constant(Tensor::from_vec(bias.to_vec()));
        scores = tape.axis_add(scores, bv, 2)?;
    }
    let weights = tape.softmax(scores, 2)?;
    let heads_out = tape.matmul(weights, vh)?;
    let merged = merge_heads(tape, heads_out, b, cfg.heads)?;
    let pos = masked_lepe(tape, v, bound[layer.lepe_k], cfg.height, cfg.width)?;
    let with_pos = tape.add(merged, pos)?;
    let out = linear(tape, with_pos, bound[layer.proj_w], bound[layer.proj_b])?;
    Ok((out, weights))
}

/// Positional term for `v[B×(hw+1)×C]`: a depthwise convolution with
/// `kernel[C×1×3×3]` over the pixel rows reshaped to `h×w`. The token row
/// (index 0) is excluded from the convolution and receives zero.
pub fn masked_lepe(tape: &mut Tape, v: Var, kernel: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 || s[1] != h * w + 1 {
        return Err(Error::shape("masked_lepe", &s, &[0, h * w + 1, 0]));
    }
    let (b, c) = (s[0], s[2]);
    let pix = tape.slice(v, 1, 1, h * w)?;
    let pix = tape.permute(pix, &[0, 2, 1])?;
    let img = tape.reshape(pix, &[b, c, h, w])?;
    let conv = tape.conv2d(img, kernel, None, 1, 1, c)?;
    let flat = tape.reshape(conv, &[b, c, h * w])?;
    let rows = tape.permute(flat, &[0, 2, 1])?;
    let zero = tape.constant(Tensor::zeros([b, 1, c]));
    tape.concat(&[zero, rows], 1)
}

/// Position-wise feed-forward network: linear, ReLU, linear.
/// `params` is `[w1, b1, w2, b2]`.
pub fn ffn(tape: &mut Tape, x: Var, params: [Var; 4]) -> Result<Var> {
    let [w1, b1, w2, b2] = params;
    let hidden = linear(tape, x, w1, b1)?;
    let act = tape.relu(hidden);
    linear(tape, act, w2, b2)
}

/// Key bias that hides the threshold token from every query.
pub fn token_blind_bias(cfg: &GeConfig) -> Vec<f64> {
    let mut bias = vec![0.0; cfg.seq_len()];
    bias[0] = -1e9;
    bias
}
