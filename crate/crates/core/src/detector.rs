//! Toy text detector: a three-stage convolutional encoder, the GE block on
//! the coarsest features, and a per-pixel probability head, trained end to
//! end with the adaptive threshold loss on full-image maps.
//!
//! Logits are the sum of two terms: a 1×1 head on the enhanced coarse
//! features, bilinearly upsampled to the canvas, and a 3×3 lateral head on
//! the full-resolution first-stage features. Both heads start at zero, so an
//! untrained model predicts 0.5 everywhere.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::ge::{GeBlock, GeConfig};
use crate::loss::{ath_loss_batch, scel, LossWeights};
use crate::nn::{uniform_init, Adam, AdamConfig, Bound, ParamId, ParamStore};
use crate::par::{self, Execution};
use crate::postprocess::{extract_instances, TextInstance};
use crate::raster::ProbMap;
use crate::rng::{mix, seeded, Rng};
use crate::synth::Scene;
use crate::tensor::{Tape, Tensor, Var};
use crate::threshold::{binarize, ThresholdParams, DEFAULT_STEEPNESS};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Which threshold machinery a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cross-entropy only, binarized at a fixed 0.5.
    Baseline,
    /// Learned dataset threshold; the image threshold is tied to it.
    Dth,
    /// Dataset plus image thresholds, with the token embedding taken from
    /// pooled encoder features instead of the GE block.
    DthIth,
    /// Dataset and image thresholds with the GE block.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Dth, Variant::DthIth, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dth => "dth",
            Variant::DthIth => "dth-ith",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline (fixed 0.5)",
            Variant::Dth => "DTH",
            Variant::DthIth => "DTH + ITH",
            Variant::Full => "DTH + ITH + GE",
        }
    }

    pub fn uses_ge(self) -> bool {
        self == Variant::Full
    }

    pub fn uses_ith(self) -> bool {
        matches!(self, Variant::DthIth | Variant::Full)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}; expected baseline, dth, dth-ith or full")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the three encoder stages; the last two stride 2.
    pub widths: [usize; 3],
    pub ge: GeConfig,
    pub variant: Variant,
    pub loss: LossWeights,
    pub k: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::for_canvas(128, 128)
    }
}

impl DetectorConfig {
    pub fn for_canvas(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            widths: [8, 16, 16],
            ge: GeConfig {
                height: height / 4,
                width: width / 4,
                ..GeConfig::default()
            },
            variant: Variant::Full,
            loss: LossWeights::default(),
            k: DEFAULT_STEEPNESS,
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            min_area: crate::postprocess::DEFAULT_MIN_AREA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return fail(format!("canvas {}x{} must be a positive multiple of 4", self.height, self.width));
        }
        if self.widths.contains(&0) {
            return fail("encoder widths must be positive".into());
        }
        if self.widths[2] != self.ge.channels {
            return fail(format!(
                "encoder output width {} must equal GE channels {}",
                self.widths[2], self.ge.channels
            ));
        }
        if self.ge.height != self.height / 4 || self.ge.width != self.width / 4 {
            return fail(format!(
                "GE grid {}x{} must be the canvas divided by 4",
                self.ge.height, self.ge.width
            ));
        }
        self.ge.validate()?;
        self.loss.validate()?;
        if !(self.k > 0.0 && self.k.is_finite()) {
            return fail(format!("steepness k must be positive, got {}", self.k));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.min_area == 0 {
            return fail("min_area must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn register(store: &mut ParamStore, name: &str, shape: [usize; 4], rng: &mut Rng, zero: bool) -> Self {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let w = if zero {
            Tensor::zeros(shape.to_vec())
        } else {
            uniform_init(&shape, (6.0 / fan_in).sqrt(), rng)
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros([shape[0]])),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var, stride: usize, padding: usize) -> Result<Var> {
        tape.conv2d(x, bound[self.w], Some(bound[self.b]), stride, padding, 1)
    }
}

/// Outputs of a forward pass over a batch.
pub struct Forward {
    /// Probabilities `[B×H×W]`.
    pub prob: Var,
    pub t_dth: Var,
    /// One threshold per image `[B]`, or a single shared one.
    pub t_ith: Var,
}

/// A prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prob: ProbMap,
    pub t_dth: f64,
    pub t_ith: f64,
    /// Threshold the variant binarizes with.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub store: ParamStore,
    enc: [ConvParams; 3],
    lateral: ConvParams,
    head: ConvParams,
    pub threshold: ThresholdParams,
    ge: Option<GeBlock>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(mix(cfg.seed, 10));
        let mut store = ParamStore::new();
        let [w1, w2, w3] = cfg.widths;
        let enc = [
            ConvParams::register(&mut store, "enc1", [w1, 1, 3, 3], &mut rng, false),
            ConvParams::register(&mut store, "enc2", [w2, w1, 3, 3], &mut rng, false),
            ConvParams::register(&mut store, "enc3", [w3, w2, 3, 3], &mut rng, false),
        ];
        let threshold = ThresholdParams::register(&mut store, w3, cfg.k, &mut rng)?;
        let ge = if cfg.variant.uses_ge() {
            Some(GeBlock::register(&mut store, cfg.ge, "ge", &mut rng)?)
        } else {
            None
        };
        let head = ConvParams::register(&mut store, "head", [1, w3, 1, 1], &mut rng, true);
        let lateral = ConvParams::register(&mut store, "lateral", [1, w1, 3, 3], &mut rng, true);
        Ok(Self {
            cfg,
            store,
            enc,
            lateral,
            head,
            threshold,
            ge,
        })
    }

    pub fn dataset_threshold(&self) -> f64 {
        self.threshold.dataset_value(&self.store)
    }

    /// Forward pass over `input[B×1×H×W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Forward> {
        let cfg = &self.cfg;
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != cfg.height || s[3] != cfg.width {
            return Err(Error::Config(format!(
                "input of shape {s:?} does not match a {}x{} canvas",
                cfg.height, cfg.width
            )));
        }
        let b = s[0];
        let c1 = self.enc[0].apply(tape, bound, input, 1, 1)?;
        let c1 = tape.relu(c1);
        let c2 = self.enc[1].apply(tape, bound, c1, 2, 1)?;
        let c2 = tape.relu(c2);
        let c5 = self.enc[2].apply(tape, bound, c2, 2, 1)?;
        let c5 = tape.relu(c5);

        let token = bound[self.threshold.token];
        let (o5, t_out) = match &self.ge {
            Some(ge) => {
                let out = ge.forward(tape, bound, c5, token, None)?;
                (out.o5, Some(out.t_out))
            }
            None if cfg.variant.uses_ith() => {
                let pooled = tape.mean(c5, &[2, 3])?;
                let t_out = tape.axis_add(pooled, token, 1)?;
                (c5, Some(t_out))
            }
            None => (c5, None),
        };

        let coarse = self.head.apply(tape, bound, o5, 1, 0)?;
        let up = tape.upsample_bilinear(coarse, cfg.height, cfg.width)?;
        let local = self.lateral.apply(tape, bound, c1, 1, 1)?;
        let logits = tape.add(up, local)?;
        let logits = tape.reshape(logits, &[b, cfg.height, cfg.width])?;
        let prob = tape.sigmoid(logits);

        let (t_dth, t_ith) = match cfg.variant {
            Variant::Baseline => {
                let half = tape.scalar(0.5);
                (half, half)
            }
            Variant::Dth => {
                let t = self.threshold.dataset(tape, bound);
                (t, t)
            }
            Variant::DthIth | Variant::Full => {
                let t = self.threshold.dataset(tape, bound);
                let t_out = t_out.expect("variant produces a token embedding");
                (t, self.threshold.image(tape, bound, t_out)?)
            }
        };
        Ok(Forward { prob, t_dth, t_ith })
    }

    /// Training objective for a batch: cross-entropy only for the baseline,
    /// the full adaptive threshold loss otherwise.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, gt: Var) -> Result<Var> {
        match self.cfg.variant {
            Variant::Baseline => scel(tape, fwd.prob, gt),
            _ => ath_loss_batch(tape, fwd.prob, gt, fwd.t_dth, fwd.t_ith, self.cfg.loss, self.cfg.k),
        }
    }

    /// Probability maps and thresholds for `scenes`, batched and frozen.
    pub fn predict(&self, scenes: &[&Scene], exec: Execution) -> Result<Vec<Prediction>> {
        let bs = self.cfg.batch_size;
        let chunks: Vec<&[&Scene]> = scenes.chunks(bs).collect();
        let out = par::map(exec, &chunks, |chunk| self.predict_batch(chunk));
        let mut preds = Vec::with_capacity(scenes.len());
        for r in out {
            preds.extend(r?);
        }
        Ok(preds)
    }

    fn predict_batch(&self, scenes: &[&Scene]) -> Result<Vec<Prediction>> {
        let (input, _) = batch_tensors(scenes, &self.cfg)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(input);
        let fwd = self.forward(&mut tape, &bound, x)?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let probs = tape.value(fwd.prob).data();
        let t_dth = tape.value(fwd.t_dth).data()[0];
        let t_ith = tape.value(fwd.t_ith).data();
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t_i = if t_ith.len() == 1 { t_ith[0] } else { t_ith[i] };
                let threshold = match self.cfg.variant {
                    Variant::Baseline => 0.5,
                    Variant::Dth => t_dth,
                    _ => t_i,
                };
                let mut prob = ProbMap::new(h, w, probs[i * h * w..(i + 1) * h * w].to_vec())?;
                prob.provenance.scene = Some(s.spec.seed);
                Ok(Prediction {
                    prob,
                    t_dth,
                    t_ith: t_i,
                    threshold,
                })
            })
            .collect()
    }

    /// Detected instances for one scene.
    pub fn infer(&self, scene: &Scene) -> Result<Vec<TextInstance>> {
        let p = self.predict(&[scene], Execution::Sequential)?.remove(0);
        extract_instances(&binarize(&p.prob, p.threshold), &p.prob, self.cfg.min_area)
    }

    /// Mean batch loss over `scenes`, without gradients.
    pub fn mean_loss(&self, scenes: &[&Scene], exec: Execution) -> Result<Option<f64>> {
        if scenes.is_empty() {
            return Ok(None);
        }
        let chunks: Vec<&[&Scene]> = scenes.chunks(self.cfg.batch_size).collect();
        let losses = par::map(exec, &chunks, |chunk| -> Result<(f64, usize)> {
            let (input, gt) = batch_tensors(chunk, &self.cfg)?;
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, false);
            let x = tape.constant(input);
            let g = tape.constant(gt);
            let fwd = self.forward(&mut tape, &bound, x)?;
            let l = self.loss(&mut tape, &fwd, g)?;
            Ok((tape.value(l).data()[0] * chunk.len() as f64, chunk.len()))
        });
        let (mut total, mut n) = (0.0, 0);
        for r in losses {
            let (l, c) = r?;
            total += l;
            n += c;
        }
        Ok(Some(total / n as f64))
    }

    pub fn save(&self, dir: &Path, state: &TrainProgress) -> Result<()> {
        save_checkpoint(self, state, dir)
    }
}

/// Stacks scene inputs into `[B×1×H×W]` and gt foregrounds into `[B×H×W]`.
pub fn batch_tensors(scenes: &[&Scene], cfg: &DetectorConfig) -> Result<(Tensor, Tensor)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut input = Vec::with_capacity(scenes.len() * h * w);
    let mut gt = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if s.input.dims() != (h, w) {
            return Err(Error::Config(format!(
                "scene {} is {}x{}, model expects {h}x{w}",
                s.spec.seed, s.input.height, s.input.width
            )));
        }
        input.extend_from_slice(&s.input.data);
        gt.extend(s.foreground().as_f64());
    }
    let b = scenes.len();
    Ok((Tensor::new([b, 1, h, w], input)?, Tensor::new([b, h, w], gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent before training.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub t_dth: f64,
}

/// Everything besides the weights needed to describe a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub rng: Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub last: Detector,
    pub best: Detector,
    pub best_epoch: usize,
    pub progress: TrainProgress,
}

/// Trains a fresh detector on the train split of `corpus`, tracking the
/// validation loss after every epoch (index 0 is before the first update).
pub fn train(cfg: DetectorConfig, corpus: &Corpus, exec: Execution) -> Result<TrainOutcome> {
    let mut det = Detector::new(cfg)?;
    let train_set: Vec<&Scene> = corpus.split(Split::Train).iter().collect();
    let val_set: Vec<&Scene> = corpus.split(Split::Val).iter().collect();
    if train_set.is_empty() && det.cfg.epochs > 0 {
        return Err(Error::Config("corpus has no training scenes".into()));
    }
    let mut rng = seeded(mix(det.cfg.seed, 11));
    let mut opt = Adam::new(det.cfg.adam, &det.store);
    let val0 = det.mean_loss(&val_set, exec)?;
    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss: val0,
        t_dth: det.dataset_threshold(),
    }];
    let mut best = det.clone();
    let mut best_epoch = 0;
    let mut best_val = val0.unwrap_or(f64::INFINITY);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=det.cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(det.cfg.batch_size).enumerate() {
            let batch: Vec<&Scene> = idx.iter().map(|&i| train_set[i]).collect();
            let (input, gt) = batch_tensors(&batch, &det.cfg)?;
            let mut tape = Tape::new();
            let bound = det.store.bind(&mut tape, true);
            let x = tape.constant(input);
            let g = tape.constant(gt);
            let fwd = det.forward(&mut tape, &bound, x)?;
            let loss = det.loss(&mut tape, &fwd, g)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    loss: lv,
                    norms: det.store.norms_summary(),
                });
            }
            tape.backward(loss)?;
            opt.step(&mut det.store, &bound.grads(&tape));
            total += lv * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = det.mean_loss(&val_set, exec)?;
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {} t_dth {:.4}",
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
            det.dataset_threshold()
        );
        history.push(EpochLog {
            epoch,
            train_loss: Some(train_loss),
            val_loss,
            t_dth: det.dataset_threshold(),
        });
        if let Some(v) = val_loss {
            if v < best_val {
                best_val = v;
                best = det.clone();
                best_epoch = epoch;
            }
        } else {
            best = det.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        last: det,
        best,
        best_epoch,
        progress: TrainProgress {
            epoch: history.len() - 1,
            history,
            rng,
        },
    })
}
