//! Finite-difference verification of every differentiable operation.
//!
//! Each case draws random inputs, reduces the operation's output to a scalar
//! with random weights, and compares the tape gradient of every input with a
//! fourth-order central difference
//! `(4·D(h) − D(2h)) / 3`, `D(h) = (f(x+h) − f(x−h)) / 2h`.
//! The error of a tensor is `max|analytic − numeric|` over the checked
//! elements divided by the largest gradient magnitude seen (floored at 1e-6).
//!
//! Piecewise-smooth cases use a much smaller step. An element whose two
//! stencils still disagree is sitting on a kink and is skipped; a case fails
//! if it skips more than 5% of the elements it checked.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig};
use crate::error::Result;
use crate::ge::{ffn, masked_lepe, GeBlock, GeConfig};
use crate::loss::{ath_loss, ath_loss_batch, dice, scel, LossWeights};
use crate::nn::{Bound, ParamStore};
use crate::par::{self, Execution};
use crate::rng::{mix, seeded, Rng};
use crate::tensor::{Reduction, Tape, Tensor, Var};
use crate::threshold::{image_threshold, step};

pub const TOL_OP: f64 = 1e-4;
pub const TOL_COMPOSITE: f64 = 1e-3;
const MAX_SKIPPED: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Step for smooth cases.
    pub h: f64,
    /// Step for piecewise cases, small enough that curvature between kinks
    /// does not look like a kink.
    pub h_piecewise: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            h: 1e-3,
            h_piecewise: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub tolerance: f64,
    pub trials: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Gen = Box<dyn Fn(&mut Rng) -> Vec<Tensor> + Send + Sync>;
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    /// Whether the function may have kinks.
    pub piecewise: bool,
    /// Elements checked per input tensor per trial.
    pub samples: usize,
    /// Finite-difference step overriding the suite default.
    pub step: Option<f64>,
    gen: Gen,
    build: Build,
}

impl Case {
    fn new(
        name: &'static str,
        tolerance: f64,
        piecewise: bool,
        gen: impl Fn(&mut Rng) -> Vec<Tensor> + Send + Sync + 'static,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            tolerance,
            piecewise,
            samples: 24,
            step: None,
            gen: Box::new(gen),
            build: Box::new(build),
        }
    }

    fn samples(mut self, n: usize) -> Self {
        self.samples = n;
        self
    }

    fn step(mut self, h: f64) -> Self {
        self.step = Some(h);
        self
    }
}

fn u(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

fn objective(tape: &mut Tape, build: &Build, inputs: &[Var], weights: Option<&Tensor>) -> Result<(Var, Tensor)> {
    let out = build(tape, inputs)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            // deterministic weights derived from the output shape
            let n = tape.value(out).numel();
            Tensor::new(
                tape.shape(out).to_vec(),
                (0..n).map(|i| ((i as f64 + 1.0) * 0.754_877_666).fract() * 2.0 - 1.0).collect(),
            )?
        }
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    Ok((tape.sum_all(prod), w))
}

fn value_at(build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let (l, _) = objective(&mut tape, build, &vars, Some(weights))?;
    tape.value(l).item()
}

/// Runs one case for `trials` seeded trials.
pub fn check_case(case: &Case, trials: usize, seed: u64, h: f64) -> Result<CaseReport> {
    let mut rng = seeded(seed);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for _ in 0..trials {
        let inputs = (case.gen)(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let (loss, weights) = objective(&mut tape, &case.build, &vars, None)?;
        tape.backward(loss)?;

        for (ti, &v) in vars.iter().enumerate() {
            let analytic = tape.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[ti].shape().to_vec()));
            let n = inputs[ti].numel();
            let picks: Vec<usize> = if n <= case.samples {
                (0..n).collect()
            } else {
                sample(&mut rng, n, case.samples).into_vec()
            };
            let mut scale = analytic.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let mut diff = 0.0f64;
            let mut probe = inputs.clone();
            for &e in &picks {
                let x0 = inputs[ti].data()[e];
                let mut f = |dx: f64| -> Result<f64> {
                    probe[ti].data_mut()[e] = x0 + dx;
                    value_at(&case.build, &probe, &weights)
                };
                let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
                probe[ti].data_mut()[e] = x0;
                let d1 = (p1 - m1) / (2.0 * h);
                let d2 = (p2 - m2) / (4.0 * h);
                let d4 = (4.0 * d1 - d2) / 3.0;
                checked += 1;
                if case.piecewise && (d1 - d2).abs() > 1e-4 * d4.abs().max(scale).max(1e-9) {
                    skipped += 1;
                    continue;
                }
                scale = scale.max(d4.abs());
                diff = diff.max((analytic.data()[e] - d4).abs());
            }
            worst = worst.max(diff / scale.max(1e-6));
        }
    }
    let skip_ok = checked == 0 || (skipped as f64) <= MAX_SKIPPED * checked as f64;
    Ok(CaseReport {
        name: case.name.to_string(),
        tolerance: case.tolerance,
        trials,
        max_rel_error: worst,
        checked,
        skipped,
        passed: worst <= case.tolerance && skip_ok,
    })
}

fn ge_store(cfg: GeConfig, rng: &mut Rng) -> (ParamStore, GeBlock) {
    let mut store = ParamStore::new();
    let block = GeBlock::register(&mut store, cfg, "ge", rng).expect("valid config");
    // move gains, biases and the LePE kernel away from their special
    // initial values so every path carries gradient
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    (store, block)
}

/// All cases: primitive operations at `TOL_OP`, convolution and composite
/// graphs at `TOL_COMPOSITE`.
pub fn suite() -> Vec<Case> {
    let mut cases = vec![
        Case::new("add", TOL_OP, false, |r| vec![u(r, &[3, 4], -1., 1.), u(r, &[3, 4], -1., 1.)], |t, v| t.add(v[0], v[1])),
        Case::new("add (scalar operand)", TOL_OP, false, |r| vec![u(r, &[3, 4], -1., 1.), u(r, &[], -1., 1.)], |t, v| t.add(v[0], v[1])),
        Case::new("sub", TOL_OP, false, |r| vec![u(r, &[5], -1., 1.), u(r, &[5], -1., 1.)], |t, v| t.sub(v[0], v[1])),
        Case::new("mul", TOL_OP, false, |r| vec![u(r, &[2, 3], -1., 1.), u(r, &[2, 3], -1., 1.)], |t, v| t.mul(v[0], v[1])),
        Case::new("div", TOL_OP, false, |r| vec![u(r, &[6], -1., 1.), u(r, &[6], 0.5, 2.)], |t, v| t.div(v[0], v[1])),
        Case::new("neg", TOL_OP, false, |r| vec![u(r, &[4], -1., 1.)], |t, v| Ok(t.neg(v[0]))),
        Case::new("exp", TOL_OP, false, |r| vec![u(r, &[4], -2., 2.)], |t, v| Ok(t.exp(v[0]))),
        Case::new("log", TOL_OP, false, |r| vec![u(r, &[4], 0.2, 3.)], |t, v| t.log(v[0])),
        Case::new("sigmoid", TOL_OP, false, |r| vec![u(r, &[6], -4., 4.)], |t, v| Ok(t.sigmoid(v[0]))),
        Case::new("relu", TOL_OP, true, |r| vec![u(r, &[8], -1., 1.)], |t, v| Ok(t.relu(v[0]))),
        Case::new("add_scalar", TOL_OP, false, |r| vec![u(r, &[4], -1., 1.)], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        Case::new("mul_scalar", TOL_OP, false, |r| vec![u(r, &[4], -1., 1.)], |t, v| Ok(t.mul_scalar(v[0], -1.3))),
        Case::new("rsub_scalar", TOL_OP, false, |r| vec![u(r, &[4], -1., 1.)], |t, v| Ok(t.rsub_scalar(1.0, v[0]))),
        Case::new("clamp", TOL_OP, true, |r| vec![u(r, &[8], -1., 1.)], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        Case::new("matmul", TOL_OP, false, |r| vec![u(r, &[3, 4], -1., 1.), u(r, &[4, 2], -1., 1.)], |t, v| t.matmul(v[0], v[1])),
        Case::new("matmul (batched)", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.), u(r, &[2, 4, 5], -1., 1.)], |t, v| t.matmul(v[0], v[1])),
        Case::new("matmul (shared rhs)", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.), u(r, &[4, 5], -1., 1.)], |t, v| t.matmul(v[0], v[1])),
        Case::new("sum", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.)], |t, v| t.sum(v[0], &[0, 2])),
        Case::new("mean", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.)], |t, v| t.mean(v[0], &[1])),
        Case::new("max", TOL_OP, true, |r| vec![u(r, &[3, 5], -1., 1.)], |t, v| t.reduce(Reduction::Max, v[0], &[1])),
        Case::new("softmax", TOL_OP, false, |r| vec![u(r, &[3, 5], -2., 2.)], |t, v| t.softmax(v[0], 1)),
        Case::new("layernorm", TOL_OP, false, |r| vec![u(r, &[3, 6], -1., 1.), u(r, &[6], 0.5, 1.5), u(r, &[6], -0.5, 0.5)], |t, v| t.layernorm(v[0], v[1], v[2], 1)),
        Case::new("upsample_bilinear", TOL_OP, false, |r| vec![u(r, &[1, 2, 3, 4], -1., 1.)], |t, v| t.upsample_bilinear(v[0], 7, 9)),
        Case::new("concat", TOL_OP, false, |r| vec![u(r, &[2, 3], -1., 1.), u(r, &[2, 2], -1., 1.)], |t, v| t.concat(&[v[0], v[1]], 1)),
        Case::new("slice", TOL_OP, false, |r| vec![u(r, &[3, 5], -1., 1.)], |t, v| t.slice(v[0], 1, 1, 3)),
        Case::new("reshape", TOL_OP, false, |r| vec![u(r, &[2, 6], -1., 1.)], |t, v| t.reshape(v[0], &[3, 4])),
        Case::new("permute", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.)], |t, v| t.permute(v[0], &[2, 0, 1])),
        Case::new("axis_add", TOL_OP, false, |r| vec![u(r, &[2, 3, 4], -1., 1.), u(r, &[3], -1., 1.)], |t, v| t.axis_add(v[0], v[1], 1)),
        Case::new("step", TOL_OP, false, |r| vec![u(r, &[2, 3, 3], 0., 1.), u(r, &[2], 0.3, 0.7)], |t, v| step(t, v[0], v[1], 50.0)),
        Case::new("conv2d", TOL_COMPOSITE, false, |r| vec![u(r, &[2, 2, 5, 5], -1., 1.), u(r, &[3, 2, 3, 3], -1., 1.), u(r, &[3], -1., 1.)], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)),
        Case::new("conv2d (stride 2, grouped)", TOL_COMPOSITE, false, |r| vec![u(r, &[1, 4, 6, 6], -1., 1.), u(r, &[4, 2, 3, 3], -1., 1.)], |t, v| t.conv2d(v[0], v[1], None, 2, 1, 2)),
        Case::new("scel", TOL_COMPOSITE, false, |r| {
            let m = u(r, &[4, 4], 0.05, 0.95);
            let g = Tensor::from_fn([4, 4], |_| f64::from(r.random_bool(0.4) as u8));
            vec![m, g]
        }, |t, v| scel(t, v[0], v[1])),
        Case::new("dice", TOL_COMPOSITE, false, |r| vec![u(r, &[4, 4], 0., 1.), u(r, &[4, 4], 0., 1.)], |t, v| dice(t, v[0], v[1])),
        Case::new("adaptive threshold loss", TOL_COMPOSITE, false, |r| {
            let m = u(r, &[8, 8], 0.05, 0.95);
            let g = Tensor::from_fn([8, 8], |_| f64::from(r.random_bool(0.4) as u8));
            vec![m, g, u(r, &[], -0.5, 0.5), u(r, &[], 0.3, 0.7)]
        }, |t, v| {
            let td = t.sigmoid(v[2]);
            ath_loss(t, v[0], v[1], td, v[3], LossWeights::default(), 50.0)
        }),
        Case::new("adaptive threshold loss (batch, image thresholds)", TOL_COMPOSITE, false, |r| {
            let m = u(r, &[2, 6, 6], 0.05, 0.95);
            let g = Tensor::from_fn([2, 6, 6], |_| f64::from(r.random_bool(0.4) as u8));
            vec![m, g, u(r, &[], -0.5, 0.5), u(r, &[4], -0.5, 0.5), u(r, &[], -0.2, 0.2), u(r, &[2, 4], -1., 1.)]
        }, |t, v| {
            let td = t.sigmoid(v[2]);
            let ti = image_threshold(t, v[2], v[3], v[4], v[5])?;
            ath_loss_batch(t, v[0], v[1], td, ti, LossWeights::default(), 50.0)
        }),
        Case::new("masked lepe", TOL_COMPOSITE, false, |r| vec![u(r, &[2, 10, 3], -1., 1.), u(r, &[3, 1, 3, 3], -1., 1.)], |t, v| masked_lepe(t, v[0], v[1], 3, 3)),
        Case::new("ffn", TOL_OP, true, |r| vec![u(r, &[2, 3, 4], -1., 1.), u(r, &[4, 8], -1., 1.), u(r, &[8], -0.5, 0.5), u(r, &[8, 4], -1., 1.), u(r, &[4], -0.5, 0.5)], |t, v| ffn(t, v[0], [v[1], v[2], v[3], v[4]])),
    ];

    let ge_cfg = GeConfig {
        channels: 16,
        heads: 4,
        repeats: 2,
        ffn_ratio: 4,
        height: 4,
        width: 4,
    };
    let (_, block) = ge_store(ge_cfg, &mut seeded(0));
    cases.push(
        Case::new(
            "ge block",
            TOL_COMPOSITE,
            true,
            move |r| {
                let (store, _) = ge_store(ge_cfg, r);
                let mut v = vec![u(r, &[2, 16, 4, 4], -1., 1.), u(r, &[16], -1., 1.)];
                v.extend(store.iter().map(|(_, t)| t.clone()));
                v
            },
            move |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let out = block.forward(t, &bound, v[0], v[1], None)?;
                let o5 = t.reshape(out.o5, &[2 * 16 * 16])?;
                let tok = t.reshape(out.t_out, &[2 * 16])?;
                t.concat(&[o5, tok], 0)
            },
        )
        .samples(4),
    );

    let mut det_cfg = DetectorConfig::for_canvas(8, 8);
    det_cfg.ge.heads = 2;
    cases.push(
        Case::new(
            "detector forward and loss",
            TOL_COMPOSITE,
            true,
            {
                let det_cfg = det_cfg.clone();
                move |r| {
                    let det = Detector::new(det_cfg.clone()).expect("valid config");
                    let mut v = vec![
                        u(r, &[2, 1, 8, 8], 0., 1.),
                        Tensor::from_fn([2, 8, 8], |_| f64::from(r.random_bool(0.3) as u8)),
                    ];
                    // zero-initialised heads would hide the encoder from the loss
                    v.extend(det.store.iter().map(|(_, t)| {
                        let mut t = t.clone();
                        t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
                        t
                    }));
                    v
                }
            },
            {
                let det = Detector::new(det_cfg).expect("valid config");
                move |t, v| {
                    let bound = Bound::from_vars(v[2..].to_vec());
                    let fwd = det.forward(t, &bound, v[0])?;
                    det.loss(t, &fwd, v[1])
                }
            },
        )
        .samples(3)
        // conv weights feed hundreds of ReLU units, so kinks sit every
        // few 1e-5 along a parameter
        .step(1e-7),
    );
    cases
}

/// Runs every case; cases are independent and may run in parallel.
pub fn run_suite(cfg: GradcheckConfig, exec: Execution) -> Result<Vec<CaseReport>> {
    let cases = suite();
    let idx: Vec<usize> = (0..cases.len()).collect();
    par::map(exec, &idx, |&i| {
        let h = match cases[i].step {
            Some(h) => h,
            None if cases[i].piecewise => cfg.h_piecewise,
            None => cfg.h,
        };
        check_case(&cases[i], cfg.trials, mix(cfg.seed, i as u64), h)
    })
        .into_iter()
        .collect()
}

pub fn format_table(reports: &[CaseReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>9}  {:>7}  {:>7}  result\n",
        "op", "max rel", "tolerance", "checked", "skipped"
    );
    for r in reports {
        s += &format!(
            "{:<width$}  {:>10.3e}  {:>9.0e}  {:>7}  {:>7}  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    s
}
