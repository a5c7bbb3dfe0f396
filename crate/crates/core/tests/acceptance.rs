//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use athresh::cli::EvalRun;
use athresh::corpus::{Corpus, Split};
use athresh::detector::{train, Detector, DetectorConfig, Variant};
use athresh::eval::{evaluate, exhaustive_tp, match_image, sweep, EvalConfig, SweepConfig, SweepCurve};
use athresh::gradcheck::{format_table, run_suite, GradcheckConfig};
use athresh::loss::{ath_loss, dice, scel, LossWeights};
use athresh::par::Execution;
use athresh::postprocess::{extract_instances, TextInstance};
use athresh::raster::ProbMap;
use athresh::rng::seeded;
use athresh::synth::{generate_scene, Scene, SceneSpec, SpecDistribution};
use athresh::threshold::{binarize, step_value, DEFAULT_STEEPNESS};
use athresh::{Tape, Tensor};
use rand::Rng as _;

const CANVAS: usize = 64;
const EPOCHS: usize = 30;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, title: &'static str, passed: bool, detail: String) {
    println!("{} {id}: {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    out.push(Outcome {
        id,
        title,
        passed,
        detail,
    });
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn corpus(preset: &str, n: usize, seed: u64) -> Corpus {
    let dist = SpecDistribution::preset(preset).unwrap().resized(CANVAS, CANVAS);
    Corpus::generate(n, seed, &dist, Execution::Parallel).unwrap()
}

fn config(variant: Variant) -> DetectorConfig {
    let mut cfg = DetectorConfig::for_canvas(CANVAS, CANVAS);
    cfg.variant = variant;
    cfg.epochs = EPOCHS;
    cfg
}

struct Predicted {
    maps: Vec<ProbMap>,
    thresholds: Vec<f64>,
    t_ith: Vec<f64>,
    gts: Vec<Vec<TextInstance>>,
}

fn predict(det: &Detector, scenes: &[Scene]) -> Predicted {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let preds = det.predict(&refs, Execution::Parallel).unwrap();
    Predicted {
        maps: preds.iter().map(|p| p.prob.clone()).collect(),
        thresholds: preds.iter().map(|p| p.threshold).collect(),
        t_ith: preds.iter().map(|p| p.t_ith).collect(),
        gts: scenes.iter().map(|s| s.gt.clone()).collect(),
    }
}

fn sweep_of(p: &Predicted, ith: bool) -> SweepCurve {
    let learned = ith.then_some(p.thresholds.as_slice());
    sweep(&p.maps, &p.gts, learned, SweepConfig::default(), Execution::Parallel).unwrap()
}

fn gradient_suite(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let reports = run_suite(GradcheckConfig::default(), Execution::Sequential).unwrap();
    let took = start.elapsed();
    print!("{}", format_table(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let trials = reports.iter().map(|r| r.trials).min().unwrap_or(0);
    report(
        out,
        "1",
        "gradient suite",
        failed.is_empty() && trials >= 100 && took <= Duration::from_secs(120),
        format!(
            "{} cases x {trials} trials, failing: {failed:?}, {:.1} s on one thread (limit 120 s)",
            reports.len(),
            took.as_secs_f64()
        ),
    );
}

fn loss_identities(out: &mut Vec<Outcome>) {
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::full([16, 16], 0.5));
    let gt = tape.constant(Tensor::from_fn([16, 16], |i| f64::from(i % 3 == 0)));
    let s = scel(&mut tape, half, gt).unwrap();
    let ln2_err = (tape.value(s).item().unwrap() - std::f64::consts::LN_2).abs();

    let x = tape.constant(Tensor::from_fn([8, 8], |i| f64::from(i % 8 < 4)));
    let y = tape.constant(Tensor::from_fn([8, 8], |i| f64::from(i / 8 < 4)));
    let d_same = dice(&mut tape, x, x).unwrap();
    let d_half = dice(&mut tape, x, y).unwrap();
    let (same, halfo) = (tape.value(d_same).item().unwrap(), tape.value(d_half).item().unwrap());

    let mut rng = seeded(2);
    let mut bit_exact = true;
    for _ in 0..50 {
        let m = Tensor::uniform(vec![12, 12], 0.0, 1.0, &mut rng);
        let g = Tensor::from_fn([12, 12], |_| f64::from(rng.random_bool(0.3)));
        let mut tape = Tape::new();
        let (mv, gv) = (tape.constant(m), tape.constant(g));
        let plain = scel(&mut tape, mv, gv).unwrap();
        let td = tape.constant(Tensor::scalar(rng.random_range(0.1..0.9)));
        let ti = tape.constant(Tensor::scalar(rng.random_range(0.1..0.9)));
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        let full = ath_loss(&mut tape, mv, gv, td, ti, zero, DEFAULT_STEEPNESS).unwrap();
        bit_exact &= tape.value(plain).item().unwrap().to_bits() == tape.value(full).item().unwrap().to_bits();
    }
    report(
        out,
        "2",
        "analytic loss identities",
        ln2_err <= 1e-9 && same == 0.0 && halfo == 0.5 && bit_exact,
        format!("|scel(0.5) - ln 2| = {ln2_err:.1e}, dice(x,x) = {same}, dice(half) = {halfo}, zero-weight loss == scel bitwise: {bit_exact}"),
    );
}

fn step_consistency(out: &mut Vec<Outcome>) {
    let v = step_value(0.6, 0.5, 50.0);
    let scenes = corpus("hetero", 20, 900);
    let gap = |k: f64| {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &scenes.scenes {
            for t in [0.3, 0.5, 0.7] {
                let hard = binarize(&s.input, t);
                for (m, &b) in s.input.data.iter().zip(&hard.data) {
                    if (m - t).abs() > 0.05 {
                        sum += (step_value(*m, t, k) - f64::from(b)).abs();
                        n += 1;
                    }
                }
            }
        }
        sum / n as f64
    };
    let g = [gap(10.0), gap(50.0), gap(200.0)];
    report(
        out,
        "3",
        "soft step agrees with binarize",
        (v - 0.993307).abs() <= 1e-6 && g[0] > g[1] && g[1] > g[2],
        format!("step(0.6, 0.5, 50) = {v:.7}; mean gap at k = 10/50/200: {:.2e} / {:.2e} / {:.2e}", g[0], g[1], g[2]),
    );
}

fn threshold_learning(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let data = corpus("fixed-gamma", 500, 7000);
    let trained = train(config(Variant::Dth), &data, Execution::Parallel).unwrap();
    let det = trained.best;
    let held: Vec<Scene> = [Split::Val, Split::Test].iter().flat_map(|&s| data.split(s).to_vec()).collect();
    let curve = sweep_of(&predict(&det, &held), false);
    let took = start.elapsed();
    let t_d = det.dataset_threshold();
    let diff = (t_d - curve.oracle.threshold).abs();
    report(
        out,
        "4",
        "learned DTH near the sweep oracle",
        diff <= 0.05 && took <= Duration::from_secs(15 * 60),
        format!(
            "t_D = {t_d:.4}, oracle {:.2} (F {:.4}), |diff| = {diff:.4} (limit 0.05); {} (limit 15 min)",
            curve.oracle.threshold,
            curve.oracle.fmeasure,
            minutes(took)
        ),
    );
}

struct Ablation {
    f: Vec<(Variant, f64)>,
    full: Detector,
    full_pred: Predicted,
    took: Duration,
}

fn ablation_runs() -> Ablation {
    let start = Instant::now();
    let data = corpus("hetero", 200, 100);
    let held = corpus("hetero", 500, 50_000);
    let mut f = Vec::new();
    let mut full = None;
    for variant in Variant::ALL {
        let det = train(config(variant), &data, Execution::Parallel).unwrap().best;
        let pred = predict(&det, &held.scenes);
        let rep = evaluate(&pred.maps, &pred.gts, &pred.thresholds, EvalConfig::default(), Execution::Parallel).unwrap();
        println!("  {:<22} P {:.4} R {:.4} F {:.4}", variant.label(), rep.precision, rep.recall, rep.fmeasure);
        f.push((variant, rep.fmeasure));
        if variant == Variant::Full {
            full = Some((det, pred));
        }
    }
    let (full, full_pred) = full.unwrap();
    Ablation {
        f,
        full,
        full_pred,
        took: start.elapsed(),
    }
}

fn ith_vs_fixed(out: &mut Vec<Outcome>, ab: &Ablation) {
    let curve = sweep_of(&ab.full_pred, true);
    let (_, f_ith) = curve.ith_point.unwrap();
    let best = curve.best_coarse();
    let median = curve.median_coarse_f();
    let coarse: Vec<String> = curve.coarse.iter().map(|p| format!("{:.1}:{:.3}", p.threshold, p.fmeasure)).collect();
    println!("  coarse F: {}", coarse.join(" "));
    report(
        out,
        "5",
        "per-image thresholds vs fixed thresholds",
        f_ith >= best.fmeasure - 0.01 && f_ith > median,
        format!(
            "F(ITH) = {f_ith:.4}, best coarse {:.4} at {:.1}, median coarse {median:.4}",
            best.fmeasure, best.threshold
        ),
    );

    // per-image thresholds should respond to the image
    let t = &ab.full_pred.t_ith;
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let spread = t.iter().map(|v| (v - mean).abs()).sum::<f64>() / t.len() as f64;
    println!("  ITH mean {mean:.4}, mean absolute deviation {spread:.4}, t_D {:.4}", ab.full.dataset_threshold());
}

fn ablation_order(out: &mut Vec<Outcome>, ab: &Ablation) {
    let worst = ab.f.windows(2).map(|w| w[0].1 - w[1].1).fold(f64::NEG_INFINITY, f64::max);
    let row: Vec<String> = ab.f.iter().map(|(v, f)| format!("{} {f:.4}", v.name())).collect();
    report(
        out,
        "6",
        "ablation ordering",
        worst <= 0.005,
        format!("{}; largest inversion {:.4} (limit 0.005); {}", row.join(" <= "), worst.max(0.0), minutes(ab.took)),
    );
}

fn matching_oracle(out: &mut Vec<Outcome>) {
    let mut dist = SpecDistribution::preset("default").unwrap().resized(CANVAS, CANVAS);
    dist.n_instances = (1, 5);
    let mut rng = seeded(77);
    let (mut agree, mut total, mut tps) = (0, 0, 0);
    for seed in 0..1000u64 {
        let scene = generate_scene(&dist.sample(10_000 + seed)).unwrap();
        let t = rng.random_range(0.15..0.85);
        let min_area = rng.random_range(1..30);
        let mut dets = extract_instances(&binarize(&scene.input, t), &scene.input, min_area).unwrap();
        dets.truncate(5);
        let greedy = match_image(&dets, &scene.gt, 0.5).unwrap().tp();
        let best = exhaustive_tp(&dets, &scene.gt, 0.5).unwrap();
        agree += usize::from(greedy == best);
        tps += greedy;
        total += 1;
    }
    report(
        out,
        "7",
        "greedy matching equals exhaustive matching",
        agree == total && total >= 1000,
        format!("{agree}/{total} fixtures agree ({tps} true positives)"),
    );
}

fn athresh(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_athresh")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke(out: &mut Vec<Outcome>, root: &Path) {
    let start = Instant::now();
    let (c, t, e) = (root.join("easy"), root.join("train"), root.join("eval"));
    athresh(&["synth", "--n", "200", "--seed", "1", "--preset", "easy", "--canvas", "64", "--out", s(&c)]);
    athresh(&["train", "--corpus", s(&c), "--out", s(&t), "--epochs", "30"]);
    athresh(&["eval", "--corpus", s(&c), "--ckpt", s(&t.join("best")), "--split", "val", "--out", s(&e)]);
    let took = start.elapsed();
    let run: EvalRun = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    let f = run.report.fmeasure;
    report(
        out,
        "8",
        "synth, train, eval smoke run",
        f >= 0.90 && took <= Duration::from_secs(20 * 60),
        format!("F@IoU0.5 on the easy val split = {f:.4} (need 0.90); {} (limit 20 min)", minutes(took)),
    );

    let det = athresh::detector::load_checkpoint(&t.join("best")).unwrap().0;
    let corpus = Corpus::read(&c).unwrap();
    let val: Vec<&Scene> = corpus.split(Split::Val).iter().collect();
    let mut scel_val = 0.0;
    for (p, sc) in det.predict(&val, Execution::Parallel).unwrap().iter().zip(&val) {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new([CANVAS, CANVAS], p.prob.data.clone()).unwrap());
        let g = tape.constant(Tensor::new([CANVAS, CANVAS], sc.foreground().as_f64()).unwrap());
        let l = scel(&mut tape, m, g).unwrap();
        scel_val += tape.value(l).item().unwrap() / val.len() as f64;
    }
    let mut clean_ok = 0;
    for seed in 0..10 {
        let scene = generate_scene(&SceneSpec::clean(seed, CANVAS, CANVAS, 1 + seed as usize % 4)).unwrap();
        clean_ok += usize::from(det.infer(&scene).unwrap().len() == scene.gt.len());
    }
    println!("  val scel {scel_val:.4} (expected at most 0.08); undegraded scenes with the right instance count: {clean_ok}/10");
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else if p.file_name().unwrap() != "run.json" {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(out: &mut Vec<Outcome>, root: &Path) {
    let a = root.join("a");
    let (c, t, e, w, g, r) = (a.join("c"), a.join("t"), a.join("e"), a.join("w"), a.join("g"), a.join("r"));
    athresh(&["synth", "--n", "40", "--seed", "11", "--preset", "hetero", "--canvas", "32", "--out", s(&c)]);
    athresh(&["train", "--corpus", s(&c), "--out", s(&t), "--epochs", "2", "--heads", "2", "--batch-size", "4"]);
    athresh(&["eval", "--corpus", s(&c), "--ckpt", s(&t.join("best")), "--out", s(&e)]);
    athresh(&["sweep", "--corpus", s(&c), "--ckpt", s(&t.join("best")), "--out", s(&w)]);
    athresh(&["gradcheck", "--trials", "2", "--out", s(&g)]);
    athresh(&["report", s(&e), "--out", s(&r)]);

    let b = root.join("b");
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (cmd, dir) in [("synth", &c), ("train", &t), ("eval", &e), ("sweep", &w), ("gradcheck", &g), ("report", &r)] {
        let again = b.join(dir.file_name().unwrap());
        athresh(&[cmd, "--config", s(&dir.join("run.json")), "--out", s(&again)]);
        for f in files_under(dir) {
            let rel = f.strip_prefix(dir).unwrap();
            compared += 1;
            if fs::read(&f).unwrap() != fs::read(again.join(rel)).unwrap() {
                mismatched.push(format!("{cmd}/{}", rel.display()));
            }
        }
    }
    report(
        out,
        "9",
        "re-running from run.json is bit-exact",
        mismatched.is_empty() && compared > 0,
        format!("{compared} output files compared across six commands, mismatched: {mismatched:?}"),
    );
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture or a filter;
    // this target runs everything regardless
    let tmp = tempfile::tempdir().unwrap();
    let mut out = Vec::new();
    gradient_suite(&mut out);
    loss_identities(&mut out);
    step_consistency(&mut out);
    threshold_learning(&mut out);
    let ab = ablation_runs();
    ith_vs_fixed(&mut out, &ab);
    ablation_order(&mut out, &ab);
    matching_oracle(&mut out);
    smoke(&mut out, tmp.path());
    determinism(&mut out, tmp.path());

    println!();
    let failed: Vec<&Outcome> = out.iter().filter(|o| !o.passed).collect();
    println!("acceptance: {}/{} criteria passed", out.len() - failed.len(), out.len());
    for o in &failed {
        println!("  failed {}: {} ({})", o.id, o.title, o.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
