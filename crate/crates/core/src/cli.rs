//! Command-line driver: `synth`, `train`, `eval`, `sweep`, `gradcheck` and
//! `report`.
//!
//! Every setting can come from a flag or from a JSON file given with
//! `--config`; flags win over the file, the file wins over defaults. Each
//! command writes `run.json` into its output directory holding the command
//! and the fully resolved settings, so `athresh <command> --config
//! <out>/run.json` repeats the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, Corpus, Split};
use crate::detector::{load_checkpoint, save_checkpoint, train, Detector, DetectorConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sweep, EvalConfig, EvalReport, SweepConfig};
use crate::gradcheck::{format_table, run_suite, GradcheckConfig};
use crate::loss::LossWeights;
use crate::par::{self, Execution};
use crate::synth::{Scene, SpecDistribution};

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "athresh", version, about = "Adaptive binarization thresholds on synthetic text scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(Common),
    /// Train a detector on a corpus.
    Train(Common),
    /// Score a checkpoint on one split of a corpus.
    Eval(Common),
    /// Sweep fixed thresholds and compare with the learned ones.
    Sweep(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
    /// Collect eval runs into an ablation table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Eval output directories.
        #[arg(value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON settings file; a run.json from an earlier run also works.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output (repeatable). ATHRESH_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    settings: Settings,
}

/// Flat settings shared by all commands. Unset fields fall back to the
/// config file, then to defaults; commands ignore fields they do not use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Number of scenes to generate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory (for example `<train out>/best`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Weight of the dataset-threshold dice term.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Weight of the image-threshold dice term.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Steepness of the soft step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ge_repeats: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_area: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    /// Coarse threshold grid step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_step: Option<f64>,
    /// Fine threshold grid step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_step: Option<f64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// baseline, dth, dth-ith or full.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    /// Scene distribution: default, easy, hetero or fixed-gamma.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Square canvas side, overriding the preset. Below 64 the scene
    /// geometry shrinks with it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canvas: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// train, val, test or all.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Gradient-check trials per case.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<PathBuf>>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),+) => {
        Settings { $($f: $hi.$f.or($lo.$f)),+ }
    };
}

impl Settings {
    /// Fields set in `self` win over `other`.
    pub fn over(self, other: Settings) -> Settings {
        overlay!(
            self, other, n, seed, out, corpus, ckpt, epochs, lr, alpha, beta, k, heads, ge_repeats, min_area, iou,
            grid_step, fine_step, threads, variant, preset, canvas, batch_size, split, trials, runs
        )
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: Settings,
}

/// Contents of `report.json` written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub variant: Variant,
    pub label: String,
    pub split: Split,
    pub corpus: PathBuf,
    pub ckpt: PathBuf,
    pub dataset_threshold: f64,
    pub mean_threshold: f64,
    pub report: EvalReport,
}

fn load_settings(path: &Path, command: &str) -> Result<Settings> {
    let value: serde_json::Value = read_json(path)?;
    let bad = |detail: String| Error::Config(format!("{}: {detail}", path.display()));
    let inner = match value.get("command") {
        Some(c) => {
            if c.as_str() != Some(command) {
                return Err(bad(format!("recorded for command {c}, not {command}")));
            }
            value.get("config").cloned().unwrap_or_default()
        }
        None => value,
    };
    serde_json::from_value(inner).map_err(|e| bad(e.to_string()))
}

fn require<T: Clone>(v: &Option<T>, flag: &str, command: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("{command} needs --{flag}")))
}

fn exec_for(s: &Settings) -> Execution {
    match s.threads {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    }
}

fn write_run(out: &Path, command: &str, config: &Settings) -> Result<()> {
    write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            command: command.to_string(),
            config: config.clone(),
        },
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn distribution(s: &Settings) -> Result<SpecDistribution> {
    let mut dist = SpecDistribution::preset(s.preset.as_deref().unwrap_or("default"))?;
    if let Some(c) = s.canvas {
        dist = dist.resized(c, c);
    }
    dist.validate()?;
    Ok(dist)
}

fn detector_config(s: &Settings, corpus: &Corpus) -> Result<DetectorConfig> {
    let d = &corpus.distribution;
    let mut cfg = DetectorConfig::for_canvas(d.height, d.width);
    cfg.seed = s.seed.unwrap_or(cfg.seed);
    cfg.epochs = s.epochs.unwrap_or(cfg.epochs);
    cfg.adam.lr = s.lr.unwrap_or(cfg.adam.lr);
    cfg.loss = LossWeights {
        alpha: s.alpha.unwrap_or(cfg.loss.alpha),
        beta: s.beta.unwrap_or(cfg.loss.beta),
    };
    cfg.k = s.k.unwrap_or(cfg.k);
    cfg.ge.heads = s.heads.unwrap_or(cfg.ge.heads);
    cfg.ge.repeats = s.ge_repeats.unwrap_or(cfg.ge.repeats);
    cfg.min_area = s.min_area.unwrap_or(cfg.min_area);
    cfg.batch_size = s.batch_size.unwrap_or(cfg.batch_size);
    cfg.variant = s.variant.unwrap_or(cfg.variant);
    cfg.validate()?;
    Ok(cfg)
}

/// Settings with every field the command uses filled in.
fn resolve(command: &str, s: Settings) -> Result<Settings> {
    let mut r = Settings {
        seed: Some(s.seed.unwrap_or(0)),
        threads: s.threads,
        out: Some(s.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))),
        ..Settings::default()
    };
    let eval_fields = |r: &mut Settings| {
        r.split = Some(s.split.unwrap_or(Split::Test));
        r.min_area = s.min_area.or(Some(crate::postprocess::DEFAULT_MIN_AREA));
        r.iou = s.iou.or(Some(0.5));
    };
    match command {
        "synth" => {
            r.n = Some(s.n.unwrap_or(100));
            r.preset = Some(s.preset.clone().unwrap_or_else(|| "default".into()));
            r.canvas = s.canvas;
            r.out = Some(require(&s.out, "out", command)?);
        }
        "train" => {
            let d = DetectorConfig::default();
            r.corpus = Some(require(&s.corpus, "corpus", command)?);
            r.out = Some(require(&s.out, "out", command)?);
            r.epochs = s.epochs.or(Some(d.epochs));
            r.lr = s.lr.or(Some(d.adam.lr));
            r.alpha = s.alpha.or(Some(d.loss.alpha));
            r.beta = s.beta.or(Some(d.loss.beta));
            r.k = s.k.or(Some(d.k));
            r.heads = s.heads.or(Some(d.ge.heads));
            r.ge_repeats = s.ge_repeats.or(Some(d.ge.repeats));
            r.min_area = s.min_area.or(Some(d.min_area));
            r.batch_size = s.batch_size.or(Some(d.batch_size));
            r.variant = s.variant.or(Some(d.variant));
        }
        "eval" => {
            r.corpus = Some(require(&s.corpus, "corpus", command)?);
            r.ckpt = Some(require(&s.ckpt, "ckpt", command)?);
            eval_fields(&mut r);
        }
        "sweep" => {
            let d = SweepConfig::default();
            r.corpus = Some(require(&s.corpus, "corpus", command)?);
            r.ckpt = Some(require(&s.ckpt, "ckpt", command)?);
            eval_fields(&mut r);
            r.grid_step = s.grid_step.or(Some(d.coarse_step));
            r.fine_step = s.fine_step.or(Some(d.fine_step));
        }
        "gradcheck" => {
            r.trials = s.trials.or(Some(GradcheckConfig::default().trials));
        }
        "report" => {
            let runs = s.runs.clone().unwrap_or_default();
            if runs.is_empty() {
                return Err(Error::Config("report needs at least one eval run directory".into()));
            }
            r.runs = Some(runs);
        }
        other => return Err(Error::Config(format!("unknown command {other}"))),
    }
    if r.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(r)
}

fn cmd_synth(s: &Settings, out: &Path) -> Result<()> {
    let dist = distribution(s)?;
    let corpus = Corpus::generate(s.n.unwrap_or(0), s.seed.unwrap_or(0), &dist, exec_for(s))?;
    corpus.write(out)?;
    let [tr, va, te] = [Split::Train, Split::Val, Split::Test].map(|sp| corpus.split(sp).len());
    println!("wrote {} scenes to {} (train {tr}, val {va}, test {te})", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(s: &Settings, out: &Path) -> Result<()> {
    let corpus = Corpus::read(s.corpus.as_deref().unwrap_or(Path::new("")))?;
    let cfg = detector_config(s, &corpus)?;
    let outcome = train(cfg, &corpus, exec_for(s))?;
    save_checkpoint(&outcome.last, &outcome.progress, &out.join("last"))?;
    save_checkpoint(&outcome.best, &outcome.progress, &out.join("best"))?;
    write_json(&out.join("history.json"), &outcome.progress.history)?;
    println!(
        "trained {} epochs; best epoch {} (t_dth {:.4}); checkpoints in {}",
        outcome.progress.epoch,
        outcome.best_epoch,
        outcome.best.dataset_threshold(),
        out.display()
    );
    Ok(())
}

fn load_pair(s: &Settings) -> Result<(Corpus, Detector)> {
    let corpus = Corpus::read(s.corpus.as_deref().unwrap_or(Path::new("")))?;
    let (det, _) = load_checkpoint(s.ckpt.as_deref().unwrap_or(Path::new("")))?;
    let d = &corpus.distribution;
    if (d.height, d.width) != (det.cfg.height, det.cfg.width) {
        return Err(Error::Config(format!(
            "checkpoint canvas {}x{} does not match corpus canvas {}x{}",
            det.cfg.height, det.cfg.width, d.height, d.width
        )));
    }
    Ok((corpus, det))
}

fn eval_config(s: &Settings) -> EvalConfig {
    let d = EvalConfig::default();
    EvalConfig {
        min_area: s.min_area.unwrap_or(d.min_area),
        iou: s.iou.unwrap_or(d.iou),
    }
}

fn cmd_eval(s: &Settings, out: &Path) -> Result<()> {
    let (corpus, det) = load_pair(s)?;
    let split = s.split.unwrap_or(Split::Test);
    let scenes: Vec<&Scene> = corpus.split(split).iter().collect();
    let exec = exec_for(s);
    let preds = det.predict(&scenes, exec)?;
    let maps: Vec<_> = preds.iter().map(|p| p.prob.clone()).collect();
    let thresholds: Vec<f64> = preds.iter().map(|p| p.threshold).collect();
    let gts: Vec<_> = scenes.iter().map(|sc| sc.gt.clone()).collect();
    let report = evaluate(&maps, &gts, &thresholds, eval_config(s), exec)?;
    let variant = det.cfg.variant;
    let run = EvalRun {
        variant,
        label: variant.label().to_string(),
        split,
        corpus: s.corpus.clone().unwrap_or_default(),
        ckpt: s.ckpt.clone().unwrap_or_default(),
        dataset_threshold: det.dataset_threshold(),
        mean_threshold: thresholds.iter().sum::<f64>() / thresholds.len().max(1) as f64,
        report,
    };
    write_json(&out.join(REPORT_FILE), &run)?;
    write_text(&out.join("report.csv"), &run.report.to_csv())?;
    println!(
        "{} on {} scenes: P {:.4} R {:.4} F {:.4}",
        run.label,
        scenes.len(),
        run.report.precision,
        run.report.recall,
        run.report.fmeasure
    );
    Ok(())
}

fn cmd_sweep(s: &Settings, out: &Path) -> Result<()> {
    let (corpus, det) = load_pair(s)?;
    let scenes: Vec<&Scene> = corpus.split(s.split.unwrap_or(Split::Test)).iter().collect();
    let exec = exec_for(s);
    let preds = det.predict(&scenes, exec)?;
    let maps: Vec<_> = preds.iter().map(|p| p.prob.clone()).collect();
    let gts: Vec<_> = scenes.iter().map(|sc| sc.gt.clone()).collect();
    let learned: Vec<f64> = preds.iter().map(|p| p.threshold).collect();
    let d = SweepConfig::default();
    let cfg = SweepConfig {
        coarse_step: s.grid_step.unwrap_or(d.coarse_step),
        fine_step: s.fine_step.unwrap_or(d.fine_step),
        eval: eval_config(s),
    };
    let curve = sweep(&maps, &gts, Some(&learned), cfg, exec)?;
    write_json(&out.join("sweep.json"), &curve)?;
    write_text(&out.join("sweep.csv"), &curve.to_csv())?;
    write_text(&out.join("sweep.svg"), &curve.to_svg())?;
    let best = curve.best_coarse();
    println!(
        "best coarse threshold {:.2} (F {:.4}); oracle {:.2} (F {:.4}); learned mean {:.4} (F {:.4})",
        best.threshold,
        best.fmeasure,
        curve.oracle.threshold,
        curve.oracle.fmeasure,
        curve.ith_point.map_or(f64::NAN, |p| p.0),
        curve.ith_point.map_or(f64::NAN, |p| p.1),
    );
    Ok(())
}

fn cmd_gradcheck(s: &Settings, out: &Path) -> Result<()> {
    let cfg = GradcheckConfig {
        trials: s.trials.unwrap_or(100),
        seed: s.seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let reports = run_suite(cfg, exec_for(s))?;
    print!("{}", format_table(&reports));
    write_json(&out.join("gradcheck.json"), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

/// Markdown and CSV tables of eval runs, one row per variant in the fixed
/// order baseline, DTH, DTH + ITH, DTH + ITH + GE.
pub fn ablation_tables(runs: &[EvalRun]) -> Result<(String, String)> {
    let mut rows: Vec<&EvalRun> = runs.iter().collect();
    rows.sort_by_key(|r| Variant::ALL.iter().position(|v| *v == r.variant));
    if let Some(w) = rows.windows(2).find(|w| w[0].variant == w[1].variant) {
        return Err(Error::Config(format!("two runs for variant {}", w[0].variant.name())));
    }
    let mark = |b: bool| if b { "x" } else { "" };
    let mut csv = String::from("variant,label,dth,ith,ge,recall,precision,fmeasure\n");
    let mut md = String::from("| Method | DTH | ITH | GE | R (%) | P (%) | F (%) |\n|---|:-:|:-:|:-:|--:|--:|--:|\n");
    for r in rows {
        let v = r.variant;
        let dth = v != Variant::Baseline;
        let rep = &r.report;
        csv += &format!(
            "{},{},{},{},{},{},{},{}\n",
            v.name(),
            r.label,
            dth as u8,
            v.uses_ith() as u8,
            v.uses_ge() as u8,
            rep.recall,
            rep.precision,
            rep.fmeasure
        );
        md += &format!(
            "| {} | {} | {} | {} | {:.2} | {:.2} | {:.2} |\n",
            r.label,
            mark(dth),
            mark(v.uses_ith()),
            mark(v.uses_ge()),
            100.0 * rep.recall,
            100.0 * rep.precision,
            100.0 * rep.fmeasure
        );
    }
    Ok((csv, md))
}

fn cmd_report(s: &Settings, out: &Path) -> Result<()> {
    let mut runs = Vec::new();
    for dir in s.runs.iter().flatten() {
        let path = dir.join(REPORT_FILE);
        let value: serde_json::Value = read_json(&path)?;
        let run: EvalRun = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("{}: missing or bad run metadata: {e}", path.display())))?;
        runs.push(run);
    }
    let (csv, md) = ablation_tables(&runs)?;
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATHRESH_LOG", default))
        .format_timestamp(None)
        .try_init();
}

/// Exit code for an error: 1 for bad settings, 2 for failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn execute(command: &str, common: Common, runs: Option<Vec<PathBuf>>) -> Result<()> {
    init_logging(common.verbose);
    let mut flags = common.settings;
    flags.runs = runs.filter(|r| !r.is_empty());
    let file = match &common.config {
        Some(p) => load_settings(p, command)?,
        None => Settings::default(),
    };
    let settings = resolve(command, flags.over(file))?;
    if let Some(t) = settings.threads {
        par::limit_threads(t);
    }
    let out = settings.out.clone().unwrap_or_default();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::debug!("resolved settings: {settings:?}");
    match command {
        "synth" => cmd_synth(&settings, &out)?,
        "train" => cmd_train(&settings, &out)?,
        "eval" => cmd_eval(&settings, &out)?,
        "sweep" => cmd_sweep(&settings, &out)?,
        "report" => cmd_report(&settings, &out)?,
        _ => {
            // record the run before a failing check aborts it
            write_run(&out, command, &settings)?;
            return cmd_gradcheck(&settings, &out);
        }
    }
    write_run(&out, command, &settings)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(c) => execute("synth", c, None),
        Command::Train(c) => execute("train", c, None),
        Command::Eval(c) => execute("eval", c, None),
        Command::Sweep(c) => execute("sweep", c, None),
        Command::Gradcheck(c) => execute("gradcheck", c, None),
        Command::Report { common, runs } => execute("report", common, Some(runs)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
