use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use athresh::cli::{EvalRun, RunRecord};
use athresh::corpus::{Corpus, Split};

fn athresh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_athresh"))
        .args(args)
        .env_remove("ATHRESH_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = athresh(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    athresh(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_corpus(dir: &Path) {
    ok(&["synth", "--n", "20", "--seed", "3", "--preset", "easy", "--canvas", "32", "--out", p(dir)]);
}

fn tiny_train(corpus: &Path, out: &Path, variant: &str) {
    ok(&[
        "train", "--corpus", p(corpus), "--out", p(out), "--variant", variant, "--epochs", "1", "--heads", "2",
        "--batch-size", "4",
    ]);
}

#[test]
fn synth_writes_the_split_and_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("corpus");
    ok(&["synth", "--n", "100", "--seed", "7", "--canvas", "32", "--out", p(&out)]);
    let corpus = Corpus::read(&out).unwrap();
    let sizes = [Split::Train, Split::Val, Split::Test].map(|s| corpus.split(s).len());
    assert_eq!(sizes, [70, 15, 15]);
    assert_eq!(corpus.base_seed, 7);
    let run: RunRecord = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run.command, "synth");
    assert_eq!(run.config.n, Some(100));
    assert_eq!(run.config.seed, Some(7));
}

#[test]
fn replaying_run_json_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (c1, c2) = (tmp.path().join("c1"), tmp.path().join("c2"));
    tiny_corpus(&c1);
    ok(&["synth", "--config", p(&c1.join("run.json")), "--out", p(&c2)]);
    assert_eq!(fs::read(c1.join("data.bin")).unwrap(), fs::read(c2.join("data.bin")).unwrap());
    assert_eq!(fs::read(c1.join("manifest.json")).unwrap(), fs::read(c2.join("manifest.json")).unwrap());

    let (t1, t2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    tiny_train(&c1, &t1, "full");
    ok(&["train", "--config", p(&t1.join("run.json")), "--out", p(&t2)]);
    for f in ["best/weights.bin", "last/weights.bin", "history.json"] {
        assert_eq!(fs::read(t1.join(f)).unwrap(), fs::read(t2.join(f)).unwrap(), "{f}");
    }

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    ok(&["eval", "--corpus", p(&c1), "--ckpt", p(&t1.join("best")), "--split", "all", "--out", p(&e1)]);
    ok(&["eval", "--config", p(&e1.join("run.json")), "--out", p(&e2)]);
    let r1: EvalRun = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    let r2: EvalRun = serde_json::from_str(&fs::read_to_string(e2.join("report.json")).unwrap()).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(fs::read(e1.join("report.csv")).unwrap(), fs::read(e2.join("report.csv")).unwrap());

    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    ok(&["sweep", "--corpus", p(&c1), "--ckpt", p(&t1.join("best")), "--split", "all", "--out", p(&s1)]);
    ok(&["sweep", "--config", p(&s1.join("run.json")), "--out", p(&s2), "--threads", "1"]);
    for f in ["sweep.json", "sweep.csv", "sweep.svg"] {
        assert_eq!(fs::read(s1.join(f)).unwrap(), fs::read(s2.join(f)).unwrap(), "{f}");
    }
    let svg = fs::read_to_string(s1.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("ITH"));
}

#[test]
fn flags_win_over_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"n": 12, "seed": 4, "preset": "easy", "canvas": 32}"#).unwrap();
    let out = tmp.path().join("c");
    ok(&["synth", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]);
    let run: RunRecord = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!((run.config.n, run.config.seed), (Some(12), Some(9)));
    assert_eq!(run.config.preset.as_deref(), Some("easy"));

    // a record from another command is refused
    assert_eq!(code(&["train", "--config", p(&out.join("run.json")), "--out", p(&out)]), 1);
    fs::write(&cfg, r#"{"colour": "blue"}"#).unwrap();
    assert_eq!(code(&["synth", "--config", p(&cfg), "--out", p(&out)]), 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let unknown = athresh(&["synth", "--bogus", "--out", p(&out)]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--n", "ten", "--out", p(&out)]), 1);
    assert_eq!(code(&["synth", "--preset", "nope", "--out", p(&out)]), 1);
    assert_eq!(code(&["synth", "--threads", "0", "--out", p(&out)]), 1);
    assert_eq!(code(&["synth", "--n", "0", "--out", p(&out)]), 1);
    assert_eq!(code(&["train", "--out", p(&out)]), 1);
    assert_eq!(code(&["train", "--corpus", p(&tmp.path().join("missing")), "--out", p(&out)]), 2);

    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    assert_eq!(code(&["train", "--corpus", p(&corpus), "--out", p(&out), "--heads", "3"]), 1);
    assert_eq!(code(&["train", "--corpus", p(&corpus), "--out", p(&out), "--k", "-1"]), 1);
    assert_eq!(code(&["train", "--corpus", p(&corpus), "--out", p(&out), "--alpha", "-0.5"]), 1);
}

#[test]
fn gradcheck_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--trials", "1", "--out", p(tmp.path())]);
    assert!(out.lines().next().unwrap().starts_with("op"));
    assert!(out.contains("matmul") && out.contains("ge block"));
    assert!(tmp.path().join("gradcheck.json").exists());
    assert!(tmp.path().join("run.json").exists());
}

#[test]
fn report_orders_variants_like_the_ablation_table() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let mut evals = Vec::new();
    // deliberately out of order
    for v in ["full", "baseline", "dth-ith", "dth"] {
        let t = tmp.path().join(format!("t-{v}"));
        let e = tmp.path().join(format!("e-{v}"));
        tiny_train(&corpus, &t, v);
        ok(&["eval", "--corpus", p(&corpus), "--ckpt", p(&t.join("last")), "--out", p(&e)]);
        evals.push(e);
    }
    let rep = tmp.path().join("rep");
    let one = ok(&["report", p(&evals[0]), "--out", p(&rep)]);
    assert_eq!(one.lines().count(), 3);

    let mut args = vec!["report", "--out", p(&rep)];
    args.extend(evals.iter().map(|e| p(e)));
    let md = ok(&args);
    let rows: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    for (row, label) in rows.iter().zip(["baseline (fixed 0.5)", "DTH |", "DTH + ITH |", "DTH + ITH + GE"]) {
        assert!(row.starts_with(&format!("| {label}")), "{row}");
    }
    let csv = fs::read_to_string(rep.join("ablation.csv")).unwrap();
    let order: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(order, ["baseline", "dth", "dth-ith", "full"]);

    // duplicates and missing metadata are validation errors
    assert_eq!(code(&["report", p(&evals[0]), p(&evals[0]), "--out", p(&rep)]), 1);
    let broken = tmp.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("report.json"), r#"{"report": {}}"#).unwrap();
    assert_eq!(code(&["report", p(&broken), "--out", p(&rep)]), 1);
    assert_eq!(code(&["report", "--out", p(&rep)]), 1);
}
