use athresh::corpus::{Corpus, Split};
use athresh::detector::{load_checkpoint, save_checkpoint, train, Detector, DetectorConfig, Variant};
use athresh::par::Execution;
use athresh::synth::{Scene, SpecDistribution};
use athresh::Error;

fn small_corpus(n: usize) -> Corpus {
    let dist = SpecDistribution::preset("easy").unwrap().resized(32, 32);
    Corpus::generate(n, 5, &dist, Execution::Parallel).unwrap()
}

fn small_cfg(variant: Variant, epochs: usize) -> DetectorConfig {
    let mut cfg = DetectorConfig::for_canvas(32, 32);
    cfg.variant = variant;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.ge.heads = 2;
    cfg
}

#[test]
fn training_is_deterministic_and_lowers_val_loss() {
    let corpus = small_corpus(30);
    let a = train(small_cfg(Variant::Full, 10), &corpus, Execution::Parallel).unwrap();
    let b = train(small_cfg(Variant::Full, 10), &corpus, Execution::Sequential).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.progress, b.progress);
    let h = &a.progress.history;
    assert_eq!(h.len(), 11);
    assert!(h[10].val_loss.unwrap() < h[0].val_loss.unwrap());
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let corpus = small_corpus(10);
    let cfg = small_cfg(Variant::DthIth, 0);
    let out = train(cfg.clone(), &corpus, Execution::Sequential).unwrap();
    assert_eq!(out.last, Detector::new(cfg).unwrap());
    assert_eq!(out.progress.epoch, 0);
}

#[test]
fn checkpoint_round_trip_keeps_predictions_bit_identical() {
    let corpus = small_corpus(12);
    for variant in Variant::ALL {
        let out = train(small_cfg(variant, 1), &corpus, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&out.last, &out.progress, dir.path()).unwrap();
        let (back, progress) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(progress, out.progress);
        let scenes: Vec<&Scene> = corpus.split(Split::All).iter().collect();
        let p1 = out.last.predict(&scenes, Execution::Sequential).unwrap();
        let p2 = back.predict(&scenes, Execution::Parallel).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert!(x.prob.data.iter().zip(&y.prob.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(x.threshold.to_bits(), y.threshold.to_bits());
        }
    }
}

#[test]
fn predictions_match_the_canvas_and_stay_in_range() {
    let corpus = small_corpus(6);
    let det = Detector::new(small_cfg(Variant::Full, 0)).unwrap();
    let scenes: Vec<&Scene> = corpus.scenes.iter().collect();
    for p in det.predict(&scenes, Execution::Parallel).unwrap() {
        assert_eq!(p.prob.dims(), (32, 32));
        assert!(p.prob.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.t_ith > 0.0 && p.t_ith < 1.0);
    }
    let other = small_corpus(1);
    let mut wrong = other.scenes[0].clone();
    wrong.input.height = 16;
    wrong.input.width = 64;
    assert!(matches!(det.predict(&[&wrong], Execution::Sequential), Err(Error::Shape { .. } | Error::Config(_))));
}

#[test]
fn untrained_detector_sees_nothing_in_a_blank_scene() {
    let corpus = small_corpus(1);
    let mut blank = corpus.scenes[0].clone();
    blank.input.data.iter_mut().for_each(|v| *v = 0.0);
    blank.gt.clear();
    let det = Detector::new(small_cfg(Variant::Baseline, 0)).unwrap();
    assert!(det.infer(&blank).unwrap().is_empty());
}
