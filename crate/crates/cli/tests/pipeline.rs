use std::time::Instant;

use unforge_cli::{run_cycles, run_pipeline, sweep_k, ExperimentConfig, Run, RunMethod};

fn toy_in(dir: &std::path::Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(seed);
    cfg.output_dir = dir.to_path_buf();
    cfg
}

/// Few samples so that η, and with it the step count, changes with K.
fn small(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = toy_in(dir, 2);
    cfg.dataset.synthetic.per_class = 40;
    cfg.dataset.synthetic.test_per_class = 60;
    cfg.pretrain.batch_size = 16;
    cfg.remembrance_m = 5;
    cfg
}

#[test]
fn toy_pipeline_is_fast_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let clock = Instant::now();
    let summary = run_pipeline(toy_in(&dir, 0)).unwrap();
    assert!(clock.elapsed().as_secs_f64() < 60.0);
    let rbe = summary.rbe.expect("three methods give an RBE table");
    assert_eq!(rbe.rbe.len(), 3);
    for m in ["R", "CF", "MU"] {
        assert!(rbe.rbe.contains_key(m));
        assert!(dir.join(format!("reports/{m}.json")).exists());
    }
    for png in std::fs::read_dir(dir.join("plots")).unwrap() {
        let p = png.unwrap().path();
        if p.extension().is_some_and(|e| e == "png") {
            assert!(p.with_extension("csv").exists(), "{} has no csv", p.display());
        }
    }
    let first = std::fs::read(dir.join("metrics.json")).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    run_pipeline(toy_in(&dir, 0)).unwrap();
    assert_eq!(first, std::fs::read(dir.join("metrics.json")).unwrap());

    let run = Run::open_at(toy_in(&dir, 0), dir.clone()).unwrap();
    let lineage = run.read_lineage().unwrap();
    let collect_at = lineage.iter().position(|l| l.stage == "collect").unwrap();
    for l in &lineage[collect_at + 1..] {
        if l.stage != "evaluate" {
            assert!(!l.reads.iter().any(|r| r == "forget" || r == "train"), "{} reads {:?}", l.stage, l.reads);
        }
    }
}

#[test]
fn cycles_accumulate_forgetting() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::toy_random(4, 0.1);
    cfg.output_dir = tmp.path().to_path_buf();
    assert!(run_cycles(cfg.clone(), 10, 0.1).is_err());
    assert!(run_cycles(cfg.clone(), 0, 0.1).is_err());
    let cycles = run_cycles(cfg, 5, 0.1).unwrap();
    assert_eq!(cycles.len(), 5);
    let n = 8000;
    for (i, c) in cycles.iter().enumerate() {
        assert_eq!(c.cycle, i + 1);
        assert_eq!(c.cumulative_forget, n * (i + 1) / 10);
        assert!(c.n_r <= n - c.cumulative_forget);
    }
    for w in cycles.windows(2) {
        assert!(w[1].eta.empirical.unwrap() >= w[0].eta.empirical.unwrap());
        assert!(w[1].steps >= w[0].steps);
    }
    assert!(cycles[0].ut_seconds < cycles[0].r_ut_seconds);
    assert!(tmp.path().join("cycles.json").exists());
}

#[test]
fn single_k_sweep_matches_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&tmp.path().join("sweep"));
    cfg.eta_schedule = true;
    cfg.methods = vec![RunMethod::Mu];
    let points = sweep_k(cfg.clone(), &[4]).unwrap();
    assert_eq!(points.len(), 1);
    cfg.k = 4;
    cfg.output_dir = tmp.path().join("direct");
    let summary = run_pipeline(cfg).unwrap();
    let mu = &summary.reports[0];
    assert_eq!(mu.method, "MU");
    assert_eq!(points[0].ra, mu.ra);
    assert_eq!(points[0].fa, mu.fa);
    assert_eq!(points[0].mia, mu.mia);
}

#[test]
fn sweep_steps_grow_with_k_under_class_forgetting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    assert!(sweep_k(cfg.clone(), &[]).is_err());
    assert!(sweep_k(cfg.clone(), &[41]).is_err());
    let points = sweep_k(cfg, &[2, 16, 36]).unwrap();
    let steps: Vec<usize> = points.iter().map(|p| p.steps).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]), "{steps:?}");
    assert!(steps[0] < steps[2], "{steps:?}");
    assert!(points.windows(2).all(|w| w[0].eta <= w[1].eta));
    assert!(points.last().unwrap().ut_seconds > points[0].ut_seconds);
    let ra: Vec<f64> = points.iter().map(|p| p.ra).collect();
    let spread = ra.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ra.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(spread <= 10.0, "{ra:?}");
}
