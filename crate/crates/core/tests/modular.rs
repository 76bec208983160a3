use unforge::data::{synthetic_gaussians, SyntheticConfig};
use unforge::modular::{offline_phase, online_phase, read_log, write_log, ModularSchedule, OnlineSchedule, RemembranceSet};
use unforge::nnkit::{build_model, Snapshot};
use unforge::{ArchSpec, Segment};

fn setup() -> (unforge::data::LabeledDataset, unforge::data::LabeledDataset) {
    let cfg = SyntheticConfig { per_class: 24, test_per_class: 12, seed: 11, ..Default::default() };
    let (a, b) = synthetic_gaussians(&cfg).unwrap();
    (a.dataset, b.dataset)
}

fn schedule() -> ModularSchedule {
    let mut s = ModularSchedule::default();
    s.offline.iters = 2;
    s.offline.final_epochs = 2;
    s.offline.intermediate_epochs = 1;
    s.offline.batch_size = 16;
    s.offline.lr_final = 1e-2;
    s.offline.lr_intermediate = 1e-2;
    s.online = OnlineSchedule { steps: 6, tau: 2, final_epochs: 2, lr: 1e-2, lr_final: 1e-2, batch_size: 16 };
    s
}

#[test]
fn offline_phase_never_writes_the_beginning() {
    let (train, pool) = setup();
    let mut model = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 0).unwrap();
    let snap = Snapshot::take(&model);
    let begin = model.flat_params_of(Segment::Beginning);
    let rem = RemembranceSet::draw(&pool, 3, &[], 0).unwrap();
    let recs = offline_phase(&mut model, &snap, &train.samples(), &rem, &schedule()).unwrap();
    assert_eq!(model.flat_params_of(Segment::Beginning), begin);
    assert_ne!(model.flat_params_of(Segment::Intermediate), snap_segment(&snap, Segment::Intermediate));
    assert_eq!(recs.len(), 4);
    let segs: Vec<Segment> = recs.iter().map(|r| r.segment).collect();
    assert_eq!(segs, [Segment::Final, Segment::Intermediate, Segment::Final, Segment::Intermediate]);
    assert!(recs.iter().filter(|r| r.segment == Segment::Final).all(|r| r.data == "remembrance" && r.samples == 12));
}

fn snap_segment(snap: &Snapshot, seg: Segment) -> Vec<f64> {
    let mut m = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 99).unwrap();
    snap.restore(&mut m).unwrap();
    m.flat_params_of(seg)
}

#[test]
fn online_log_follows_the_schedule() {
    let (train, pool) = setup();
    let mut model = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 0).unwrap();
    let rem = RemembranceSet::draw(&pool, 3, &[0], 0).unwrap();
    let sched = schedule();
    let out = online_phase(&mut model, &train.samples(), &rem, &sched).unwrap();
    let on = sched.online;
    let begin: Vec<usize> = out.records.iter().filter(|r| r.segment == Segment::Beginning).map(|r| r.step).collect();
    assert_eq!(begin, (0..on.steps).collect::<Vec<_>>());
    let refresh: Vec<usize> = out.records.iter().filter(|r| r.segment == Segment::Final).map(|r| r.step).collect();
    assert_eq!(refresh, (0..on.steps - on.tau).collect::<Vec<_>>());
    assert_eq!(out.refreshes, on.steps - on.tau);
    let last = out.records.last().unwrap();
    assert_eq!((last.segment, last.step, last.epochs), (Segment::Intermediate, on.steps, 1));
    assert!(out.records.iter().filter(|r| r.segment == Segment::Final).all(|r| r.data == "remembrance"));
    assert!(out.ut_seconds > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("online.jsonl");
    write_log(&path, &out.records).unwrap();
    assert_eq!(read_log(&path).unwrap(), out.records);
}

#[test]
fn online_phase_is_deterministic() {
    let (train, pool) = setup();
    let rem = RemembranceSet::draw(&pool, 3, &[], 4).unwrap();
    let run = || {
        let mut m = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 0).unwrap();
        online_phase(&mut m, &train.samples(), &rem, &schedule()).unwrap();
        m.flat_params()
    };
    assert_eq!(run(), run());
}

#[test]
fn remembrance_draw_is_balanced_and_excludes() {
    let (_, pool) = setup();
    let rem = RemembranceSet::draw(&pool, 5, &[1, 3], 2).unwrap();
    assert_eq!(rem.classes, vec![0, 2]);
    assert_eq!(rem.len(), 10);
    let mut labels = rem.samples.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, [vec![0; 5], vec![2; 5]].concat());
    assert!(RemembranceSet::draw(&pool, 13, &[], 0).is_err());
    assert!(RemembranceSet::draw(&pool, 0, &[], 0).is_err());
    assert!(RemembranceSet::draw(&pool, 1, &[0, 1, 2, 3], 0).is_err());
}

#[test]
fn schedule_validation_and_eta_rescale() {
    let mut s = schedule();
    s.online.tau = s.online.steps;
    assert!(s.validate().is_err());
    let s = schedule();
    for (eta, steps) in [(0.1, 10), (0.5, 20), (0.9, 30)] {
        let r = s.for_eta(eta).unwrap();
        assert_eq!(r.online.steps, steps);
        assert!(r.validate().is_ok());
        let share = r.online.tau as f64 / steps as f64;
        assert!((share - 2.0 / 6.0).abs() <= 0.5 / steps as f64);
    }
    assert!(s.for_eta(f64::NAN).is_err());
}
