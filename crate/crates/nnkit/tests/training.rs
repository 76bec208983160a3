use ndarray::{Array2, IxDyn};
use nnkit::layers::Linear;
use nnkit::loss::CrossEntropy;
use nnkit::{
    build_model, train_segments, ArchId, ArchSpec, Layer, Objective, PartitionedModel, Samples, Segment,
    SegmentMask, Sequential, Snapshot, Tensor, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize, classes: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(IxDyn(&[n, 1, 4, 4]));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for p in 0..16 {
            let on = p % classes == c;
            x[[i, 0, p / 4, p % 4]] = if on { 0.8 } else { 0.2 } + 0.1 * (rng.random::<f64>() - 0.5);
        }
        y.push(c);
    }
    Samples::new(x, y).unwrap()
}

fn segment_bits(m: &PartitionedModel, seg: Segment) -> Vec<u64> {
    let s = m.segment(seg);
    s.params()
        .iter()
        .flat_map(|p| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .chain(s.buffers().iter().flat_map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

#[test]
fn final_only_training_leaves_other_segments_bitwise_equal() {
    let mut m = build_model(&ArchSpec::cnn(4, 16), &[1, 4, 4], 3, None, 0).unwrap();
    let d = blobs(60, 3, 1);
    let b0 = segment_bits(&m, Segment::Beginning);
    let i0 = segment_bits(&m, Segment::Intermediate);
    let f0 = segment_bits(&m, Segment::Final);
    let cfg = TrainConfig::new(1e-2, 16, 5, 0);
    let log = train_segments(&mut m, &d, &cfg, SegmentMask::only(Segment::Final), &CrossEntropy).unwrap();
    assert_eq!(log.epochs.len(), 5);
    assert_eq!(b0, segment_bits(&m, Segment::Beginning));
    assert_eq!(i0, segment_bits(&m, Segment::Intermediate));
    assert_ne!(f0, segment_bits(&m, Segment::Final));
}

#[test]
fn middle_segment_training_freezes_both_neighbours() {
    let mut m = build_model(&ArchSpec::cnn(4, 16), &[1, 4, 4], 3, None, 0).unwrap();
    let d = blobs(30, 3, 2);
    let b0 = segment_bits(&m, Segment::Beginning);
    let f0 = segment_bits(&m, Segment::Final);
    let cfg = TrainConfig::new(1e-2, 8, 2, 0);
    train_segments(&mut m, &d, &cfg, SegmentMask::only(Segment::Intermediate), &CrossEntropy).unwrap();
    assert_eq!(b0, segment_bits(&m, Segment::Beginning));
    assert_eq!(f0, segment_bits(&m, Segment::Final));
}

#[test]
fn tiny_mlp_fits_separable_blobs() {
    let mut m = build_model(&ArchSpec::mlp(32), &[1, 4, 4], 4, None, 3).unwrap();
    let d = blobs(400, 4, 3);
    let cfg = TrainConfig::new(1e-3, 256, 30, 0);
    train_segments(&mut m, &d, &cfg, SegmentMask::ALL, &CrossEntropy).unwrap();
    let pred = m.predict(&d.images).unwrap();
    let correct = pred.iter().zip(&d.labels).filter(|(a, b)| a == b).count();
    assert!(correct as f64 / d.len() as f64 > 0.95, "accuracy {correct}/{}", d.len());
}

#[test]
fn snapshot_restore_recovers_pretraining_outputs() {
    let mut m = build_model(&ArchSpec::cnn(2, 8), &[1, 4, 4], 3, None, 0).unwrap();
    let d = blobs(20, 3, 4);
    let before = m.logits(&d.images).unwrap();
    let snap = Snapshot::take(&m);
    train_segments(&mut m, &d, &TrainConfig::new(1e-2, 8, 2, 0), SegmentMask::ALL, &CrossEntropy).unwrap();
    assert_ne!(before, m.logits(&d.images).unwrap());
    snap.restore(&mut m).unwrap();
    assert_eq!(before, m.logits(&d.images).unwrap());
}

#[test]
fn snapshot_rejects_other_architectures() {
    let mlp = build_model(&ArchSpec::mlp(8), &[1, 4, 4], 3, None, 0).unwrap();
    let mut cnn = build_model(&ArchSpec::cnn(2, 8), &[1, 4, 4], 3, None, 0).unwrap();
    assert!(Snapshot::take(&mlp).restore(&mut cnn).is_err());
}

/// Two-parameter model: logits = [w·x, v·x] on a scalar input.
fn toy(w: f64, v: f64) -> PartitionedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut l = Linear::new(1, 2, false, &mut rng);
    l.weight.value = Array2::from_shape_vec((2, 1), vec![w, v]).unwrap().into_dyn();
    let segs = [
        Sequential::new(vec![Layer::Flatten(Default::default())]),
        Sequential::default(),
        Sequential::new(vec![Layer::Linear(l)]),
    ];
    PartitionedModel::from_segments(ArchId::Custom, &[1, 1, 1], 2, (1, 2), segs, 0).unwrap()
}

fn toy_loss(w: f64, v: f64, x: &Tensor, y: &[usize]) -> f64 {
    let mut m = toy(w, v);
    let z = m.logits(x).unwrap();
    let idx: Vec<usize> = (0..y.len()).collect();
    CrossEntropy.evaluate(&z, y, &idx).0
}

#[test]
fn two_parameter_gradient_matches_central_differences() {
    let x = Tensor::from_shape_vec(IxDyn(&[3, 1, 1, 1]), vec![0.5, -1.3, 2.0]).unwrap();
    let y = [0, 1, 1];
    let (w, v) = (0.7, -0.4);
    let mut m = toy(w, v);
    m.zero_grad();
    let z = m.forward_from(&x, Segment::Beginning, SegmentMask::NONE).unwrap();
    let z = z.into_dimensionality::<ndarray::Ix2>().unwrap();
    let (_, g) = CrossEntropy.evaluate(&z, &y, &[0, 1, 2]);
    m.backward_to(&g.into_dyn(), Segment::Beginning);
    let analytic = m.flat_grads();
    let h = 1e-6;
    let numeric = [
        (toy_loss(w + h, v, &x, &y) - toy_loss(w - h, v, &x, &y)) / (2.0 * h),
        (toy_loss(w, v + h, &x, &y) - toy_loss(w, v - h, &x, &y)) / (2.0 * h),
    ];
    for (a, n) in analytic.iter().zip(numeric) {
        assert!((a - n).abs() <= 1e-4 * n.abs().max(1e-8), "{a} vs {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn freeze_contract_holds_for_any_mask(bits in 1u8..7, seed in 0u64..100) {
        let mut mask = SegmentMask::NONE;
        for s in Segment::ALL {
            if bits & (1 << s.index()) != 0 {
                mask = mask.with(s);
            }
        }
        let mut m = build_model(&ArchSpec::cnn(2, 8), &[1, 4, 4], 3, None, seed).unwrap();
        let before: Vec<_> = Segment::ALL.iter().map(|s| segment_bits(&m, *s)).collect();
        let d = blobs(12, 3, seed);
        train_segments(&mut m, &d, &TrainConfig::new(1e-2, 4, 1, seed), mask, &CrossEntropy).unwrap();
        for s in Segment::ALL {
            if !mask.contains(s) {
                prop_assert_eq!(&before[s.index()], &segment_bits(&m, s));
            }
        }
    }
}
