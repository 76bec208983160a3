use proptest::prelude::*;
use unforge::applications::{
    between_within_ratio, class_means, distance_to_class_means, image_grid, invert_unlearned, mia_defense, otsu_split,
    DefenseConfig, DefenseData, OTSU_BINS,
};
use unforge::condense::InversionConfig;
use unforge::data::{synthetic_gaussians, SyntheticConfig};
use unforge::metrics::ShadowConfig;
use unforge::modular::{ModularSchedule, RemembranceSet};
use unforge::nnkit::build_model;
use unforge::{ArchSpec, TrainConfig};

/// Direct between-class variance of the split `bin(v) < t`, from raw values.
fn split_variance(values: &[f64], t: usize) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / OTSU_BINS as f64;
    let bin = |v: f64| (((v - lo) / width) as usize).min(OTSU_BINS - 1);
    let (low, high): (Vec<f64>, Vec<f64>) = values.iter().partition(|&&v| bin(v) < t);
    if low.is_empty() || high.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m0 = low.iter().sum::<f64>() / low.len() as f64;
    let m1 = high.iter().sum::<f64>() / high.len() as f64;
    Some(low.len() as f64 / n * high.len() as f64 / n * (m0 - m1).powi(2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn otsu_maximizes_between_class_variance(values in proptest::collection::vec(-10.0f64..10.0, 2..200)) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let got = otsu_split(&values).unwrap();
        let best = (1..OTSU_BINS).filter_map(|t| split_variance(&values, t)).fold(f64::NEG_INFINITY, f64::max);
        let mine = split_variance(&values, got.bin).unwrap();
        prop_assert!((mine - best).abs() <= 1e-9 * best.max(1.0), "{} vs {}", mine, best);
        prop_assert!((got.between_variance - best).abs() <= 1e-9 * best.max(1.0));
        let low_count = got.low.len();
        prop_assert!(low_count > 0 && low_count < values.len());
    }

    #[test]
    fn otsu_split_is_scale_equivariant(
        values in proptest::collection::vec(0.0f64..1.0, 2..100),
        shift in -4i32..4,
    ) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let scale = 2f64.powi(shift);
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        let a = otsu_split(&values).unwrap();
        let b = otsu_split(&scaled).unwrap();
        prop_assert_eq!(a.low, b.low);
        prop_assert_eq!(a.bin, b.bin);
    }
}

#[test]
fn otsu_rejects_degenerate_inputs() {
    assert!(otsu_split(&[1.0]).is_err());
    assert!(otsu_split(&[2.0, 2.0, 2.0]).is_err());
    assert!(otsu_split(&[0.0, f64::NAN]).is_err());
}

#[test]
fn otsu_separates_two_clumps() {
    let mut v: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
    v.extend((0..30).map(|i| 5.0 + 0.01 * i as f64));
    let s = otsu_split(&v).unwrap();
    assert_eq!(s.low, (0..20).collect::<Vec<_>>());
    assert!(s.threshold > 0.19 && s.threshold <= 5.0);
}

#[test]
fn zero_epoch_defense_leaves_the_model_alone() {
    let cfg = SyntheticConfig { per_class: 20, test_per_class: 20, seed: 5, ..Default::default() };
    let (train, test) = synthetic_gaussians(&cfg).unwrap();
    let (pop, _) = synthetic_gaussians(&SyntheticConfig { seed: 6, per_class: 40, ..cfg }).unwrap();
    let mut model = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 0).unwrap();
    let rem = RemembranceSet::draw(&pop.dataset, 3, &[], 0).unwrap();
    let before: Vec<u64> = model.flat_params().iter().map(|v| v.to_bits()).collect();
    let data = DefenseData {
        train: &train.dataset.samples(),
        eval: &test.dataset.samples(),
        population: &pop.dataset.samples(),
        remembrance: &rem,
    };
    let dcfg = DefenseConfig {
        epochs: 0,
        schedule: ModularSchedule::default(),
        shadow: ShadowConfig { arch: ArchSpec::mlp(8), train: TrainConfig::new(1e-2, 16, 2, 0) },
        shadow_count: 2,
    };
    let rep = mia_defense(&mut model, &data, &dcfg).unwrap();
    let after: Vec<u64> = model.flat_params().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_eq!(rep.mia_before, rep.mia_after);
    assert_eq!(rep.test_accuracy_before, rep.test_accuracy_after);
    assert!(rep.records.is_empty());
}

#[test]
fn inversion_audit_with_one_cluster_per_class() {
    let mut model = build_model(&ArchSpec::mlp(8), &[1, 8, 8], 3, None, 2).unwrap();
    let before = model.flat_params();
    let cfg = InversionConfig { epochs: 3, batch_size: 3, hidden: 8, ..Default::default() };
    let audit = invert_unlearned(&mut model, 1, &cfg).unwrap();
    assert_eq!(model.flat_params(), before);
    assert_eq!(audit.images.shape(), &[3, 1, 8, 8]);
    assert_eq!(audit.labels, vec![0, 1, 2]);
    assert!(between_within_ratio(&audit).is_none());
    assert!(invert_unlearned(&mut model, 0, &cfg).is_err());
}

#[test]
fn distance_to_own_mean_is_zero() {
    let cfg = SyntheticConfig { per_class: 5, seed: 1, ..Default::default() };
    let (train, _) = synthetic_gaussians(&cfg).unwrap();
    let s = train.dataset.samples();
    let means = class_means(&s, 5);
    assert!(means[4].is_none());
    let mut model = build_model(&ArchSpec::mlp(8), &[1, 8, 8], 4, None, 2).unwrap();
    let mut audit = invert_unlearned(&mut model, 1, &InversionConfig { epochs: 1, hidden: 4, ..Default::default() }).unwrap();
    for c in 0..4 {
        audit.images.index_axis_mut(ndarray::Axis(0), c).assign(means[c].as_ref().unwrap());
    }
    let d = distance_to_class_means(&audit, &means[..4]);
    assert!(d.iter().all(|v| v.unwrap() < 1e-12));
}

#[test]
fn image_grid_tiles_row_major() {
    let imgs = ndarray::Array::from_shape_fn(ndarray::IxDyn(&[3, 1, 2, 2]), |ix| ix[0] as f64 / 3.0);
    let g = image_grid(&imgs, 2).unwrap();
    assert_eq!(g.shape()[1..], [4, 4]);
    assert_eq!(g[[0, 0, 0]], 0.0);
    assert_eq!(g[[0, 0, 3]], 1.0 / 3.0);
    assert_eq!(g[[0, 3, 0]], 2.0 / 3.0);
}
