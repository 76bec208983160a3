use unforge::baselines::{retrain_to_accuracy, unlearn_baseline, weight_density, BaselineConfig, Method};
use unforge::data::{split_forget_retain, synthetic_gaussians, ForgetSpec, LabeledDataset, SplitView, SyntheticConfig};
use unforge::metrics::accuracy;
use unforge::nnkit::{build_model, train_segments};
use unforge::nnkit::loss::CrossEntropy;
use unforge::{ArchSpec, PartitionedModel, SegmentMask, TrainConfig};

fn pretrained(forget: ForgetSpec) -> (PartitionedModel, LabeledDataset, SplitView) {
    let cfg = SyntheticConfig { per_class: 40, seed: 21, ..Default::default() };
    let (train, _) = synthetic_gaussians(&cfg).unwrap();
    let ds = train.dataset;
    let mut m = build_model(&ArchSpec::mlp(16), &[1, 8, 8], 4, None, 3).unwrap();
    train_segments(&mut m, &ds.samples(), &TrainConfig::new(1e-2, 16, 5, 0), SegmentMask::ALL, &CrossEntropy).unwrap();
    let split = split_forget_retain(&ds, &forget).unwrap();
    (m, ds, split)
}

fn bits(m: &PartitionedModel) -> Vec<u64> {
    m.flat_params().iter().map(|v| v.to_bits()).collect()
}

fn base() -> TrainConfig {
    TrainConfig::new(1e-2, 16, 3, 7)
}

#[test]
fn sparsity_with_zero_gamma_is_fine_tuning() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    let cf = unlearn_baseline(&BaselineConfig::new(Method::Cf, base()), &m, &ds, &split).unwrap();
    let mut s = BaselineConfig::new(Method::S, base());
    s.params.gamma = Some(0.0);
    let s = unlearn_baseline(&s, &m, &ds, &split).unwrap();
    assert_eq!(bits(&cf.model), bits(&s.model));
}

#[test]
fn distillation_without_soft_term_is_fine_tuning() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    let cf = unlearn_baseline(&BaselineConfig::new(Method::Cf, base()), &m, &ds, &split).unwrap();
    let mut d = BaselineConfig::new(Method::D, base());
    d.params.hw = Some(1.0);
    d.params.sw = Some(0.0);
    let d = unlearn_baseline(&d, &m, &ds, &split).unwrap();
    let (a, b) = (cf.model.flat_params(), d.model.flat_params());
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-12, "max gap {gap}");
}

#[test]
fn baselines_leave_the_pretrained_model_alone() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    let before = bits(&m);
    for method in [Method::Cf, Method::D, Method::S] {
        unlearn_baseline(&BaselineConfig::new(method, base()), &m, &ds, &split).unwrap();
        assert_eq!(bits(&m), before);
    }
}

#[test]
fn pruning_keeps_its_masks_through_training() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    for magnitude in [false, true] {
        let mut cfg = BaselineConfig::new(Method::Pu, base());
        cfg.params.synflow_iters = 10;
        cfg.params.magnitude_prune = magnitude;
        let out = unlearn_baseline(&cfg, &m, &ds, &split).unwrap();
        let density = weight_density(&out.model);
        assert!(density <= 0.05 + 1e-9, "density {density}");
        let masks = out.masks.unwrap();
        for (p, mask) in out.model.params().iter().zip(&masks) {
            if let Some(mask) = mask {
                for (v, k) in p.value.iter().zip(mask.iter()) {
                    if *k == 0.0 {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn retraining_never_predicts_a_forgotten_class() {
    let (m, ds, split) = pretrained(ForgetSpec::class(2));
    let cfg = BaselineConfig::new(Method::R, TrainConfig::new(1e-2, 16, 10, 0)).with_arch(ArchSpec::mlp(16));
    let mut out = unlearn_baseline(&cfg, &m, &ds, &split).unwrap();
    let forget = ds.subset(&split.forget);
    assert_eq!(accuracy(&mut out.model, &forget).unwrap(), 0.0);
    assert!(accuracy(&mut out.model, &ds.subset(&split.retain)).unwrap() > 80.0);
}

#[test]
fn fresh_model_methods_need_an_arch() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    for method in [Method::R, Method::Bd] {
        assert!(unlearn_baseline(&BaselineConfig::new(method, base()), &m, &ds, &split).is_err());
    }
    let wrong = BaselineConfig::new(Method::R, base()).with_arch(ArchSpec::cnn(4, 8));
    assert!(unlearn_baseline(&wrong, &m, &ds, &split).is_err());
    let bd = BaselineConfig::new(Method::Bd, base()).with_arch(ArchSpec::mlp(16));
    assert!(unlearn_baseline(&bd, &m, &ds, &split).is_ok());
}

#[test]
fn matched_retraining_stops_at_the_target() {
    let (m, ds, split) = pretrained(ForgetSpec::random(0.1, 1));
    let retain = ds.subset(&split.retain);
    let cfg = BaselineConfig::new(Method::R, TrainConfig::new(1e-2, 16, 40, 0)).with_arch(ArchSpec::mlp(16));
    let (mut out, reached) = retrain_to_accuracy(&cfg, &m, &retain, 60.0).unwrap();
    assert!(reached);
    assert!(accuracy(&mut out.model, &retain).unwrap() >= 60.0);
    let epochs = out.log.epochs.len();
    assert!(epochs >= 1 && epochs < 40);
    let (_, unreachable) = retrain_to_accuracy(
        &BaselineConfig { base: TrainConfig::new(1e-2, 16, 1, 0), ..cfg.clone() },
        &m,
        &retain,
        100.1,
    )
    .unwrap();
    assert!(!unreachable);
    let cf = BaselineConfig::new(Method::Cf, base());
    assert!(retrain_to_accuracy(&cf, &m, &retain, 50.0).is_err());
}

#[test]
fn method_names_parse() {
    for (s, m) in [("R", Method::R), ("cf", Method::Cf), ("BD", Method::Bd), ("pu", Method::Pu)] {
        assert_eq!(s.parse::<Method>().unwrap(), m);
    }
    assert!("MU".parse::<Method>().is_err());
}
