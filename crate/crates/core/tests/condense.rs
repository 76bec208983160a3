mod common;

use common::index_from;
use ndarray::{Array2, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unforge::condense::{
    condense_fdm, condense_inversion, train_inverter, FdmConfig, FdmInit, InversionConfig, InversionPairs,
    InverterNet, LinearFeatures,
};
use unforge::data::LabeledDataset;
use unforge::nnkit::build_model;
use unforge::{ArchSpec, Tensor};

fn random_dataset(n: usize, p: usize, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let data: Vec<f64> = (0..n * p).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::from_shape_vec(IxDyn(&[n, 1, 1, p]), data).unwrap();
    LabeledDataset::new("random", images, vec![0; n], 1).unwrap()
}

fn random_map(out: usize, p: usize, rng: &mut ChaCha8Rng) -> LinearFeatures {
    LinearFeatures::new(Array2::from_shape_fn((out, p), |_| rng.random_range(-1.0..1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn fdm_output_is_a_convex_combination(seed in 0u64..10_000, n in 1usize..8, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(n, p, &mut rng);
        let mut f = random_map(3, p, &mut rng);
        let cfg = FdmConfig { epochs: 20, lr: 0.1, init: FdmInit::Random { seed } };
        let out = condense_fdm(&index_from(vec![vec![(0..n).collect()]], 1), &ds, &mut f, &cfg).unwrap();
        let w = out.weights[0].normalized();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..p {
            let column: Vec<f64> = (0..n).map(|i| ds.images[[i, 0, 0, j]]).collect();
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let got = out.set.images[[0, 0, 0, j]];
            let recombined: f64 = w.iter().zip(&column).map(|(a, b)| a * b).sum();
            prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            prop_assert!((got - recombined).abs() < 1e-12);
        }
        prop_assert!(out.final_loss[0] <= out.initial_loss[0]);
    }
}

fn loss_at(ds: &LabeledDataset, a: &Array2<f64>, w: &[f64]) -> f64 {
    let n = ds.len();
    let p = a.ncols();
    let x = |i: usize, j: usize| ds.images[[i, 0, 0, j]];
    let mut diff = vec![0.0; a.nrows()];
    for (r, d) in diff.iter_mut().enumerate() {
        for j in 0..p {
            let mean: f64 = (0..n).map(|i| x(i, j)).sum::<f64>() / n as f64;
            let mix: f64 = (0..n).map(|i| w[i] * x(i, j)).sum();
            *d += a[[r, j]] * (mean - mix);
        }
    }
    diff.iter().map(|d| d * d).sum::<f64>().sqrt()
}

#[test]
fn fdm_matches_simplex_grid_on_linear_features() {
    let steps = 300;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(3, 4, &mut rng);
        let a = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let mut grid_min = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps - i {
                let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                grid_min = grid_min.min(loss_at(&ds, &a, &w));
            }
        }
        let mut f = LinearFeatures::new(a.clone());
        let cfg = FdmConfig { epochs: 2000, lr: 0.05, init: FdmInit::Random { seed } };
        let out = condense_fdm(&index_from(vec![vec![vec![0, 1, 2]]], 1), &ds, &mut f, &cfg).unwrap();
        let independent = loss_at(&ds, &a, &out.weights[0].normalized());
        assert!((independent - out.final_loss[0]).abs() < 1e-9);
        assert!((out.final_loss[0] - grid_min).abs() < 1e-3, "fdm {} grid {grid_min}", out.final_loss[0]);
    }
}

fn four_image_cluster() -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..4 * 16).map(|_| rng.random_range(0.2..0.8)).collect();
    let images = Tensor::from_shape_vec(IxDyn(&[4, 1, 4, 4]), data).unwrap();
    LabeledDataset::new("four", images, vec![0, 0, 1, 1], 2).unwrap()
}

#[test]
fn inversion_leaves_the_model_bitwise_unchanged() {
    let ds = four_image_cluster();
    let mut model = build_model(&ArchSpec::mlp(8), &[1, 4, 4], 2, None, 1).unwrap();
    let before: Vec<u64> = model.flat_params().iter().map(|v| v.to_bits()).collect();
    let idx = index_from(vec![vec![vec![0, 1]], vec![vec![2, 3]]], 1);
    let cfg = InversionConfig { epochs: 5, batch_size: 2, hidden: 8, ..Default::default() };
    let out = condense_inversion(&idx, &ds, &mut model, &cfg).unwrap();
    let after: Vec<u64> = model.flat_params().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert!(model.flat_grads().iter().all(|&g| g == 0.0));
    assert_eq!(out.set.len(), 2);
    assert_eq!(out.set.labels, vec![0, 1]);
}

#[test]
fn large_lambda_drives_inversion_to_the_pixel_mean() {
    let ds = four_image_cluster();
    let mut model = build_model(&ArchSpec::mlp(8), &[1, 4, 4], 2, None, 1).unwrap();
    let mut gen = InverterNet::new(1, &[1, 4, 4], 16, 0).unwrap();
    let pairs = InversionPairs {
        cluster_labels: vec![0; 4],
        classes: vec![0; 4],
        targets: Some((&ds.images, vec![0, 1, 2, 3])),
    };
    let cfg = InversionConfig { epochs: 1500, lambda: 1e6, lr: 1e-2, batch_size: 4, hidden: 16, seed: 0 };
    train_inverter(&mut gen, &mut model, &pairs, &cfg).unwrap();
    let img = gen.generate(&[0]).unwrap();
    let mut sq = 0.0;
    for y in 0..4 {
        for x in 0..4 {
            let mean: f64 = (0..4).map(|i| ds.images[[i, 0, y, x]]).sum::<f64>() / 4.0;
            sq += (img[[0, 0, y, x]] - mean).powi(2);
        }
    }
    assert!(sq.sqrt() < 1e-2, "distance {}", sq.sqrt());
}

#[test]
fn negative_lambda_is_rejected() {
    let ds = four_image_cluster();
    let mut model = build_model(&ArchSpec::mlp(8), &[1, 4, 4], 2, None, 1).unwrap();
    let idx = index_from(vec![vec![vec![0, 1]], vec![vec![2, 3]]], 1);
    let cfg = InversionConfig { lambda: -1.0, ..Default::default() };
    assert!(condense_inversion(&idx, &ds, &mut model, &cfg).is_err());
}
