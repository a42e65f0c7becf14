//! Sensing operator, projection and GAP-TV against dense-matrix references.

use hsi_tensor::Tensor;
use hsi_unfold::cassi::{bernoulli_mask, shift_cube, unshift_cube, SensingOperator, ShiftSpec};
use hsi_unfold::gap::{clamp_unit, gap_tv_trace, project, tv_denoise_cube, GapTvOptions};
use hsi_unfold::metrics::psnr_cube;
use hsi_unfold::scenes::{make_synthetic_scene, SceneKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row-major dense `A` of shape `(H̃·W) × (L·H·W)`, built entry by entry.
fn dense(mask: &Tensor<f64>, step: usize, l: usize) -> (Vec<f64>, usize, usize) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let ht = h + step * (l - 1);
    let (rows, cols) = (ht * w, l * h * w);
    let mut a = vec![0.0; rows * cols];
    for b in 0..l {
        for r in 0..h {
            for c in 0..w {
                let row = (r + step * b) * w + c;
                let col = (b * h + r) * w + c;
                a[row * cols + col] = mask.at(&[r, c]);
            }
        }
    }
    (a, rows, cols)
}

fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| (0..cols).map(|j| a[i * cols + j] * x[j]).sum()).collect()
}

fn matvec_t(a: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    (0..cols).map(|j| (0..rows).map(|i| a[i * cols + j] * y[i]).sum()).collect()
}

/// `diag(AAᵀ)` and a check that `AAᵀ` has no off-diagonal mass.
fn gram_diag(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut d = vec![0.0; rows];
    for i in 0..rows {
        for k in 0..rows {
            let g: f64 = (0..cols).map(|j| a[i * cols + j] * a[k * cols + j]).sum();
            if i == k {
                d[i] = g;
            } else {
                assert_eq!(g, 0.0, "AAᵀ is not diagonal at ({i}, {k})");
            }
        }
    }
    d
}

fn dense_pinv_apply(a: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let d = gram_diag(a, rows, cols);
    let scaled: Vec<f64> = y.iter().zip(&d).map(|(v, g)| if *g > 0.0 { v / g } else { 0.0 }).collect();
    matvec_t(a, rows, cols, &scaled)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn continuous_mask(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn implicit_operator_matches_dense_matrix() {
    let mut cases = 0;
    for (h, w) in [(1, 1), (2, 3), (4, 4), (6, 6), (5, 2)] {
        for l in 1..=4 {
            for step in 0..=2 {
                for binary in [true, false] {
                    let seed = (h * 100 + w * 10 + l + step * 1000) as u64;
                    let mask = if binary { bernoulli_mask(h, w, 0.5, seed) } else { continuous_mask(h, w, seed) };
                    let op = SensingOperator::new(mask.clone(), ShiftSpec::new(step), l).unwrap();
                    let (a, rows, cols) = dense(&mask, step, l);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                    let x = Tensor::randn(&[l, h, w], 1.0, &mut rng);
                    let y = Tensor::randn(&op.measurement_shape(), 1.0, &mut rng);
                    assert!(max_diff(op.forward(&x).unwrap().data(), &matvec(&a, rows, cols, x.data())) <= 1e-6);
                    assert!(max_diff(op.adjoint(&y).unwrap().data(), &matvec_t(&a, rows, cols, y.data())) <= 1e-6);
                    // Same arithmetic (a sum of squares per row), so exact.
                    assert_eq!(op.phi().data(), gram_diag(&a, rows, cols).as_slice());
                    let yn = op.normalize_measurement(&y).unwrap();
                    assert!(max_diff(yn.data(), &dense_pinv_apply(&a, rows, cols, y.data())) <= 1e-6);
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 120);
}

#[test]
fn pseudo_inverse_oracle_4x4x3() {
    let mask = bernoulli_mask(4, 4, 0.5, 11);
    let op = SensingOperator::new(mask.clone(), ShiftSpec::new(1), 3).unwrap();
    let (a, rows, cols) = dense(&mask, 1, 3);
    let y = Tensor::from_fn(&op.measurement_shape(), |i| ((i * 37) % 11) as f64 / 10.0);
    let got = op.normalize_measurement(&y).unwrap();
    assert!(max_diff(got.data(), &dense_pinv_apply(&a, rows, cols, y.data())) <= 1e-6);
}

#[test]
fn adjoint_identity_over_seeds_and_configs() {
    for (h, w, l, step) in [(5, 7, 3, 1), (8, 8, 8, 2), (6, 4, 5, 0), (3, 9, 2, 3)] {
        for seed in 0..10 {
            let op = SensingOperator::new(continuous_mask(h, w, seed), ShiftSpec::new(step), l).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let x = Tensor::randn(&[l, h, w], 1.0, &mut rng);
            let y = Tensor::randn(&op.measurement_shape(), 1.0, &mut rng);
            let lhs = op.forward(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn trivial_inversions() {
    // Single band, binary mask: y_norm is x where the mask is open.
    let mask = bernoulli_mask(5, 6, 0.5, 3);
    let op = SensingOperator::new(mask.clone(), ShiftSpec::new(1), 1).unwrap();
    let x = Tensor::from_fn(&[1, 5, 6], |i| 0.1 + i as f64 / 40.0);
    let yn = op.normalize_measurement(&op.forward(&x).unwrap()).unwrap();
    for i in 0..30 {
        let expect = if mask.data()[i] > 0.0 { x.data()[i] } else { 0.0 };
        assert!((yn.data()[i] - expect).abs() < 1e-15);
    }
    // All-ones mask, no dispersion, constant cube: exact inversion of the band average.
    let op = SensingOperator::new(Tensor::ones(&[4, 4]), ShiftSpec::new(0), 3).unwrap();
    let x = Tensor::full(&[3, 4, 4], 0.37);
    let yn = op.normalize_measurement(&op.forward(&x).unwrap()).unwrap();
    assert!(yn.max_abs_diff(&x).unwrap() < 1e-15);
}

#[test]
fn renormalized_measurement_is_reproduced() {
    let op = SensingOperator::new(bernoulli_mask(8, 8, 0.5, 5), ShiftSpec::new(1), 4).unwrap();
    let x = make_synthetic_scene(2, 8, 8, 4, SceneKind::GaussianBlobs).unwrap();
    let y = op.forward(&x).unwrap();
    let again = op.forward(&op.normalize_measurement(&y).unwrap()).unwrap();
    assert!(again.max_abs_diff(&y).unwrap() <= 1e-12);
}

#[test]
fn shift_round_trip() {
    let x = Tensor::from_fn(&[3, 4, 5], |i| i as f64);
    for step in 0..3 {
        let s = ShiftSpec::new(step);
        assert_eq!(unshift_cube(&shift_cube(&x, s).unwrap(), 4, s).unwrap(), x);
    }
}

#[test]
fn projection_is_consistent_and_idempotent() {
    for seed in 0..6 {
        let (h, w, l) = (6 + seed as usize, 5, 3 + seed as usize % 3);
        let op = SensingOperator::new(bernoulli_mask(h, w, 0.5, seed), ShiftSpec::new(1 + seed as usize % 2), l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Tensor::uniform(&[l, h, w], 0.0, 1.0, &mut rng);
        let y = op.forward(&truth).unwrap();
        let v = Tensor::randn(&[l, h, w], 1.0, &mut rng);
        let x = project(&v, &y, &op).unwrap();
        assert!(op.forward(&x).unwrap().max_abs_diff(&y).unwrap() <= 1e-5);
        let xx = project(&x, &y, &op).unwrap();
        assert!(xx.max_abs_diff(&x).unwrap() <= 1e-6);
        // A consistent estimate is a fixed point.
        assert!(project(&truth, &y, &op).unwrap().max_abs_diff(&truth).unwrap() <= 1e-12);
    }
}

#[test]
fn gap_tv_matches_dense_reference_loop() {
    let mask = bernoulli_mask(4, 4, 0.5, 11);
    let op = SensingOperator::new(mask.clone(), ShiftSpec::new(1), 3).unwrap();
    let (a, rows, cols) = dense(&mask, 1, 3);
    let x = Tensor::from_fn(&[3, 4, 4], |i| ((i * 7) % 5) as f64 / 5.0);
    let y = op.forward(&x).unwrap();
    let opts = GapTvOptions {
        iterations: 8,
        tv_weight: 0.05,
        ..GapTvOptions::default()
    };
    let mut trace = Vec::new();
    gap_tv_trace(&y, &op, &opts, |_, v| trace.push(v.clone())).unwrap();
    let mut v = dense_pinv_apply(&a, rows, cols, y.data());
    for got in &trace {
        let av = matvec(&a, rows, cols, &v);
        let r: Vec<f64> = y.data().iter().zip(&av).map(|(a, b)| a - b).collect();
        let back = dense_pinv_apply(&a, rows, cols, &r);
        let xk: Vec<f64> = v.iter().zip(&back).map(|(a, b)| a + b).collect();
        v = tv_denoise_cube(&Tensor::from_vec(&[3, 4, 4], xk).unwrap(), &opts).into_data();
        assert!(max_diff(got.data(), &v) <= 1e-5);
    }
    assert_eq!(trace.len(), 8);
}

#[test]
fn gap_tv_without_regularization_stays_consistent() {
    let op = SensingOperator::new(bernoulli_mask(8, 8, 0.5, 1), ShiftSpec::new(1), 4).unwrap();
    let x = make_synthetic_scene(4, 8, 8, 4, SceneKind::SpectralRamps).unwrap();
    let y = op.forward(&x).unwrap();
    let opts = GapTvOptions {
        iterations: 5,
        tv_weight: 0.0,
        ..GapTvOptions::default()
    };
    gap_tv_trace(&y, &op, &opts, |_, v| {
        assert!(op.forward(v).unwrap().max_abs_diff(&y).unwrap() <= 1e-12);
    })
    .unwrap();
}

#[test]
fn gap_tv_improves_over_first_ten_iterations() {
    let op = SensingOperator::new(bernoulli_mask(32, 32, 0.5, 7), ShiftSpec::new(1), 8).unwrap();
    let x = make_synthetic_scene(7, 32, 32, 8, SceneKind::Checker).unwrap();
    let y = op.forward_noisy(&x, 0.01, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let opts = GapTvOptions {
        iterations: 10,
        tv_weight: 0.05,
        ..GapTvOptions::default()
    };
    let mut psnrs = Vec::new();
    gap_tv_trace(&y, &op, &opts, |_, v| psnrs.push(psnr_cube(&clamp_unit(v), &x).unwrap())).unwrap();
    assert!(psnrs.windows(2).all(|p| p[1] > p[0]), "{psnrs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_identity_holds(h in 1usize..7, w in 1usize..7, l in 1usize..5, step in 0usize..3, seed in any::<u64>()) {
        let op = SensingOperator::new(continuous_mask(h, w, seed), ShiftSpec::new(step), l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::randn(&[l, h, w], 1.0, &mut rng);
        let y = Tensor::randn(&op.measurement_shape(), 1.0, &mut rng);
        let lhs = op.forward(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn projection_fixes_measurement(h in 2usize..8, w in 2usize..8, l in 1usize..5, step in 0usize..3, seed in any::<u64>()) {
        let op = SensingOperator::new(bernoulli_mask(h, w, 0.6, seed), ShiftSpec::new(step), l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let y = op.forward(&Tensor::uniform(&[l, h, w], 0.0, 1.0, &mut rng)).unwrap();
        let x = project(&Tensor::randn(&[l, h, w], 1.0, &mut rng), &y, &op).unwrap();
        prop_assert!(op.forward(&x).unwrap().max_abs_diff(&y).unwrap() <= 1e-9);
    }
}
