//! Metrics against naive loop references.

use hsi_tensor::Tensor;
use hsi_unfold::colormap::INFERNO;
use hsi_unfold::metrics::{decode_png, error_indices, error_map_png, pearson, psnr, spectral_corr, ssim, ssim_with, Region, SsimOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(l: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[l, h, w], 0.0, 1.0, &mut rng);
    let n = Tensor::uniform(&[l, h, w], -0.1, 0.1, &mut rng);
    let y = x.zip_map(&n, |a: f64, b: f64| (a + b).clamp(0.0, 1.0)).unwrap();
    (y, x)
}

fn at(t: &Tensor<f64>, b: usize, r: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(b * s[1] + r) * s[2] + c]
}

fn psnr_loop(est: &Tensor<f64>, truth: &Tensor<f64>) -> f64 {
    let s = truth.shape();
    let mut total = 0.0;
    for b in 0..s[0] {
        let mut se = 0.0;
        for r in 0..s[1] {
            for c in 0..s[2] {
                let d = at(est, b, r, c) - at(truth, b, r, c);
                se += d * d;
            }
        }
        let mse = se / (s[1] * s[2]) as f64;
        total += if mse == 0.0 { 100.0 } else { (10.0 * (1.0 / mse).log10()).min(100.0) };
    }
    total / s[0] as f64
}

/// Direct 2-D window, no separability.
fn ssim_loop(est: &Tensor<f64>, truth: &Tensor<f64>, k: usize, sigma: f64) -> f64 {
    let s = truth.shape();
    let half = (k as f64 - 1.0) / 2.0;
    let mut win = vec![vec![0.0; k]; k];
    let mut z = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            win[i][j] = (-d2 / (2.0 * sigma * sigma)).exp();
            z += win[i][j];
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for b in 0..s[0] {
        let mut acc = 0.0;
        let mut count = 0;
        for r in 0..=s[1] - k {
            for c in 0..=s[2] - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i][j] / z;
                        let x = at(est, b, r + i, c + j);
                        let y = at(truth, b, r + i, c + j);
                        mx += g * x;
                        my += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / s[0] as f64
}

#[test]
fn psnr_matches_loop_reference() {
    for seed in 0..5 {
        let (a, b) = pair(4, 13, 17, seed);
        assert!((psnr(&a, &b).unwrap() - psnr_loop(&a, &b)).abs() <= 1e-9);
    }
}

#[test]
fn psnr_trivial_values() {
    let x = Tensor::from_fn(&[2, 4, 4], |i| (i % 7) as f64 / 7.0);
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    let y = x.map(|v| v + 0.1);
    assert!((psnr(&y, &x).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&x, &Tensor::zeros(&[2, 4, 5])).is_err());
}

#[test]
fn ssim_matches_loop_reference() {
    for seed in 0..3 {
        let (a, b) = pair(3, 16, 19, seed);
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_loop(&a, &b, 11, 1.5)).abs() <= 1e-7, "seed {seed}");
    }
    let (a, b) = pair(2, 9, 9, 9);
    let opts = SsimOptions { window: 5, ..SsimOptions::default() };
    assert!((ssim_with(&a, &b, &opts).unwrap() - ssim_loop(&a, &b, 5, 1.5)).abs() <= 1e-7);
}

#[test]
fn ssim_trivial_values() {
    let x = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let inv = x.map(|v| 1.0 - v);
    assert!(ssim(&inv, &x).unwrap() < 1.0);
    let small = Tensor::zeros(&[1, 10, 16]);
    let err = ssim(&small, &small).unwrap_err().to_string();
    assert!(err.contains("--ssim-window"), "{err}");
}

#[test]
fn pearson_matches_closed_form() {
    let a = [0.31, 0.55, 0.12, 0.9, 0.47, 0.66];
    let b = [0.29, 0.6, 0.2, 0.8, 0.41, 0.7];
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    let want = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
    assert!((pearson(&a, &b).unwrap() - want).abs() <= 1e-10);
}

#[test]
fn spectral_corr_identity_affine_and_constant() {
    let (_, x) = pair(6, 8, 8, 1);
    let region: Region = "2,1,4,5".parse().unwrap();
    assert!((spectral_corr(&x, &x, region).unwrap() - 1.0).abs() < 1e-12);
    let affine = x.map(|v| 0.5 * v + 0.2);
    assert!((spectral_corr(&affine, &x, region).unwrap() - 1.0).abs() < 1e-12);
    let flat = Tensor::from_fn(&[6, 8, 8], |_| 0.4);
    assert!(spectral_corr(&x, &flat, region).is_err());
    assert!(spectral_corr(&x, &x, Region { x: 6, y: 0, w: 4, h: 1 }).is_err());
    assert!("1,2,3".parse::<Region>().is_err());
}

#[test]
fn error_map_behaviour() {
    let (_, x) = pair(3, 6, 5, 2);
    let (idx, h, w) = error_indices(&x, &x, 2, 0.2).unwrap();
    assert_eq!((h, w), (6, 5));
    assert!(idx.iter().all(|&i| i == 0));

    let mut y = x.clone();
    y.data_mut()[6 * 5 + 2 * 5 + 3] += 0.5;
    let (idx, _, _) = error_indices(&y, &x, 2, 0.2).unwrap();
    let hot: Vec<usize> = (0..idx.len()).filter(|&i| idx[i] > 0).collect();
    assert_eq!(hot, vec![2 * 5 + 3]);
    assert_eq!(idx[13], 255);

    let png = error_map_png(&y, &x, 2, 0.2).unwrap();
    let (pw, ph, rgb) = decode_png(&png).unwrap();
    assert_eq!((pw, ph), (5, 6));
    let want: Vec<u8> = idx.iter().flat_map(|&i| INFERNO[i as usize]).collect();
    assert_eq!(rgb, want);

    assert!(error_indices(&y, &x, 0, 0.2).is_err());
    assert!(error_indices(&y, &x, 4, 0.2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psnr_oracle_holds(seed in 0u64..1000, l in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let (a, b) = pair(l, h, w, seed);
        prop_assert!((psnr(&a, &b).unwrap() - psnr_loop(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
        let (a, b) = pair(2, 12, 12, seed);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12 && s1 > -1.0);
    }
}
