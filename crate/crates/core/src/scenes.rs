//! Synthetic hyperspectral scenes with smooth spectra.

use std::fmt;
use std::str::FromStr;

use hsi_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    GaussianBlobs,
    SpectralRamps,
    Checker,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::GaussianBlobs, SceneKind::SpectralRamps, SceneKind::Checker];
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::GaussianBlobs => "gaussian_blobs",
            SceneKind::SpectralRamps => "spectral_ramps",
            SceneKind::Checker => "checker",
        })
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(SceneKind::GaussianBlobs),
            "spectral_ramps" => Ok(SceneKind::SpectralRamps),
            "checker" => Ok(SceneKind::Checker),
            other => Err(Error::Usage(format!("unknown scene kind '{other}'"))),
        }
    }
}

/// A reflectance-like curve: offset + one Gaussian bump + linear tilt, kept inside (0, 1).
fn random_spectrum(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let base = rng.gen_range(0.05..0.45);
    let amp = rng.gen_range(0.1..0.5);
    let centre = rng.gen_range(-0.1..1.1);
    let width = rng.gen_range(0.15..0.5);
    let tilt = rng.gen_range(-0.2..0.2);
    (0..bands)
        .map(|b| {
            let u = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            let bump = (-(u - centre).powi(2) / (2.0 * width * width)).exp();
            (base + amp * bump + tilt * (u - 0.5)).clamp(0.02, 0.98)
        })
        .collect()
}

/// Deterministic scene of shape `[L, H, W]` with values in `[0, 1]`.
pub fn make_synthetic_scene(seed: u64, width: usize, height: usize, bands: usize, kind: SceneKind) -> Result<Tensor<f64>> {
    if width < 8 || height < 8 || bands == 0 {
        return Err(Error::Usage(format!(
            "scene extents must be at least 8×8 with one band, got {width}×{height}×{bands}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    // Per-pixel weights over a small set of spectra.
    let (spectra, weights): (Vec<Vec<f64>>, Box<dyn Fn(usize, usize) -> Vec<f64>>) = match kind {
        SceneKind::GaussianBlobs => {
            let n = rng.gen_range(2..=4);
            let spectra: Vec<_> = (0..=n).map(|_| random_spectrum(&mut rng, bands)).collect();
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..w),
                        rng.gen_range(0.0..h),
                        rng.gen_range(0.08..0.25) * w.min(h),
                    )
                })
                .collect();
            let f = move |r: usize, c: usize| {
                let mut wts = vec![1.0];
                for &(cx, cy, rad) in &blobs {
                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                    wts.push((-d2 / (2.0 * rad * rad)).exp());
                }
                wts
            };
            (spectra, Box::new(f))
        }
        SceneKind::SpectralRamps => {
            let spectra = vec![random_spectrum(&mut rng, bands), random_spectrum(&mut rng, bands)];
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let lo = [0.0, dx * (w - 1.0)].iter().fold(0.0f64, |a, &b| a.min(b))
                + [0.0, dy * (h - 1.0)].iter().fold(0.0f64, |a, &b| a.min(b));
            let hi = [0.0, dx * (w - 1.0)].iter().fold(0.0f64, |a, &b| a.max(b))
                + [0.0, dy * (h - 1.0)].iter().fold(0.0f64, |a, &b| a.max(b));
            let f = move |r: usize, c: usize| {
                let t = (c as f64 * dx + r as f64 * dy - lo) / (hi - lo);
                vec![1.0 - t, t]
            };
            (spectra, Box::new(f))
        }
        SceneKind::Checker => {
            let a = random_spectrum(&mut rng, bands);
            let mut b = random_spectrum(&mut rng, bands);
            while a == b {
                b = random_spectrum(&mut rng, bands);
            }
            let cell = [4usize, 8][rng.gen_range(0..2)];
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            let f = move |r: usize, c: usize| {
                if ((r + oy) / cell + (c + ox) / cell) % 2 == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            };
            (vec![a, b], Box::new(f))
        }
    };
    let mut cube = Tensor::zeros(&[bands, height, width]);
    let data = cube.data_mut();
    for r in 0..height {
        for c in 0..width {
            let wts = weights(r, c);
            for band in 0..bands {
                let v = match kind {
                    // Blobs blend from the background spectrum toward each blob's own.
                    SceneKind::GaussianBlobs => {
                        let bg = spectra[0][band];
                        bg + wts[1..].iter().zip(&spectra[1..]).map(|(g, s)| g * (s[band] - bg)).sum::<f64>()
                    }
                    _ => wts.iter().zip(&spectra).map(|(g, s)| g * s[band]).sum(),
                };
                data[(band * height + r) * width + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(cube)
}

/// Training and held-out scenes, kinds cycling through [`SceneKind::ALL`].
#[derive(Clone, Debug)]
pub struct SceneSet {
    pub train: Vec<Tensor<f64>>,
    pub test: Vec<Tensor<f64>>,
}

impl SceneSet {
    pub fn generate(seed: u64, n_train: usize, n_test: usize, width: usize, height: usize, bands: usize) -> Result<Self> {
        let make = |offset: u64, n: usize| -> Result<Vec<Tensor<f64>>> {
            (0..n)
                .map(|i| {
                    let kind = SceneKind::ALL[i % SceneKind::ALL.len()];
                    let s = seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
                    make_synthetic_scene(s, width, height, bands, kind)
                })
                .collect()
        };
        Ok(SceneSet {
            train: make(0, n_train)?,
            test: make(1 << 32, n_test)?,
        })
    }
}
