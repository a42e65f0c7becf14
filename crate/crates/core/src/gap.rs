//! Generalized alternating projection: the Euclidean projection, its learned
//! gradient correction, the unfolded stage loop and the classical GAP-TV solver.

use std::rc::Rc;

use hsi_tensor::nn::{Bound, DscBlock, Init, ParamBuilder};
use hsi_tensor::{LinearMap, Real, Tensor, Var};

use crate::cassi::SensingOperator;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::Result;

/// `x = v + Aᵀ(AAᵀ)⁻¹(y − A v)` on plain tensors.
pub fn project<T: Real>(v: &Tensor<T>, y: &Tensor<T>, op: &SensingOperator<T>) -> Result<Tensor<T>> {
    let av = op.forward(v)?;
    let r = y.zip_map(&av, |a, b| a - b)?;
    let back = op.normalize_measurement(&r)?;
    Ok(v.zip_map(&back, |a, b| a + b)?)
}

/// `Aᵀ(AAᵀ)⁻¹(y − A v)` on the tape. `v` is `[1, L, H, W]`, `y` is `[1, 1, H̃, W]`.
pub fn residual_backprojection<'t, T: Real>(v: Var<'t, T>, y: &Tensor<T>, op: &Rc<SensingOperator<T>>) -> Result<Var<'t, T>> {
    let map: Rc<dyn LinearMap<T>> = op.clone();
    let av = v.linear_map(map.clone(), false)?;
    let r = v.tape().constant(y.clone()).sub(av)?;
    let r = r.mul_const(op.phi_inv().clone())?;
    Ok(r.linear_map(map, true)?)
}

/// Projection on the tape.
pub fn project_var<'t, T: Real>(v: Var<'t, T>, y: &Tensor<T>, op: &Rc<SensingOperator<T>>) -> Result<Var<'t, T>> {
    Ok(v.add(residual_backprojection(v, y, op)?)?)
}

/// `DSC(u) = u + dsc₂(GELU(dsc₁(u)))`, identity while dsc₂'s pointwise layer is zero.
#[derive(Clone, Debug)]
pub struct GradientCorrection {
    pub first: DscBlock,
    pub second: DscBlock,
}

impl GradientCorrection {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, bands: usize) -> Self {
        let mut pb = pb.scope(name);
        GradientCorrection {
            first: DscBlock::new(&mut pb, "dsc1", bands, bands, Init::FanIn),
            second: DscBlock::new(&mut pb, "dsc2", bands, bands, Init::Zero),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.first.forward(p, u)?.gelu();
        Ok(u.add(self.second.forward(p, h)?)?)
    }
}

/// `x = v + DSC(Aᵀ(AAᵀ)⁻¹(y − A v))`; plain projection when `gc` is `None`.
pub fn project_gc<'t, T: Real>(
    p: &Bound<'t, T>,
    gc: Option<&GradientCorrection>,
    v: Var<'t, T>,
    y: &Tensor<T>,
    op: &Rc<SensingOperator<T>>,
) -> Result<Var<'t, T>> {
    let back = residual_backprojection(v, y, op)?;
    let back = match gc {
        Some(gc) => gc.forward(p, back)?,
        None => back,
    };
    Ok(v.add(back)?)
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub correction: Option<GradientCorrection>,
    /// `None` freezes the denoiser to the identity.
    pub denoiser: Option<Denoiser>,
}

/// `K` stages of projection followed by a prior-guided denoiser, parameters per stage.
#[derive(Clone, Debug)]
pub struct Unfolding {
    pub stages: Vec<Stage>,
}

impl Unfolding {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        bands: usize,
        stages: usize,
        gradient_correction: bool,
        denoiser: Option<DenoiserConfig>,
    ) -> Result<Self> {
        let mut pb = pb.scope(name);
        let mut out = Vec::with_capacity(stages);
        for k in 0..stages {
            let mut sp = pb.scope(&format!("stage{k}"));
            let correction = gradient_correction.then(|| GradientCorrection::new(&mut sp, "gc", bands));
            let denoiser = match denoiser {
                Some(cfg) => Some(Denoiser::new(&mut sp, "denoiser", cfg)?),
                None => None,
            };
            out.push(Stage { correction, denoiser });
        }
        Ok(Unfolding { stages: out })
    }

    /// Unclamped reconstruction `[1, L, H, W]` from `v⁰ = y_norm`; `z` is the level-1 prior.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        y: &Tensor<T>,
        op: &Rc<SensingOperator<T>>,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = z.tape();
        let [l, h, w] = op.cube_shape();
        let y_norm = op.normalize_measurement(y)?.reshape(&[1, l, h, w])?;
        let mut v = tape.constant(y_norm);
        for stage in &self.stages {
            let x = project_gc(p, stage.correction.as_ref(), v, y, op)?;
            v = match &stage.denoiser {
                Some(d) => d.forward(p, x, z)?,
                None => x,
            };
        }
        Ok(v)
    }
}

/// Clamps an emitted cube to `[0, 1]`.
pub fn clamp_unit<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}

/// Chambolle's projection algorithm for `min_u ½‖u − f‖² + weight·TV(u)` on one `h × w` image.
pub fn tv_denoise(f: &[f64], h: usize, w: usize, weight: f64, iterations: usize, tau: f64) -> Vec<f64> {
    if weight <= 0.0 {
        return f.to_vec();
    }
    let n = h * w;
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    let mut div = vec![0.0; n];
    let divergence = |px: &[f64], py: &[f64], div: &mut [f64]| {
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let dx = if c + 1 < w { px[i] } else { 0.0 } - if c > 0 { px[i - 1] } else { 0.0 };
                let dy = if r + 1 < h { py[i] } else { 0.0 } - if r > 0 { py[i - w] } else { 0.0 };
                div[i] = dx + dy;
            }
        }
    };
    let mut g = vec![0.0; n];
    for _ in 0..iterations {
        divergence(&px, &py, &mut div);
        for i in 0..n {
            g[i] = div[i] - f[i] / weight;
        }
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let gx = if c + 1 < w { g[i + 1] - g[i] } else { 0.0 };
                let gy = if r + 1 < h { g[i + w] - g[i] } else { 0.0 };
                let norm = (gx * gx + gy * gy).sqrt();
                px[i] = (px[i] + tau * gx) / (1.0 + tau * norm);
                py[i] = (py[i] + tau * gy) / (1.0 + tau * norm);
            }
        }
    }
    divergence(&px, &py, &mut div);
    f.iter().zip(&div).map(|(a, d)| a - weight * d).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapTvOptions {
    pub iterations: usize,
    pub tv_weight: f64,
    pub inner_iterations: usize,
    pub tau: f64,
}

impl Default for GapTvOptions {
    fn default() -> Self {
        GapTvOptions {
            iterations: 50,
            tv_weight: 0.05,
            inner_iterations: 10,
            tau: 0.125,
        }
    }
}

/// Per-band TV denoising of a `[L, H, W]` cube.
pub fn tv_denoise_cube(x: &Tensor<f64>, opts: &GapTvOptions) -> Tensor<f64> {
    let s = x.shape();
    let (l, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..l {
        out.extend(tv_denoise(&x.data()[b * h * w..(b + 1) * h * w], h, w, opts.tv_weight, opts.inner_iterations, opts.tau));
    }
    Tensor::from_vec(s, out).expect("same extent")
}

/// GAP-TV from `v⁰ = y_norm`, calling `observe(k, v)` after every iteration; returns the final `v`.
pub fn gap_tv_trace(
    y: &Tensor<f64>,
    op: &SensingOperator<f64>,
    opts: &GapTvOptions,
    mut observe: impl FnMut(usize, &Tensor<f64>),
) -> Result<Tensor<f64>> {
    let mut v = op.normalize_measurement(y)?;
    for k in 0..opts.iterations.max(1) {
        let x = project(&v, y, op)?;
        v = tv_denoise_cube(&x, opts);
        observe(k, &v);
    }
    Ok(v)
}

pub fn gap_tv(y: &Tensor<f64>, op: &SensingOperator<f64>, opts: &GapTvOptions) -> Result<Tensor<f64>> {
    gap_tv_trace(y, op, opts, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cassi::{bernoulli_mask, ShiftSpec};

    #[test]
    fn tv_with_zero_weight_is_identity() {
        let f: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        assert_eq!(tv_denoise(&f, 4, 5, 0.0, 10, 0.125), f);
    }

    #[test]
    fn tv_flattens_noise_and_keeps_constants() {
        let f = vec![0.3; 16];
        let u = tv_denoise(&f, 4, 4, 0.2, 50, 0.125);
        assert!(u.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let noisy: Vec<f64> = (0..64).map(|i| 0.5 + 0.1 * ((i * 7919) % 13) as f64 / 13.0).collect();
        let tv = |u: &[f64]| -> f64 {
            let mut s = 0.0;
            for r in 0..8 {
                for c in 0..8 {
                    let i = r * 8 + c;
                    if c + 1 < 8 {
                        s += (u[i + 1] - u[i]).abs();
                    }
                    if r + 1 < 8 {
                        s += (u[i + 8] - u[i]).abs();
                    }
                }
            }
            s
        };
        let u = tv_denoise(&noisy, 8, 8, 0.05, 50, 0.125);
        assert!(tv(&u) < tv(&noisy));
        // The mean is preserved by the divergence form.
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&u) - mean(&noisy)).abs() < 1e-12);
    }

    #[test]
    fn projection_of_zero_is_normalized_measurement() {
        let op = SensingOperator::new(bernoulli_mask(6, 5, 0.5, 2), ShiftSpec::new(1), 3).unwrap();
        let y = Tensor::from_fn(&[1, 8, 5], |i| (i as f64 * 0.3).cos().abs());
        let x = project(&Tensor::zeros(&[3, 6, 5]), &y, &op).unwrap();
        assert_eq!(x, op.normalize_measurement(&y).unwrap());
    }
}
