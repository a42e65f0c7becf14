//! Latent encoders, the few-step DDPM schedule and the MLP noise predictor.

use hsi_tensor::nn::{Bound, Conv2d, Init, Linear, MBlock, ParamBuilder};
use hsi_tensor::{Conv2dSpec, Real, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Side of the token grid produced by the encoders; `N = GRID²`.
pub const GRID: usize = 4;

/// MBlock stem, adaptive pooling to a 4×4 token grid, one mixer block and a linear head.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    pub embed: Conv2d,
    pub stem: [MBlock; 2],
    pub token_mix: [Linear; 2],
    pub channel_mix: [Linear; 2],
    pub head: Linear,
    pub in_channels: usize,
    pub width: usize,
}

impl LatentEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, width: usize, latent_channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let n = GRID * GRID;
        LatentEncoder {
            embed: Conv2d::new(&mut pb, "embed", in_channels, width, (3, 3), Conv2dSpec::same(3, 3), true, Init::FanIn),
            stem: [MBlock::new(&mut pb, "mb1", width, width, 2, 2), MBlock::new(&mut pb, "mb2", width, width, 2, 2)],
            token_mix: [Linear::new(&mut pb, "token1", n, 2 * n, true), Linear::new(&mut pb, "token2", 2 * n, n, true)],
            channel_mix: [
                Linear::new(&mut pb, "channel1", width, 2 * width, true),
                Linear::new(&mut pb, "channel2", 2 * width, width, true),
            ],
            head: Linear::new(&mut pb, "head", width, latent_channels, true),
            in_channels,
            width,
        }
    }

    /// `x` is `[1, C_in, H, W]` with `H, W` divisible by 16; returns `[N, C_z]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let f = 4 * GRID;
        if s.len() != 4 || s[1] != self.in_channels || s[2] % f != 0 || s[3] % f != 0 || s[2] == 0 || s[3] == 0 {
            return Err(TensorError::dim(
                "latent_encoder",
                format!("expected [1, {}, H, W] with H, W divisible by {f}, got {s:?}", self.in_channels),
            )
            .into());
        }
        let h = self.embed.forward(p, x)?;
        let h = self.stem[1].forward(p, self.stem[0].forward(p, h)?)?;
        let hs = h.shape();
        let h = h.avg_pool(hs[2] / GRID, hs[3] / GRID)?;
        let n = GRID * GRID;
        // [C, N]: token mixing acts along the last axis.
        let ct = h.reshape(&[self.width, n])?;
        let ct = ct.add(self.token_mix[1].forward(p, self.token_mix[0].forward(p, ct)?.gelu())?)?;
        let tokens = ct.transpose_last()?;
        let tokens = tokens.add(self.channel_mix[1].forward(p, self.channel_mix[0].forward(p, tokens)?.gelu())?)?;
        Ok(self.head.forward(p, tokens)?)
    }
}

/// Linear-β DDPM schedule; `t` is 1-based throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Largest permitted ᾱ at the final step.
pub const ALPHA_BAR_END_MAX: f64 = 1e-4;

impl DiffusionSchedule {
    /// β linear from `beta_start` to `beta_end`. If that leaves ᾱ_T above the
    /// endpoint bound (short chains), β_T is raised so that ᾱ_T = bound/2.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Usage("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(Error::Usage(format!("β endpoints must lie in (0, 1), got {beta_start}, {beta_end}")));
        }
        let mut beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let prefix: f64 = beta[..steps - 1].iter().map(|b| 1.0 - b).product();
        if prefix * (1.0 - beta[steps - 1]) > ALPHA_BAR_END_MAX {
            beta[steps - 1] = 1.0 - 0.5 * ALPHA_BAR_END_MAX / prefix;
        }
        Self::from_betas(beta)
    }

    /// The default schedule: β from 0.1 to 0.99.
    pub fn standard(steps: usize) -> Result<Self> {
        Self::linear(steps, 0.1, 0.99)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Usage("β values must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!("time step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`.
    pub fn diffuse_forward<T: Real>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.index(t)?;
        let ab = self.alpha_bar[i];
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
    }

    /// Coefficients `(1/√α_t, (1−α_t)/√(1−ᾱ_t), √(1−α_t))` of the reverse update.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        let i = self.index(t)?;
        let a = self.alpha[i];
        Ok((1.0 / a.sqrt(), (1.0 - a) / (1.0 - self.alpha_bar[i]).sqrt(), (1.0 - a).sqrt()))
    }

    /// One ancestral step on the tape; `noise` is ignored at `t = 1`.
    pub fn reverse_step<'t, T: Real>(
        &self,
        z_t: Var<'t, T>,
        t: usize,
        eps_pred: Var<'t, T>,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let (inv_sqrt_a, c_eps, sigma) = self.reverse_coefficients(t)?;
        let mean = z_t.sub(eps_pred.scale(T::lit(c_eps)))?.scale(T::lit(inv_sqrt_a));
        match noise {
            Some(n) if t > 1 => Ok(mean.add_const(n.scale(T::lit(sigma)))?),
            _ => Ok(mean),
        }
    }
}

/// Sinusoidal embedding of a time step, `dim` entries alternating sin and cos.
pub fn time_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim.div_ceil(2).max(1);
    Tensor::from_fn(&[dim], |i| {
        let k = i / 2;
        let freq = (10000f64).powf(-(k as f64) / half as f64);
        let a = t as f64 * freq;
        T::lit(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Per-token MLP over `concat(z_t, c, emb(t))` with three GELU hidden layers.
///
/// With a skip schedule the prediction is `√(1−ᾱ_t)·z_t + MLP(..)` and the last
/// layer starts at zero, so the untrained reverse step is `z_{t−1} = √α_t·z_t + noise`
/// instead of amplifying by `1/√α_t`.
#[derive(Clone, Debug)]
pub struct EpsilonMlp {
    pub layers: [Linear; 4],
    pub latent_channels: usize,
    /// `√(1−ᾱ_t)` for `t = 1..T` when the skip is enabled.
    pub skip: Option<Vec<f64>>,
}

impl EpsilonMlp {
    /// Plain MLP, every layer fan-in initialised.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, latent_channels: usize, hidden: usize) -> Self {
        Self::build(pb, name, latent_channels, hidden, None)
    }

    /// MLP with the `√(1−ᾱ_t)·z_t` skip of `schedule` and a zero last layer.
    pub fn with_skip<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, latent_channels: usize, hidden: usize, schedule: &DiffusionSchedule) -> Self {
        let skip = schedule.alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Self::build(pb, name, latent_channels, hidden, Some(skip))
    }

    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, latent_channels: usize, hidden: usize, skip: Option<Vec<f64>>) -> Self {
        let mut pb = pb.scope(name);
        let c = latent_channels;
        let fc1 = Linear::new(&mut pb, "fc1", 3 * c, hidden, true);
        let fc2 = Linear::new(&mut pb, "fc2", hidden, hidden, true);
        let fc3 = Linear::new(&mut pb, "fc3", hidden, hidden, true);
        let fc4 = if skip.is_some() {
            Linear::zeros(&mut pb, "fc4", hidden, c)
        } else {
            Linear::new(&mut pb, "fc4", hidden, c, true)
        };
        EpsilonMlp {
            layers: [fc1, fc2, fc3, fc4],
            latent_channels,
            skip,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z_t: Var<'t, T>, c: Var<'t, T>, t: usize) -> Result<Var<'t, T>> {
        let s = z_t.shape();
        if s.len() != 2 || s[1] != self.latent_channels || c.shape() != s {
            return Err(TensorError::shape("epsilon_mlp", &s, &c.shape()).into());
        }
        let emb = time_embedding::<T>(t, self.latent_channels);
        let emb = Tensor::from_fn(&s, |i| emb.data()[i % self.latent_channels]);
        let emb = z_t.tape().constant(emb);
        let mut h = Var::concat(&[z_t, c, emb], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < 3 {
                h = h.gelu();
            }
        }
        match &self.skip {
            Some(k) => {
                let coef = *k.get(t.wrapping_sub(1)).ok_or_else(|| Error::Usage(format!("time step {t} outside [1, {}]", k.len())))?;
                Ok(h.add(z_t.scale(T::lit(coef)))?)
            }
            None => Ok(h),
        }
    }
}

/// Runs the reverse chain from `z_T ~ N(0, I)` to `ẑ`, recording every step on the tape.
pub fn generate_prior<'t, T: Real, R: Rng + ?Sized>(
    p: &Bound<'t, T>,
    eps: &EpsilonMlp,
    c: Var<'t, T>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let shape = c.shape();
    let normal = |rng: &mut R| Tensor::from_fn(&shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    let mut z = c.tape().constant(normal(rng));
    for t in (1..=schedule.steps()).rev() {
        let e = eps.forward(p, z, c, t)?;
        let noise = if t > 1 { Some(normal(rng)) } else { None };
        z = schedule.reverse_step(z, t, e, noise.as_ref())?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_schedule_ends_near_pure_noise() {
        for steps in [1, 2, 3, 4, 8, 16, 32] {
            let s = DiffusionSchedule::standard(steps).unwrap();
            assert!(*s.alpha_bar.last().unwrap() <= ALPHA_BAR_END_MAX, "T={steps}");
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
        }
        let s = DiffusionSchedule::standard(16).unwrap();
        assert!((s.beta[0] - 0.1).abs() < 1e-15 && (s.beta[15] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn forward_noising_limits() {
        let s = DiffusionSchedule::standard(4).unwrap();
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let zero = Tensor::zeros(&[2, 3]);
        let zt = s.diffuse_forward(&z0, 2, &zero).unwrap();
        assert!(zt.max_abs_diff(&z0.scale(s.alpha_bar[1].sqrt())).unwrap() < 1e-15);
        assert!(s.diffuse_forward(&z0, 0, &zero).is_err());
        assert!(s.diffuse_forward(&z0, 5, &zero).is_err());
        assert_eq!(s.alpha_bar_at(0), 1.0);
    }

    #[test]
    fn embedding_separates_steps() {
        let e1 = time_embedding::<f64>(1, 8);
        for t in 2..=16 {
            assert!(e1.max_abs_diff(&time_embedding(t, 8)).unwrap() > 1e-3);
        }
    }
}
