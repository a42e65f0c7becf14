//! The full reconstruction model: unfolding network, the two latent encoders
//! and the noise predictor, with their parameters in one grouped store.

use std::rc::Rc;

use hsi_tensor::nn::{Bound, ParamStore};
use hsi_tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cassi::SensingOperator;
use crate::config::Config;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::gap::{clamp_unit, Unfolding};
use crate::latent::{generate_prior, DiffusionSchedule, EpsilonMlp, LatentEncoder};

pub const GROUP_DUN: &str = "dun";
pub const GROUP_LE: &str = "le";
pub const GROUP_LE_COND: &str = "le_cond";
pub const GROUP_EPS: &str = "eps";
pub const GROUPS: [&str; 4] = [GROUP_DUN, GROUP_LE, GROUP_LE_COND, GROUP_EPS];

/// Where the level-1 prior of a reconstruction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSource {
    /// `LE(concat(y_norm, x))`, needs the ground truth.
    Truth,
    /// The reverse diffusion chain conditioned on `LE'(y_norm)`.
    Diffusion,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub unfolding: Unfolding,
    /// LE over `concat(y_norm, x)`, `2L` input channels.
    pub encoder: LatentEncoder,
    /// LE' over `y_norm`.
    pub cond_encoder: LatentEncoder,
    pub eps: EpsilonMlp,
    pub schedule: DiffusionSchedule,
}

impl Model {
    /// Builds the architecture and initialises every group from `seed`.
    pub fn build<T: Real>(cfg: &Config) -> Result<(Model, ParamStore<T>)> {
        cfg.validate()?;
        let (d, m) = (&cfg.data, &cfg.model);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let dcfg = DenoiserConfig {
            bands: d.bands,
            channels: m.channels,
            heads: m.heads,
            latent_channels: m.latent_channels,
            height: d.height,
            width: d.width,
            cpf_query: m.cpf_query,
        };
        let unfolding = Unfolding::new(
            &mut store.builder(GROUP_DUN, &mut rng),
            GROUP_DUN,
            d.bands,
            m.stages,
            m.gradient_correction,
            m.denoiser.then_some(dcfg),
        )?;
        let encoder = LatentEncoder::new(&mut store.builder(GROUP_LE, &mut rng), GROUP_LE, 2 * d.bands, m.encoder_channels, m.latent_channels);
        let cond_encoder =
            LatentEncoder::new(&mut store.builder(GROUP_LE_COND, &mut rng), GROUP_LE_COND, d.bands, m.encoder_channels, m.latent_channels);
        let schedule = DiffusionSchedule::linear(m.diffusion_steps, m.beta_start, m.beta_end)?;
        let mut pb = store.builder(GROUP_EPS, &mut rng);
        let eps = if m.eps_skip {
            EpsilonMlp::with_skip(&mut pb, GROUP_EPS, m.latent_channels, m.eps_hidden, &schedule)
        } else {
            EpsilonMlp::new(&mut pb, GROUP_EPS, m.latent_channels, m.eps_hidden)
        };
        let model = Model {
            bands: d.bands,
            height: d.height,
            width: d.width,
            unfolding,
            encoder,
            cond_encoder,
            eps,
            schedule,
        };
        Ok((model, store))
    }

    fn as_batch<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != [self.bands, self.height, self.width] {
            return Err(Error::Usage(format!(
                "expected a [{}, {}, {}] cube, got {:?}",
                self.bands,
                self.height,
                self.width,
                x.shape()
            )));
        }
        Ok(x.clone().reshape(&[1, self.bands, self.height, self.width])?)
    }

    /// `z_GT = LE(concat(y_norm, x))`; both inputs are `[L, H, W]`.
    pub fn encode_truth<'t, T: Real>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, y_norm: &Tensor<T>, truth: &Tensor<T>) -> Result<Var<'t, T>> {
        let a = tape.constant(self.as_batch(y_norm)?);
        let b = tape.constant(self.as_batch(truth)?);
        self.encoder.forward(p, Var::concat(&[a, b], 1)?)
    }

    /// `c = LE'(y_norm)`.
    pub fn encode_condition<'t, T: Real>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, y_norm: &Tensor<T>) -> Result<Var<'t, T>> {
        self.cond_encoder.forward(p, tape.constant(self.as_batch(y_norm)?))
    }

    /// `ẑ` from the reverse chain conditioned on `y_norm`.
    pub fn sample_prior<'t, T: Real, R: Rng + ?Sized>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        y_norm: &Tensor<T>,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let c = self.encode_condition(p, tape, y_norm)?;
        generate_prior(p, &self.eps, c, &self.schedule, rng)
    }

    /// Unclamped `[1, L, H, W]` estimate; `y` is `[1, 1, H̃, W]`.
    pub fn reconstruct<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        y: &Tensor<T>,
        op: &Rc<SensingOperator<T>>,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.unfolding.forward(p, y, op, z)
    }

    /// Forward-only reconstruction of one measurement, clamped to `[0, 1]`, as `[L, H, W]`.
    /// `truth` is required for [`PriorSource::Truth`].
    pub fn infer<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        y: &Tensor<T>,
        op: &Rc<SensingOperator<T>>,
        source: PriorSource,
        truth: Option<&Tensor<T>>,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = store.bind_frozen(&tape);
        let y = measurement_batch(y)?;
        let y_norm = op.normalize_measurement(&y)?.reshape(&[self.bands, self.height, self.width])?;
        let z = match source {
            PriorSource::Truth => {
                let truth = truth.ok_or_else(|| Error::Usage("ground-truth prior requested without a ground truth".into()))?;
                self.encode_truth(&p, &tape, &y_norm, truth)?
            }
            PriorSource::Diffusion => self.sample_prior(&p, &tape, &y_norm, rng)?,
        };
        let x = self.reconstruct(&p, &y, op, z)?.value();
        Ok(clamp_unit(&x).reshape(&[self.bands, self.height, self.width])?)
    }
}

/// Accepts `[1, H̃, W]` or `[1, 1, H̃, W]` and returns the batched form.
pub fn measurement_batch<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    match y.shape() {
        &[1, h, w] => Ok(y.clone().reshape(&[1, 1, h, w])?),
        &[1, 1, _, _] => Ok(y.clone()),
        s => Err(Error::Usage(format!("measurement must be [1, H̃, W], got {s:?}"))),
    }
}
