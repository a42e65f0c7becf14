//! JSON run configuration. Every field has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::CpfQuery;
use crate::error::{Error, Result};
use crate::latent::GRID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    /// Dispersion in rows per band index.
    pub step: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_seed: u64,
    pub mask_seed: u64,
    /// Probability of an open mask pixel.
    pub mask_open: f64,
    /// Std of additive measurement noise.
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            width: 32,
            height: 32,
            bands: 8,
            step: 1,
            train_scenes: 64,
            test_scenes: 8,
            scene_seed: 2024,
            mask_seed: 7,
            mask_open: 0.5,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub channels: usize,
    pub heads: usize,
    pub latent_channels: usize,
    pub encoder_channels: usize,
    pub eps_hidden: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Adds `√(1−ᾱ_t)·z_t` to the noise prediction and zero-initialises its last layer.
    pub eps_skip: bool,
    pub gradient_correction: bool,
    /// `false` freezes every stage denoiser to the identity.
    pub denoiser: bool,
    pub cpf_query: CpfQuery,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 3,
            channels: 8,
            heads: 4,
            latent_channels: 32,
            encoder_channels: 16,
            eps_hidden: 64,
            diffusion_steps: 16,
            beta_start: 0.1,
            beta_end: 0.99,
            eps_skip: true,
            gradient_correction: true,
            denoiser: true,
            cpf_query: CpfQuery::CsfValue,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Random horizontal/vertical flips of training scenes.
    pub flips: bool,
    /// Seed of the held-out diffusion noise.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 200,
            phase2_epochs: 100,
            batch_size: 4,
            lr_max: 4e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            flips: false,
            eval_seed: 99,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds parameter initialisation, batch order and training diffusion noise.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        let f = 4 * GRID;
        if d.width == 0 || d.height == 0 || d.width % f != 0 || d.height % f != 0 {
            return bad(format!("data.width and data.height must be positive multiples of {f}"));
        }
        if d.bands == 0 {
            return bad("data.bands must be ≥ 1".into());
        }
        if d.train_scenes == 0 || d.test_scenes == 0 {
            return bad("data.train_scenes and data.test_scenes must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&d.mask_open) || d.noise_sigma < 0.0 || !d.noise_sigma.is_finite() {
            return bad("data.mask_open must lie in [0, 1] and data.noise_sigma must be ≥ 0".into());
        }
        if m.stages == 0 {
            return bad("model.stages must be ≥ 1".into());
        }
        if m.channels == 0 || m.channels % 2 != 0 {
            return bad("model.channels must be even and positive".into());
        }
        if m.heads == 0 || m.channels % m.heads != 0 {
            return bad("model.heads must divide model.channels".into());
        }
        if m.latent_channels == 0 || m.encoder_channels == 0 || m.eps_hidden == 0 {
            return bad("latent widths must be positive".into());
        }
        if m.diffusion_steps == 0 {
            return bad("model.diffusion_steps must be ≥ 1".into());
        }
        if !(0.0 < m.beta_start && m.beta_start < 1.0 && 0.0 < m.beta_end && m.beta_end < 1.0) {
            return bad("model.beta_start and model.beta_end must lie in (0, 1)".into());
        }
        if t.phase1_epochs == 0 || t.phase2_epochs == 0 || t.batch_size == 0 {
            return bad("epochs and batch_size must be ≥ 1".into());
        }
        if !(t.lr_max > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr_max) {
            return bad("need 0 ≤ train.lr_min ≤ train.lr_max, lr_max > 0".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 || t.clip_norm < 0.0 {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(Config::from_json(r#"{"data": {"width": 30}}"#), Err(Error::Config(_))));
        assert!(matches!(Config::from_json(r#"{"model": {"channels": 6, "heads": 4}}"#), Err(Error::Config(_))));
        assert!(matches!(Config::from_json(r#"{"model": {"cpf_query": "nope"}}"#), Err(Error::Config(_))));
        let c = Config::from_json(r#"{"model": {"cpf_query": "csf_query"}}"#).unwrap();
        assert_eq!(c.model.cpf_query, CpfQuery::CsfQuery);
    }
}
