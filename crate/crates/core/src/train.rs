//! Two-phase training: Phase I fits the unfolding network with the ground-truth
//! latent, Phase II fits the conditional encoder and noise predictor (and
//! fine-tunes the network) with LE frozen.

use std::rc::Rc;

use hsi_tensor::nn::ParamStore;
use hsi_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cassi::{bernoulli_mask, SensingOperator, ShiftSpec};
use crate::config::{Config, DataConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::gap::{gap_tv, GapTvOptions};
use crate::io::{Checkpoint, CheckpointMeta, EpochLog, EvalSummary};
use crate::metrics::{psnr_cube, ssim};
use crate::model::{Model, PriorSource, GROUP_DUN, GROUP_EPS, GROUP_LE, GROUP_LE_COND};
use crate::scenes::SceneSet;

/// One scene with its measurement.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[L, H, W]`
    pub truth: Tensor<f32>,
    /// `[1, 1, H̃, W]`
    pub y: Tensor<f32>,
    /// `[L, H, W]`
    pub y_norm: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub op: Rc<SensingOperator<f32>>,
    pub op64: SensingOperator<f64>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Held-out cubes and measurements in f64 for the classical baseline.
    pub test64: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl Dataset {
    pub fn build(d: &DataConfig) -> Result<Self> {
        let scenes = SceneSet::generate(d.scene_seed, d.train_scenes, d.test_scenes, d.width, d.height, d.bands)?;
        let mask = bernoulli_mask(d.height, d.width, d.mask_open, d.mask_seed);
        let op64 = SensingOperator::new(mask, ShiftSpec::new(d.step), d.bands)?;
        let op = Rc::new(op64.cast::<f32>());
        let mut rng = ChaCha8Rng::seed_from_u64(d.scene_seed ^ 0x6e6f_6973_65);
        let ht = op64.shifted_height();
        let mut measure = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            Ok(op64.forward_noisy(x, d.noise_sigma, &mut rng)?.reshape(&[1, 1, ht, d.width])?)
        };
        let mut train = Vec::with_capacity(scenes.train.len());
        for x in &scenes.train {
            let y = measure(x)?;
            train.push(sample(&op, x, &y)?);
        }
        let mut test = Vec::with_capacity(scenes.test.len());
        let mut test64 = Vec::with_capacity(scenes.test.len());
        for x in &scenes.test {
            let y = measure(x)?;
            test.push(sample(&op, x, &y)?);
            test64.push((x.clone(), y));
        }
        Ok(Dataset { op, op64, train, test, test64 })
    }
}

fn sample(op: &SensingOperator<f32>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Sample> {
    let y: Tensor<f32> = y.cast();
    let y_norm = op.normalize_measurement(&y)?.reshape(x.shape())?;
    Ok(Sample { truth: x.cast(), y, y_norm })
}

/// Groups updated in each phase.
pub fn trainable(phase: u8, group: &str) -> bool {
    match phase {
        1 => group == GROUP_DUN || group == GROUP_LE,
        _ => group == GROUP_DUN || group == GROUP_LE_COND || group == GROUP_EPS,
    }
}

/// Cosine decay from `lr_max` at epoch 0 towards `lr_min`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = epoch as f64 / epochs.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mean absolute error.
pub fn l1<'t>(a: Var<'t, f32>, b: Var<'t, f32>) -> Result<Var<'t, f32>> {
    Ok(a.sub(b)?.abs().mean())
}

/// Per-parameter gradients of one sample's loss, with `(L_rec, L_diff)`.
pub struct SampleGrad {
    pub grads: Vec<Option<Tensor<f32>>>,
    pub l_rec: f64,
    pub l_diff: f64,
}

pub fn sample_gradients<R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore<f32>,
    op: &Rc<SensingOperator<f32>>,
    s: &Sample,
    phase: u8,
    rng: &mut R,
) -> Result<SampleGrad> {
    let tape = Tape::new();
    let p = store.bind(&tape, |g| trainable(phase, g));
    let z_gt = model.encode_truth(&p, &tape, &s.y_norm, &s.truth)?;
    let truth = tape.constant(s.truth.clone().reshape(&[1, model.bands, model.height, model.width])?);
    let (loss, l_rec, l_diff) = if phase == 1 {
        let rec = l1(model.reconstruct(&p, &s.y, op, z_gt)?, truth)?;
        (rec, rec, None)
    } else {
        let z_gt = tape.constant((*z_gt.value()).clone());
        let z = model.sample_prior(&p, &tape, &s.y_norm, rng)?;
        let rec = l1(model.reconstruct(&p, &s.y, op, z)?, truth)?;
        let diff = l1(z, z_gt)?;
        (rec.add(diff)?, rec, Some(diff))
    };
    let lv = loss.value().data()[0];
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {lv} in phase {phase}")));
    }
    let g = tape.backward(loss)?;
    Ok(SampleGrad {
        grads: p.gradients(&g),
        l_rec: l_rec.value().data()[0] as f64,
        l_diff: l_diff.map(|d| d.value().data()[0] as f64).unwrap_or(0.0),
    })
}

/// Adam with bias correction, moments kept for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, t: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }

    /// Applies one update to every parameter with a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let w = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..w.len() {
                let gj = g.data()[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                w[j] = (w[j] as f64 - upd) as f32;
            }
        }
    }
}

/// Fails with a numeric error naming the first group holding a non-finite gradient.
pub fn check_finite(store: &ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
    for ((_, p), g) in store.iter().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in group '{}' (parameter {})", p.group, p.name)));
            }
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64))
}

/// Held-out PSNR and SSIM of clamped reconstructions. With [`PriorSource::Diffusion`] the
/// chain noise is fixed by `eval_seed` and `l_diff` is the mean `|ẑ − z_GT|`.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, data: &Dataset, source: PriorSource, eval_seed: u64) -> Result<EvalSummary> {
    let mut out = EvalSummary::default();
    let n = data.test.len() as f64;
    for (i, s) in data.test.iter().enumerate() {
        let tape = Tape::inference();
        let p = store.bind_frozen(&tape);
        let z_gt = model.encode_truth(&p, &tape, &s.y_norm, &s.truth)?;
        let z = match source {
            PriorSource::Truth => z_gt,
            PriorSource::Diffusion => {
                let z = model.sample_prior(&p, &tape, &s.y_norm, &mut eval_rng(eval_seed, i))?;
                out.l_diff += z.value().zip_map(&z_gt.value(), |a, b| (a - b).abs())?.mean() as f64 / n;
                z
            }
        };
        let x = model.reconstruct(&p, &s.y, &data.op, z)?.value();
        let x: Tensor<f64> = crate::gap::clamp_unit(&x).cast::<f64>().reshape(s.truth.shape())?;
        let truth: Tensor<f64> = s.truth.cast();
        out.psnr += psnr_cube(&x, &truth)? / n;
        out.ssim += ssim(&x, &truth)? / n;
    }
    Ok(out)
}

/// Mean held-out PSNR and SSIM of GAP-TV.
pub fn evaluate_gap_tv(data: &Dataset, opts: &GapTvOptions) -> Result<EvalSummary> {
    let mut out = EvalSummary::default();
    let n = data.test64.len() as f64;
    for (x, y) in &data.test64 {
        let y = y.clone().reshape(&data.op64.measurement_shape())?;
        let est = crate::gap::clamp_unit(&gap_tv(&y, &data.op64, opts)?);
        out.psnr += psnr_cube(&est, x)? / n;
        out.ssim += ssim(&est, x)? / n;
    }
    Ok(out)
}

/// TV weights searched when tuning the baseline.
pub const GAP_TV_WEIGHTS: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];

/// Picks the TV weight with the best held-out PSNR.
pub fn tune_gap_tv(data: &Dataset) -> Result<(GapTvOptions, EvalSummary)> {
    let mut best: Option<(GapTvOptions, EvalSummary)> = None;
    for w in GAP_TV_WEIGHTS {
        let opts = GapTvOptions {
            tv_weight: w,
            ..GapTvOptions::default()
        };
        let s = evaluate_gap_tv(data, &opts)?;
        if best.as_ref().map_or(true, |(_, b)| s.psnr > b.psnr) {
            best = Some((opts, s));
        }
    }
    Ok(best.expect("non-empty grid"))
}

fn flip_sample(op: &SensingOperator<f32>, s: &Sample, horizontal: bool, vertical: bool) -> Result<Sample> {
    let shape = s.truth.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let src = s.truth.data();
    let truth = Tensor::from_fn(&shape, |i| {
        let (b, r, c) = (i / (h * w), (i / w) % h, i % w);
        let r = if vertical { h - 1 - r } else { r };
        let c = if horizontal { w - 1 - c } else { c };
        src[(b * h + r) * w + c]
    });
    let y = op.forward(&truth)?;
    let ys = y.shape().to_vec();
    let y = y.reshape(&[1, ys[0], ys[1], ys[2]])?;
    let y_norm = op.normalize_measurement(&y)?.reshape(&shape)?;
    Ok(Sample { truth, y, y_norm })
}

/// Mutable training state of one phase.
pub struct Trainer<'a> {
    pub cfg: Config,
    pub data: &'a Dataset,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    pub phase: u8,
    pub meta: CheckpointMeta,
}

impl<'a> Trainer<'a> {
    /// Fresh Phase I state from the configured seed.
    pub fn phase1(cfg: &Config, data: &'a Dataset) -> Result<Self> {
        let (model, store) = Model::build::<f32>(cfg)?;
        Ok(Self::with(cfg, data, model, store, 1))
    }

    /// Phase II state initialised from a trained Phase I checkpoint.
    pub fn phase2(cfg: &Config, data: &'a Dataset, phase1: &Checkpoint) -> Result<Self> {
        if phase1.meta.phase != 1 {
            return Err(Error::Usage(format!("Phase II starts from a Phase I checkpoint, got phase {}", phase1.meta.phase)));
        }
        let (model, mut store) = Model::build::<f32>(cfg)?;
        load_params(&mut store, phase1, |g| g == GROUP_DUN || g == GROUP_LE)?;
        Ok(Self::with(cfg, data, model, store, 2))
    }

    fn with(cfg: &Config, data: &'a Dataset, model: Model, store: ParamStore<f32>, phase: u8) -> Self {
        let adam = Adam::new(&store, &cfg.train);
        let meta = CheckpointMeta {
            phase,
            epoch: 0,
            seed: cfg.seed,
            step: 0,
            config_hash: cfg.hash(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            history: Vec::new(),
            initial_eval: None,
            final_eval: None,
        };
        Trainer {
            cfg: cfg.clone(),
            data,
            model,
            store,
            adam,
            phase,
            meta,
        }
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(cfg: &Config, data: &'a Dataset, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.config_hash != cfg.hash() {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        let (model, mut store) = Model::build::<f32>(cfg)?;
        load_params(&mut store, ckpt, |_| true)?;
        let mut t = Self::with(cfg, data, model, store, ckpt.meta.phase);
        for (i, (_, p)) in t.store.iter().enumerate() {
            if let (Some(m), Some(v)) = (ckpt.get(&format!("adam_m/{}", p.name)), ckpt.get(&format!("adam_v/{}", p.name))) {
                t.adam.m[i] = m.clone();
                t.adam.v[i] = v.clone();
            }
        }
        t.adam.step = ckpt.meta.step;
        t.meta = ckpt.meta.clone();
        Ok(t)
    }

    pub fn epochs(&self) -> usize {
        if self.phase == 1 {
            self.cfg.train.phase1_epochs
        } else {
            self.cfg.train.phase2_epochs
        }
    }

    pub fn source(&self) -> PriorSource {
        if self.phase == 1 {
            PriorSource::Truth
        } else {
            PriorSource::Diffusion
        }
    }

    pub fn done(&self) -> bool {
        self.meta.epoch >= self.epochs()
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        evaluate(&self.model, &self.store, self.data, self.source(), self.cfg.train.eval_seed)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let tag = ((self.phase as u64) << 40) ^ epoch as u64;
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ tag)
    }

    /// One batch update; returns mean `(L_rec, L_diff)` and the per-parameter gradients used.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[Sample], lr: f64, rng: &mut R) -> Result<(f64, f64, Vec<Option<Tensor<f32>>>)> {
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.store.len()];
        let (mut l_rec, mut l_diff) = (0.0, 0.0);
        for s in batch {
            let g = sample_gradients(&self.model, &self.store, &self.data.op, s, self.phase, rng)?;
            l_rec += g.l_rec;
            l_diff += g.l_diff;
            for (a, g) in acc.iter_mut().zip(g.grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g)?,
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for g in acc.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        check_finite(&self.store, &acc)?;
        let mut clipped = acc.clone();
        clip_gradients(&mut clipped, self.cfg.train.clip_norm);
        self.adam.update(&mut self.store, &clipped, lr);
        self.meta.step = self.adam.step;
        let n = batch.len() as f64;
        Ok((l_rec / n, l_diff / n, acc))
    }

    /// Runs the next epoch and records its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        if self.meta.initial_eval.is_none() && self.meta.epoch == 0 {
            self.meta.initial_eval = Some(self.evaluate()?);
        }
        let epoch = self.meta.epoch;
        let lr = cosine_lr(epoch, self.epochs(), self.cfg.train.lr_max, self.cfg.train.lr_min);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut l_rec, mut l_diff, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &self.data.train[i];
                    if self.cfg.train.flips {
                        let (h, v) = (rng.gen::<bool>(), rng.gen::<bool>());
                        flip_sample(&self.data.op, s, h, v)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (r, d, _) = self.step(&batch, lr, &mut rng).map_err(|e| match e.exit_code() {
                3 => Error::Numeric(format!("phase {} epoch {} batch {batches}: {e}", self.phase, epoch + 1)),
                _ => e,
            })?;
            l_rec += r;
            l_diff += d;
            batches += 1;
        }
        let eval = self.evaluate()?;
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            l_rec: l_rec / batches as f64,
            l_diff: l_diff / batches as f64,
            val_psnr: eval.psnr,
        };
        self.meta.epoch = epoch + 1;
        self.meta.history.push(row.clone());
        self.meta.final_eval = Some(eval);
        Ok(row)
    }

    /// Runs the remaining epochs, calling `after` with every new log row and checkpoint.
    pub fn run(&mut self, mut after: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>) -> Result<Checkpoint> {
        let mut ckpt = self.checkpoint();
        while !self.done() {
            let row = self.run_epoch()?;
            ckpt = self.checkpoint();
            after(&row, &ckpt)?;
        }
        Ok(ckpt)
    }

    /// Parameters of every group plus the optimizer moments of the trainable ones.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (_, p) in self.store.iter() {
            tensors.push((format!("param/{}", p.name), (*p.value).clone()));
        }
        for (i, (_, p)) in self.store.iter().enumerate() {
            if trainable(self.phase, &p.group) {
                tensors.push((format!("adam_m/{}", p.name), self.adam.m[i].clone()));
                tensors.push((format!("adam_v/{}", p.name), self.adam.v[i].clone()));
            }
        }
        Checkpoint {
            meta: self.meta.clone(),
            tensors,
        }
    }
}

/// Copies `param/<name>` tensors of the selected groups from a checkpoint into `store`.
pub fn load_params(store: &mut ParamStore<f32>, ckpt: &Checkpoint, groups: impl Fn(&str) -> bool) -> Result<()> {
    let ids: Vec<_> = store.iter().filter(|(_, p)| groups(&p.group)).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = ckpt
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::format(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::format(format!(
                "parameter {name} has shape {:?} in the checkpoint, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Model and parameters restored from any checkpoint, with the configuration it records.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Config, Model, ParamStore<f32>)> {
    let cfg: Config = serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::format(format!("bad embedded config: {e}")))?;
    cfg.validate()?;
    let (model, mut store) = Model::build::<f32>(&cfg)?;
    load_params(&mut store, ckpt, |_| true)?;
    Ok((cfg, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 10, 4e-4, 1e-6) - 4e-4).abs() < 1e-18);
        assert!((cosine_lr(10, 10, 4e-4, 1e-6) - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(5, 10, 4e-4, 1e-6);
        assert!((mid - (4e-4 + 1e-6) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap()), None];
        assert!((clip_gradients(&mut g, 1.0) - 5.0).abs() < 1e-12);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
        let mut h = vec![Some(Tensor::from_vec(&[1], vec![0.5f32]).unwrap())];
        clip_gradients(&mut h, 1.0);
        assert_eq!(h[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", "dun", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, &TrainConfig::default());
        let g = vec![Some(Tensor::from_vec(&[2], vec![0.3f32, -2.0]).unwrap())];
        adam.update(&mut store, &g, 0.1);
        let w = store.get(store.find("w").unwrap()).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", "dun", Tensor::zeros(&[1]));
        store.add("b", "eps", Tensor::zeros(&[1]));
        let g = vec![Some(Tensor::zeros(&[1])), Some(Tensor::from_vec(&[1], vec![f32::NAN]).unwrap())];
        match check_finite(&store, &g) {
            Err(e @ Error::Numeric(_)) => {
                assert!(e.to_string().contains("'eps'"));
                assert_eq!(e.exit_code(), 3);
            }
            other => panic!("{other:?}"),
        }
    }
}
