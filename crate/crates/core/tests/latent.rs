//! Diffusion algebra, the reverse chain and the latent encoders.

use hsi_tensor::nn::ParamStore;
use hsi_tensor::{Tape, Tensor};
use hsi_unfold::config::Config;
use hsi_unfold::latent::{generate_prior, DiffusionSchedule, EpsilonMlp, LatentEncoder, ALPHA_BAR_END_MAX};
use hsi_unfold::model::Model;
use hsi_unfold::train::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn forward_noising_statistics() {
    let sched = DiffusionSchedule::standard(16).unwrap();
    let z0 = Tensor::from_vec(&[4], vec![1.5, -0.7, 0.0, 3.0]).unwrap();
    let draws = 10_000;
    for t in [1, 4, 9, 16] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let eps = Tensor::from_fn(&[4], |_| rng.sample::<f64, _>(StandardNormal));
            let zt = sched.diffuse_forward(&z0, t, &eps).unwrap();
            for i in 0..4 {
                sum[i] += zt.data()[i];
                sq[i] += zt.data()[i] * zt.data()[i];
            }
        }
        let ab = sched.alpha_bar[t - 1];
        let var = 1.0 - ab;
        let n = draws as f64;
        for i in 0..4 {
            let mean = sum[i] / n;
            let svar = (sq[i] - n * mean * mean) / (n - 1.0);
            let se_mean = (var / n).sqrt();
            let se_var = var * (2.0 / (n - 1.0)).sqrt();
            assert!((mean - ab.sqrt() * z0.data()[i]).abs() <= 3.0 * se_mean, "t={t} i={i} mean {mean}");
            assert!((svar - var).abs() <= 3.0 * se_var, "t={t} i={i} var {svar}");
        }
    }
}

#[test]
fn reverse_step_with_oracle_noise_is_posterior_mean() {
    for steps in [2, 4, 16] {
        let sched = DiffusionSchedule::standard(steps).unwrap();
        let z0 = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.9, -0.4]).unwrap();
        let eps = Tensor::from_vec(&[2, 3], vec![-0.5, 0.1, 1.3, 0.7, -2.0, 0.2]).unwrap();
        for t in 1..=steps {
            let zt = sched.diffuse_forward(&z0, t, &eps).unwrap();
            let tape = Tape::new();
            let got = sched.reverse_step(tape.constant(zt.clone()), t, tape.constant(eps.clone()), None).unwrap().value();
            let (a, ab, ab_prev) = (sched.alpha[t - 1], sched.alpha_bar[t - 1], sched.alpha_bar_at(t - 1));
            let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
            let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let want = Tensor::from_fn(&[2, 3], |i| c0 * z0.data()[i] + ct * zt.data()[i]);
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-6, "T={steps} t={t}");
        }
    }
}

#[test]
fn zero_prediction_divides_by_root_alpha() {
    let sched = DiffusionSchedule::standard(4).unwrap();
    let tape = Tape::new();
    let z = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let out = sched.reverse_step(tape.constant(z.clone()), 3, tape.constant(Tensor::zeros(&[3])), Some(&Tensor::zeros(&[3]))).unwrap();
    let want = z.scale(1.0 / sched.alpha[2].sqrt());
    assert!(out.value().max_abs_diff(&want).unwrap() < 1e-15);
    // Noise is dropped at the last step.
    let n = Tensor::ones(&[3]);
    let a = sched.reverse_step(tape.constant(z.clone()), 1, tape.constant(Tensor::zeros(&[3])), Some(&n)).unwrap();
    let b = sched.reverse_step(tape.constant(z), 1, tape.constant(Tensor::zeros(&[3])), None).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn every_schedule_ends_near_pure_noise() {
    for steps in 1..=40 {
        for (lo, hi) in [(0.1, 0.99), (1e-4, 0.02), (0.3, 0.5), (0.5, 0.5)] {
            let s = DiffusionSchedule::linear(steps, lo, hi).unwrap();
            assert!(*s.alpha_bar.last().unwrap() <= ALPHA_BAR_END_MAX);
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        }
    }
    assert!(DiffusionSchedule::linear(0, 0.1, 0.9).is_err());
    assert!(DiffusionSchedule::linear(4, 0.0, 0.9).is_err());
}

#[test]
fn untrained_chain_matches_scalar_loop() {
    let sched = DiffusionSchedule::standard(6).unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = EpsilonMlp::with_skip(&mut store.builder("eps", &mut rng), "eps", 3, 8, &sched);
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let c = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
    let got = generate_prior(&p, &eps, c, &sched, &mut ChaCha8Rng::seed_from_u64(42)).unwrap().value();
    // With a zero residual the step is z ← √α_t z + √(1−α_t) n, noise skipped at t = 1.
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let mut z: Vec<f64> = (0..12).map(|_| r.sample(StandardNormal)).collect();
    for t in (1..=6).rev() {
        let a = sched.alpha[t - 1];
        let noise: Vec<f64> = if t > 1 { (0..12).map(|_| r.sample(StandardNormal)).collect() } else { vec![0.0; 12] };
        for i in 0..12 {
            z[i] = a.sqrt() * z[i] + (1.0 - a).sqrt() * noise[i];
        }
    }
    assert!(got.data().iter().zip(&z).all(|(g, w)| (g - w).abs() <= 1e-12));
}

#[test]
fn encoder_requires_grid_multiple() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let le = LatentEncoder::new(&mut store.builder("le", &mut rng), "le", 2, 4, 3);
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let ok = le.forward(&p, tape.constant(Tensor::ones(&[1, 2, 32, 16]))).unwrap();
    assert_eq!(ok.shape(), vec![16, 3]);
    assert!(le.forward(&p, tape.constant(Tensor::ones(&[1, 2, 24, 16]))).is_err());
    assert!(le.forward(&p, tape.constant(Tensor::ones(&[1, 3, 16, 16]))).is_err());
}

#[test]
fn condition_separates_distinct_scenes() {
    let mut cfg = Config::default();
    cfg.seed = 3;
    cfg.data.train_scenes = 1;
    cfg.data.test_scenes = 3;
    let data = Dataset::build(&cfg.data).unwrap();
    let (model, store) = Model::build::<f32>(&cfg).unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let cs: Vec<Vec<f64>> = data
        .test
        .iter()
        .map(|s| model.encode_condition(&p, &tape, &s.y_norm).unwrap().value().cast::<f64>().into_data())
        .collect();
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            let dot: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| a * b).sum();
            let na: f64 = cs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = cs[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            let cos = dot / (na * nb);
            assert!(cos < 1.0 - 1e-6, "scenes {i}, {j}: cosine {cos}");
        }
    }
}

#[test]
fn oracle_chain_recovers_start() {
    let sched = DiffusionSchedule::standard(16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z0 = Tensor::from_fn(&[8, 4], |_| rng.sample::<f64, _>(StandardNormal));
    let eps = Tensor::from_fn(&[8, 4], |_| rng.sample::<f64, _>(StandardNormal));
    let tape = Tape::new();
    let mut z = tape.constant(sched.diffuse_forward(&z0, 16, &eps).unwrap());
    for t in (1..=16).rev() {
        // The noise that explains z_t given z0.
        let ab = sched.alpha_bar[t - 1];
        let pred = z.value().zip_map(&z0, |zt, s| (zt - ab.sqrt() * s) / (1.0 - ab).sqrt()).unwrap();
        z = sched.reverse_step(z, t, tape.constant(pred), None).unwrap();
    }
    assert!(z.value().max_abs_diff(&z0).unwrap() <= 1e-4);
}
