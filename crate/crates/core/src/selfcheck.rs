//! Built-in verification suites: finite-difference gradients and oracle comparisons.
//!
//! Each check reports a worst-case error and the tolerance it is held to.

use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use hsi_tensor::kernels::Conv2dSpec;
use hsi_tensor::nn::{Bound, Conv2d, DscBlock, Init, Linear, MBlock, ParamBuilder, ParamStore};
use hsi_tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cassi::{bernoulli_mask, SensingOperator, ShiftSpec};
use crate::denoiser::{AcsMhsa, CpfQuery, CrossPrior, Denoiser, DenoiserConfig, PriorDownsample, TridentBlock};
use crate::error::{Error, Result};
use crate::gap::{project, project_gc, GradientCorrection, Unfolding};
use crate::latent::{generate_prior, DiffusionSchedule, EpsilonMlp, LatentEncoder, ALPHA_BAR_END_MAX};
use crate::metrics::{pearson, psnr, ssim, PSNR_CAP};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Worst error observed.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64, started: Instant) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} value={:.3e} tol={:.1e} time={:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.value,
            self.tolerance,
            self.seconds
        )
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Gradients

pub const GRAD_TOLERANCE: f64 = 1e-4;

type GradCase = fn(u64) -> Result<GradCheckReport>;

fn weighted_sum<'t>(y: Var<'t, f64>, seed: u64) -> hsi_tensor::Result<Var<'t, f64>> {
    let w = randn(&y.shape(), seed ^ 0x5eed);
    Ok(y.mul_const(w)?.sum())
}

fn op_check(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> hsi_tensor::Result<Var<'t, f64>>,
) -> Result<GradCheckReport> {
    Ok(grad_check(|_, v| weighted_sum(f(v)?, seed), &inputs, GradCheckOptions::default())?)
}

/// Gradient w.r.t. jittered parameters and `extra` inputs of a freshly built module.
fn module_check<M>(
    seed: u64,
    make: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>,
    extra: Vec<Tensor<f64>>,
    max_coords: Option<usize>,
    f: impl for<'t> Fn(&M, &Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make(&mut store.builder("g", &mut rng))?;
    let np = store.len();
    // Zero and identity initialisations hide bugs; move away from them.
    let mut inputs: Vec<Tensor<f64>> = store
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let n = randn(p.value.shape(), seed * 977 + i as u64).scale(0.2);
            p.value.zip_map(&n, |a, b| a + b)
        })
        .collect::<hsi_tensor::Result<_>>()?;
    inputs.extend(extra);
    let opts = GradCheckOptions {
        max_coords,
        ..GradCheckOptions::default()
    };
    Ok(grad_check(
        |_, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let y = f(&m, &p, &v[np..]).map_err(|e| TensorError::Usage(e.to_string()))?;
            weighted_sum(y, seed)
        },
        &inputs,
        opts,
    )?)
}

fn tiny_op() -> Rc<SensingOperator<f64>> {
    Rc::new(SensingOperator::new(bernoulli_mask(8, 8, 0.5, 3), ShiftSpec::new(1), 3).expect("valid operator"))
}

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        bands: 3,
        channels: 4,
        heads: 2,
        latent_channels: 2,
        height: 8,
        width: 8,
        cpf_query: CpfQuery::CsfValue,
    }
}

/// Every differentiable operation and learned module, by name.
pub const GRAD_CASES: &[(&str, GradCase)] = &[
    ("broadcast_arith", |s| {
        op_check(s, vec![randn(&[2, 3, 4], s), randn(&[3, 1], s + 100)], |v| v[0].add(v[1])?.mul(v[0])?.sub(v[1]))
    }),
    ("div", |s| {
        op_check(s, vec![randn(&[3, 4], s), randn(&[4], s + 7).map(|x| x.abs() + 0.5)], |v| v[0].div(v[1]))
    }),
    ("abs", |s| {
        op_check(s, vec![randn(&[6], s).map(|x| if x.abs() < 0.05 { 0.5 } else { x })], |v| Ok(v[0].abs()))
    }),
    ("reductions", |s| op_check(s, vec![randn(&[2, 3, 4], s)], |v| v[0].sum_axis(1)?.mean_axis(2))),
    ("matmul", |s| {
        op_check(s, vec![randn(&[4, 5], s), randn(&[3, 5], s + 1)], |v| v[0].matmul_t(v[1], false, true))
    }),
    ("batched_matmul", |s| {
        op_check(s, vec![randn(&[2, 3, 4], s), randn(&[2, 3, 2], s + 1)], |v| v[0].matmul_t(v[1], true, false))
    }),
    ("conv2d", |s| {
        op_check(s, vec![randn(&[1, 2, 6, 6], s), randn(&[3, 2, 3, 3], s + 1)], |v| v[0].conv2d(v[1], Conv2dSpec::same(3, 3)))
    }),
    ("conv2d_dilated", |s| {
        let spec = Conv2dSpec::default().with_padding(2, 4).with_dilation(2, 2);
        op_check(s, vec![randn(&[1, 2, 6, 6], s), randn(&[3, 2, 3, 5], s + 1)], move |v| v[0].conv2d(v[1], spec))
    }),
    ("conv2d_strided", |s| {
        let spec = Conv2dSpec::default().with_stride(2).with_padding(1, 1);
        op_check(s, vec![randn(&[1, 2, 6, 6], s), randn(&[3, 2, 4, 4], s + 1)], move |v| v[0].conv2d(v[1], spec))
    }),
    ("depthwise_conv2d", |s| {
        let spec = Conv2dSpec::same(3, 3).with_groups(3);
        op_check(s, vec![randn(&[1, 3, 5, 5], s), randn(&[3, 1, 3, 3], s + 1)], move |v| v[0].conv2d(v[1], spec))
    }),
    ("conv_transpose2d", |s| {
        let spec = Conv2dSpec::default().with_stride(2);
        op_check(s, vec![randn(&[1, 2, 3, 3], s), randn(&[2, 3, 2, 2], s + 1)], move |v| v[0].conv_transpose2d(v[1], spec))
    }),
    ("gelu", |s| op_check(s, vec![randn(&[4, 4], s), randn(&[4, 4], s + 50)], |v| Ok(v[0].matmul(v[1])?.gelu()))),
    ("softmax", |s| op_check(s, vec![randn(&[3, 5, 2], s)], |v| v[0].softmax_axis(1))),
    ("layout", |s| {
        op_check(s, vec![randn(&[1, 2, 3], s), randn(&[1, 4, 3], s + 1)], |v| {
            let c = Var::concat(&[v[0], v[1]], 1)?;
            c.narrow(1, 1, 4)?.permute(&[2, 0, 1])?.reshape(&[3, 4])
        })
    }),
    ("resample", |s| op_check(s, vec![randn(&[1, 2, 4, 6], s)], |v| v[0].avg_pool(2, 2)?.upsample_bilinear2())),
    ("dsc_block", |s| {
        module_check(s, |pb| Ok(DscBlock::new(pb, "dsc", 3, 3, Init::FanIn)), vec![randn(&[1, 3, 5, 5], s + 9)], None, |m, p, v| {
            Ok(m.forward(p, v[0])?)
        })
    }),
    ("mblock", |s| {
        module_check(s, |pb| Ok(MBlock::new(pb, "mb", 2, 2, 4, 1)), vec![randn(&[1, 2, 4, 4], s + 9)], None, |m, p, v| {
            Ok(m.forward(p, v[0])?)
        })
    }),
    ("project_gc", |s| {
        let op = tiny_op();
        let y = Tensor::uniform(&[1, 1, 10, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        module_check(s, |pb| Ok(GradientCorrection::new(pb, "gc", 3)), vec![randn(&[1, 3, 8, 8], s + 100)], None, |gc, p, v| {
            project_gc(p, Some(gc), v[0], &y, &op)
        })
    }),
    ("prior_downsample", |s| {
        module_check(s, |pb| Ok(PriorDownsample::new(pb, "pd", 3)), vec![randn(&[8, 3], s + 100)], None, |m, p, v| m.forward(p, v[0]))
    }),
    ("acs_mhsa", |s| {
        module_check(
            s,
            |pb| AcsMhsa::new(pb, "acs", 2, 2, 4),
            vec![randn(&[1, 2, 4, 4], s + 100), randn(&[1, 2, 4, 4], s + 200)],
            None,
            |m, p, v| Ok(m.forward(p, v[0], v[1], false)?.out),
        )
    }),
    ("cross_prior", |s| {
        let query = if s % 2 == 0 { CpfQuery::CsfValue } else { CpfQuery::CsfQuery };
        module_check(
            s,
            |pb| CrossPrior::new(pb, "cpf", 4, 2, 3, 2, query),
            vec![randn(&[1, 4, 2, 2], s + 100), randn(&[4, 3], s + 200)],
            None,
            |m, p, v| Ok(m.forward(p, v[0], v[1])?.0),
        )
    }),
    ("trident_block", |s| {
        module_check(
            s,
            |pb| TridentBlock::new(pb, "tt", 8, 2, 4, (4, 4), CpfQuery::CsfValue),
            vec![randn(&[1, 8, 4, 4], s + 100), randn(&[16, 4], s + 200)],
            Some(6),
            |m, p, v| m.forward(p, v[0], v[1]),
        )
    }),
    ("denoiser", |s| {
        module_check(
            s,
            |pb| Denoiser::new(pb, "d", tiny_denoiser()),
            vec![randn(&[1, 3, 8, 8], s + 100), randn(&[16, 2], s + 200)],
            Some(3),
            |m, p, v| m.forward(p, v[0], v[1]),
        )
    }),
    ("unfolding", |s| {
        let op = tiny_op();
        let y = Tensor::uniform(&[1, 1, 10, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        module_check(
            s,
            |pb| Unfolding::new(pb, "dun", 3, 1, true, Some(tiny_denoiser())),
            vec![randn(&[16, 2], s + 200)],
            Some(3),
            |m, p, v| m.forward(p, &y, &op, v[0]),
        )
    }),
    ("latent_encoder", |s| {
        module_check(s, |pb| Ok(LatentEncoder::new(pb, "le", 2, 4, 3)), vec![randn(&[1, 2, 16, 16], s + 100)], Some(4), |m, p, v| {
            m.forward(p, v[0])
        })
    }),
    ("epsilon_mlp", |s| {
        let sched = DiffusionSchedule::standard(4)?;
        module_check(
            s,
            |pb| Ok(EpsilonMlp::with_skip(pb, "eps", 3, 5, &sched)),
            vec![randn(&[4, 3], s + 100), randn(&[4, 3], s + 200)],
            None,
            |m, p, v| m.forward(p, v[0], v[1], 1 + s as usize % 4),
        )
    }),
    ("generate_prior", |s| {
        let sched = DiffusionSchedule::standard(4)?;
        module_check(s, |pb| Ok(EpsilonMlp::with_skip(pb, "eps", 3, 5, &sched)), vec![randn(&[4, 3], s + 100)], None, |m, p, v| {
            // Identical noise on every evaluation.
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            generate_prior(p, m, v[0], &sched, &mut rng)
        })
    }),
];

/// Runs the named gradient case (or all of them) over `seeds` seeds.
pub fn gradient_suite(module: Option<&str>, seeds: u64) -> Result<Vec<Check>> {
    let cases: Vec<_> = GRAD_CASES.iter().filter(|(n, _)| module.is_none_or(|m| m == *n)).collect();
    if cases.is_empty() {
        let names: Vec<_> = GRAD_CASES.iter().map(|(n, _)| *n).collect();
        return Err(Error::Usage(format!("unknown module '{}'; expected one of {}", module.unwrap_or(""), names.join(", "))));
    }
    let mut out = Vec::new();
    for (name, case) in cases {
        let t0 = Instant::now();
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let r = case(seed)?;
            worst = if r.max_rel_err.is_nan() { f64::NAN } else { worst.max(r.max_rel_err) };
        }
        out.push(Check::new("gradients", *name, worst, GRAD_TOLERANCE, t0));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sensing operator

/// Row-major dense `A`, `(H̃·W) × (L·H·W)`, built entry by entry.
fn dense(mask: &Tensor<f64>, step: usize, l: usize) -> (Vec<f64>, usize, usize) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let ht = h + step * (l - 1);
    let (rows, cols) = (ht * w, l * h * w);
    let mut a = vec![0.0; rows * cols];
    for b in 0..l {
        for r in 0..h {
            for c in 0..w {
                a[((r + step * b) * w + c) * cols + (b * h + r) * w + c] = mask.at(&[r, c]);
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

/// Full `AAᵀ`, row-major.
fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            g[i * rows + k] = (0..cols).map(|j| a[i * cols + j] * a[k * cols + j]).sum();
        }
    }
    g
}

fn operator_checks(out: &mut Vec<Check>) -> Result<()> {
    let t0 = Instant::now();
    let (mut fwd, mut adj, mut pinv, mut diag, mut offdiag) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for l in 1..=4 {
                for step in 0..=2 {
                    let seed = (h * 1000 + w * 100 + l * 10 + step) as u64;
                    let mask = if seed % 2 == 0 {
                        bernoulli_mask(h, w, 0.5, seed)
                    } else {
                        Tensor::uniform(&[h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
                    };
                    let op = SensingOperator::new(mask.clone(), ShiftSpec::new(step), l)?;
                    let (a, rows, cols) = dense(&mask, step, l);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                    let x = Tensor::randn(&[l, h, w], 1.0, &mut rng);
                    let y = Tensor::randn(&op.measurement_shape(), 1.0, &mut rng);
                    fwd = fwd.max(max_diff(op.forward(&x)?.data(), &matvec(&a, rows, cols, x.data())));
                    adj = adj.max(max_diff(op.adjoint(&y)?.data(), &matvec_t(&a, rows, cols, y.data())));
                    let g = gram(&a, rows, cols);
                    let d: Vec<f64> = (0..rows).map(|i| g[i * rows + i]).collect();
                    for i in 0..rows {
                        for k in 0..rows {
                            if i != k {
                                offdiag = offdiag.max(g[i * rows + k].abs());
                            }
                        }
                    }
                    diag = diag.max(max_diff(op.phi().data(), &d));
                    let scaled: Vec<f64> = y.data().iter().zip(&d).map(|(v, g)| if *g > 0.0 { v / g } else { 0.0 }).collect();
                    pinv = pinv.max(max_diff(op.normalize_measurement(&y)?.data(), &matvec_t(&a, rows, cols, &scaled)));
                    cases += 1;
                }
            }
        }
    }
    debug_assert_eq!(cases, 432);
    out.push(Check::new("operator", "forward_vs_dense", fwd, 1e-6, t0));
    out.push(Check::new("operator", "adjoint_vs_dense", adj, 1e-6, t0));
    out.push(Check::new("operator", "gram_diagonal", diag, 1e-6, t0));
    out.push(Check::new("operator", "gram_offdiagonal", offdiag, 0.0, t0));
    out.push(Check::new("operator", "pseudo_inverse_vs_dense", pinv, 1e-6, t0));

    let t0 = Instant::now();
    let (mut consistent, mut idempotent) = (0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let (h, w, l) = (6 + seed as usize, 5 + seed as usize % 4, 3 + seed as usize % 3);
        let op = SensingOperator::new(bernoulli_mask(h, w, 0.5, seed), ShiftSpec::new(seed as usize % 3), l)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Tensor::uniform(&[l, h, w], 0.0, 1.0, &mut rng);
        let y = op.forward(&truth)?;
        let v = Tensor::randn(&[l, h, w], 1.0, &mut rng);
        let x = project(&v, &y, &op)?;
        consistent = consistent.max(op.forward(&x)?.max_abs_diff(&y)?);
        idempotent = idempotent.max(project(&x, &y, &op)?.max_abs_diff(&x)?);
    }
    out.push(Check::new("projection", "measurement_consistency", consistent, 1e-5, t0));
    out.push(Check::new("projection", "idempotence", idempotent, 1e-6, t0));
    Ok(())
}

// ---------------------------------------------------------------------------
// Diffusion

fn diffusion_checks(out: &mut Vec<Check>) -> Result<()> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for steps in [2, 4, 16] {
        let sched = DiffusionSchedule::standard(steps)?;
        let z0 = randn(&[4, 3], steps as u64);
        let eps = randn(&[4, 3], steps as u64 + 50);
        for t in 1..=steps {
            let zt = sched.diffuse_forward(&z0, t, &eps)?;
            let tape = Tape::new();
            let got = sched.reverse_step(tape.constant(zt.clone()), t, tape.constant(eps.clone()), None)?.value();
            let (a, ab, ab_prev) = (sched.alpha[t - 1], sched.alpha_bar[t - 1], sched.alpha_bar_at(t - 1));
            let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
            let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let want: Vec<f64> = z0.data().iter().zip(zt.data()).map(|(z, x)| c0 * z + ct * x).collect();
            worst = worst.max(max_diff(got.data(), &want));
        }
    }
    out.push(Check::new("diffusion", "posterior_mean_oracle", worst, 1e-6, t0));

    // Standardised deviation of the sample mean and variance, in standard errors.
    let t0 = Instant::now();
    let sched = DiffusionSchedule::standard(16)?;
    let z0 = Tensor::from_vec(&[4], vec![1.5, -0.7, 0.0, 3.0])?;
    let draws = 10_000;
    let (mut zmean, mut zvar) = (0.0f64, 0.0f64);
    for t in [1, 4, 9, 16] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let (mut sum, mut sq) = ([0.0; 4], [0.0; 4]);
        for _ in 0..draws {
            let eps = Tensor::from_fn(&[4], |_| rng.sample::<f64, _>(StandardNormal));
            let zt = sched.diffuse_forward(&z0, t, &eps)?;
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
            zmean = zmean.max((mean - ab.sqrt() * z0.data()[i]).abs() / (var / n).sqrt());
            zvar = zvar.max((svar - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()));
        }
    }
    out.push(Check::new("diffusion", "forward_mean_in_std_errors", zmean, 3.0, t0));
    out.push(Check::new("diffusion", "forward_variance_in_std_errors", zvar, 3.0, t0));

    let t0 = Instant::now();
    let mut end = 0.0f64;
    for steps in 1..=40 {
        for (lo, hi) in [(0.1, 0.99), (1e-4, 0.02), (0.3, 0.5), (0.5, 0.5)] {
            let s = DiffusionSchedule::linear(steps, lo, hi)?;
            end = end.max(*s.alpha_bar.last().expect("non-empty schedule"));
            if s.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
                end = f64::INFINITY;
            }
        }
    }
    out.push(Check::new("diffusion", "schedule_end_alpha_bar", end, ALPHA_BAR_END_MAX, t0));

    // A noise predictor that knows z0 walks the chain back exactly.
    let t0 = Instant::now();
    let z0 = randn(&[8, 4], 11);
    let tape = Tape::new();
    let mut z = tape.constant(sched.diffuse_forward(&z0, 16, &randn(&[8, 4], 12))?);
    for t in (1..=16).rev() {
        let ab = sched.alpha_bar[t - 1];
        let pred = z.value().zip_map(&z0, |zt, s| (zt - ab.sqrt() * s) / (1.0 - ab).sqrt())?;
        z = sched.reverse_step(z, t, tape.constant(pred), None)?;
    }
    out.push(Check::new("diffusion", "oracle_chain_recovers_start", z.value().max_abs_diff(&z0)?, 1e-4, t0));
    Ok(())
}

// ---------------------------------------------------------------------------
// Attention

fn build<R>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<R>) -> Result<(ParamStore<f64>, R)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f(&mut store.builder("g", &mut rng))?;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64));
    }
    Ok((store, out))
}

/// Direct zero-padded convolution `[cin, h, w] → [cout, h', w']`.
fn conv_loop(x: &[f64], cin: usize, h: usize, w: usize, conv: &Conv2d, store: &ParamStore<f64>) -> Vec<f64> {
    let wt = store.get(conv.weight);
    let ws = wt.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let s = conv.spec;
    let ho = (h + 2 * s.padding.0 - s.dilation.0 * (kh - 1) - 1) / s.stride.0 + 1;
    let wo = (w + 2 * s.padding.1 - s.dilation.1 * (kw - 1) - 1) / s.stride.1 + 1;
    let per_group = cin / s.groups;
    let out_per_group = cout / s.groups;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let b = conv.bias.map_or(0.0, |b| store.get(b).data()[o]);
        let g = o / out_per_group;
        for r in 0..ho {
            for c in 0..wo {
                let mut acc = b;
                for ii in 0..per_group {
                    let i = g * per_group + ii;
                    for a in 0..kh {
                        for e in 0..kw {
                            let rr = (r * s.stride.0 + a * s.dilation.0) as isize - s.padding.0 as isize;
                            let cc = (c * s.stride.1 + e * s.dilation.1) as isize - s.padding.1 as isize;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += wt.at(&[o, ii, a, e]) * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                }
                out[(o * ho + r) * wo + c] = acc;
            }
        }
    }
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    for x in v.iter_mut() {
        *x = (*x - m).exp() / s;
    }
}

fn acs_loop(acs: &AcsMhsa, store: &ParamStore<f64>, u: &Tensor<f64>, s: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (u.shape()[1], u.shape()[2], u.shape()[3]);
    let wide = 2 * c;
    let d = wide / acs.heads;
    let q = conv_loop(u.data(), c, h, w, &acs.q, store);
    let k = conv_loop(u.data(), c, h, w, &acs.k, store);
    let v = conv_loop(u.data(), c, h, w, &acs.v, store);
    let n = q.len() / wide;
    let pqk = conv_loop(s.data(), c, h, w, &acs.p_qk, store);
    let pv = conv_loop(s.data(), c, h, w, &acs.p_v, store);
    let alpha = store.get(acs.alpha).data().to_vec();
    let mut mixed = vec![0.0; wide * h * w];
    for head in 0..acs.heads {
        for i in 0..d {
            let ci = head * d + i;
            let gate = pqk[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            let mut row: Vec<f64> = (0..d)
                .map(|j| {
                    let cj = head * d + j;
                    (0..n).map(|t| q[ci * n + t] * k[cj * n + t]).sum::<f64>() * gate / alpha[head]
                })
                .collect();
            softmax_in_place(&mut row);
            for p in 0..h * w {
                mixed[ci * h * w + p] = (0..d).map(|j| row[j] * v[(head * d + j) * h * w + p]).sum::<f64>() * pv[ci * h * w + p];
            }
        }
    }
    conv_loop(&mixed, wide, h, w, &acs.proj, store)
}

fn linear_loop(x: &[f64], l: &Linear, store: &ParamStore<f64>) -> Vec<f64> {
    let wt = store.get(l.weight);
    (0..l.dout)
        .map(|o| (0..l.din).map(|i| x[i] * wt.at(&[i, o])).sum::<f64>() + l.bias.map_or(0.0, |b| store.get(b).data()[o]))
        .collect()
}

fn cpf_loop(cpf: &CrossPrior, store: &ParamStore<f64>, q_img: &Tensor<f64>, z: &Tensor<f64>) -> Vec<f64> {
    let (wd, h, w) = (q_img.shape()[1], q_img.shape()[2], q_img.shape()[3]);
    let (nz, cz) = (z.shape()[0], z.shape()[1]);
    let dh = wd / cpf.heads;
    let keys: Vec<Vec<f64>> = (0..nz).map(|n| linear_loop(&z.data()[n * cz..(n + 1) * cz], &cpf.wk, store)).collect();
    let vals: Vec<Vec<f64>> = (0..nz).map(|n| linear_loop(&z.data()[n * cz..(n + 1) * cz], &cpf.wv, store)).collect();
    let mut o = vec![0.0; wd * h * w];
    for t in 0..h * w {
        let tok: Vec<f64> = (0..wd).map(|ch| q_img.data()[ch * h * w + t]).collect();
        let q = linear_loop(&tok, &cpf.wq, store);
        for head in 0..cpf.heads {
            let r = head * dh..(head + 1) * dh;
            let mut logits: Vec<f64> = keys.iter().map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt()).collect();
            softmax_in_place(&mut logits);
            for i in r {
                o[i * h * w + t] = (0..nz).map(|n| logits[n] * vals[n][i]).sum();
            }
        }
    }
    conv_loop(&o, wd, h, w, &cpf.proj, store)
}

fn row_sum_error(attn: &Tensor<f64>, row: usize) -> f64 {
    attn.data().chunks(row).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn attention_checks(out: &mut Vec<Check>) -> Result<()> {
    let t0 = Instant::now();
    let (mut worst, mut rows) = (0.0f64, 0.0f64);
    for seed in 0..4 {
        for (c, heads, h, w) in [(2, 1, 4, 4), (4, 2, 4, 4), (4, 4, 2, 4)] {
            let (store, acs) = build(seed, |pb| AcsMhsa::new(pb, "acs", c, heads, (h / 2) * (w / 2)))?;
            let u = randn(&[1, c, h, w], seed + 10);
            let s = randn(&[1, c, h, w], seed + 20);
            let tape = Tape::new();
            let p = store.bind_all(&tape);
            let r = acs.forward(&p, tape.constant(u.clone()), tape.constant(s.clone()), false)?;
            worst = worst.max(max_diff(r.out.value().data(), &acs_loop(&acs, &store, &u, &s)));
            rows = rows.max(row_sum_error(&r.attn.value(), 2 * c / heads));
        }
    }
    out.push(Check::new("attention", "acs_mhsa_vs_loop", worst, 1e-5, t0));

    let t0 = Instant::now();
    let mut cworst = 0.0f64;
    for seed in 0..4 {
        for (wd, cout, cz, heads, nz) in [(4, 2, 3, 1, 4), (8, 4, 6, 2, 4), (8, 4, 5, 4, 4)] {
            let (store, cpf) = build(seed, |pb| CrossPrior::new(pb, "cpf", wd, cout, cz, heads, CpfQuery::CsfValue))?;
            let q_img = randn(&[1, wd, 4, 4], seed + 30);
            let z = randn(&[nz, cz], seed + 40);
            let tape = Tape::new();
            let p = store.bind_all(&tape);
            let (o, attn) = cpf.forward(&p, tape.constant(q_img.clone()), tape.constant(z.clone()))?;
            cworst = cworst.max(max_diff(o.value().data(), &cpf_loop(&cpf, &store, &q_img, &z)));
            rows = rows.max(row_sum_error(&attn.value(), nz));
        }
    }
    out.push(Check::new("attention", "cross_prior_vs_loop", cworst, 1e-5, t0));
    out.push(Check::new("attention", "softmax_row_sums", rows, 1e-6, t0));
    Ok(())
}

// ---------------------------------------------------------------------------
// Identity initialisation

fn identity_checks(out: &mut Vec<Check>) -> Result<()> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for query in [CpfQuery::CsfValue, CpfQuery::CsfQuery] {
        for seed in 0..3 {
            let cfg = DenoiserConfig {
                latent_channels: 4,
                cpf_query: query,
                ..tiny_denoiser()
            };
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Denoiser::new(&mut store.builder("d", &mut rng), "d", cfg)?;
            let tape = Tape::new();
            let p = store.bind_all(&tape);
            let x = randn(&[1, 3, 8, 8], seed + 5);
            let y = d.forward(&p, tape.constant(x.clone()), tape.constant(randn(&[16, 4], seed + 6)))?;
            worst = worst.max(max_diff(y.value().data(), x.data()));
        }
    }
    out.push(Check::new("identity", "denoiser_is_identity", worst, 0.0, t0));

    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let op = tiny_op();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gc = GradientCorrection::new(&mut store.builder("dun", &mut rng), "gc", 3);
        let tape = Tape::new();
        let p = store.bind_all(&tape);
        let y = Tensor::uniform(&[1, 1, 10, 8], 0.0, 1.0, &mut rng);
        let v = tape.constant(randn(&[1, 3, 8, 8], seed + 9));
        let with = project_gc(&p, Some(&gc), v, &y, &op)?.value();
        let without = project_gc(&p, None, v, &y, &op)?.value();
        worst = worst.max(max_diff(with.data(), without.data()));
    }
    out.push(Check::new("identity", "project_gc_is_project", worst, 0.0, t0));
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

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
                se += (at(est, b, r, c) - at(truth, b, r, c)).powi(2);
            }
        }
        let mse = se / (s[1] * s[2]) as f64;
        total += if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) };
    }
    total / s[0] as f64
}

/// SSIM with a direct (non-separable) 11×11 Gaussian window over the valid region.
fn ssim_loop(est: &Tensor<f64>, truth: &Tensor<f64>) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let s = truth.shape();
    let half = (k as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            win[i * k + j] = (-((i as f64 - half).powi(2) + (j as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for b in 0..s[0] {
        let (mut acc, mut count) = (0.0, 0);
        for r in 0..=s[1] - k {
            for c in 0..=s[2] - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i * k + j] / z;
                        let (x, y) = (at(est, b, r + i, c + j), at(truth, b, r + i, c + j));
                        mx += g * x;
                        my += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / s[0] as f64
}

fn noisy_pair(shape: &[usize], seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(shape, 0.0, 1.0, &mut rng);
    let n = Tensor::uniform(shape, -0.1, 0.1, &mut rng);
    Ok((x.zip_map(&n, |a: f64, b: f64| (a + b).clamp(0.0, 1.0))?, x))
}

fn metric_checks(out: &mut Vec<Check>) -> Result<()> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (a, b) = noisy_pair(&[4, 13, 17], seed)?;
        worst = worst.max((psnr(&a, &b)? - psnr_loop(&a, &b)).abs());
    }
    out.push(Check::new("metrics", "psnr_vs_loop", worst, 1e-9, t0));

    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let (a, b) = noisy_pair(&[3, 16, 19], seed)?;
        worst = worst.max((ssim(&a, &b)? - ssim_loop(&a, &b)).abs());
    }
    out.push(Check::new("metrics", "ssim_vs_loop", worst, 1e-7, t0));

    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let want = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        worst = worst.max((pearson(&a, &b)? - want).abs());
    }
    out.push(Check::new("metrics", "pearson_vs_closed_form", worst, 1e-10, t0));

    let t0 = Instant::now();
    let (_, x) = noisy_pair(&[3, 16, 16], 8)?;
    let spec: Vec<f64> = x.data().chunks(256).map(|b| b.iter().sum::<f64>()).collect();
    let exact = (psnr(&x, &x)? - PSNR_CAP).abs() + (ssim(&x, &x)? - 1.0).abs() + (pearson(&spec, &spec)? - 1.0).abs();
    out.push(Check::new("metrics", "identical_inputs_exact", exact, 0.0, t0));
    Ok(())
}

/// Operator, projection, diffusion, attention, identity-init and metric oracles.
pub fn selftest() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    operator_checks(&mut out)?;
    diffusion_checks(&mut out)?;
    attention_checks(&mut out)?;
    identity_checks(&mut out)?;
    metric_checks(&mut out)?;
    Ok(out)
}
