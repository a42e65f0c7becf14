//! Attention branches against explicit loops, and identity-at-init properties.

use std::rc::Rc;

use hsi_tensor::nn::{Conv2d, ParamBuilder, ParamStore};
use hsi_tensor::{Tape, Tensor};
use hsi_unfold::cassi::{bernoulli_mask, SensingOperator, ShiftSpec};
use hsi_unfold::denoiser::{AcsMhsa, CpfQuery, CrossPrior, Denoiser, DenoiserConfig, PriorPyramid, TridentBlock};
use hsi_unfold::gap::{project, Unfolding};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store_with<R>(seed: u64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> R) -> (ParamStore<f64>, R) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = build(&mut store.builder("g", &mut rng));
    (store, out)
}

/// Replaces every parameter by a random value so zero and identity inits are exercised.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64);
        *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Direct convolution `[cin, h, w] → [cout, ho, wo]` with zero padding.
fn conv_loop(x: &[f64], cin: usize, h: usize, w: usize, conv: &Conv2d, store: &ParamStore<f64>) -> (Vec<f64>, usize, usize) {
    let wt = store.get(conv.weight);
    let ws = wt.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let s = conv.spec;
    let ho = (h + 2 * s.padding.0 - s.dilation.0 * (kh - 1) - 1) / s.stride.0 + 1;
    let wo = (w + 2 * s.padding.1 - s.dilation.1 * (kw - 1) - 1) / s.stride.1 + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let b = conv.bias.map_or(0.0, |b| store.get(b).data()[o]);
        for r in 0..ho {
            for c in 0..wo {
                let mut acc = b;
                for i in 0..cin {
                    for a in 0..kh {
                        for e in 0..kw {
                            let rr = (r * s.stride.0 + a * s.dilation.0) as isize - s.padding.0 as isize;
                            let cc = (c * s.stride.1 + e * s.dilation.1) as isize - s.padding.1 as isize;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += wt.at(&[o, i, a, e]) * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                }
                out[(o * ho + r) * wo + c] = acc;
            }
        }
    }
    (out, ho, wo)
}

fn softmax_rows(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    for x in v.iter_mut() {
        *x = (*x - m).exp() / s;
    }
}

fn acs_loop(acs: &AcsMhsa, store: &ParamStore<f64>, u: &Tensor<f64>, s: &Tensor<f64>, uniform: bool) -> Vec<f64> {
    let (c, h, w) = (u.shape()[1], u.shape()[2], u.shape()[3]);
    let wide = 2 * c;
    let d = wide / acs.heads;
    let (q, hq, wq) = conv_loop(u.data(), c, h, w, &acs.q, store);
    let (k, _, _) = conv_loop(u.data(), c, h, w, &acs.k, store);
    let (v, _, _) = conv_loop(u.data(), c, h, w, &acs.v, store);
    let n = hq * wq;
    let (pqk, _, _) = conv_loop(s.data(), c, h, w, &acs.p_qk, store);
    let (pv, _, _) = conv_loop(s.data(), c, h, w, &acs.p_v, store);
    let alpha = store.get(acs.alpha).data().to_vec();
    let mut mixed = vec![0.0; wide * h * w];
    for head in 0..acs.heads {
        for i in 0..d {
            let ci = head * d + i;
            let gate = pqk[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            let mut row: Vec<f64> = (0..d)
                .map(|j| {
                    if uniform {
                        return 0.0;
                    }
                    let cj = head * d + j;
                    let dot: f64 = (0..n).map(|t| q[ci * n + t] * k[cj * n + t]).sum();
                    dot * gate / alpha[head]
                })
                .collect();
            softmax_rows(&mut row);
            for p in 0..h * w {
                mixed[ci * h * w + p] = (0..d).map(|j| row[j] * v[(head * d + j) * h * w + p]).sum::<f64>() * pv[ci * h * w + p];
            }
        }
    }
    conv_loop(&mixed, wide, h, w, &acs.proj, store).0
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn acs_mhsa_matches_loop_oracle() {
    for seed in 0..4 {
        for (c, heads, h, w) in [(2, 1, 4, 4), (4, 2, 6, 4), (4, 4, 4, 8)] {
            let (mut store, acs) = store_with(seed, |pb| AcsMhsa::new(pb, "acs", c, heads, (h / 2) * (w / 2)).unwrap());
            randomize(&mut store, seed);
            let u = randn(&[1, c, h, w], seed + 10);
            let s = randn(&[1, c, h, w], seed + 20);
            for uniform in [false, true] {
                let tape = Tape::new();
                let p = store.bind_all(&tape);
                let out = acs.forward(&p, tape.constant(u.clone()), tape.constant(s.clone()), uniform).unwrap();
                let got = out.out.value();
                let want = acs_loop(&acs, &store, &u, &s, uniform);
                assert!(max_diff(got.data(), &want) <= 1e-5, "seed {seed} c {c} uniform {uniform}");
                assert_eq!(out.query.shape(), vec![1, 2 * c, h / 2, w / 2]);
                assert_eq!(out.value.shape(), vec![1, 2 * c, h, w]);
                let attn = out.attn.value();
                for row in attn.data().chunks(2 * c / heads) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn uniform_attention_averages_value_channels() {
    let (c, heads, h, w) = (4, 2, 4, 4);
    let (mut store, acs) = store_with(3, |pb| AcsMhsa::new(pb, "acs", c, heads, 4).unwrap());
    randomize(&mut store, 3);
    let u = randn(&[1, c, h, w], 1);
    let s = randn(&[1, c, h, w], 2);
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let out = acs.forward(&p, tape.constant(u), tape.constant(s), true).unwrap();
    let attn = out.attn.value();
    let d = 2 * c / heads;
    assert!(attn.data().iter().all(|&a| (a - 1.0 / d as f64).abs() < 1e-15));
}

fn cpf_loop(cpf: &CrossPrior, store: &ParamStore<f64>, q_img: &Tensor<f64>, z: &Tensor<f64>) -> Vec<f64> {
    let (wd, h, w) = (q_img.shape()[1], q_img.shape()[2], q_img.shape()[3]);
    let (nz, cz) = (z.shape()[0], z.shape()[1]);
    let dh = wd / cpf.heads;
    let lin = |x: &[f64], l: &hsi_tensor::nn::Linear| -> Vec<f64> {
        let wt = store.get(l.weight);
        (0..l.dout)
            .map(|o| (0..l.din).map(|i| x[i] * wt.at(&[i, o])).sum::<f64>() + l.bias.map_or(0.0, |b| store.get(b).data()[o]))
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..nz).map(|n| lin(&z.data()[n * cz..(n + 1) * cz], &cpf.wk)).collect();
    let vals: Vec<Vec<f64>> = (0..nz).map(|n| lin(&z.data()[n * cz..(n + 1) * cz], &cpf.wv)).collect();
    let mut o = vec![0.0; wd * h * w];
    for t in 0..h * w {
        let tok: Vec<f64> = (0..wd).map(|ch| q_img.data()[ch * h * w + t]).collect();
        let q = lin(&tok, &cpf.wq);
        for head in 0..cpf.heads {
            let r = head * dh..(head + 1) * dh;
            let mut logits: Vec<f64> = keys
                .iter()
                .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            softmax_rows(&mut logits);
            for i in r.clone() {
                o[i * h * w + t] = (0..nz).map(|n| logits[n] * vals[n][i]).sum();
            }
        }
    }
    conv_loop(&o, wd, h, w, &cpf.proj, store).0
}

#[test]
fn cross_prior_matches_loop_oracle() {
    for seed in 0..4 {
        for (wd, cout, cz, heads, nz) in [(4, 2, 3, 1, 16), (8, 4, 6, 2, 8), (8, 4, 5, 4, 4)] {
            let (mut store, cpf) = store_with(seed, |pb| CrossPrior::new(pb, "cpf", wd, cout, cz, heads, CpfQuery::CsfValue).unwrap());
            randomize(&mut store, seed + 5);
            let q_img = randn(&[1, wd, 4, 6], seed + 30);
            let z = randn(&[nz, cz], seed + 40);
            let tape = Tape::new();
            let p = store.bind_all(&tape);
            let (out, attn) = cpf.forward(&p, tape.constant(q_img.clone()), tape.constant(z.clone())).unwrap();
            assert!(max_diff(out.value().data(), &cpf_loop(&cpf, &store, &q_img, &z)) <= 1e-5);
            assert_eq!(attn.shape(), vec![heads, 24, nz]);
        }
    }
}

#[test]
fn prior_pyramid_shapes() {
    let (store, pyr) = store_with(0, |pb| PriorPyramid::new(pb, "pyr", 4));
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let z = randn(&[16, 4], 1);
    let [z1, z2, z3] = pyr.forward(&p, tape.constant(z.clone())).unwrap();
    assert_eq!((z1.shape(), z2.shape(), z3.shape()), (vec![16, 4], vec![8, 8], vec![4, 16]));
    // Identity-initialised merges only regroup tokens.
    assert_eq!(z3.value().data(), z.data());
    let odd = tape.constant(randn(&[3, 4], 2));
    assert!(pyr.forward(&p, odd).is_err());
}

#[test]
fn trident_block_halves_and_shapes() {
    let (store, tb) = store_with(2, |pb| TridentBlock::new(pb, "tt", 8, 2, 6, (4, 4), CpfQuery::CsfValue).unwrap());
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let u = tape.constant(randn(&[1, 8, 4, 4], 3));
    let z = tape.constant(randn(&[16, 6], 4));
    let tr = tb.trace(&p, u, z).unwrap();
    assert_eq!(tr.out.shape(), vec![1, 8, 4, 4]);
    assert_eq!(tr.spatial.shape(), vec![1, 4, 4, 4]);
    assert_eq!(tr.acs.query.shape(), vec![1, 8, 2, 2]);
    assert_eq!(tr.cpf_attn.shape(), vec![2, 16, 16]);
    let (a, b) = u.split_half(1).unwrap();
    let back = hsi_tensor::Var::concat(&[a, b], 1).unwrap();
    assert_eq!(back.value().data(), u.value().data());
    // The query-side variant runs at half resolution and upsamples.
    let (store, tb) = store_with(2, |pb| TridentBlock::new(pb, "tt", 8, 2, 6, (4, 4), CpfQuery::CsfQuery).unwrap());
    let p = store.bind_all(&tape);
    let tr = tb.trace(&p, u, z).unwrap();
    assert_eq!(tr.cpf_attn.shape(), vec![2, 4, 16]);
    assert_eq!(tr.cpf.shape(), vec![1, 4, 4, 4]);
}

fn denoiser_cfg(query: CpfQuery) -> DenoiserConfig {
    DenoiserConfig {
        bands: 3,
        channels: 4,
        heads: 2,
        latent_channels: 4,
        height: 8,
        width: 8,
        cpf_query: query,
    }
}

#[test]
fn denoiser_starts_as_identity() {
    for query in [CpfQuery::CsfValue, CpfQuery::CsfQuery] {
        let (store, d) = store_with(1, |pb| Denoiser::new(pb, "d", denoiser_cfg(query)).unwrap());
        let tape = Tape::new();
        let p = store.bind_all(&tape);
        let x = randn(&[1, 3, 8, 8], 5);
        let out = d.forward(&p, tape.constant(x.clone()), tape.constant(randn(&[16, 4], 6))).unwrap();
        assert_eq!(out.value().data(), x.data());
    }
}

#[test]
fn denoiser_rejects_bad_extents() {
    let mut cfg = denoiser_cfg(CpfQuery::CsfValue);
    cfg.height = 6;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Denoiser::new(&mut store.builder("g", &mut rng), "d", cfg).is_err());
    let (store, d) = store_with(1, |pb| Denoiser::new(pb, "d", denoiser_cfg(CpfQuery::CsfValue)).unwrap());
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    assert!(d.forward(&p, tape.constant(randn(&[1, 2, 8, 8], 1)), tape.constant(randn(&[16, 4], 2))).is_err());
}

fn unfolding_output(gc: bool, denoiser: bool, stages: usize) -> Tensor<f64> {
    let op = Rc::new(SensingOperator::new(bernoulli_mask(8, 8, 0.5, 4), ShiftSpec::new(1), 3).unwrap());
    let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let y = op.forward(&x).unwrap().reshape(&[1, 1, 10, 8]).unwrap();
    let cfg = denoiser.then_some(denoiser_cfg(CpfQuery::CsfValue));
    let (store, un) = store_with(7, |pb| Unfolding::new(pb, "dun", 3, stages, gc, cfg).unwrap());
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let z = tape.constant(randn(&[16, 4], 1));
    (*un.forward(&p, &y, &op, z).unwrap().value()).clone()
}

#[test]
fn gradient_correction_is_bitwise_neutral_at_init() {
    for denoiser in [false, true] {
        for stages in [1, 3] {
            assert_eq!(unfolding_output(true, denoiser, stages), unfolding_output(false, denoiser, stages));
        }
    }
}

#[test]
fn identity_stage_reduces_to_projection() {
    let op = SensingOperator::new(bernoulli_mask(8, 8, 0.5, 4), ShiftSpec::new(1), 3).unwrap();
    let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let y = op.forward(&x).unwrap();
    let yn = op.normalize_measurement(&y).unwrap();
    let want = project(&yn, &y, &op).unwrap();
    let got = unfolding_output(false, false, 1).reshape(&[3, 8, 8]).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn constant_scene_is_recovered_without_dispersion() {
    let op = Rc::new(SensingOperator::new(Tensor::ones(&[8, 8]), ShiftSpec::new(0), 3).unwrap());
    let x = Tensor::full(&[3, 8, 8], 0.42);
    let y = op.forward(&x).unwrap().reshape(&[1, 1, 8, 8]).unwrap();
    let (store, un) = store_with(7, |pb| Unfolding::new(pb, "dun", 3, 2, true, None).unwrap());
    let tape = Tape::new();
    let p = store.bind_all(&tape);
    let z = tape.constant(Tensor::zeros(&[16, 4]));
    let out = un.forward(&p, &y, &op, z).unwrap().value();
    assert!(out.data().iter().all(|v| (v - 0.42).abs() <= 1e-5));
}

#[test]
fn unfolding_is_deterministic() {
    assert_eq!(unfolding_output(true, true, 2), unfolding_output(true, true, 2));
}
