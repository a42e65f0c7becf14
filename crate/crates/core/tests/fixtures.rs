//! Frozen regression values captured from verified runs.

use hsi_tensor::Tensor;
use hsi_unfold::cassi::{bernoulli_mask, SensingOperator, ShiftSpec};
use hsi_unfold::config::DataConfig;
use hsi_unfold::gap::{clamp_unit, gap_tv, GapTvOptions};
use hsi_unfold::metrics::psnr;
use hsi_unfold::scenes::{make_synthetic_scene, SceneKind, SceneSet};

const BLOB_BAND_MEANS: [f64; 8] = [
    0.2674400445093226,
    0.21148124798203322,
    0.1631802430365889,
    0.15617381034171654,
    0.16644592688453644,
    0.1801439807041362,
    0.19427062161696748,
    0.20675554743774074,
];

/// PSNR of default GAP-TV on held-out scene 0 of the default data config, with
/// every file-borne cube (truth, mask, measurement, output) rounded through f32.
pub const SMOKE_GAP_TV_PSNR: f64 = 32.744216603200066;

fn via_f32(x: &Tensor<f64>) -> Tensor<f64> {
    x.cast::<f32>().cast()
}

#[test]
fn blob_scene_band_means() {
    let x = make_synthetic_scene(7, 32, 32, 8, SceneKind::GaussianBlobs).unwrap();
    assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let means: Vec<f64> = x.data().chunks(32 * 32).map(|b| b.iter().sum::<f64>() / 1024.0).collect();
    for (m, want) in means.iter().zip(BLOB_BAND_MEANS) {
        assert!((m - want).abs() <= 1e-12, "{means:?}");
    }
}

#[test]
fn smoke_scene_gap_tv_psnr() {
    let d = DataConfig::default();
    let scenes = SceneSet::generate(d.scene_seed, 0, 1, d.width, d.height, d.bands).unwrap();
    let mask = via_f32(&bernoulli_mask(d.height, d.width, d.mask_open, d.mask_seed));
    let op = SensingOperator::new(mask, ShiftSpec::new(d.step), d.bands).unwrap();
    let y = via_f32(&op.forward(&scenes.test[0]).unwrap());
    let x = via_f32(&scenes.test[0]);
    let recon = via_f32(&clamp_unit(&gap_tv(&y, &op, &GapTvOptions::default()).unwrap()));
    let p = psnr(&recon, &x).unwrap();
    assert!((p - SMOKE_GAP_TV_PSNR).abs() <= 1e-6, "{p}");
}
