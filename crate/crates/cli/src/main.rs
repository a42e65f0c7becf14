//! `hsi-unfold`: simulate, train, reconstruct and evaluate snapshot spectral imaging.
//!
//! Failures print one JSON line on stderr and exit with 1 (usage), 2 (data or
//! format) or 3 (numeric).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hsi_tensor::Tensor;
use hsi_unfold::cassi::{SensingOperator, ShiftSpec};
use hsi_unfold::config::Config;
use hsi_unfold::gap::{clamp_unit, gap_tv, GapTvOptions};
use hsi_unfold::io::{log_csv, read_hsc1, write_hsc1, Checkpoint};
use hsi_unfold::metrics::{error_map_png, psnr, psnr_cube, spectral_corr, ssim_with, write_png, Region, SsimOptions};
use hsi_unfold::model::PriorSource;
use hsi_unfold::selfcheck::{gradient_suite, selftest, Check};
use hsi_unfold::train::{load_model, Dataset, Trainer};
use hsi_unfold::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hsi-unfold", version, about = "Snapshot spectral imaging reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    GapTv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, the coded mask and measurements as HSC1 files plus a manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase, writing the latest checkpoint and a CSV log after every epoch.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Continue a run from one of its checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Phase I checkpoint to start Phase II from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Reconstruct a cube from a measurement and its mask.
    Reconstruct {
        #[arg(long, required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Dispersion step in rows per band (baseline only).
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Band count; inferred from the measurement height when the step is nonzero (baseline only).
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long, default_value_t = GapTvOptions::default().tv_weight)]
        tv_weight: f64,
        #[arg(long, default_value_t = GapTvOptions::default().iterations)]
        iterations: usize,
        /// Seed of the diffusion sampler.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare reconstructions with ground truth; writes a JSON report, a CSV table and error maps.
    Evaluate {
        #[arg(long, required = true)]
        recon: Vec<PathBuf>,
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        /// Rectangle `x,y,w,h` for the spectral correlation.
        #[arg(long)]
        region: Option<Region>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 11)]
        ssim_window: usize,
        /// Absolute error mapped to the top of the colormap.
        #[arg(long, default_value_t = 0.2)]
        vmax: f64,
        /// Configuration whose hash is recorded in the report.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the error-map images.
        #[arg(long)]
        no_maps: bool,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Operator, diffusion, attention and metric oracles.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(&Error::Usage(first.to_string()));
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "code": e.exit_code(), "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate { config, out } => simulate(&load_config(&config)?, &out),
        Command::Train {
            phase,
            config,
            out,
            resume,
            init,
        } => train(phase, &load_config(&config)?, &out, resume.as_deref(), init.as_deref()),
        Command::Reconstruct {
            ckpt,
            measurement,
            mask,
            out,
            baseline,
            step,
            bands,
            tv_weight,
            iterations,
            seed,
        } => {
            let y = to_f64(&read_hsc1(&measurement)?);
            let mask = to_f64(&read_hsc1(&mask)?);
            let x = match (baseline, ckpt) {
                (Some(Baseline::GapTv), _) => {
                    let opts = GapTvOptions {
                        iterations,
                        tv_weight,
                        ..GapTvOptions::default()
                    };
                    reconstruct_gap_tv(&y, &mask, step, bands, &opts)?
                }
                (None, Some(ckpt)) => reconstruct_model(&Checkpoint::read(&ckpt)?, &y, &mask, seed)?,
                (None, None) => return Err(Error::Usage("reconstruct needs --ckpt or --baseline".into())),
            };
            write_hsc1(&out, &x.cast())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            recon,
            truth,
            region,
            report,
            ssim_window,
            vmax,
            config,
            no_maps,
        } => {
            let hash = config.map(|c| load_config(&c).map(|c| c.hash())).transpose()?;
            evaluate(&recon, &truth, region, &report, ssim_window, vmax, hash, !no_maps)
        }
        Command::Gradcheck { module, seeds } => report_checks(gradient_suite(module.as_deref(), seeds)?),
        Command::Selftest => report_checks(selftest()?),
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Config::from_json(&fs::read_to_string(path)?)
}

fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

fn report_checks(checks: Vec<Check>) -> Result<ExitCode> {
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ManifestEntry {
    split: &'static str,
    index: usize,
    truth: String,
    measurement: String,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    config: Config,
    mask: String,
    bands: usize,
    height: usize,
    width: usize,
    shifted_height: usize,
    step: usize,
    scenes: Vec<ManifestEntry>,
}

fn simulate(cfg: &Config, out: &Path) -> Result<ExitCode> {
    let data = Dataset::build(&cfg.data)?;
    let d = &cfg.data;
    fs::create_dir_all(out.join("train"))?;
    fs::create_dir_all(out.join("test"))?;
    write_hsc1(&out.join("mask.hsc1"), &data.op64.mask().cast::<f32>().reshape(&[1, d.height, d.width])?)?;
    let ht = data.op64.shifted_height();
    let mut scenes = Vec::new();
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            let truth = format!("{split}/scene_{i:03}.hsc1");
            let measurement = format!("{split}/meas_{i:03}.hsc1");
            write_hsc1(&out.join(&truth), &s.truth)?;
            write_hsc1(&out.join(&measurement), &s.y.clone().reshape(&[1, ht, d.width])?)?;
            scenes.push(ManifestEntry {
                split,
                index: i,
                truth,
                measurement,
            });
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        mask: "mask.hsc1".into(),
        bands: d.bands,
        height: d.height,
        width: d.width,
        shifted_height: ht,
        step: d.step,
        scenes,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    fs::write(out.join("manifest.json"), json + "\n")?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(phase: u8, cfg: &Config, out: &Path, resume: Option<&Path>, init: Option<&Path>) -> Result<ExitCode> {
    let data = Dataset::build(&cfg.data)?;
    let mut trainer = match (resume, phase, init) {
        (Some(r), _, _) => {
            let t = Trainer::resume(cfg, &data, &Checkpoint::read(r)?)?;
            if t.phase != phase {
                return Err(Error::Usage(format!("checkpoint is from phase {}, not {phase}", t.phase)));
            }
            t
        }
        (None, 1, _) => Trainer::phase1(cfg, &data)?,
        (None, _, Some(init)) => Trainer::phase2(cfg, &data, &Checkpoint::read(init)?)?,
        (None, _, None) => return Err(Error::Usage("phase 2 needs --init <phase 1 checkpoint> or --resume".into())),
    };
    fs::create_dir_all(out)?;
    let ckpt_path = out.join(format!("phase{phase}.ckpt"));
    let log_path = out.join(format!("phase{phase}_log.csv"));
    let t0 = Instant::now();
    let ckpt = trainer.run(|row, ckpt| {
        ckpt.write(&ckpt_path)?;
        fs::write(&log_path, log_csv(&ckpt.meta.history))?;
        println!(
            "epoch {} lr {:.3e} L_rec {:.6} L_diff {:.6} val_psnr {:.3} ({:.0}s)",
            row.epoch,
            row.lr,
            row.l_rec,
            row.l_diff,
            row.val_psnr,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    // A finished run still leaves its files behind.
    ckpt.write(&ckpt_path)?;
    fs::write(&log_path, log_csv(&ckpt.meta.history))?;
    Ok(ExitCode::SUCCESS)
}

fn mask_2d(mask: &Tensor<f64>) -> Result<Tensor<f64>> {
    match mask.shape() {
        &[h, w] | &[1, h, w] => Ok(mask.clone().reshape(&[h, w])?),
        s => Err(Error::format(format!("mask must hold a single band, got {s:?}"))),
    }
}

fn measurement_2d(y: &Tensor<f64>) -> Result<(usize, usize)> {
    match y.shape() {
        &[1, h, w] => Ok((h, w)),
        s => Err(Error::format(format!("measurement must hold a single band, got {s:?}"))),
    }
}

fn reconstruct_gap_tv(y: &Tensor<f64>, mask: &Tensor<f64>, step: usize, bands: Option<usize>, opts: &GapTvOptions) -> Result<Tensor<f64>> {
    let mask = mask_2d(mask)?;
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (ht, wy) = measurement_2d(y)?;
    if wy != w || ht < h {
        return Err(Error::format(format!("measurement {ht}×{wy} does not fit mask {h}×{w}")));
    }
    let bands = match (bands, step) {
        (Some(b), _) => b,
        (None, 0) => return Err(Error::Usage("--bands is required when --step is 0".into())),
        (None, s) if (ht - h) % s == 0 => (ht - h) / s + 1,
        (None, s) => return Err(Error::format(format!("measurement height {ht} is not {h} plus a multiple of step {s}"))),
    };
    let op = SensingOperator::new(mask, ShiftSpec::new(step), bands)?;
    Ok(clamp_unit(&gap_tv(y, &op, opts)?))
}

fn reconstruct_model(ckpt: &Checkpoint, y: &Tensor<f64>, mask: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let (cfg, model, store) = load_model(ckpt)?;
    if ckpt.meta.phase == 1 {
        eprintln!("note: phase 1 checkpoint; the diffusion prior is untrained");
    }
    let mask = mask_2d(mask)?;
    if mask.shape() != [cfg.data.height, cfg.data.width] {
        return Err(Error::format(format!(
            "mask is {:?} but the model was built for {}×{}",
            mask.shape(),
            cfg.data.height,
            cfg.data.width
        )));
    }
    let op = Rc::new(SensingOperator::new(mask.cast::<f32>(), ShiftSpec::new(cfg.data.step), cfg.data.bands)?);
    let (ht, w) = measurement_2d(y)?;
    if [ht, w] != [op.shifted_height(), op.width()] {
        return Err(Error::format(format!(
            "measurement is {ht}×{w}, the model expects {}×{}",
            op.shifted_height(),
            op.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = model.infer(&store, &y.cast::<f32>(), &op, PriorSource::Diffusion, None, &mut rng)?;
    Ok(x.cast())
}

#[derive(Serialize)]
struct SceneReport {
    recon: String,
    truth: String,
    psnr: f64,
    psnr_cube: f64,
    ssim: f64,
    corr: Option<f64>,
    error_maps: Vec<String>,
}

#[derive(Serialize)]
struct Means {
    psnr: f64,
    psnr_cube: f64,
    ssim: f64,
    corr: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    scenes: Vec<SceneReport>,
    mean: Means,
    region: Option<[usize; 4]>,
    runtime_seconds: f64,
    config_hash: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    recon: &[PathBuf],
    truth: &[PathBuf],
    region: Option<Region>,
    report: &Path,
    ssim_window: usize,
    vmax: f64,
    config_hash: Option<String>,
    maps: bool,
) -> Result<ExitCode> {
    if recon.len() != truth.len() {
        return Err(Error::Usage(format!("{} --recon files but {} --truth files", recon.len(), truth.len())));
    }
    if !(vmax > 0.0) {
        return Err(Error::Usage("--vmax must be positive".into()));
    }
    let t0 = Instant::now();
    let opts = SsimOptions {
        window: ssim_window,
        ..SsimOptions::default()
    };
    let stem = report.with_extension("");
    let stem = stem.to_string_lossy();
    let mut scenes = Vec::new();
    for (i, (rp, tp)) in recon.iter().zip(truth).enumerate() {
        let x = to_f64(&read_hsc1(rp)?);
        let t = to_f64(&read_hsc1(tp)?);
        let mut error_maps = Vec::new();
        if maps {
            for band in 1..=t.shape()[0] {
                let path = PathBuf::from(format!("{stem}_s{i:02}_band{band:02}.png"));
                write_png(&path, &error_map_png(&x, &t, band, vmax)?)?;
                error_maps.push(path.to_string_lossy().into_owned());
            }
        }
        scenes.push(SceneReport {
            recon: rp.to_string_lossy().into_owned(),
            truth: tp.to_string_lossy().into_owned(),
            psnr: psnr(&x, &t)?,
            psnr_cube: psnr_cube(&x, &t)?,
            ssim: ssim_with(&x, &t, &opts)?,
            corr: region.map(|r| spectral_corr(&x, &t, r)).transpose()?,
            error_maps,
        });
    }
    let n = scenes.len() as f64;
    let mean = Means {
        psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n,
        psnr_cube: scenes.iter().map(|s| s.psnr_cube).sum::<f64>() / n,
        ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
        corr: region.map(|_| scenes.iter().map(|s| s.corr.unwrap_or(0.0)).sum::<f64>() / n),
    };
    let mut csv = String::from("scene,psnr,psnr_cube,ssim,corr\n");
    for (i, s) in scenes.iter().enumerate() {
        let corr = s.corr.map(|c| format!("{c:.9}")).unwrap_or_default();
        csv.push_str(&format!("{i},{:.9},{:.9},{:.9},{corr}\n", s.psnr, s.psnr_cube, s.ssim));
    }
    let rep = EvalReport {
        scenes,
        mean,
        region: region.map(|r| [r.x, r.y, r.w, r.h]),
        runtime_seconds: t0.elapsed().as_secs_f64(),
        config_hash,
    };
    fs::write(report.with_extension("csv"), csv)?;
    let json = serde_json::to_string_pretty(&rep).map_err(|e| Error::format(e.to_string()))?;
    fs::write(report, json + "\n")?;
    println!("psnr {:.4} dB  ssim {:.4}  ({} scenes)", rep.mean.psnr, rep.mean.ssim, rep.scenes.len());
    Ok(ExitCode::SUCCESS)
}
