//! Reconstruction quality metrics on `[L, H, W]` cubes with data range `[0, 1]`.

use std::io::Write;

use hsi_tensor::{Tensor, TensorError};

use crate::colormap::INFERNO;
use crate::error::{Error, Result};

/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 100.0;

fn dims(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()).into());
    }
    match a.shape() {
        &[l, h, w] => Ok((l, h, w)),
        s => Err(TensorError::dim(op, format!("expected [L, H, W], got {s:?}")).into()),
    }
}

fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Band-averaged PSNR in dB.
pub fn psnr(est: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    let (l, h, w) = dims("psnr", est, truth)?;
    let n = h * w;
    let mut total = 0.0;
    for b in 0..l {
        let range = b * n..(b + 1) * n;
        let mse = est.data()[range.clone()]
            .iter()
            .zip(&truth.data()[range])
            .map(|(a, t)| (a - t) * (a - t))
            .sum::<f64>()
            / n as f64;
        total += psnr_of_mse(mse);
    }
    Ok(total / l as f64)
}

/// PSNR of the whole cube as one signal.
pub fn psnr_cube(est: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    dims("psnr", est, truth)?;
    let mse = est.data().iter().zip(truth.data()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / est.numel() as f64;
    Ok(psnr_of_mse(mse))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering with "valid" extent.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Band-averaged SSIM with a Gaussian window.
pub fn ssim_with(est: &Tensor<f64>, truth: &Tensor<f64>, opts: &SsimOptions) -> Result<f64> {
    let (l, h, w) = dims("ssim", est, truth)?;
    if opts.window == 0 || h < opts.window || w < opts.window {
        return Err(Error::Usage(format!(
            "ssim window {} exceeds the {h}×{w} image; pass a smaller --ssim-window",
            opts.window
        )));
    }
    let g = gaussian_window(opts.window, opts.sigma);
    let (c1, c2) = (opts.k1 * opts.k1, opts.k2 * opts.k2);
    let n = h * w;
    let mut total = 0.0;
    for b in 0..l {
        let x = &est.data()[b * n..(b + 1) * n];
        let y = &truth.data()[b * n..(b + 1) * n];
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&prod(x, x), h, w, &g);
        let syy = filter_valid(&prod(y, y), h, w, &g);
        let sxy = filter_valid(&prod(x, y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / l as f64)
}

pub fn ssim(est: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    ssim_with(est, truth, &SsimOptions::default())
}

/// Rectangle in pixel coordinates: columns `[x, x+w)`, rows `[y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Usage(format!("region '{s}' is not x,y,w,h")))?;
        match v.as_slice() {
            &[x, y, w, h] if w > 0 && h > 0 => Ok(Region { x, y, w, h }),
            _ => Err(Error::Usage(format!("region '{s}' is not x,y,w,h with positive size"))),
        }
    }
}

/// Region-mean spectrum, one value per band.
pub fn region_spectrum(x: &Tensor<f64>, region: Region) -> Result<Vec<f64>> {
    let s = x.shape();
    let (l, h, w) = (s[0], s[1], s[2]);
    if region.x + region.w > w || region.y + region.h > h {
        return Err(Error::Usage(format!("region {region:?} exceeds the {h}×{w} image")));
    }
    let count = (region.w * region.h) as f64;
    Ok((0..l)
        .map(|b| {
            let mut acc = 0.0;
            for r in region.y..region.y + region.h {
                for c in region.x..region.x + region.w {
                    acc += x.data()[(b * h + r) * w + c];
                }
            }
            acc / count
        })
        .collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if sbb == 0.0 {
        return Err(Error::Numeric("correlation undefined: constant ground-truth spectrum".into()));
    }
    if saa == 0.0 {
        return Err(Error::Numeric("correlation undefined: constant estimated spectrum".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson correlation between the region-mean spectra of `est` and `truth`.
pub fn spectral_corr(est: &Tensor<f64>, truth: &Tensor<f64>, region: Region) -> Result<f64> {
    dims("spectral_corr", est, truth)?;
    pearson(&region_spectrum(est, region)?, &region_spectrum(truth, region)?)
}

/// Absolute error at 1-based `band` quantized to 256 levels over `[0, vmax]`: `[H, W]` indices.
pub fn error_indices(est: &Tensor<f64>, truth: &Tensor<f64>, band: usize, vmax: f64) -> Result<(Vec<u8>, usize, usize)> {
    let (l, h, w) = dims("error_map", est, truth)?;
    if band == 0 || band > l {
        return Err(Error::Usage(format!("band {band} outside [1, {l}]")));
    }
    let off = (band - 1) * h * w;
    let idx = (0..h * w)
        .map(|i| {
            let e = (est.data()[off + i] - truth.data()[off + i]).abs();
            ((e / vmax).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok((idx, h, w))
}

/// RGB8 error heat map encoded as PNG.
pub fn error_map_png(est: &Tensor<f64>, truth: &Tensor<f64>, band: usize, vmax: f64) -> Result<Vec<u8>> {
    let (idx, h, w) = error_indices(est, truth, band, vmax)?;
    let rgb: Vec<u8> = idx.iter().flat_map(|&i| INFERNO[i as usize]).collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::format(e.to_string()))?;
        writer.finish().map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(buf)
}

/// Decodes an RGB8 PNG to `(width, height, pixels)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_png(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
