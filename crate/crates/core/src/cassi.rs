//! Single-disperser CASSI camera model.
//!
//! Cubes are stored band-major as `[L, H, W]`; a measurement is `[1, H̃, W]` with
//! `H̃ = H + step·(L−1)`. Band `λ` (0-based) lands `step·λ` rows below band 0.
//! The sensing matrix is a row of diagonal blocks, so `AAᵀ` is diagonal and is
//! precomputed as `phi`.

use hsi_tensor::{LinearMap, Real, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub step: usize,
}

impl ShiftSpec {
    pub fn new(step: usize) -> Self {
        ShiftSpec { step }
    }

    /// Row offset of 0-based band `band`.
    pub fn offset(&self, band: usize) -> usize {
        self.step * band
    }

    pub fn shifted_height(&self, height: usize, bands: usize) -> usize {
        height + self.offset(bands.saturating_sub(1))
    }
}

/// i.i.d. Bernoulli(`p`) binary mask of shape `[H, W]`.
pub fn bernoulli_mask(height: usize, width: usize, p: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[height, width], |_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
}

fn cube_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(TensorError::dim(op, format!("expected [.., L, H, W], got {shape:?}")).into());
    }
    let n = shape.len();
    let lead = shape[..n - 3].iter().product();
    Ok((lead, shape[n - 3], shape[n - 2], shape[n - 1]))
}

/// Moves band `λ` down by `step·λ` rows: `[L, H, W] → [L, H̃, W]`.
pub fn shift_cube<T: Real>(x: &Tensor<T>, s: ShiftSpec) -> Result<Tensor<T>> {
    let (lead, l, h, w) = cube_dims("shift_cube", x.shape())?;
    let ht = s.shifted_height(h, l);
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ht;
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..lead {
        for band in 0..l {
            let d = s.offset(band);
            let from = (b * l + band) * h * w;
            let to = ((b * l + band) * ht + d) * w;
            dst[to..to + h * w].copy_from_slice(&src[from..from + h * w]);
        }
    }
    Ok(out)
}

/// Exact transpose of [`shift_cube`]: keeps rows `[d(λ), d(λ)+H)` of each band.
pub fn unshift_cube<T: Real>(s_cube: &Tensor<T>, height: usize, s: ShiftSpec) -> Result<Tensor<T>> {
    let (lead, l, ht, w) = cube_dims("unshift_cube", s_cube.shape())?;
    if s.shifted_height(height, l) != ht {
        return Err(TensorError::dim(
            "unshift_cube",
            format!("shifted height {ht} does not match H={height}, L={l}, step={}", s.step),
        )
        .into());
    }
    let mut shape = s_cube.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = height;
    let mut out = Tensor::zeros(&shape);
    let src = s_cube.data();
    let dst = out.data_mut();
    for b in 0..lead {
        for band in 0..l {
            let d = s.offset(band);
            let from = ((b * l + band) * ht + d) * w;
            let to = (b * l + band) * height * w;
            dst[to..to + height * w].copy_from_slice(&src[from..from + height * w]);
        }
    }
    Ok(out)
}

/// Implicit sensing operator `A` for a fixed mask, dispersion and band count.
#[derive(Clone, Debug)]
pub struct SensingOperator<T: Real> {
    mask: Tensor<T>,
    shift: ShiftSpec,
    bands: usize,
    phi: Tensor<T>,
    phi_inv: Tensor<T>,
}

impl<T: Real> SensingOperator<T> {
    pub fn new(mask: Tensor<T>, shift: ShiftSpec, bands: usize) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(TensorError::dim("sensing_operator", format!("mask must be [H, W], got {:?}", mask.shape())).into());
        }
        if bands == 0 {
            return Err(TensorError::dim("sensing_operator", "bands must be ≥ 1").into());
        }
        if mask.data().iter().any(|&m| !m.is_finite() || m < T::zero() || m > T::one()) {
            return Err(TensorError::Numeric {
                op: "sensing_operator",
                msg: "mask values must lie in [0, 1]".into(),
            }
            .into());
        }
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let ht = shift.shifted_height(h, bands);
        let mut phi = Tensor::zeros(&[ht, w]);
        {
            let m = mask.data();
            let p = phi.data_mut();
            for band in 0..bands {
                let d = shift.offset(band);
                for r in 0..h {
                    for c in 0..w {
                        let v = m[r * w + c];
                        p[(r + d) * w + c] += v * v;
                    }
                }
            }
        }
        let phi_inv = phi.map(|v| if v > T::zero() { T::one() / v } else { T::zero() });
        Ok(SensingOperator {
            mask,
            shift,
            bands,
            phi,
            phi_inv,
        })
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn shift(&self) -> ShiftSpec {
        self.shift
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn shifted_height(&self) -> usize {
        self.shift.shifted_height(self.height(), self.bands)
    }

    pub fn cube_shape(&self) -> [usize; 3] {
        [self.bands, self.height(), self.width()]
    }

    pub fn measurement_shape(&self) -> [usize; 3] {
        [1, self.shifted_height(), self.width()]
    }

    /// Diagonal of `AAᵀ`, shape `[H̃, W]`.
    pub fn phi(&self) -> &Tensor<T> {
        &self.phi
    }

    /// Pseudo-inverse of the diagonal; zero where `phi` is zero.
    pub fn phi_inv(&self) -> &Tensor<T> {
        &self.phi_inv
    }

    /// The shifted mask `M̃`, shape `[L, H̃, W]`.
    pub fn shifted_mask(&self) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        let rep = Tensor::from_fn(&[self.bands, h, w], |i| self.mask.data()[i % (h * w)]);
        shift_cube(&rep, self.shift).expect("mask is a valid cube")
    }

    pub fn cast<U: Real>(&self) -> SensingOperator<U> {
        SensingOperator {
            mask: self.mask.cast(),
            shift: self.shift,
            bands: self.bands,
            phi: self.phi.cast(),
            phi_inv: self.phi_inv.cast(),
        }
    }

    fn check_cube(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        let (lead, l, h, w) = cube_dims(op, shape)?;
        if [l, h, w] != self.cube_shape() {
            return Err(TensorError::shape(op, &self.cube_shape(), &shape[shape.len() - 3..]).into());
        }
        Ok(lead)
    }

    fn check_measurement(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        let (lead, one, ht, w) = cube_dims(op, shape)?;
        if [one, ht, w] != self.measurement_shape() {
            return Err(TensorError::shape(op, &self.measurement_shape(), &shape[shape.len() - 3..]).into());
        }
        Ok(lead)
    }

    /// Noiseless `A x`: `[.., L, H, W] → [.., 1, H̃, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let lead = self.check_cube("forward", x.shape())?;
        let (l, h, w, ht) = (self.bands, self.height(), self.width(), self.shifted_height());
        let mut shape = x.shape().to_vec();
        let n = shape.len();
        shape[n - 3] = 1;
        shape[n - 2] = ht;
        let mut y = Tensor::zeros(&shape);
        let m = self.mask.data();
        let src = x.data();
        let dst = y.data_mut();
        for b in 0..lead {
            for band in 0..l {
                let d = self.shift.offset(band);
                let xb = &src[(b * l + band) * h * w..][..h * w];
                let yb = &mut dst[(b * ht + d) * w..][..h * w];
                for ((yo, &xv), &mv) in yb.iter_mut().zip(xb).zip(m) {
                    *yo += mv * xv;
                }
            }
        }
        Ok(y)
    }

    /// `A x + b` with i.i.d. Gaussian `b` of standard deviation `sigma`.
    pub fn forward_noisy<R: Rng + ?Sized>(&self, x: &Tensor<T>, sigma: f64, rng: &mut R) -> Result<Tensor<T>> {
        let mut y = self.forward(x)?;
        if sigma > 0.0 {
            for v in y.data_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += T::lit(sigma * e);
            }
        }
        Ok(y)
    }

    /// `Aᵀ y`: `[.., 1, H̃, W] → [.., L, H, W]`.
    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let lead = self.check_measurement("adjoint", y.shape())?;
        let (l, h, w, ht) = (self.bands, self.height(), self.width(), self.shifted_height());
        let mut shape = y.shape().to_vec();
        let n = shape.len();
        shape[n - 3] = l;
        shape[n - 2] = h;
        let mut x = Tensor::zeros(&shape);
        let m = self.mask.data();
        let src = y.data();
        let dst = x.data_mut();
        for b in 0..lead {
            for band in 0..l {
                let d = self.shift.offset(band);
                let yb = &src[(b * ht + d) * w..][..h * w];
                let xb = &mut dst[(b * l + band) * h * w..][..h * w];
                for ((xo, &yv), &mv) in xb.iter_mut().zip(yb).zip(m) {
                    *xo = mv * yv;
                }
            }
        }
        Ok(x)
    }

    /// `y ⊙ phi⁺`, the `(AAᵀ)⁻¹` step.
    pub fn apply_phi_inv(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_measurement("apply_phi_inv", y.shape())?;
        let p = self.phi_inv.data();
        let n = p.len();
        let mut out = y.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= p[i % n];
        }
        Ok(out)
    }

    /// `y_norm = Aᵀ(AAᵀ)⁻¹ y`.
    pub fn normalize_measurement(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.adjoint(&self.apply_phi_inv(y)?)
    }
}

impl<T: Real> LinearMap<T> for SensingOperator<T> {
    fn apply(&self, x: &Tensor<T>) -> hsi_tensor::Result<Tensor<T>> {
        self.forward(x).map_err(into_tensor_error)
    }

    fn apply_adjoint(&self, y: &Tensor<T>) -> hsi_tensor::Result<Tensor<T>> {
        self.adjoint(y).map_err(into_tensor_error)
    }
}

fn into_tensor_error(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(mask: Tensor<f64>, step: usize, l: usize) -> SensingOperator<f64> {
        SensingOperator::new(mask, ShiftSpec::new(step), l).unwrap()
    }

    #[test]
    fn single_band_shift_is_identity() {
        let x = Tensor::from_fn(&[1, 3, 2], |i| i as f64);
        assert_eq!(shift_cube(&x, ShiftSpec::new(2)).unwrap(), x);
    }

    #[test]
    fn two_band_shift_moves_second_band_down() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = shift_cube(&x, ShiftSpec::new(1)).unwrap();
        assert_eq!(s.shape(), &[2, 3, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0]);
        assert_eq!(unshift_cube(&s, 2, ShiftSpec::new(1)).unwrap(), x);
    }

    #[test]
    fn constant_cube_under_open_mask() {
        let a = op(Tensor::ones(&[4, 5]), 0, 3);
        let y = a.forward(&Tensor::full(&[3, 4, 5], 0.25)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
        let yn = a.normalize_measurement(&y).unwrap();
        assert!(yn.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_band_measures_masked_cube() {
        let mask = bernoulli_mask(5, 4, 0.5, 3);
        let a = op(mask.clone(), 2, 1);
        let x = Tensor::from_fn(&[1, 5, 4], |i| 0.1 + i as f64 / 40.0);
        let y = a.forward(&x).unwrap();
        let expect = x.zip_map(&mask.clone().reshape(&[1, 5, 4]).unwrap(), |a, b| a * b).unwrap();
        assert_eq!(y, expect);
        let yn = a.normalize_measurement(&y).unwrap();
        assert_eq!(yn, expect);
        let open = op(Tensor::ones(&[5, 4]), 0, 1);
        assert_eq!(open.adjoint(&y).unwrap(), y);
    }

    #[test]
    fn zero_coverage_pixels_invert_to_zero() {
        let a = op(Tensor::zeros(&[2, 2]), 1, 2);
        assert!(a.phi_inv().data().iter().all(|&v| v == 0.0));
        let y = Tensor::ones(&[1, 3, 2]);
        assert!(a.normalize_measurement(&y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes_and_masks() {
        let a = op(Tensor::ones(&[4, 4]), 1, 3);
        assert!(a.forward(&Tensor::zeros(&[3, 4, 5])).is_err());
        assert!(a.adjoint(&Tensor::zeros(&[1, 4, 4])).is_err());
        assert!(SensingOperator::new(Tensor::full(&[2, 2], 2.0), ShiftSpec::new(0), 1).is_err());
    }

    #[test]
    fn batched_leading_dims() {
        let a = op(bernoulli_mask(4, 4, 0.5, 1), 1, 2);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let y = a.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 1, 5, 4]);
        let one = a.forward(&Tensor::from_vec(&[2, 4, 4], x.data()[32..64].to_vec()).unwrap()).unwrap();
        assert_eq!(&y.data()[20..40], one.data());
    }
}
