//! Central finite-difference verification of tape gradients (64-bit only).

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided). `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            floor: 1e-3,
            max_coords: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(&out.value())
}

fn scalar_of(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradient check needs a scalar objective, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares tape gradients of `f` w.r.t. every input against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-5..=1e-3).contains(&opts.eps) {
        return Err(TensorError::Usage(format!("eps {} outside [1e-5, 1e-3]", opts.eps)));
    }
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(&out.value())?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for ci in (0..n).step_by(step) {
            let orig = input.data()[ci];
            probe[ti].data_mut()[ci] = orig + opts.eps;
            let fp = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ci] = orig - opts.eps;
            let fm = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (ti, ci);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
