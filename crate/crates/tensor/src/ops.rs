use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dSpec};
use crate::scalar::Real;
use crate::tape::{LinearMap, Op, Var};
use crate::tensor::Tensor;

/// Resampling modes for ×2 spatial resolution changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    AvgPool2,
    BilinearUp2,
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let out = kernels::broadcast_binary(name, &self.value(), &other.value(), f)?;
        Ok(self.tape.push(out, op(self.id, other.id), &[self.id, other.id]))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.tape.push(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().scale(s);
        self.tape.push(out, Op::MulScalar(self.id, s), &[self.id])
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn abs(self) -> Var<'t, T> {
        let out = self.value().map(|v| v.abs());
        self.tape.push(out, Op::Abs(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let out = kernels::sum_axis(&self.value(), axis)?;
        Ok(self.tape.push(out, Op::SumAxis(self.id), &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64)))
    }

    /// Matrix product over the last two axes; `other` may be a shared 2-D matrix.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand's last two axes.
    pub fn matmul_t(self, other: Var<'t, T>, trans_a: bool, trans_b: bool) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let out = kernels::matmul(&self.value(), &other.value(), trans_a, trans_b)?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C/groups, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        self.check_tape(&weight);
        let out = kernels::conv2d(&self.value(), &weight.value(), spec)?;
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                spec,
            },
            &[self.id, weight.id],
        ))
    }

    /// Transposed convolution with weight `[C_in, C_out, kh, kw]`.
    pub fn conv_transpose2d(self, weight: Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        self.check_tape(&weight);
        let out = kernels::conv_transpose2d(&self.value(), &weight.value(), spec)?;
        Ok(self.tape.push(
            out,
            Op::ConvTranspose2d {
                x: self.id,
                w: weight.id,
                spec,
            },
            &[self.id, weight.id],
        ))
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(kernels::gelu_scalar);
        self.tape.push(out, Op::Gelu(self.id), &[self.id])
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let out = kernels::softmax_last(&self.value())?;
        Ok(self.tape.push(out, Op::Softmax(self.id), &[self.id]))
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let nd = self.value().ndim();
        if axis >= nd {
            return Err(TensorError::dim("softmax", format!("axis {axis} out of range")));
        }
        if axis == nd - 1 {
            return self.softmax();
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(axis, nd - 1);
        self.permute(&perm)?.softmax()?.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = kernels::permute(&self.value(), perm)?;
        Ok(self.tape.push(out, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(TensorError::dim("transpose", "need at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn concat(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = xs.first().ok_or_else(|| TensorError::Usage("concat of zero vars".into()))?;
        for x in xs {
            first.check_tape(x);
        }
        let vals: Vec<Rc<Tensor<T>>> = xs.iter().map(|x| x.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| &**v).collect();
        let out = kernels::concat(&refs, axis)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        Ok(first.tape.push(out, Op::Concat(ids.clone(), axis), &ids))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = kernels::narrow(&self.value(), axis, start, len)?;
        Ok(self.tape.push(
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Splits along `axis` into two halves of equal extent.
    pub fn split_half(self, axis: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let n = *self
            .value()
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::dim("split_half", format!("axis {axis} out of range")))?;
        if n % 2 != 0 {
            return Err(TensorError::dim("split_half", format!("odd extent {n} on axis {axis}")));
        }
        Ok((self.narrow(axis, 0, n / 2)?, self.narrow(axis, n / 2, n / 2)?))
    }

    /// Non-overlapping mean pooling over the last two axes.
    pub fn avg_pool(self, kh: usize, kw: usize) -> Result<Var<'t, T>> {
        let out = kernels::avg_pool(&self.value(), kh, kw)?;
        Ok(self.tape.push(out, Op::AvgPool(self.id, kh, kw), &[self.id]))
    }

    pub fn upsample_bilinear2(self) -> Result<Var<'t, T>> {
        let out = kernels::upsample_bilinear2(&self.value())?;
        Ok(self.tape.push(out, Op::Upsample2(self.id), &[self.id]))
    }

    /// Parameter-free ×2 resampling.
    pub fn resample(self, mode: Resample) -> Result<Var<'t, T>> {
        match mode {
            Resample::AvgPool2 => self.avg_pool(2, 2),
            Resample::BilinearUp2 => self.upsample_bilinear2(),
        }
    }

    /// Applies a fixed linear map (or its adjoint).
    pub fn linear_map(self, map: Rc<dyn LinearMap<T>>, adjoint: bool) -> Result<Var<'t, T>> {
        let v = self.value();
        let out = if adjoint {
            map.apply_adjoint(&v)?
        } else {
            map.apply(&v)?
        };
        Ok(self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                map,
                adjoint,
            },
            &[self.id],
        ))
    }

    /// Multiplies by a constant tensor (broadcasting).
    pub fn mul_const(self, c: Tensor<T>) -> Result<Var<'t, T>> {
        let c = self.tape.constant(c);
        self.mul(c)
    }

    pub fn add_const(self, c: Tensor<T>) -> Result<Var<'t, T>> {
        let c = self.tape.constant(c);
        self.add(c)
    }
}
