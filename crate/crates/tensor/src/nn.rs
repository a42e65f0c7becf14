//! Parameter storage and the small convolutional building blocks shared by the models.

use std::ops::Index;
use std::rc::Rc;

use rand::RngCore;

use crate::error::{Result, TensorError};
use crate::kernels::Conv2dSpec;
use crate::scalar::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub group: String,
    pub value: Rc<Tensor<T>>,
}

/// Named, grouped learnable tensors. Insertion order is stable and defines ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group: group.into(),
            value: Rc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.group == group).map(|(id, _)| id)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: Rc::new(p.value.cast()),
                })
                .collect(),
        }
    }

    /// Registers every parameter on `tape`; those whose group passes `trainable` track gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.variable_shared(Rc::clone(&p.value), trainable(&p.group)))
                .collect(),
        }
    }

    pub fn bind_all<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }

    /// Builder that prefixes names and tags a group while creating parameters.
    pub fn builder<'a>(&'a mut self, group: &str, rng: &'a mut dyn RngCore) -> ParamBuilder<'a, T> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            group: group.to_string(),
            rng,
        }
    }
}

/// Parameters of a [`ParamStore`] registered on one tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

impl<'t, T: Real> Bound<'t, T> {
    /// Binds externally created vars, one per parameter in id order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Per-parameter gradients (`None` for frozen or unreachable parameters).
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    prefix: String,
    group: String,
    rng: &'a mut dyn RngCore,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    /// Nested scope; names become `prefix.name.…`.
    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
            group: self.group.clone(),
            rng: self.rng,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, self.group.clone(), value)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, -b, b, &mut *self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        &mut *self.rng
    }
}

fn channels_of<T: Real>(op: &'static str, x: &Var<'_, T>, expected: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != expected {
        return Err(TensorError::dim(op, format!("expected [B, {expected}, H, W], got {s:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

/// Convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
    ) -> Self {
        let mut pb = pb.scope(name);
        let shape = [cout, cin / spec.groups, kernel.0, kernel.1];
        let weight = match init {
            Init::FanIn => pb.uniform_fan_in("weight", &shape, (cin / spec.groups) * kernel.0 * kernel.1),
            Init::Zero => pb.zeros("weight", &shape),
        };
        let bias = bias.then(|| pb.zeros("bias", &[1, cout, 1, 1]));
        Conv2d {
            weight,
            bias,
            spec,
            cin,
            cout,
        }
    }

    pub fn pointwise<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(pb, name, cin, cout, (1, 1), Conv2dSpec::default(), bias, Init::FanIn)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        channels_of("conv2d", &x, self.cin)?;
        let y = x.conv2d(p[self.weight], self.spec)?;
        match self.bias {
            Some(b) => y.add(p[b]),
            None => Ok(y),
        }
    }
}

/// Dense layer over the last axis: `[.., in] -> [.., out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let mut pb = pb.scope(name);
        let weight = pb.uniform_fan_in("weight", &[din, dout], din);
        let bias = bias.then(|| pb.zeros("bias", &[dout]));
        Linear {
            weight,
            bias,
            din,
            dout,
        }
    }

    /// Weight and bias start at zero.
    pub fn zeros<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let mut pb = pb.scope(name);
        let weight = pb.zeros("weight", &[din, dout]);
        let bias = Some(pb.zeros("bias", &[dout]));
        Linear {
            weight,
            bias,
            din,
            dout,
        }
    }

    /// Initialised to the identity map (requires `din == dout`).
    pub fn identity<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut pb = pb.scope(name);
        let weight = pb.tensor("weight", Tensor::eye(dim));
        let bias = Some(pb.zeros("bias", &[dim]));
        Linear {
            weight,
            bias,
            din: dim,
            dout: dim,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.last() != Some(&self.din) {
            return Err(TensorError::dim("linear", format!("expected last extent {}, got {s:?}", self.din)));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.din])?;
        let mut y = flat.matmul(p[self.weight])?;
        if let Some(b) = self.bias {
            y = y.add(p[b])?;
        }
        let mut out = s.clone();
        *out.last_mut().expect("non-empty") = self.dout;
        y.reshape(&out)
    }
}

/// Depthwise 3×3 convolution → GELU → pointwise 1×1 convolution.
#[derive(Clone, Debug)]
pub struct DscBlock {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DscBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, pointwise_init: Init) -> Self {
        let mut pb = pb.scope(name);
        let depthwise = Conv2d::new(
            &mut pb,
            "dw",
            cin,
            cin,
            (3, 3),
            Conv2dSpec::same(3, 3).with_groups(cin),
            true,
            Init::FanIn,
        );
        let pointwise = Conv2d::new(&mut pb, "pw", cin, cout, (1, 1), Conv2dSpec::default(), true, pointwise_init);
        DscBlock { depthwise, pointwise }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        channels_of("dsc_block", &x, self.depthwise.cin)?;
        let h = self.depthwise.forward(p, x)?.gelu();
        self.pointwise.forward(p, h)
    }
}

/// Inverted-residual mobile block without normalisation:
/// pointwise expand → depthwise 3×3 (optionally strided) → GELU → pointwise project.
#[derive(Clone, Debug)]
pub struct MBlock {
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub project: Conv2d,
    pub residual: bool,
}

impl MBlock {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
    ) -> Self {
        let mut pb = pb.scope(name);
        let hidden = cin * expansion;
        let expand = Conv2d::pointwise(&mut pb, "expand", cin, hidden, true);
        let depthwise = Conv2d::new(
            &mut pb,
            "dw",
            hidden,
            hidden,
            (3, 3),
            Conv2dSpec::same(3, 3).with_groups(hidden).with_stride(stride),
            true,
            Init::FanIn,
        );
        let project = Conv2d::pointwise(&mut pb, "project", hidden, cout, true);
        MBlock {
            expand,
            depthwise,
            project,
            residual: stride == 1 && cin == cout,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.expand.forward(p, x)?;
        let h = self.depthwise.forward(p, h)?.gelu();
        let h = self.project.forward(p, h)?;
        if self.residual {
            x.add(h)
        } else {
            Ok(h)
        }
    }
}

/// ×2 spatial resampling, fixed or learned.
#[derive(Clone, Debug)]
pub enum Resampler {
    AvgPool2,
    BilinearUp2,
    /// 4×4 convolution with stride 2 and padding 1.
    StridedConv(Conv2d),
    /// 2×2 transposed convolution with stride 2.
    TransposedConv { weight: ParamId, bias: ParamId, cin: usize },
}

impl Resampler {
    pub fn strided_conv<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Resampler::StridedConv(Conv2d::new(
            pb,
            name,
            cin,
            cout,
            (4, 4),
            Conv2dSpec::default().with_stride(2).with_padding(1, 1),
            true,
            Init::FanIn,
        ))
    }

    pub fn transposed_conv<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut pb = pb.scope(name);
        let weight = pb.uniform_fan_in("weight", &[cin, cout, 2, 2], cin);
        let bias = pb.zeros("bias", &[1, cout, 1, 1]);
        Resampler::TransposedConv { weight, bias, cin }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Resampler::AvgPool2 => x.avg_pool(2, 2),
            Resampler::BilinearUp2 => x.upsample_bilinear2(),
            Resampler::StridedConv(conv) => {
                let s = x.shape();
                if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(TensorError::dim("strided_conv", format!("odd spatial extents in {s:?}")));
                }
                conv.forward(p, x)
            }
            Resampler::TransposedConv { weight, bias, cin } => {
                channels_of("transposed_conv", &x, *cin)?;
                x.conv_transpose2d(p[*weight], Conv2dSpec::default().with_stride(2))?.add(p[*bias])
            }
        }
    }
}
