//! Forward and backward numeric kernels on plain tensors.
//!
//! Every loop runs in a fixed row-major order so results are bit-reproducible.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Real};
use crate::tensor::{strides_of, Tensor};

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output position, yielding the flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![T::zero(); out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::from_vec(&out, data)
}

/// Sums `grad` (with broadcast shape) down to `shape`.
pub fn reduce_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape().to_vec();
    let sa = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut data = vec![T::zero(); shape.iter().product()];
    let gd = grad.data();
    for_each_broadcast(&out, &sa, &zero, |i, ia, _| data[ia] += gd[i]);
    Tensor::from_vec(shape, data).expect("reduced shape")
}

/// Product of `a` and `b` broadcast to `a`'s shape, then reduced to `target`.
pub fn mul_reduce<T: Real>(g: &Tensor<T>, other: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let prod = broadcast_binary("mul_reduce", g, other, |x, y| x * y).expect("broadcast-compatible");
    reduce_to_shape(&prod, target)
}

// ---------------------------------------------------------------- matmul

/// Splits `[.., m, k]` into (batch, m, k).
pub fn matrix_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((1, shape[0], shape[1])),
        n if n > 2 => Some((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1])),
        _ => None,
    }
}

pub struct MatmulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

pub fn matmul_geometry(
    a: &[usize],
    b: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<MatmulGeometry> {
    let err = || TensorError::shape("matmul", a, b);
    let (ba, ra, ca) = matrix_dims(a).ok_or_else(err)?;
    let (bb, rb, cb) = matrix_dims(b).ok_or_else(err)?;
    let (m, ka) = if trans_a { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
    if ka != kb {
        return Err(err());
    }
    let b_shared = b.len() == 2;
    if !b_shared && (ba != bb || a[..a.len() - 2] != b[..b.len() - 2]) {
        return Err(err());
    }
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulGeometry {
        batch: ba,
        m,
        k: ka,
        n,
        b_shared,
        out_shape,
    })
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let g = matmul_geometry(a.shape(), b.shape(), trans_a, trans_b)?;
    let mut out = vec![T::zero(); g.batch * g.m * g.n];
    let (sa, sb, sc) = (g.m * g.k, if g.b_shared { 0 } else { g.k * g.n }, g.m * g.n);
    for i in 0..g.batch {
        gemm(
            g.m,
            g.k,
            g.n,
            &a.data()[i * sa..(i + 1) * sa],
            trans_a,
            &b.data()[i * sb..i * sb + g.k * g.n],
            trans_b,
            &mut out[i * sc..(i + 1) * sc],
            false,
        );
    }
    Tensor::from_vec(&g.out_shape, out)
}

/// Gradients of `C = op(A)·op(B)` given `dC`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let g = matmul_geometry(a.shape(), b.shape(), trans_a, trans_b).expect("validated in forward");
    let (m, k, n) = (g.m, g.k, g.n);
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (sa, sb, sc) = (m * k, if g.b_shared { 0 } else { k * n }, m * n);
    for i in 0..g.batch {
        let av = &a.data()[i * sa..(i + 1) * sa];
        let bv = &b.data()[i * sb..i * sb + k * n];
        let gv = &gout.data()[i * sc..(i + 1) * sc];
        let ga_i = &mut ga[i * sa..(i + 1) * sa];
        // dA = dC·op(B)ᵀ, stored in A's layout.
        if trans_a {
            // A stored k×m: dA_stored = op(B)·dCᵀ
            gemm(k, n, m, bv, trans_b, gv, true, ga_i, false);
        } else {
            gemm(m, n, k, gv, false, bv, !trans_b, ga_i, false);
        }
        let gb_i = &mut gb[i * sb..i * sb + k * n];
        // dB = op(A)ᵀ·dC, stored in B's layout.
        if trans_b {
            // B stored n×k: dB_stored = dCᵀ·op(A)
            gemm(n, m, k, gv, true, av, trans_a, gb_i, g.b_shared && i > 0);
        } else {
            gemm(k, m, n, av, !trans_a, gv, false, gb_i, g.b_shared && i > 0);
        }
    }
    (
        Tensor::from_vec(a.shape(), ga).expect("shape"),
        Tensor::from_vec(b.shape(), gb).expect("shape"),
    )
}

// ---------------------------------------------------------------- convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kh: usize, kw: usize) -> Self {
        Conv2dSpec {
            padding: (kh / 2, kw / 2),
            ..Default::default()
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Output extent along one axis, or `None` when the dilated kernel exceeds the padded input.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
        let span = dil * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if kernel == 0 || stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }
}

/// Geometry of one im2col unfolding: an image of `c×h×w` read by a `kh×kw`
/// kernel onto an `oh×ow` grid.
#[derive(Clone, Copy)]
struct Patch {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    /// Source row index for output row `o` and kernel row `k`, if inside the image.
    #[inline]
    fn src_y(&self, o: usize, k: usize) -> Option<usize> {
        let y = (o * self.spec.stride.0 + k * self.spec.dilation.0) as isize - self.spec.padding.0 as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn src_x(&self, o: usize, k: usize) -> Option<usize> {
        let x = (o * self.spec.stride.1 + k * self.spec.dilation.1) as isize - self.spec.padding.1 as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        match self.src_y(oy, ki) {
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                            Some(y) => {
                                let src = &plane[y * self.w..(y + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src_x(ox, kj) {
                                        Some(x) => src[x],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oy in 0..self.oh {
                        let Some(y) = self.src_y(oy, ki) else { continue };
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(x) = self.src_x(ox, kj) {
                                dst[x] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    patch: Patch,
}

fn conv_dims(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        return Err(TensorError::shape("conv2d", x, w));
    }
    let (b, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
    let g = spec.groups;
    if g == 0 || c % g != 0 || o % g != 0 || c / g != cg {
        return Err(TensorError::shape("conv2d", x, w));
    }
    let oh = Conv2dSpec::out_extent(h, kh, spec.stride.0, spec.padding.0, spec.dilation.0);
    let ow = Conv2dSpec::out_extent(wd, kw, spec.stride.1, spec.padding.1, spec.dilation.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(TensorError::dim(
            "conv2d",
            format!("kernel {kh}x{kw} (dilation {:?}) larger than padded input {h}x{wd}", spec.dilation),
        ));
    };
    Ok(ConvDims {
        batch: b,
        cin: c,
        cout: o,
        groups: g,
        patch: Patch {
            c: cg,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            spec,
        },
    })
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), spec)?;
    let pt = d.patch;
    let (og, krows, p) = (d.cout / d.groups, pt.rows(), pt.cols());
    let mut out = vec![T::zero(); d.batch * d.cout * p];
    let mut cols = vec![T::zero(); if pt.is_pointwise() { 0 } else { krows * p }];
    let img_len = pt.c * pt.h * pt.w;
    for bi in 0..d.batch {
        for gi in 0..d.groups {
            let img = &x.data()[(bi * d.cin + gi * pt.c) * pt.h * pt.w..][..img_len];
            let src: &[T] = if pt.is_pointwise() {
                img
            } else {
                pt.im2col(img, &mut cols);
                &cols
            };
            let wg = &w.data()[gi * og * krows..(gi + 1) * og * krows];
            let dst = &mut out[(bi * d.cout + gi * og) * p..][..og * p];
            gemm(og, krows, p, wg, false, src, false, dst, false);
        }
    }
    Tensor::from_vec(&[d.batch, d.cout, pt.oh, pt.ow], out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: Conv2dSpec,
    gout: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = conv_dims(x.shape(), w.shape(), spec).expect("validated in forward");
    let pt = d.patch;
    let (og, krows, p) = (d.cout / d.groups, pt.rows(), pt.cols());
    let img_len = pt.c * pt.h * pt.w;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); krows * p];
    let mut gcols = vec![T::zero(); krows * p];
    for bi in 0..d.batch {
        for gi in 0..d.groups {
            let img = &x.data()[(bi * d.cin + gi * pt.c) * pt.h * pt.w..][..img_len];
            let go = &gout.data()[(bi * d.cout + gi * og) * p..][..og * p];
            let wg = &w.data()[gi * og * krows..(gi + 1) * og * krows];
            if let Some(gw) = gw.as_mut() {
                let src: &[T] = if pt.is_pointwise() {
                    img
                } else {
                    pt.im2col(img, &mut cols);
                    &cols
                };
                let gwg = &mut gw[gi * og * krows..(gi + 1) * og * krows];
                gemm(og, p, krows, go, false, src, true, gwg, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gimg = &mut gx[(bi * d.cin + gi * pt.c) * pt.h * pt.w..][..img_len];
                if pt.is_pointwise() {
                    gemm(krows, og, p, wg, true, go, false, gimg, true);
                } else {
                    gemm(krows, og, p, wg, true, go, false, &mut gcols, false);
                    pt.col2im(&gcols, gimg);
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v).expect("shape")),
        gw.map(|v| Tensor::from_vec(w.shape(), v).expect("shape")),
    )
}

/// Transposed convolution; `w` is laid out `[cin, cout, kh, kw]`, groups unsupported.
pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let pt = transpose_patch(x.shape(), w.shape(), spec)?;
    let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let (krows, p) = (pt.rows(), pt.cols());
    let mut out = vec![T::zero(); b * cout * pt.h * pt.w];
    let mut cols = vec![T::zero(); krows * p];
    for bi in 0..b {
        let xb = &x.data()[bi * cin * p..(bi + 1) * cin * p];
        gemm(krows, cin, p, w.data(), true, xb, false, &mut cols, false);
        pt.col2im(&cols, &mut out[bi * cout * pt.h * pt.w..(bi + 1) * cout * pt.h * pt.w]);
    }
    Tensor::from_vec(&[b, cout, pt.h, pt.w], out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: Conv2dSpec,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let pt = transpose_patch(x.shape(), w.shape(), spec).expect("validated in forward");
    let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let (krows, p) = (pt.rows(), pt.cols());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut cols = vec![T::zero(); krows * p];
    for bi in 0..b {
        pt.im2col(&gout.data()[bi * cout * pt.h * pt.w..(bi + 1) * cout * pt.h * pt.w], &mut cols);
        let xb = &x.data()[bi * cin * p..(bi + 1) * cin * p];
        gemm(cin, krows, p, w.data(), false, &cols, false, &mut gx[bi * cin * p..(bi + 1) * cin * p], false);
        gemm(cin, p, krows, xb, false, &cols, true, &mut gw, true);
    }
    (
        Tensor::from_vec(x.shape(), gx).expect("shape"),
        Tensor::from_vec(w.shape(), gw).expect("shape"),
    )
}

fn transpose_patch(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Patch> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[0] || spec.groups != 1 {
        return Err(TensorError::shape("conv_transpose2d", x, w));
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    let full = |i: usize, k: usize, s: usize, d: usize| (i - 1) * s + d * (k - 1) + 1;
    let (fh, fw) = (
        full(h, kh, spec.stride.0, spec.dilation.0),
        full(wd, kw, spec.stride.1, spec.dilation.1),
    );
    if fh <= 2 * spec.padding.0 || fw <= 2 * spec.padding.1 {
        return Err(TensorError::dim("conv_transpose2d", "padding removes the whole output"));
    }
    Ok(Patch {
        c: w[1],
        h: fh - 2 * spec.padding.0,
        w: fw - 2 * spec.padding.1,
        kh,
        kw,
        oh: h,
        ow: wd,
        spec,
    })
}

// ---------------------------------------------------------------- pooling / resampling

fn split_nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::dim(op, format!("need at least 2 spatial axes, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

/// Non-overlapping `kh×kw` mean pooling over the last two axes.
pub fn avg_pool<T: Real>(x: &Tensor<T>, kh: usize, kw: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = split_nchw("avg_pool", x.shape())?;
    if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
        return Err(TensorError::dim(
            "avg_pool",
            format!("extents {h}x{w} not divisible by window {kh}x{kw}"),
        ));
    }
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::lit((kh * kw) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    let xd = x.data();
    for pl in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(pl * oh + y / kh) * ow + xx / kw] += xd[(pl * h + y) * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::from_vec(&shape, out)
}

pub fn avg_pool_backward<T: Real>(in_shape: &[usize], kh: usize, kw: usize, gout: &Tensor<T>) -> Tensor<T> {
    let (planes, h, w) = split_nchw("avg_pool", in_shape).expect("validated");
    let (oh, ow) = (h / kh, w / kw);
    let inv = T::one() / T::lit((kh * kw) as f64);
    let gd = gout.data();
    let mut gx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                gx[(pl * h + y) * w + xx] = gd[(pl * oh + y / kh) * ow + xx / kw] * inv;
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("shape")
}

/// Half-pixel-centre source taps for a ×2 bilinear upsample along one axis.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = split_nchw("upsample_bilinear2", x.shape())?;
    if h == 0 || w == 0 {
        return Err(TensorError::dim("upsample_bilinear2", "empty spatial extent"));
    }
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &xd[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let top = src[y0 * w + x0] * gx + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * gx + src[y1 * w + x1] * fx;
                out[(pl * oh + oy) * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::from_vec(&shape, out)
}

pub fn upsample_bilinear2_backward<T: Real>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (planes, h, w) = split_nchw("upsample_bilinear2", in_shape).expect("validated");
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let gd = gout.data();
    let mut gx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gxw) = (T::lit(fx), T::lit(1.0 - fx));
                let g = gd[(pl * oh + oy) * ow + ox];
                dst[y0 * w + x0] += g * gy * gxw;
                dst[y0 * w + x1] += g * gy * fx;
                dst[y1 * w + x0] += g * fy * gxw;
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("shape")
}

// ---------------------------------------------------------------- activations

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)` with the Gaussian CDF.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(FRAC_1_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric {
            op: "softmax",
            msg: "NaN input".into(),
        });
    }
    let n = *x.shape().last().ok_or_else(|| TensorError::dim("softmax", "scalar input"))?;
    let mut out = x.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax_last_backward<T: Real>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("validated");
    let mut gx = vec![T::zero(); y.numel()];
    if n > 0 {
        for ((gr, yr), dst) in gout.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
            let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &p)| a + g * p);
            for ((d, &g), &p) in dst.iter_mut().zip(gr).zip(yr) {
                *d = p * (g - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), gx).expect("shape")
}

// ---------------------------------------------------------------- layout

pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::dim("permute", format!("invalid permutation {perm:?} for {:?}", x.shape())));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let in_strides = x.strides();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; nd];
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |i, s, _| out[i] = xd[s]);
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(TensorError::dim("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    for x in xs {
        let ok = x.ndim() == nd && (0..nd).all(|d| d == axis || x.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(TensorError::shape("concat", first.shape(), x.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::from_vec(&shape, out)
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return Err(TensorError::dim(
            "narrow",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[o * full + start * inner..o * full + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, out)
}

/// Scatters `g` (the gradient of a narrow) back into a zero tensor of `in_shape`.
pub fn narrow_backward<T: Real>(in_shape: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let len = g.shape()[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let full = in_shape[axis] * inner;
    let mut out = vec![T::zero(); in_shape.iter().product()];
    for o in 0..outer {
        out[o * full + start * inner..o * full + (start + len) * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_vec(in_shape, out).expect("shape")
}

/// Sum over `axis`, keeping it with extent 1.
pub fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(TensorError::dim("sum_axis", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(reduce_to_shape(x, &shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn broadcasting_bias_over_channels() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let b = t(&[1, 2, 1, 1], &[1.0, 2.0]);
        let y = broadcast_binary("add", &x, &b, |a, b| a + b).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let g = reduce_to_shape(&Tensor::<f64>::ones(&[1, 2, 2, 2]), &[1, 2, 1, 1]);
        assert_eq!(g.data(), &[4.0, 4.0]);
        assert!(broadcast_shape("add", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn all_ones_3x3_on_5x5() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, Conv2dSpec::same(3, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 2]), 6.0);
        assert_eq!(y.at(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0, 4, 1]), 6.0);
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.5);
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, Conv2dSpec::default()).unwrap(), x);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &w, Conv2dSpec::default()), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn avgpool_mean_and_odd_rejection() {
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[4.0]);
        assert!(avg_pool(&Tensor::<f64>::ones(&[1, 1, 3, 2]), 2, 2).is_err());
    }

    #[test]
    fn constant_up_then_down_is_identity() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 4], 0.7);
        let up = upsample_bilinear2(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 8]);
        let down = avg_pool(&up, 2, 2).unwrap();
        assert!(down.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_known_values() {
        let y = softmax_last(&t(&[4], &[0.3; 4])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax_last(&t(&[2], &[0.0, 2f64.ln()])).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(softmax_last(&t(&[2], &[0.0, f64::NAN])).is_err());
    }

    #[test]
    fn permute_and_inverse() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(narrow(&c, 1, 2, 3).unwrap(), b);
    }
}
