//! Prior-guided U-shaped denoiser built from Trident Transformer blocks.
//!
//! Features are `[1, C, H, W]`. Each block splits its input channels in half:
//! one half runs through a convolutional spatial flow, the other through
//! spectral (channels-as-tokens) attention, and the spectral value embedding
//! queries the latent prior in a cross-attention branch.

use hsi_tensor::nn::{Bound, Conv2d, Init, Linear, MBlock, ParamBuilder, ParamId, Resampler};
use hsi_tensor::{Conv2dSpec, Real, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Where the cross-prior queries come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpfQuery {
    /// The full-resolution value embedding of the spectral branch.
    #[default]
    CsfValue,
    /// The half-resolution query embedding of the spectral branch; output upsampled.
    CsfQuery,
}

fn even_spatial(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(TensorError::dim(op, format!("expected [1, C, even H, even W], got {shape:?}")).into());
    }
    Ok(())
}

/// Token-pair merging between prior levels: `[N, C] → [N/2, 2C]` through a square linear map.
#[derive(Clone, Debug)]
pub struct PriorDownsample {
    pub merge: Linear,
    pub dim_in: usize,
}

impl PriorDownsample {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim_in: usize) -> Self {
        PriorDownsample {
            merge: Linear::identity(pb, name, 2 * dim_in),
            dim_in,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.dim_in {
            return Err(TensorError::dim("prior_downsample", format!("expected [N, {}], got {s:?}", self.dim_in)).into());
        }
        if s[0] % 2 != 0 {
            return Err(TensorError::dim("prior_downsample", format!("odd token count {}", s[0])).into());
        }
        let merged = z.reshape(&[s[0] / 2, 2 * s[1]])?;
        Ok(self.merge.forward(p, merged)?)
    }
}

/// Three-level prior pyramid `z¹, z², z³`.
#[derive(Clone, Debug)]
pub struct PriorPyramid {
    pub down: [PriorDownsample; 2],
}

impl PriorPyramid {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, latent_channels: usize) -> Self {
        let mut pb = pb.scope(name);
        PriorPyramid {
            down: [
                PriorDownsample::new(&mut pb, "down1", latent_channels),
                PriorDownsample::new(&mut pb, "down2", 2 * latent_channels),
            ],
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<[Var<'t, T>; 3]> {
        let z2 = self.down[0].forward(p, z)?;
        let z3 = self.down[1].forward(p, z2)?;
        Ok([z, z2, z3])
    }
}

/// Intermediate tensors of one spectral-attention evaluation.
pub struct AcsOutput<'t, T: Real> {
    /// Branch output `[1, c, H, W]`.
    pub out: Var<'t, T>,
    /// Compressed queries `[1, 2c, H/2, W/2]`.
    pub query: Var<'t, T>,
    pub key: Var<'t, T>,
    /// Full-resolution values `[1, 2c, H, W]`.
    pub value: Var<'t, T>,
    /// Per-channel logit gate `[heads, d, 1]`.
    pub gate: Var<'t, T>,
    /// Value-side spatial compensation `[1, 2c, H, W]`.
    pub value_gate: Var<'t, T>,
    /// Attention weights `[heads, d, d]`, rows over keys.
    pub attn: Var<'t, T>,
}

/// Asymmetric cross-scale multi-head self-attention over channels.
#[derive(Clone, Debug)]
pub struct AcsMhsa {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub p_qk: Conv2d,
    pub p_v: Conv2d,
    pub proj: Conv2d,
    /// Per-head temperature `[heads, 1, 1]`.
    pub alpha: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl AcsMhsa {
    /// `channels` is the branch width `c`; `tokens_len` the spatial size of the compressed queries.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, heads: usize, tokens_len: usize) -> Result<Self> {
        let wide = 2 * channels;
        if heads == 0 || wide % heads != 0 {
            return Err(TensorError::dim("acs_mhsa", format!("{heads} heads do not divide {wide} channels")).into());
        }
        let mut pb = pb.scope(name);
        let qk = Conv2dSpec::default().with_stride(2);
        let q = Conv2d::new(&mut pb, "q", channels, wide, (2, 2), qk, false, Init::FanIn);
        let k = Conv2d::new(&mut pb, "k", channels, wide, (2, 2), qk, false, Init::FanIn);
        let vspec = Conv2dSpec::default().with_padding(2, 4).with_dilation(2, 2);
        let v = Conv2d::new(&mut pb, "v", channels, wide, (3, 5), vspec, false, Init::FanIn);
        let p_qk = Conv2d::pointwise(&mut pb, "p_qk", channels, wide, true);
        let p_v = Conv2d::pointwise(&mut pb, "p_v", channels, wide, true);
        let proj = Conv2d::pointwise(&mut pb, "proj", wide, channels, true);
        let alpha = pb.tensor("alpha", Tensor::full(&[heads, 1, 1], T::lit((tokens_len.max(1) as f64).sqrt())));
        Ok(AcsMhsa {
            q,
            k,
            v,
            p_qk,
            p_v,
            proj,
            alpha,
            heads,
            channels,
        })
    }

    /// `u` is the spectral half, `s` the spatial-flow output supplying both compensations.
    /// `uniform` replaces the logits by zeros (test hook for the infinite-temperature limit).
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, u: Var<'t, T>, s: Var<'t, T>, uniform: bool) -> Result<AcsOutput<'t, T>> {
        even_spatial("acs_mhsa", &u.shape())?;
        let sh = u.shape();
        let (h, w) = (sh[2], sh[3]);
        let wide = 2 * self.channels;
        let d = wide / self.heads;
        let n = (h / 2) * (w / 2);

        let query = self.q.forward(p, u)?;
        let key = self.k.forward(p, u)?;
        let value = self.v.forward(p, u)?;
        let qt = query.reshape(&[self.heads, d, n])?;
        let kt = key.reshape(&[self.heads, d, n])?;

        let gate = self
            .p_qk
            .forward(p, s)?
            .avg_pool(2, 2)?
            .reshape(&[wide, n])?
            .mean_axis(1)?
            .reshape(&[self.heads, d, 1])?;
        let logits = if uniform {
            u.tape().constant(Tensor::zeros(&[self.heads, d, d]))
        } else {
            qt.matmul_t(kt, false, true)?.mul(gate)?.div(p[self.alpha])?
        };
        let attn = logits.softmax()?;
        let vt = value.reshape(&[self.heads, d, h * w])?;
        let mixed = attn.matmul(vt)?.reshape(&[1, wide, h, w])?;
        let value_gate = self.p_v.forward(p, s)?;
        let out = self.proj.forward(p, mixed.mul(value_gate)?)?;
        Ok(AcsOutput {
            out,
            query,
            key,
            value,
            gate,
            value_gate,
            attn,
        })
    }
}

/// Cross-attention from image tokens to prior tokens.
#[derive(Clone, Debug)]
pub struct CrossPrior {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Conv2d,
    pub heads: usize,
    pub width: usize,
    pub query: CpfQuery,
}

impl CrossPrior {
    /// `width` is the query embedding width (2c), `prior_dim` the prior token width at this level.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        width: usize,
        channels_out: usize,
        prior_dim: usize,
        heads: usize,
        query: CpfQuery,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::dim("cpf", format!("{heads} heads do not divide {width} channels")).into());
        }
        let mut pb = pb.scope(name);
        Ok(CrossPrior {
            wq: Linear::new(&mut pb, "wq", width, width, false),
            wk: Linear::new(&mut pb, "wk", prior_dim, width, false),
            wv: Linear::new(&mut pb, "wv", prior_dim, width, true),
            proj: Conv2d::pointwise(&mut pb, "proj", width, channels_out, true),
            heads,
            width,
            query,
        })
    }

    /// Returns the output image `[1, c, H, W]` and the attention weights `[heads, HW, N]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, q_img: Var<'t, T>, z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let qs = q_img.shape();
        if qs.len() != 4 || qs[1] != self.width {
            return Err(TensorError::dim("cpf", format!("query embedding {qs:?} does not have {} channels", self.width)).into());
        }
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.wk.din {
            return Err(TensorError::dim("cpf", format!("prior {zs:?} does not have {} channels", self.wk.din)).into());
        }
        let (h, w) = (qs[2], qs[3]);
        let hw = h * w;
        let nz = zs[0];
        let dh = self.width / self.heads;
        let tokens = q_img.reshape(&[self.width, hw])?.transpose_last()?;
        let q = self.wq.forward(p, tokens)?.reshape(&[hw, self.heads, dh])?.permute(&[1, 0, 2])?;
        let k = self.wk.forward(p, z)?.reshape(&[nz, self.heads, dh])?.permute(&[1, 0, 2])?;
        let v = self.wv.forward(p, z)?.reshape(&[nz, self.heads, dh])?.permute(&[1, 0, 2])?;
        let attn = q
            .matmul_t(k, false, true)?
            .scale(T::one() / T::lit((dh as f64).sqrt()))
            .softmax()?;
        let o = attn
            .matmul(v)?
            .permute(&[1, 0, 2])?
            .reshape(&[hw, self.width])?
            .transpose_last()?
            .reshape(&[1, self.width, h, w])?;
        let o = match self.query {
            CpfQuery::CsfValue => o,
            CpfQuery::CsfQuery => o.upsample_bilinear2()?,
        };
        Ok((self.proj.forward(p, o)?, attn))
    }
}

/// One Trident Transformer block at a fixed width.
#[derive(Clone, Debug)]
pub struct TridentBlock {
    pub dim: usize,
    pub spatial: [MBlock; 2],
    pub acs: AcsMhsa,
    pub cpf: CrossPrior,
    pub bridge: Conv2d,
    pub agg_in: Conv2d,
    pub agg_out: Conv2d,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
}

/// Everything a block computes, for inspection in tests.
pub struct TridentTrace<'t, T: Real> {
    pub out: Var<'t, T>,
    pub spatial: Var<'t, T>,
    pub acs: AcsOutput<'t, T>,
    pub cpf: Var<'t, T>,
    pub cpf_attn: Var<'t, T>,
}

impl TridentBlock {
    /// `spatial` is the `(H, W)` this block runs at; it sets the attention temperature.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        prior_dim: usize,
        spatial: (usize, usize),
        query: CpfQuery,
    ) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(TensorError::dim("trident_block", format!("odd width {dim}")).into());
        }
        let c = dim / 2;
        let mut pb = pb.scope(name);
        let flow = [MBlock::new(&mut pb, "mb1", c, c, 4, 1), MBlock::new(&mut pb, "mb2", c, c, 4, 1)];
        let acs = AcsMhsa::new(&mut pb, "acs", c, heads, (spatial.0 / 2) * (spatial.1 / 2))?;
        let cpf = CrossPrior::new(&mut pb, "cpf", 2 * c, c, prior_dim, heads, query)?;
        Ok(TridentBlock {
            dim,
            spatial: flow,
            acs,
            cpf,
            bridge: Conv2d::pointwise(&mut pb, "bridge", c, c, true),
            agg_in: Conv2d::pointwise(&mut pb, "agg_in", 3 * c, dim, true),
            agg_out: Conv2d::pointwise(&mut pb, "agg_out", dim, dim, true),
            ffn_in: Conv2d::pointwise(&mut pb, "ffn_in", dim, 2 * dim, true),
            ffn_out: Conv2d::pointwise(&mut pb, "ffn_out", 2 * dim, dim, true),
        })
    }

    pub fn trace<'t, T: Real>(&self, p: &Bound<'t, T>, u: Var<'t, T>, z: Var<'t, T>) -> Result<TridentTrace<'t, T>> {
        let s = u.shape();
        if s.len() != 4 || s[1] != self.dim {
            return Err(TensorError::dim("trident_block", format!("expected [1, {}, H, W], got {s:?}", self.dim)).into());
        }
        even_spatial("trident_block", &s)?;
        let (uc, us) = u.split_half(1)?;
        let spatial = self.spatial[1].forward(p, self.spatial[0].forward(p, us)?)?;
        let acs = self.acs.forward(p, uc, spatial, false)?;
        let q_img = match self.cpf.query {
            CpfQuery::CsfValue => acs.value,
            CpfQuery::CsfQuery => acs.query,
        };
        let (cpf, cpf_attn) = self.cpf.forward(p, q_img, z)?;
        let spatial_final = spatial.add(self.bridge.forward(p, cpf)?)?;
        let cat = Var::concat(&[spatial_final, acs.out, cpf], 1)?;
        let agg = self.agg_out.forward(p, self.agg_in.forward(p, cat)?.gelu())?;
        let u1 = u.add(agg)?;
        let out = u1.add(self.ffn_out.forward(p, self.ffn_in.forward(p, u1)?.gelu())?)?;
        Ok(TridentTrace {
            out,
            spatial,
            acs,
            cpf,
            cpf_attn,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, u: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace(p, u, z)?.out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub bands: usize,
    /// Level-1 width `C`; level `i` runs at `2^{i−1}·C`.
    pub channels: usize,
    /// Level-1 head count; doubles per level.
    pub heads: usize,
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    pub cpf_query: CpfQuery,
}

/// Upsampling step: bilinear ×2 then a 1×1 channel reduction, followed by skip fusion.
#[derive(Clone, Debug)]
pub struct UpStep {
    pub reduce: Conv2d,
    pub fuse: Conv2d,
}

impl UpStep {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut pb = pb.scope(name);
        UpStep {
            reduce: Conv2d::pointwise(&mut pb, "reduce", cin, cout, true),
            fuse: Conv2d::pointwise(&mut pb, "fuse", 2 * cout, cout, true),
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, skip: Var<'t, T>) -> Result<Var<'t, T>> {
        let up = self.reduce.forward(p, x.upsample_bilinear2()?)?;
        Ok(self.fuse.forward(p, Var::concat(&[up, skip], 1)?)?)
    }
}

/// Five Trident blocks over levels 1-2-3-2-1 with a global residual.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub embed: Conv2d,
    pub pyramid: PriorPyramid,
    pub blocks: [TridentBlock; 5],
    pub down: [Resampler; 2],
    pub up: [UpStep; 2],
    pub out: Conv2d,
}

impl Denoiser {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: DenoiserConfig) -> Result<Self> {
        if cfg.height % 4 != 0 || cfg.width % 4 != 0 {
            return Err(TensorError::dim("denoiser", format!("{}×{} is not divisible by 4", cfg.height, cfg.width)).into());
        }
        let mut pb = pb.scope(name);
        let c = cfg.channels;
        let (h, w) = (cfg.height, cfg.width);
        let cz = cfg.latent_channels;
        let same3 = Conv2dSpec::same(3, 3);
        let embed = Conv2d::new(&mut pb, "embed", cfg.bands, c, (3, 3), same3, true, Init::FanIn);
        let pyramid = PriorPyramid::new(&mut pb, "pyramid", cz);
        let tt = |pb: &mut ParamBuilder<'_, T>, name: &str, level: usize| {
            let k = 1 << (level - 1);
            TridentBlock::new(pb, name, k * c, k * cfg.heads, k * cz, (h / k, w / k), cfg.cpf_query)
        };
        let b1 = tt(&mut pb, "tt1", 1)?;
        let b2 = tt(&mut pb, "tt2", 2)?;
        let b3 = tt(&mut pb, "tt3", 3)?;
        let b4 = tt(&mut pb, "tt4", 2)?;
        let b5 = tt(&mut pb, "tt5", 1)?;
        let down = [
            Resampler::strided_conv(&mut pb, "down1", c, 2 * c),
            Resampler::strided_conv(&mut pb, "down2", 2 * c, 4 * c),
        ];
        let up = [UpStep::new(&mut pb, "up2", 4 * c, 2 * c), UpStep::new(&mut pb, "up1", 2 * c, c)];
        let out = Conv2d::new(&mut pb, "out", c, cfg.bands, (3, 3), same3, true, Init::Zero);
        Ok(Denoiser {
            cfg,
            embed,
            pyramid,
            blocks: [b1, b2, b3, b4, b5],
            down,
            up,
            out,
        })
    }

    /// `x` is `[1, L, H, W]`; `z` the level-1 prior `[N, C_z]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.bands || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(TensorError::dim(
                "denoiser",
                format!("expected [1, {}, H, W] with H, W divisible by 4, got {s:?}", self.cfg.bands),
            )
            .into());
        }
        let [z1, z2, z3] = self.pyramid.forward(p, z)?;
        let b = &self.blocks;
        let f1 = b[0].forward(p, self.embed.forward(p, x)?, z1)?;
        let f2 = b[1].forward(p, self.down[0].forward(p, f1)?, z2)?;
        let f3 = b[2].forward(p, self.down[1].forward(p, f2)?, z3)?;
        let g2 = b[3].forward(p, self.up[0].forward(p, f3, f2)?, z2)?;
        let g1 = b[4].forward(p, self.up[1].forward(p, g2, f1)?, z1)?;
        Ok(x.add(self.out.forward(p, g1)?)?)
    }
}
