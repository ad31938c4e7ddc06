//! Convolutional building blocks of the encoder, decoders and U-Net stages.
//!
//! Feature maps are channel-first `[C × T × F]`.

use super::deform::deform_conv2d;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Init, ParamId};
use crate::tensor::{concat, sigmoid, Conv2dGeom, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub geom: Conv2dGeom,
}

impl Conv2d {
    /// Uniform ±1/√fan_in weights, zero bias.
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: Conv2dGeom,
    ) -> Result<Self> {
        let mut s = init.pp(name);
        let fan_in = cin / geom.groups * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as Real).sqrt();
        let weight = s.uniform("weight", &[cout, cin / geom.groups, kernel.0, kernel.1], bound)?;
        let bias = Some(s.zeros("bias", &[cout])?);
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            geom,
        })
    }

    /// Same as [`Conv2d::new`] with all-zero weights.
    pub fn zeroed(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: Conv2dGeom,
    ) -> Result<Self> {
        let mut s = init.pp(name);
        let weight = s.zeros("weight", &[cout, cin / geom.groups, kernel.0, kernel.1])?;
        let bias = Some(s.zeros("bias", &[cout])?);
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            geom,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.geom)
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.geom.groups) * self.kernel.0 * self.kernel.1 + self.bias.map_or(0, |_| self.cout)
    }

    /// Multiply-adds ×2 for an output of `ho × wo`.
    pub fn flops(&self, ho: usize, wo: usize) -> f64 {
        2.0 * (self.kernel.0 * self.kernel.1 * self.cin / self.geom.groups * self.cout * ho * wo) as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvT2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvT2d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let mut s = init.pp(name);
        let bound = 1.0 / ((cin * kernel.0 * kernel.1) as Real).sqrt();
        let weight = s.uniform("weight", &[cin, cout, kernel.0, kernel.1], bound)?;
        let bias = s.zeros("bias", &[cout])?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.conv_transpose2d(ctx.p(self.weight), Some(ctx.p(self.bias)), self.stride, (0, 0))
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kernel.0 * self.kernel.1 + self.cout
    }

    /// Multiply-adds ×2 for an input of `h × w`.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        2.0 * (self.kernel.0 * self.kernel.1 * self.cin * self.cout * h * w) as f64
    }
}

/// Densely connected 3×3 convolutions with time dilation doubling per layer.
/// Layer `i` sees the block input and every earlier layer output.
#[derive(Clone, Debug)]
pub struct DenseNet {
    pub layers: Vec<Conv2d>,
    pub channels: usize,
}

impl DenseNet {
    pub fn new(init: &mut Init<'_>, channels: usize, depth: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let dil = 1usize << i;
            let geom = Conv2dGeom::padded((dil, 1)).with_dilation((dil, 1));
            layers.push(Conv2d::new(init, &format!("layer{i}"), (i + 1) * channels, channels, (3, 3), geom)?);
        }
        Ok(Self { layers, channels })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let mut skip = x.clone();
        let mut out = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            out = layer.forward(ctx, &skip)?.silu();
            if i + 1 < self.layers.len() {
                skip = concat(&[&out, &skip], 0)?;
            }
        }
        Ok(out)
    }

    /// Frames seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| 2 * l.geom.dilation.0).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv2d::param_count).sum()
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.layers.iter().map(|l| l.flops(h, w)).sum()
    }
}

/// Offset-predicting convolution plus the deformable 3×3 it steers.
#[derive(Clone, Copy, Debug)]
pub struct DeformConv {
    pub offset: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl DeformConv {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.pp(name);
        // zero offsets at initialization: starts as a standard convolution
        let offset = Conv2d::zeroed(&mut s, "offset", channels, 18, (3, 3), Conv2dGeom::padded((1, 1)))?;
        let bound = 1.0 / ((channels * 9) as Real).sqrt();
        let weight = s.uniform("weight", &[channels, channels, 3, 3], bound)?;
        let bias = s.zeros("bias", &[channels])?;
        Ok(Self {
            offset,
            weight,
            bias,
            channels,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let off = self.offset.forward(ctx, x)?;
        deform_conv2d(x, &off, ctx.p(self.weight), Some(ctx.p(self.bias)))
    }

    pub fn param_count(&self) -> usize {
        self.offset.param_count() + self.channels * self.channels * 9 + self.channels
    }

    /// Offset convolution, sampling (four reads per tap) and the main product.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let hw = (h * w) as f64;
        self.offset.flops(h, w) + 2.0 * 9.0 * (self.channels * self.channels) as f64 * hw + 8.0 * 9.0 * self.channels as f64 * hw
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Refine {
    Deformable(DeformConv),
    Standard(Conv2d),
}

/// Depthwise 3×3, pointwise 1×1, then a deformable (or plain) 3×3; residual
/// when the width is unchanged.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub refine: Refine,
    pub cin: usize,
    pub cout: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, cin: usize, cout: usize, deformable: bool) -> Result<Self> {
        let depthwise = Conv2d::new(init, "depthwise", cin, cin, (3, 3), Conv2dGeom::padded((1, 1)).with_groups(cin))?;
        let pointwise = Conv2d::new(init, "pointwise", cin, cout, (1, 1), Conv2dGeom::default())?;
        let refine = if deformable {
            Refine::Deformable(DeformConv::new(init, "deform", cout)?)
        } else {
            Refine::Standard(Conv2d::new(init, "conv", cout, cout, (3, 3), Conv2dGeom::padded((1, 1)))?)
        };
        Ok(Self {
            depthwise,
            pointwise,
            refine,
            cin,
            cout,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.pointwise.forward(ctx, &self.depthwise.forward(ctx, x)?)?;
        let h = match &self.refine {
            Refine::Deformable(d) => d.forward(ctx, &h)?,
            Refine::Standard(c) => c.forward(ctx, &h)?,
        };
        if self.cin == self.cout {
            h.add(x)
        } else {
            Ok(h)
        }
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count()
            + self.pointwise.param_count()
            + match &self.refine {
                Refine::Deformable(d) => d.param_count(),
                Refine::Standard(c) => c.param_count(),
            }
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.depthwise.flops(h, w)
            + self.pointwise.flops(h, w)
            + match &self.refine {
                Refine::Deformable(d) => d.flops(h, w),
                Refine::Standard(c) => c.flops(h, w),
            }
    }
}

/// `κ·σ(α_f·v)` for `v[T × F]` and per-frequency slopes `α[F]`.
pub fn learnable_sigmoid(v: &Var, alpha: &Var, kappa: Real) -> Result<Var> {
    let (t, f) = v.value().dims2()?;
    if alpha.shape() != [f] {
        return Err(shape_err("learnable_sigmoid", v.shape(), alpha.shape()));
    }
    let (vv, av) = (v.value_rc(), alpha.value_rc());
    let out = Tensor::from_fn(&[t, f], |i| kappa * sigmoid(av.data()[i % f] * vv.data()[i]));
    Ok(v.tape().op(out, &[v, alpha], move |g, _| {
        let mut gv = vec![0.0; t * f];
        let mut ga = vec![0.0; f];
        for i in 0..t * f {
            let a = av.data()[i % f];
            let x = vv.data()[i];
            let s = sigmoid(a * x);
            let d = g.data()[i] * kappa * s * (1.0 - s);
            gv[i] = d * a;
            ga[i % f] += d * x;
        }
        vec![
            Some(Tensor::from_parts(vec![t, f], gv)),
            Some(Tensor::from_parts(vec![f], ga)),
        ]
    }))
}

pub const LSIGMOID_KAPPA: Real = 2.0;

/// Two planes in, `C1` channels out at half the frequency resolution.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub conv_in: Conv2d,
    pub dense: DenseNet,
    pub conv_down: Conv2d,
}

impl FeatureEncoder {
    pub fn new(init: &mut Init<'_>, c1: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            conv_in: Conv2d::new(init, "conv_in", 2, c1, (3, 3), Conv2dGeom::padded((1, 1)))?,
            dense: DenseNet::new(&mut init.pp("dense"), c1, depth)?,
            conv_down: Conv2d::new(
                init,
                "conv_down",
                c1,
                c1,
                (1, 3),
                Conv2dGeom::padded((0, 1)).with_stride((1, 2)),
            )?,
        })
    }

    /// `planes[2 × T × F]` → `[C1 × T × F/2]`.
    pub fn forward(&self, ctx: &Ctx, planes: &Var) -> Result<Var> {
        let h = self.conv_in.forward(ctx, planes)?.silu();
        let h = self.dense.forward(ctx, &h)?;
        Ok(self.conv_down.forward(ctx, &h)?.silu())
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count() + self.dense.param_count() + self.conv_down.param_count()
    }

    pub fn flops(&self, t: usize, f: usize) -> f64 {
        self.conv_in.flops(t, f) + self.dense.flops(t, f) + self.conv_down.flops(t, f / 2)
    }
}

/// Dense block and frequency-restoring transposed convolution shared by
/// both heads.
#[derive(Clone, Debug)]
pub struct DecoderTrunk {
    pub dense: DenseNet,
    pub up: ConvT2d,
}

impl DecoderTrunk {
    fn new(init: &mut Init<'_>, c1: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            dense: DenseNet::new(&mut init.pp("dense"), c1, depth)?,
            up: ConvT2d::new(init, "up", c1, c1, (1, 2), (1, 2))?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.dense.forward(ctx, x)?;
        Ok(self.up.forward(ctx, &h)?.silu())
    }

    fn param_count(&self) -> usize {
        self.dense.param_count() + self.up.param_count()
    }

    fn flops(&self, t: usize, f_half: usize) -> f64 {
        self.dense.flops(t, f_half) + self.up.flops(t, f_half)
    }
}

/// Bounded mask on the compressed noisy magnitude.
#[derive(Clone, Debug)]
pub struct MagnitudeDecoder {
    pub trunk: DecoderTrunk,
    pub proj: Conv2d,
    pub alpha: ParamId,
    pub bins: usize,
}

impl MagnitudeDecoder {
    pub fn new(init: &mut Init<'_>, c1: usize, depth: usize, bins: usize) -> Result<Self> {
        Ok(Self {
            trunk: DecoderTrunk::new(init, c1, depth)?,
            proj: Conv2d::new(init, "proj", c1, 1, (1, 1), Conv2dGeom::default())?,
            alpha: init.ones("alpha", &[bins])?,
            bins,
        })
    }

    /// Mask `[T × F]` in `(0, κ)`.
    pub fn mask(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let v = self.proj.forward(ctx, &self.trunk.forward(ctx, x)?)?;
        let (_, t, f) = v.value().dims3()?;
        learnable_sigmoid(&v.reshape(&[t, f])?, ctx.p(self.alpha), LSIGMOID_KAPPA)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.proj.param_count() + self.bins
    }

    pub fn flops(&self, t: usize, f_half: usize) -> f64 {
        self.trunk.flops(t, f_half) + self.proj.flops(t, 2 * f_half) + 4.0 * (t * 2 * f_half) as f64
    }
}

/// Phase as the angle of two learned planes.
#[derive(Clone, Debug)]
pub struct PhaseDecoder {
    pub trunk: DecoderTrunk,
    pub proj_p: Conv2d,
    pub proj_q: Conv2d,
}

impl PhaseDecoder {
    pub fn new(init: &mut Init<'_>, c1: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            trunk: DecoderTrunk::new(init, c1, depth)?,
            proj_p: Conv2d::new(init, "proj_p", c1, 1, (1, 1), Conv2dGeom::default())?,
            proj_q: Conv2d::new(init, "proj_q", c1, 1, (1, 1), Conv2dGeom::default())?,
        })
    }

    /// Phase `[T × F]` in (−π, π].
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let h = self.trunk.forward(ctx, x)?;
        let p = self.proj_p.forward(ctx, &h)?;
        let q = self.proj_q.forward(ctx, &h)?;
        let (_, t, f) = p.value().dims3()?;
        p.reshape(&[t, f])?.atan2(&q.reshape(&[t, f])?)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.proj_p.param_count() + self.proj_q.param_count()
    }

    pub fn flops(&self, t: usize, f_half: usize) -> f64 {
        self.trunk.flops(t, f_half) + self.proj_p.flops(t, 2 * f_half) + self.proj_q.flops(t, 2 * f_half)
    }
}
