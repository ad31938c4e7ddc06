use super::{PadMode, Real, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// Stride, dilation, zero padding and grouping of a 2-D convolution,
/// each given as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dGeom {
    pub fn padded(padding: (usize, usize)) -> Self {
        Self {
            padding,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conv1dPadding {
    /// K−1 zeros on the left: output `t` sees inputs `≤ t`.
    Causal,
    /// (K−1)/2 zeros left, the rest right.
    Same,
    Valid,
}

/// floor((in + 2·pad − dilation·(K−1) − 1)/stride) + 1, or `None` when the
/// kernel does not fit the padded input.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: Conv2dGeom,
}

/// A contiguous run of output columns in one output row for one tap:
/// `y[y + j] <-> x[x + j·xs]`, `j < n`, with weight index `w`.
struct Run {
    w: usize,
    x: usize,
    y: usize,
    n: usize,
    xs: usize,
}

/// Output indices `o` in `[0, out)` for which `o·s + off` lands in `[0, len)`.
fn valid_range(out: usize, s: usize, off: isize, len: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = if (len as isize) - off <= 0 {
        0
    } else {
        (((len as isize) - 1 - off) / s + 1).min(out as isize)
    };
    let lo = lo.min(out as isize).max(0) as usize;
    (lo, (hi_excl.max(lo as isize)) as usize)
}

fn for_each_run(d: &Dims, mut f: impl FnMut(Run)) {
    let Conv2dGeom {
        stride: (sy, sx),
        dilation: (dy, dx),
        padding: (py, px),
        groups,
    } = d.geom;
    let cig = d.cin / groups;
    let cog = d.cout / groups;
    for oc in 0..d.cout {
        let g = oc / cog;
        for ic in 0..cig {
            let chan = g * cig + ic;
            for ky in 0..d.kh {
                let offy = (ky * dy) as isize - py as isize;
                let (oy_lo, oy_hi) = valid_range(d.ho, sy, offy, d.h);
                for kx in 0..d.kw {
                    let offx = (kx * dx) as isize - px as isize;
                    let (ox_lo, ox_hi) = valid_range(d.wo, sx, offx, d.w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let widx = ((oc * cig + ic) * d.kh + ky) * d.kw + kx;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * sy) as isize + offy;
                        let ix0 = (ox_lo * sx) as isize + offx;
                        f(Run {
                            w: widx,
                            x: (chan * d.h + iy as usize) * d.w + ix0 as usize,
                            y: (oc * d.ho + oy) * d.wo + ox_lo,
                            n: ox_hi - ox_lo,
                            xs: sx,
                        });
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[Real], w: &[Real], d: &Dims) -> Vec<Real> {
    let mut y = vec![0.0; d.cout * d.ho * d.wo];
    for_each_run(d, |r| {
        let wv = w[r.w];
        if wv == 0.0 {
            return;
        }
        let out = &mut y[r.y..r.y + r.n];
        if r.xs == 1 {
            for (o, &v) in out.iter_mut().zip(&x[r.x..r.x + r.n]) {
                *o += wv * v;
            }
        } else {
            for (j, o) in out.iter_mut().enumerate() {
                *o += wv * x[r.x + j * r.xs];
            }
        }
    });
    y
}

fn conv_backward_input(gy: &[Real], w: &[Real], d: &Dims) -> Vec<Real> {
    let mut gx = vec![0.0; d.cin * d.h * d.w];
    for_each_run(d, |r| {
        let wv = w[r.w];
        if wv == 0.0 {
            return;
        }
        let g = &gy[r.y..r.y + r.n];
        if r.xs == 1 {
            for (o, &v) in gx[r.x..r.x + r.n].iter_mut().zip(g) {
                *o += wv * v;
            }
        } else {
            for (j, &v) in g.iter().enumerate() {
                gx[r.x + j * r.xs] += wv * v;
            }
        }
    });
    gx
}

fn conv_backward_weight(x: &[Real], gy: &[Real], d: &Dims, wlen: usize) -> Vec<Real> {
    let mut gw = vec![0.0; wlen];
    for_each_run(d, |r| {
        let g = &gy[r.y..r.y + r.n];
        let acc: Real = if r.xs == 1 {
            g.iter().zip(&x[r.x..r.x + r.n]).map(|(a, b)| a * b).sum()
        } else {
            g.iter().enumerate().map(|(j, a)| a * x[r.x + j * r.xs]).sum()
        };
        gw[r.w] += acc;
    });
    gw
}

fn add_channel_bias(y: &mut [Real], bias: &[Real], plane: usize) {
    for (c, chunk) in y.chunks_exact_mut(plane).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[Real], channels: usize) -> Tensor {
    let plane = g.len() / channels.max(1);
    let d = g.chunks_exact(plane.max(1)).map(|c| c.iter().sum()).collect();
    Tensor::from_parts(vec![channels], d)
}

fn check_bias(op: &'static str, bias: Option<&Var>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(shape_err(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

impl Var {
    /// 2-D cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in/groups×K_h×K_w]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, geom: Conv2dGeom) -> Result<Var> {
        let (cin, h, w) = self.value().dims3()?;
        let ws = weight.shape();
        let [cout, cig, kh, kw] = ws[..] else {
            return Err(shape_err("conv2d weight", ws, &[0, 0, 0, 0]));
        };
        let g = geom.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cig * g != cin {
            return Err(invalid(
                "conv2d",
                format!("groups {g} incompatible with input {:?} and weight {ws:?}", self.shape()),
            ));
        }
        if geom.stride.0 == 0 || geom.stride.1 == 0 || geom.dilation.0 == 0 || geom.dilation.1 == 0 {
            return Err(invalid("conv2d", "stride and dilation must be positive"));
        }
        check_bias("conv2d bias", bias, cout)?;
        let ho = conv_out_extent(h, kh, geom.stride.0, geom.dilation.0, geom.padding.0);
        let wo = conv_out_extent(w, kw, geom.stride.1, geom.dilation.1, geom.padding.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{w} (padding {:?})", geom.padding),
            ));
        };
        let dims = Dims { cin, h, w, cout, kh, kw, ho, wo, geom };
        let x = self.value_rc();
        let wt = weight.value_rc();
        let mut y = conv_forward(x.data(), wt.data(), &dims);
        if let Some(b) = bias {
            add_channel_bias(&mut y, b.value().data(), ho * wo);
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let wshape = ws.to_vec();
        Ok(self.tape().op(
            Tensor::from_parts(vec![cout, ho, wo], y),
            &parents,
            move |g, needs| {
                let gx = needs[0]
                    .then(|| Tensor::from_parts(vec![cin, h, w], conv_backward_input(g.data(), wt.data(), &dims)));
                let gw = needs[1].then(|| {
                    let d = conv_backward_weight(x.data(), g.data(), &dims, wt.len());
                    Tensor::from_parts(wshape, d)
                });
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(needs[2].then(|| channel_sums(g.data(), cout)));
                }
                out
            },
        ))
    }

    /// Transposed 2-D convolution of `x[C_in×H×W]` with `w[C_in×C_out×K_h×K_w]`;
    /// output extent `(in−1)·stride − 2·pad + K`. The adjoint of
    /// [`Var::conv2d`] with the same weight.
    pub fn conv_transpose2d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (cin, h, w) = self.value().dims3()?;
        let ws = weight.shape();
        let [wc, cout, kh, kw] = ws[..] else {
            return Err(shape_err("conv_transpose2d weight", ws, &[0, 0, 0, 0]));
        };
        if wc != cin {
            return Err(shape_err("conv_transpose2d", self.shape(), ws));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("conv_transpose2d", "stride must be positive"));
        }
        check_bias("conv_transpose2d bias", bias, cout)?;
        let full_h = (h - 1) * stride.0 + kh;
        let full_w = (w - 1) * stride.1 + kw;
        if full_h <= 2 * padding.0 || full_w <= 2 * padding.1 {
            return Err(invalid("conv_transpose2d", format!("padding {padding:?} consumes the output")));
        }
        let (ho, wo) = (full_h - 2 * padding.0, full_w - 2 * padding.1);
        // the underlying convolution maps [cout, ho, wo] -> [cin, h, w]
        let dims = Dims {
            cin: cout,
            h: ho,
            w: wo,
            cout: cin,
            kh,
            kw,
            ho: h,
            wo: w,
            geom: Conv2dGeom {
                stride,
                padding,
                ..Conv2dGeom::default()
            },
        };
        let x = self.value_rc();
        let wt = weight.value_rc();
        let mut y = conv_backward_input(x.data(), wt.data(), &dims);
        if let Some(b) = bias {
            add_channel_bias(&mut y, b.value().data(), ho * wo);
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let wshape = ws.to_vec();
        Ok(self.tape().op(
            Tensor::from_parts(vec![cout, ho, wo], y),
            &parents,
            move |g, needs| {
                let gx = needs[0].then(|| Tensor::from_parts(vec![cin, h, w], conv_forward(g.data(), wt.data(), &dims)));
                let gw = needs[1].then(|| {
                    Tensor::from_parts(wshape, conv_backward_weight(g.data(), x.data(), &dims, wt.len()))
                });
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(needs[2].then(|| channel_sums(g.data(), cout)));
                }
                out
            },
        ))
    }

    /// 1-D cross-correlation of `x[C×L]` (or batched `[B×C×L]`) with
    /// `w[C_out×C_in/groups×K]`.
    pub fn conv1d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: Conv1dPadding,
        groups: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be positive"));
        }
        let ws = weight.shape();
        let [cout, cig, k] = ws[..] else {
            return Err(shape_err("conv1d weight", ws, &[0, 0, 0]));
        };
        let (left, right) = match padding {
            Conv1dPadding::Causal => (k - 1, 0),
            Conv1dPadding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
            Conv1dPadding::Valid => (0, 0),
        };
        let w4 = weight.reshape(&[cout, cig, 1, k])?;
        let geom = Conv2dGeom::default().with_stride((1, stride)).with_groups(groups);
        match self.shape().len() {
            2 => {
                let (c, l) = self.value().dims2()?;
                let x = self.reshape(&[c, 1, l])?.pad(2, left, right, PadMode::Zero)?;
                let y = x.conv2d(&w4, bias, geom)?;
                let lo = y.shape()[2];
                y.reshape(&[cout, lo])
            }
            3 => {
                let x = self.permute(&[1, 0, 2])?.pad(2, left, right, PadMode::Zero)?;
                x.conv2d(&w4, bias, geom)?.permute(&[1, 0, 2])
            }
            _ => Err(shape_err("conv1d", self.shape(), &[0, 0])),
        }
    }
}
