//! Mamba block, its bidirectional wrapper and the time-then-frequency composite.
//!
//! Sequences are laid out `[B × L × D]` (or `[L × D]`), channels last.

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Ctx, Init, Linear, ParamId};
use crate::ssm::{selective_scan, selective_scan_chunked, SsmParams};
use crate::tensor::{concat, Real, Tensor, Var};

pub const RMS_EPS: Real = 1e-6;
pub const CONV_KERNEL: usize = 4;

/// `x·gain / sqrt(mean(x²) + eps)` over the last axis.
pub fn rmsnorm(x: &Var, gain: &Var, eps: Real) -> Result<Var> {
    if !(eps >= 0.0) {
        return Err(invalid("rmsnorm", format!("eps must be nonnegative, got {eps}")));
    }
    let c = *x.shape().last().unwrap_or(&0);
    if gain.shape() != [c] || c == 0 {
        return Err(shape_err("rmsnorm", x.shape(), gain.shape()));
    }
    let (xv, gv) = (x.value_rc(), gain.value_rc());
    let rows = xv.len() / c;
    let mut inv = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(xv.len());
    for row in xv.data().chunks_exact(c) {
        let ms = row.iter().map(|v| v * v).sum::<Real>() / c as Real;
        let r = if ms + eps > 0.0 { 1.0 / (ms + eps).sqrt() } else { 0.0 };
        inv.push(r);
        out.extend(row.iter().zip(gv.data()).map(|(v, g)| v * g * r));
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    Ok(x.tape().op(out, &[x, gain], move |g, needs| {
        let mut gx = vec![0.0; xv.len()];
        let mut gg = vec![0.0; c];
        for (i, ((xr, gr), &r)) in xv
            .data()
            .chunks_exact(c)
            .zip(g.data().chunks_exact(c))
            .zip(&inv)
            .enumerate()
        {
            let mut dot = 0.0;
            for j in 0..c {
                dot += gr[j] * gv.data()[j] * xr[j];
                gg[j] += gr[j] * xr[j] * r;
            }
            let k = r * r * r * dot / c as Real;
            for j in 0..c {
                gx[i * c + j] = gr[j] * gv.data()[j] * r - k * xr[j];
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(xv.shape().to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(vec![c], gg)),
        ]
    }))
}

/// Depthwise causal convolution along the sequence axis of `x[B × L × C]`
/// (or `[L × C]`) with `w[C × 1 × K]`.
pub fn causal_depthwise_conv(x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let ws = weight.shape().to_vec();
    let [c, 1, k] = ws[..] else {
        return Err(shape_err("causal_depthwise_conv weight", &ws, &[0, 1, 0]));
    };
    let (batch, len) = match x.shape() {
        [l, cc] if *cc == c => (1, *l),
        [b, l, cc] if *cc == c => (*b, *l),
        s => return Err(shape_err("causal_depthwise_conv", s, &ws)),
    };
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(shape_err("causal_depthwise_conv bias", b.shape(), &[c]));
        }
    }
    let (xv, wv) = (x.value_rc(), weight.value_rc());
    let (xd, wd) = (xv.data(), wv.data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..batch {
        for t in 0..len {
            let o = &mut out[(bi * len + t) * c..(bi * len + t + 1) * c];
            if let Some(b) = bias {
                o.copy_from_slice(b.value().data());
            }
            for j in 0..k {
                // tap j reads frame t − (K−1) + j
                let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                let xr = &xd[(bi * len + s) * c..(bi * len + s + 1) * c];
                for ch in 0..c {
                    o[ch] += wd[ch * k + j] * xr[ch];
                }
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().op(out, &parents, move |g, _| {
        let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; c];
        for bi in 0..batch {
            for t in 0..len {
                let go = &gd[(bi * len + t) * c..(bi * len + t + 1) * c];
                for ch in 0..c {
                    gb[ch] += go[ch];
                }
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                    let base = (bi * len + s) * c;
                    for ch in 0..c {
                        gx[base + ch] += wd[ch * k + j] * go[ch];
                        gw[ch * k + j] += xd[base + ch] * go[ch];
                    }
                }
            }
        }
        let mut r = vec![
            Some(Tensor::from_parts(xv.shape().to_vec(), gx)),
            Some(Tensor::from_parts(wv.shape().to_vec(), gw)),
        ];
        if has_bias {
            r.push(Some(Tensor::from_parts(vec![c], gb)));
        }
        r
    }))
}

/// Structural options shared by every block in a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub state_dim: usize,
    /// Flip the backward branch's output back before normalization and
    /// residual. `false` reproduces the unflipped wiring for ablation.
    pub flip_back: bool,
    /// Frames per chunk in the scan; `None` runs the plain sequential scan.
    pub scan_chunk: Option<usize>,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            flip_back: true,
            scan_chunk: None,
        }
    }
}

/// Input projection, causal convolution and selective scan on one branch;
/// gated projection on the other; both concatenated and projected back.
#[derive(Clone, Copy, Debug)]
pub struct MambaBlock {
    pub in_linear: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SsmParams,
    pub gate_linear: Linear,
    pub out_linear: Linear,
    pub dim: usize,
}

impl MambaBlock {
    pub fn new(init: &mut Init<'_>, dim: usize, cfg: &MambaConfig) -> Result<Self> {
        let inner = 2 * dim;
        let in_linear = Linear::new(init, "in_linear", dim, inner, true)?;
        let bound = 1.0 / (CONV_KERNEL as Real).sqrt();
        let conv_weight = init.uniform("conv.weight", &[inner, 1, CONV_KERNEL], bound)?;
        let conv_bias = init.zeros("conv.bias", &[inner])?;
        let ssm = SsmParams::new(&mut init.pp("ssm"), inner, cfg.state_dim)?;
        let gate_linear = Linear::new(init, "gate_linear", dim, inner, true)?;
        let out_linear = Linear::new(init, "out_linear", 2 * inner, dim, true)?;
        Ok(Self {
            in_linear,
            conv_weight,
            conv_bias,
            ssm,
            gate_linear,
            out_linear,
            dim,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var, cfg: &MambaConfig) -> Result<Var> {
        if x.shape().last() != Some(&self.dim) {
            return Err(shape_err("mamba_block", x.shape(), &[self.dim]));
        }
        let h = self.in_linear.forward(ctx, x)?;
        let h = causal_depthwise_conv(&h, ctx.p(self.conv_weight), Some(ctx.p(self.conv_bias)))?.silu();
        let x1 = match cfg.scan_chunk {
            None => selective_scan(&self.ssm, ctx, &h)?,
            Some(cl) => selective_scan_chunked(&self.ssm, ctx, &h, cl)?,
        };
        let x2 = self.gate_linear.forward(ctx, x)?.silu();
        let axis = x.shape().len() - 1;
        self.out_linear.forward(ctx, &concat(&[&x1, &x2], axis)?)
    }

    pub fn param_count(&self) -> usize {
        let inner = 2 * self.dim;
        self.in_linear.param_count()
            + inner * (CONV_KERNEL + 1)
            + self.ssm.param_count()
            + self.gate_linear.param_count()
            + self.out_linear.param_count()
    }

    /// Multiply-adds ×2 over `tokens` sequence positions (all sequences together).
    pub fn flops(&self, tokens: usize) -> f64 {
        let (d, i, n) = (self.dim as f64, 2.0 * self.dim as f64, self.ssm.state_dim as f64);
        let per_token = 2.0 * d * i // in_linear
            + 2.0 * i * CONV_KERNEL as f64
            + 2.0 * 2.0 * i * n // B and C projections
            + 2.0 * i * i // step-size projection
            + 6.0 * i * n // state update and readout
            + 2.0 * d * i // gate
            + 2.0 * 2.0 * i * d; // output projection
        per_token * tokens as f64
    }
}

/// Forward and reversed-sequence Mamba blocks, each RMS-normalized with a
/// residual, fused by a linear map.
#[derive(Clone, Copy, Debug)]
pub struct BiMamba {
    pub fwd: MambaBlock,
    pub bwd: MambaBlock,
    pub norm_f: ParamId,
    pub norm_b: ParamId,
    pub fuse_linear: Linear,
    pub dim: usize,
}

impl BiMamba {
    pub fn new(init: &mut Init<'_>, dim: usize, cfg: &MambaConfig) -> Result<Self> {
        Ok(Self {
            fwd: MambaBlock::new(&mut init.pp("fwd"), dim, cfg)?,
            bwd: MambaBlock::new(&mut init.pp("bwd"), dim, cfg)?,
            norm_f: init.ones("norm_f", &[dim])?,
            norm_b: init.ones("norm_b", &[dim])?,
            fuse_linear: Linear::new(init, "fuse_linear", 2 * dim, dim, true)?,
            dim,
        })
    }

    /// The two residual branches `(x_f, x_b)` before fusion.
    pub fn branches(&self, ctx: &Ctx, x: &Var, cfg: &MambaConfig) -> Result<(Var, Var)> {
        let rank = x.shape().len();
        if rank < 2 {
            return Err(shape_err("bimamba", x.shape(), &[0, self.dim]));
        }
        let seq = rank - 2;
        let xf = rmsnorm(&self.fwd.forward(ctx, x, cfg)?, ctx.p(self.norm_f), RMS_EPS)?.add(x)?;
        let mut b = self.bwd.forward(ctx, &x.flip(seq)?, cfg)?;
        if cfg.flip_back {
            b = b.flip(seq)?;
        }
        let xb = rmsnorm(&b, ctx.p(self.norm_b), RMS_EPS)?.add(x)?;
        Ok((xf, xb))
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var, cfg: &MambaConfig) -> Result<Var> {
        let (xf, xb) = self.branches(ctx, x, cfg)?;
        let axis = x.shape().len() - 1;
        self.fuse_linear.forward(ctx, &concat(&[&xf, &xb], axis)?)
    }

    pub fn param_count(&self) -> usize {
        self.fwd.param_count() + self.bwd.param_count() + 2 * self.dim + self.fuse_linear.param_count()
    }

    pub fn flops(&self, tokens: usize) -> f64 {
        let d = self.dim as f64;
        self.fwd.flops(tokens) + self.bwd.flops(tokens) + (2.0 * 4.0 * d + 2.0 * 2.0 * d * d) * tokens as f64
    }
}

/// Bidirectional Mamba along time, then along frequency, on `[T × F × D]`.
#[derive(Clone, Copy, Debug)]
pub struct TsMamba {
    pub time_block: BiMamba,
    pub freq_block: BiMamba,
}

impl TsMamba {
    pub fn new(init: &mut Init<'_>, dim: usize, cfg: &MambaConfig) -> Result<Self> {
        Ok(Self {
            time_block: BiMamba::new(&mut init.pp("time"), dim, cfg)?,
            freq_block: BiMamba::new(&mut init.pp("freq"), dim, cfg)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var, cfg: &MambaConfig) -> Result<Var> {
        let [_, _, d] = x.shape()[..] else {
            return Err(shape_err("ts_mamba", x.shape(), &[0, 0, self.time_block.dim]));
        };
        if d != self.time_block.dim {
            return Err(shape_err("ts_mamba", x.shape(), &[0, 0, self.time_block.dim]));
        }
        // each frequency row is a sequence over time
        let xt = x.permute(&[1, 0, 2])?;
        let xt = self.time_block.forward(ctx, &xt, cfg)?.permute(&[1, 0, 2])?;
        self.freq_block.forward(ctx, &xt, cfg)
    }

    pub fn param_count(&self) -> usize {
        self.time_block.param_count() + self.freq_block.param_count()
    }

    /// FLOPs on a `t × f` map.
    pub fn flops(&self, t: usize, f: usize) -> f64 {
        self.time_block.flops(t * f) + self.freq_block.flops(t * f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{grad_check, grad_check_at, Conv1dPadding, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> MambaConfig {
        MambaConfig {
            state_dim: 4,
            ..MambaConfig::default()
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        assert!((y.value().data()[0] - 0.848528).abs() < 1e-6);
        assert!((y.value().data()[1] - 1.131371).abs() < 1e-6);
        let z = rmsnorm(&tape.constant(Tensor::zeros(&[3])), &tape.constant(Tensor::ones(&[3])), RMS_EPS).unwrap();
        assert_eq!(z.value().data(), &[0.0; 3]);
        assert!(rmsnorm(&x, &g, -1.0).is_err());
    }

    #[test]
    fn rmsnorm_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = Tensor::rand_uniform(&[5, 7], -2.0, 2.0, &mut rng);
        let g = tape.constant(Tensor::rand_uniform(&[7], 0.5, 1.5, &mut rng));
        let y1 = rmsnorm(&tape.constant(x.clone()), &g, 0.0).unwrap();
        for alpha in [0.25, 3.0, 1024.0] {
            let y2 = rmsnorm(&tape.constant(x.scale(alpha)), &g, 0.0).unwrap();
            assert!(y1.value().max_abs_diff(y2.value()) < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let g0 = Tensor::rand_uniform(&[5], 0.5, 1.5, &mut rng);
        let w = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |x| rmsnorm(x, &x.tape().constant(g0.clone()), RMS_EPS)?.mul(&x.tape().constant(w.clone())).map(|v| v.sum()),
            &x0,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        let rep = grad_check(
            |g| rmsnorm(&g.tape().constant(x0.clone()), g, RMS_EPS)?.mul(&g.tape().constant(w.clone())).map(|v| v.sum()),
            &g0,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn depthwise_conv_matches_grouped_conv1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = Tensor::rand_uniform(&[2, 9, 3], -1.0, 1.0, &mut rng);
        let w = tape.constant(Tensor::rand_uniform(&[3, 1, 4], -1.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng));
        let y = causal_depthwise_conv(&tape.constant(x.clone()), &w, Some(&b)).unwrap();
        let xc = tape.constant(x).permute(&[0, 2, 1]).unwrap();
        let r = xc.conv1d(&w, Some(&b), 1, Conv1dPadding::Causal, 3).unwrap().permute(&[0, 2, 1]).unwrap();
        assert!(y.value().max_abs_diff(r.value()) < 1e-12);
    }

    #[test]
    fn depthwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::rand_uniform(&[2, 6, 3], -1.0, 1.0, &mut rng);
        let w0 = Tensor::rand_uniform(&[3, 1, 4], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[2, 6, 3], -1.0, 1.0, &mut rng);
        let loss = |x: &Var, w: &Var| -> Result<Var> {
            let b = x.tape().constant(Tensor::full(&[3], 0.1));
            Ok(causal_depthwise_conv(x, w, Some(&b))?.mul(&x.tape().constant(m.clone()))?.sum())
        };
        let rep = grad_check(|x| loss(x, &x.tape().constant(w0.clone())), &x0, 1e-6, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let rep = grad_check(|w| loss(&w.tape().constant(x0.clone()), w), &w0, 1e-6, 1e-6).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> Result<T>) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = f(&mut Init::new(&mut store, &mut rng)).unwrap();
        (store, m)
    }

    fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&Ctx, &Var) -> Result<Var>) -> Tensor {
        let tape = Tape::new();
        let ctx = Ctx::new(store, &tape, false);
        f(&ctx, &tape.constant(x.clone())).unwrap().value().clone()
    }

    #[test]
    fn mamba_block_preserves_shape_and_zero_output_map_collapses() {
        let cfg = small_cfg();
        let (mut store, blk) = build(5, |i| MambaBlock::new(i, 4, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for l in [1, 4, 33] {
            let x = Tensor::rand_uniform(&[l, 4], -1.0, 1.0, &mut rng);
            let y = eval(&store, &x, |c, v| blk.forward(c, v, &cfg));
            assert_eq!(y.shape(), &[l, 4]);
        }
        *store.get_mut(blk.out_linear.weight) = Tensor::zeros(&[16, 4]);
        let x = Tensor::rand_uniform(&[7, 4], -1.0, 1.0, &mut rng);
        assert_eq!(eval(&store, &x, |c, v| blk.forward(c, v, &cfg)), Tensor::zeros(&[7, 4]));
    }

    #[test]
    fn mamba_block_param_count_matches_store() {
        let cfg = small_cfg();
        let (store, blk) = build(0, |i| MambaBlock::new(i, 6, &cfg));
        assert_eq!(blk.param_count(), store.numel());
        let (store, bi) = build(0, |i| BiMamba::new(i, 6, &cfg));
        assert_eq!(bi.param_count(), store.numel());
        let (store, ts) = build(0, |i| TsMamba::new(i, 6, &cfg));
        assert_eq!(ts.param_count(), store.numel());
    }

    #[test]
    fn mamba_block_gradients() {
        let cfg = small_cfg();
        let (mut store, blk) = build(7, |i| MambaBlock::new(i, 4, &cfg));
        // steps of order one, so A's gradient is well above difference noise
        *store.get_mut(blk.ssm.delta_proj.bias.unwrap()) = Tensor::zeros(&[8]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |x| {
                let ctx = Ctx::new(&store, x.tape(), false);
                Ok(blk.forward(&ctx, x, &cfg)?.mul(&x.tape().constant(w.clone()))?.sum())
            },
            &x0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        for id in [blk.in_linear.weight, blk.conv_weight, blk.gate_linear.weight, blk.ssm.log_a] {
            let n = store.get(id).len();
            let coords: Vec<usize> = (0..n).step_by(3).collect();
            let rep = grad_check_at(
                |v| {
                    let ctx = Ctx::with_override(&store, v.tape(), id, v.clone());
                    let xv = v.tape().constant(x0.clone());
                    Ok(blk.forward(&ctx, &xv, &cfg)?.mul(&v.tape().constant(w.clone()))?.sum())
                },
                store.get(id),
                1e-6,
                1e-4,
                &coords,
            )
            .unwrap();
            assert!(rep.passed(), "{}: {rep:?}", store.name(id));
        }
    }

    #[test]
    fn backward_branch_is_the_flipped_forward_computation() {
        let cfg = small_cfg();
        let (store, bi) = build(9, |i| BiMamba::new(i, 4, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&[9, 4], -1.0, 1.0, &mut rng);
        let xb = eval(&store, &x, |c, v| Ok(bi.branches(c, v, &cfg)?.1));
        let manual = eval(&store, &x, |c, v| {
            let b = bi.bwd.forward(c, &v.flip(0)?, &cfg)?.flip(0)?;
            rmsnorm(&b, c.p(bi.norm_b), RMS_EPS)?.add(v)
        });
        assert_eq!(xb, manual);
        let literal = MambaConfig {
            flip_back: false,
            ..cfg
        };
        let xb_lit = eval(&store, &x, |c, v| Ok(bi.branches(c, v, &literal)?.1));
        let manual_lit = eval(&store, &x, |c, v| {
            let b = bi.bwd.forward(c, &v.flip(0)?, &cfg)?;
            rmsnorm(&b, c.p(bi.norm_b), RMS_EPS)?.add(v)
        });
        assert_eq!(xb_lit, manual_lit);
    }

    #[test]
    fn tied_directions_agree_on_length_one() {
        let cfg = small_cfg();
        let (mut store, bi) = build(11, |i| BiMamba::new(i, 4, &cfg));
        let fwd_ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("fwd.")).collect();
        for id in fwd_ids {
            let twin = store.find(&store.name(id).replacen("fwd.", "bwd.", 1)).unwrap();
            *store.get_mut(twin) = store.get(id).clone();
        }
        let x = Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let (xf, xb) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&store, &tape, false);
            let (a, b) = bi.branches(&ctx, &tape.constant(x), &cfg).unwrap();
            (a.value().clone(), b.value().clone())
        };
        assert_eq!(xf, xb);
    }

    #[test]
    fn bimamba_gradients_and_zero_fuse_collapse() {
        let cfg = small_cfg();
        let (mut store, bi) = build(12, |i| BiMamba::new(i, 4, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |x| {
                let ctx = Ctx::new(&store, x.tape(), false);
                Ok(bi.forward(&ctx, x, &cfg)?.mul(&x.tape().constant(w.clone()))?.sum())
            },
            &x0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        *store.get_mut(bi.fuse_linear.weight) = Tensor::zeros(&[8, 4]);
        let y = eval(&store, &x0, |c, v| bi.forward(c, v, &cfg));
        assert_eq!(y, Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn bimamba_sees_past_and_future() {
        let cfg = small_cfg();
        let (store, bi) = build(14, |i| BiMamba::new(i, 4, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::rand_uniform(&[8, 4], -1.0, 1.0, &mut rng);
        let y = eval(&store, &x, |c, v| bi.forward(c, v, &cfg));
        let mut late = x.clone();
        late.data_mut()[7 * 4] += 0.5;
        let y_late = eval(&store, &late, |c, v| bi.forward(c, v, &cfg));
        assert!((y.data()[0] - y_late.data()[0]).abs() > 1e-9);
        let mut early = x.clone();
        early.data_mut()[0] += 0.5;
        let y_early = eval(&store, &early, |c, v| bi.forward(c, v, &cfg));
        assert!((y.data()[7 * 4] - y_early.data()[7 * 4]).abs() > 1e-9);
    }

    #[test]
    fn ts_mamba_shapes_and_frequency_symmetry() {
        let cfg = small_cfg();
        let (store, ts) = build(16, |i| TsMamba::new(i, 3, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (t, f) in [(4, 4), (16, 8)] {
            let x = Tensor::rand_uniform(&[t, f, 3], -1.0, 1.0, &mut rng);
            assert_eq!(eval(&store, &x, |c, v| ts.forward(c, v, &cfg)).shape(), &[t, f, 3]);
        }
        // constant along F survives the time stage
        let row = Tensor::rand_uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let x = Tensor::from_fn(&[6, 5, 3], |i| row.data()[(i / 15) * 3 + i % 3]);
        let y = eval(&store, &x, |c, v| {
            let xt = v.permute(&[1, 0, 2])?;
            ts.time_block.forward(c, &xt, &cfg)?.permute(&[1, 0, 2])
        });
        for t in 0..6 {
            for fi in 1..5 {
                for d in 0..3 {
                    assert_eq!(y.data()[(t * 5 + fi) * 3 + d], y.data()[t * 5 * 3 + d]);
                }
            }
        }
    }

    #[test]
    fn ts_mamba_gradients() {
        let cfg = small_cfg();
        let (store, ts) = build(18, |i| TsMamba::new(i, 2, &cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = Tensor::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |x| {
                let ctx = Ctx::new(&store, x.tape(), false);
                Ok(ts.forward(&ctx, x, &cfg)?.mul(&x.tape().constant(w.clone()))?.sum())
            },
            &x0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
