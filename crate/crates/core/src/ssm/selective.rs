//! Input-dependent scan: Δ, B and C are computed from the input at every frame.

use super::{phi_prime_from, zoh_terms};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId};
use crate::tensor::{Real, Tensor, Var};

/// Learnable parameters of one selective SSM over `D` channels with `N` states.
///
/// `A = −exp(log_a)` keeps the diagonal strictly negative; Δ passes through
/// a softplus so it is strictly positive.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams {
    pub log_a: ParamId,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub delta_proj: Linear,
    pub channels: usize,
    pub state_dim: usize,
}

/// `x` with `softplus(x) = y`.
fn inverse_softplus(y: Real) -> Real {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(init: &mut Init<'_>, channels: usize, state_dim: usize) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(invalid("ssm_params", "channels and state dimension must be positive"));
        }
        let (lo, hi) = ((0.5 as Real).ln(), (8.0 as Real).ln());
        let log_a = Tensor::rand_uniform(&[channels, state_dim], lo, hi, init.rng());
        let log_a = init.param("log_a", log_a)?;
        let b_proj = Linear::new(init, "b_proj", channels, state_dim, true)?;
        let c_proj = Linear::new(init, "c_proj", channels, state_dim, true)?;
        let delta_proj = Linear::new(init, "delta_proj", channels, channels, true)?;
        let (dmin, dmax) = ((0.001 as Real).ln(), (0.1 as Real).ln());
        let bias: Vec<Real> = (0..channels)
            .map(|_| inverse_softplus(init.gen_range(dmin, dmax).exp()))
            .collect();
        let id = delta_proj.bias.expect("delta projection has a bias");
        init.set(id, Tensor::from_parts(vec![channels], bias));
        Ok(Self {
            log_a,
            b_proj,
            c_proj,
            delta_proj,
            channels,
            state_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.state_dim
            + self.b_proj.param_count()
            + self.c_proj.param_count()
            + self.delta_proj.param_count()
    }
}

/// Selective scan over `x[L × D]` or `x[B × L × D]`.
pub fn selective_scan(p: &SsmParams, ctx: &Ctx, x: &Var) -> Result<Var> {
    scan_with(p, ctx, x, None)
}

/// Same result as [`selective_scan`], computed `chunk_len` frames at a time
/// with the discretized parameters materialized once per chunk and the
/// state carried across chunk boundaries.
pub fn selective_scan_chunked(p: &SsmParams, ctx: &Ctx, x: &Var, chunk_len: usize) -> Result<Var> {
    if chunk_len == 0 {
        return Err(invalid("selective_scan_chunked", "chunk length must be at least 1"));
    }
    scan_with(p, ctx, x, Some(chunk_len))
}

fn scan_with(p: &SsmParams, ctx: &Ctx, x: &Var, chunk: Option<usize>) -> Result<Var> {
    if x.shape().last() != Some(&p.channels) {
        return Err(shape_err("selective_scan", x.shape(), &[p.channels]));
    }
    if let Some(i) = x.value().data().iter().position(|v| !v.is_finite()) {
        let frames = x.shape()[x.shape().len().saturating_sub(2)];
        return Err(Error::NonFinite {
            what: "scan input",
            frame: (i / p.channels) % frames.max(1),
        });
    }
    let delta = p.delta_proj.forward(ctx, x)?.softplus();
    let b = p.b_proj.forward(ctx, x)?;
    let c = p.c_proj.forward(ctx, x)?;
    let a = ctx.p(p.log_a).exp().neg();
    selective_scan_raw(x, &delta, &a, &b, &c, chunk)
}

struct Dims {
    batch: usize,
    len: usize,
    d: usize,
    n: usize,
}

impl Dims {
    fn ud(&self, b: usize, t: usize, ch: usize) -> usize {
        (b * self.len + t) * self.d + ch
    }

    fn bn(&self, b: usize, t: usize) -> usize {
        (b * self.len + t) * self.n
    }
}

/// Differentiable scan from already computed per-frame quantities.
///
/// `u`, `delta`: `[B × L × D]` (or `[L × D]`); `a`: `[D × N]`;
/// `b`, `c`: `[B × L × N]` (or `[L × N]`). `delta` must be nonnegative; a zero step holds the state.
pub fn selective_scan_raw(u: &Var, delta: &Var, a: &Var, b: &Var, c: &Var, chunk: Option<usize>) -> Result<Var> {
    let (d, n) = a.value().dims2()?;
    let (batch, len) = match u.shape() {
        [l, dd] if *dd == d => (1, *l),
        [bb, l, dd] if *dd == d => (*bb, *l),
        s => return Err(shape_err("selective_scan", s, &[0, d])),
    };
    if delta.shape() != u.shape() {
        return Err(shape_err("selective_scan delta", delta.shape(), u.shape()));
    }
    let bc_shape: Vec<usize> = if u.shape().len() == 2 { vec![len, n] } else { vec![batch, len, n] };
    for (name, t) in [("selective_scan B", b), ("selective_scan C", c)] {
        if t.shape() != bc_shape.as_slice() {
            return Err(shape_err(name, t.shape(), &bc_shape));
        }
    }
    if delta.value().data().iter().any(|&v| !(v >= 0.0)) {
        return Err(invalid("selective_scan", "step sizes must be nonnegative"));
    }
    let dims = Dims { batch, len, d, n };
    let (uv, dv, av, bv, cv) = (u.value_rc(), delta.value_rc(), a.value_rc(), b.value_rc(), c.value_rc());
    let y = match chunk {
        None => forward_sequential(&dims, uv.data(), dv.data(), av.data(), bv.data(), cv.data()),
        Some(cl) => forward_chunked(&dims, uv.data(), dv.data(), av.data(), bv.data(), cv.data(), cl),
    };
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "selective scan",
            frame: (i / d) % len,
        });
    }
    let out = Tensor::from_parts(u.shape().to_vec(), y);
    Ok(u.tape().op(out, &[u, delta, a, b, c], move |g, _needs| {
        let gr = backward(&dims, g.data(), uv.data(), dv.data(), av.data(), bv.data(), cv.data());
        vec![
            Some(Tensor::from_parts(uv.shape().to_vec(), gr.u)),
            Some(Tensor::from_parts(dv.shape().to_vec(), gr.delta)),
            Some(Tensor::from_parts(av.shape().to_vec(), gr.a)),
            Some(Tensor::from_parts(bv.shape().to_vec(), gr.b)),
            Some(Tensor::from_parts(cv.shape().to_vec(), gr.c)),
        ]
    }))
}

fn forward_sequential(dm: &Dims, u: &[Real], dl: &[Real], a: &[Real], b: &[Real], c: &[Real]) -> Vec<Real> {
    let n = dm.n;
    let mut y = vec![0.0; u.len()];
    let mut h = vec![0.0; n];
    for bi in 0..dm.batch {
        for ch in 0..dm.d {
            h.iter_mut().for_each(|v| *v = 0.0);
            let arow = &a[ch * n..(ch + 1) * n];
            for t in 0..dm.len {
                let i = dm.ud(bi, t, ch);
                let (dt, uu) = (dl[i], u[i]);
                let bo = dm.bn(bi, t);
                let mut acc = 0.0;
                for k in 0..n {
                    let (abar, ph) = zoh_terms(dt * arow[k]);
                    let bbar = dt * ph * b[bo + k];
                    h[k] = abar * h[k] + bbar * uu;
                    acc += c[bo + k] * h[k];
                }
                y[i] = acc;
            }
        }
    }
    y
}

fn forward_chunked(dm: &Dims, u: &[Real], dl: &[Real], a: &[Real], b: &[Real], c: &[Real], chunk: usize) -> Vec<Real> {
    let (d, n) = (dm.d, dm.n);
    let mut y = vec![0.0; u.len()];
    let mut abar = vec![0.0; chunk * d * n];
    let mut bbar = vec![0.0; chunk * d * n];
    let mut h = vec![0.0; d * n];
    for bi in 0..dm.batch {
        h.iter_mut().for_each(|v| *v = 0.0);
        let mut start = 0;
        while start < dm.len {
            let stop = (start + chunk).min(dm.len);
            for t in start..stop {
                let bo = dm.bn(bi, t);
                for ch in 0..d {
                    let dt = dl[dm.ud(bi, t, ch)];
                    let off = ((t - start) * d + ch) * n;
                    for k in 0..n {
                        let (ab, ph) = zoh_terms(dt * a[ch * n + k]);
                        abar[off + k] = ab;
                        bbar[off + k] = dt * ph * b[bo + k];
                    }
                }
            }
            for ch in 0..d {
                let hs = &mut h[ch * n..(ch + 1) * n];
                for t in start..stop {
                    let i = dm.ud(bi, t, ch);
                    let uu = u[i];
                    let bo = dm.bn(bi, t);
                    let off = ((t - start) * d + ch) * n;
                    let mut acc = 0.0;
                    for k in 0..n {
                        hs[k] = abar[off + k] * hs[k] + bbar[off + k] * uu;
                        acc += c[bo + k] * hs[k];
                    }
                    y[i] = acc;
                }
            }
            start = stop;
        }
    }
    y
}

struct ScanGrads {
    u: Vec<Real>,
    delta: Vec<Real>,
    a: Vec<Real>,
    b: Vec<Real>,
    c: Vec<Real>,
}

/// Reverse sweep per channel. States are recomputed from the inputs into a
/// per-channel `L × N` buffer rather than kept from the forward pass.
fn backward(dm: &Dims, gy: &[Real], u: &[Real], dl: &[Real], a: &[Real], b: &[Real], c: &[Real]) -> ScanGrads {
    let (len, n) = (dm.len, dm.n);
    let mut g = ScanGrads {
        u: vec![0.0; u.len()],
        delta: vec![0.0; u.len()],
        a: vec![0.0; a.len()],
        b: vec![0.0; b.len()],
        c: vec![0.0; c.len()],
    };
    let mut hs = vec![0.0; len * n];
    let mut abars = vec![0.0; len * n];
    let mut phis = vec![0.0; len * n];
    let mut r = vec![0.0; n];
    for bi in 0..dm.batch {
        for ch in 0..dm.d {
            let arow = &a[ch * n..(ch + 1) * n];
            for t in 0..len {
                let i = dm.ud(bi, t, ch);
                let (dt, uu) = (dl[i], u[i]);
                let bo = dm.bn(bi, t);
                for k in 0..n {
                    let prev = if t == 0 { 0.0 } else { hs[(t - 1) * n + k] };
                    let (ab, ph) = zoh_terms(dt * arow[k]);
                    abars[t * n + k] = ab;
                    phis[t * n + k] = ph;
                    hs[t * n + k] = ab * prev + dt * ph * b[bo + k] * uu;
                }
            }
            r.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let i = dm.ud(bi, t, ch);
                let (dt, uu, gyt) = (dl[i], u[i], gy[i]);
                let bo = dm.bn(bi, t);
                let (mut gu, mut gd) = (0.0, 0.0);
                for k in 0..n {
                    let h = hs[t * n + k];
                    let prev = if t == 0 { 0.0 } else { hs[(t - 1) * n + k] };
                    r[k] += gyt * c[bo + k];
                    g.c[bo + k] += gyt * h;
                    let ak = arow[k];
                    let ad = dt * ak;
                    let (abar, ph) = (abars[t * n + k], phis[t * n + k]);
                    let php = phi_prime_from(ad, abar, ph);
                    let bk = b[bo + k];
                    // h = abar·prev + dt·φ(ad)·b·u
                    let g_abar = r[k] * prev;
                    let g_beta = r[k] * uu;
                    gu += r[k] * dt * ph * bk;
                    gd += g_abar * ak * abar + g_beta * bk * (ph + ad * php);
                    g.a[ch * n + k] += g_abar * dt * abar + g_beta * bk * dt * dt * php;
                    g.b[bo + k] += g_beta * dt * ph;
                    r[k] *= abar;
                }
                g.u[i] += gu;
                g.delta[i] += gd;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::ssm::{ssm_scan_recurrent, DiscreteSsm};
    use crate::tensor::{grad_check, softplus, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(d: usize, n: usize, seed: u64) -> (ParamStore, SsmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::new(&mut Init::new(&mut store, &mut rng), d, n).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore, p: &SsmParams, x: &Tensor, chunk: Option<usize>) -> Tensor {
        let tape = Tape::new();
        let ctx = Ctx::new(store, &tape, false);
        let xv = tape.constant(x.clone());
        let y = match chunk {
            None => selective_scan(p, &ctx, &xv),
            Some(c) => selective_scan_chunked(p, &ctx, &xv, c),
        };
        y.unwrap().value().clone()
    }

    #[test]
    fn initialization_ranges() {
        let (store, p) = build(6, 16, 0);
        let la = store.get(p.log_a);
        assert!(la.data().iter().all(|&v| v >= (0.5 as Real).ln() - 1e-6 && v < (8.0 as Real).ln() + 1e-6));
        let bias = store.get(p.delta_proj.bias.unwrap());
        for &v in bias.data() {
            let dt = softplus(v);
            assert!(dt > 0.00099 && dt < 0.1001, "{dt}");
        }
    }

    #[test]
    fn constant_projections_reduce_to_time_invariant_scan() {
        let (mut store, p) = build(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for lin in [p.b_proj, p.c_proj, p.delta_proj] {
            *store.get_mut(lin.weight) = Tensor::zeros(&[lin.in_dim, lin.out_dim]);
            let bias = lin.bias.unwrap();
            let dim = store.get(bias).len();
            *store.get_mut(bias) = Tensor::rand_uniform(&[dim], -1.0, 1.0, &mut rng);
        }
        let x = Tensor::rand_uniform(&[20, 3], -1.0, 1.0, &mut rng);
        let y = run(&store, &p, &x, None);

        let a = store.get(p.log_a).map(|v| -v.exp());
        let bvec = store.get(p.b_proj.bias.unwrap()).data().to_vec();
        let cvec = store.get(p.c_proj.bias.unwrap()).data().to_vec();
        let b = Tensor::from_fn(&[3, 4], |i| bvec[i % 4]);
        let c = Tensor::from_fn(&[3, 4], |i| cvec[i % 4]);
        let delta: Vec<Real> = store.get(p.delta_proj.bias.unwrap()).data().iter().map(|&v| softplus(v)).collect();
        let sys = DiscreteSsm::from_continuous(&a, &b, &c, &delta).unwrap();
        assert_eq!(y, ssm_scan_recurrent(&sys, &x).unwrap());
    }

    #[test]
    fn vanishing_step_freezes_the_state() {
        let (mut store, p) = build(2, 3, 4);
        *store.get_mut(p.delta_proj.weight) = Tensor::zeros(&[2, 2]);
        *store.get_mut(p.delta_proj.bias.unwrap()) = Tensor::full(&[2], -60.0);
        let x = Tensor::full(&[10, 2], 1.0);
        let y = run(&store, &p, &x, None);
        assert!(y.max_abs() < 1e-20);
    }

    #[test]
    fn chunked_scan_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..50 {
            let d = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=8);
            let l = rng.gen_range(1..=40);
            let (store, p) = build(d, n, case);
            let x = Tensor::rand_uniform(&[2, l, d], -2.0, 2.0, &mut rng);
            let seq = run(&store, &p, &x, None);
            for chunk in [1, 2, 7, l] {
                let y = run(&store, &p, &x, Some(chunk));
                assert!(y.max_abs_diff(&seq) < 1e-6);
            }
            assert_eq!(run(&store, &p, &x, Some(l)), seq);
        }
    }

    #[test]
    fn chunk_length_zero_is_rejected() {
        let (store, p) = build(2, 2, 0);
        let tape = Tape::new();
        let ctx = Ctx::new(&store, &tape, false);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(selective_scan_chunked(&p, &ctx, &x, 0).is_err());
    }

    #[test]
    fn output_is_causal() {
        let (store, p) = build(3, 5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&[16, 3], -1.0, 1.0, &mut rng);
        let y = run(&store, &p, &x, None);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[9 * 3..] {
            *v -= 0.5;
        }
        let y2 = run(&store, &p, &x2, None);
        assert_eq!(y.data()[..9 * 3], y2.data()[..9 * 3]);
        assert_ne!(y.data()[9 * 3..], y2.data()[9 * 3..]);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let (store, p) = build(2, 2, 0);
        let mut x = Tensor::zeros(&[5, 2]);
        x.data_mut()[7] = Real::NAN;
        let tape = Tape::new();
        let ctx = Ctx::new(&store, &tape, false);
        let r = selective_scan(&p, &ctx, &tape.constant(x));
        assert!(matches!(r, Err(Error::NonFinite { frame: 3, .. })));
    }

    #[test]
    fn raw_scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (bsz, l, d, n) = (2, 6, 2, 3);
        let u = Tensor::rand_uniform(&[bsz, l, d], -1.0, 1.0, &mut rng);
        let dl = Tensor::rand_uniform(&[bsz, l, d], 0.05, 0.8, &mut rng);
        let a = Tensor::rand_uniform(&[d, n], -3.0, -0.3, &mut rng);
        let b = Tensor::rand_uniform(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let c = Tensor::rand_uniform(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[bsz, l, d], -1.0, 1.0, &mut rng);
        let inputs = [u, dl, a, b, c];
        for which in 0..5 {
            let f = |x: &Var| -> Result<Var> {
                let tape = x.tape();
                let vs: Vec<Var> = (0..5)
                    .map(|k| if k == which { x.clone() } else { tape.constant(inputs[k].clone()) })
                    .collect();
                let y = selective_scan_raw(&vs[0], &vs[1], &vs[2], &vs[3], &vs[4], None)?;
                Ok(y.mul(&tape.constant(w.clone()))?.sum())
            };
            let rep = grad_check(f, &inputs[which], 1e-6, 1e-5).unwrap();
            assert!(rep.passed(), "input {which}: {rep:?}");
        }
    }

    #[test]
    fn composite_scan_gradients_match_finite_differences() {
        let (store, p) = build(2, 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = Tensor::rand_uniform(&[8, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[8, 2], -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |x| {
                let ctx = Ctx::new(&store, x.tape(), false);
                let y = selective_scan(&p, &ctx, x)?;
                Ok(y.mul(&x.tape().constant(w.clone()))?.sum())
            },
            &x0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        for id in [p.log_a, p.delta_proj.weight, p.delta_proj.bias.unwrap(), p.b_proj.weight, p.c_proj.weight] {
            let rep = grad_check(
                |v| {
                    let ctx = Ctx::with_override(&store, v.tape(), id, v.clone());
                    let xv = v.tape().constant(x0.clone());
                    let y = selective_scan(&p, &ctx, &xv)?;
                    Ok(y.mul(&v.tape().constant(w.clone()))?.sum())
                },
                store.get(id),
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{}: {rep:?}", store.name(id));
        }
    }
}
