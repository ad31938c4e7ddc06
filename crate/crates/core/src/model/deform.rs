//! Deformable convolution (v1): every kernel tap samples the input at its
//! grid position plus a learned fractional offset.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::tensor::linalg::{gemm, gemm_nt, gemm_tn};

/// Bilinear read of `plane[h × w]` at `(py, px)`; outside reads as zero.
/// Returns the value and its derivatives along rows and columns.
fn bilinear(plane: &[Real], h: usize, w: usize, py: Real, px: Real) -> (Real, Real, Real) {
    let y0 = py.floor();
    let x0 = px.floor();
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| -> Real {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
    let val = (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11);
    let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (val, dy, dx)
}

/// Scatter `g` into `plane` with the bilinear weights of `(py, px)`.
fn bilinear_scatter(plane: &mut [Real], h: usize, w: usize, py: Real, px: Real, g: Real) {
    let y0 = py.floor();
    let x0 = px.floor();
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut put = |r: isize, c: isize, wt: Real| {
        if r >= 0 && c >= 0 && r < h as isize && c < w as isize && wt != 0.0 {
            plane[r as usize * w + c as usize] += g * wt;
        }
    };
    put(y0, x0, (1.0 - ly) * (1.0 - lx));
    put(y0, x0 + 1, (1.0 - ly) * lx);
    put(y0 + 1, x0, ly * (1.0 - lx));
    put(y0 + 1, x0 + 1, ly * lx);
}

/// `x[C × H × W]`, `offsets[2K² × H × W]` (row offset then column offset per
/// tap, taps in row-major order), `weight[C_out × C × K × K]`; stride 1 and
/// padding `(K−1)/2`, so the output is `[C_out × H × W]`.
pub fn deform_conv2d(x: &Var, offsets: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let (c, h, w) = x.value().dims3()?;
    let ws = weight.shape().to_vec();
    let [cout, wc, k, k2] = ws[..] else {
        return Err(shape_err("deform_conv2d weight", &ws, &[0, c, 3, 3]));
    };
    if wc != c || k != k2 || k % 2 == 0 {
        return Err(shape_err("deform_conv2d weight", &ws, &[cout, c, 3, 3]));
    }
    let taps = k * k;
    if offsets.shape() != [2 * taps, h, w] {
        return Err(shape_err("deform_conv2d offsets", offsets.shape(), &[2 * taps, h, w]));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("deform_conv2d bias", b.shape(), &[cout]));
        }
    }
    let pad = (k / 2) as Real;
    let hw = h * w;
    let (xv, ov, wv) = (x.value_rc(), offsets.value_rc(), weight.value_rc());
    // sample positions, shared by every input channel
    let mut pos = Vec::with_capacity(taps * hw);
    let od = ov.data();
    for tap in 0..taps {
        let (kh, kw) = ((tap / k) as Real, (tap % k) as Real);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let py = i as Real - pad + kh + od[2 * tap * hw + p];
                let px = j as Real - pad + kw + od[(2 * tap + 1) * hw + p];
                pos.push((py, px));
            }
        }
    }
    let rows = c * taps;
    let mut cols = vec![0.0; rows * hw];
    for ch in 0..c {
        let plane = &xv.data()[ch * hw..(ch + 1) * hw];
        for tap in 0..taps {
            let row = &mut cols[(ch * taps + tap) * hw..(ch * taps + tap + 1) * hw];
            for (p, r) in row.iter_mut().enumerate() {
                let (py, px) = pos[tap * hw + p];
                *r = bilinear(plane, h, w, py, px).0;
            }
        }
    }
    let mut y = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (o, chunk) in y.chunks_exact_mut(hw).enumerate() {
            chunk.fill(b.value().data()[o]);
        }
    }
    gemm(wv.data(), &cols, &mut y, cout, rows, hw);

    let mut parents = vec![x, offsets, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().op(Tensor::from_parts(vec![cout, h, w], y), &parents, move |g, needs| {
        let gd = g.data();
        let gw = needs[2].then(|| {
            let mut gw = vec![0.0; cout * rows];
            gemm_nt(gd, &cols, &mut gw, cout, rows, hw);
            Tensor::from_parts(ws.clone(), gw)
        });
        let (mut gx, mut go) = (None, None);
        if needs[0] || needs[1] {
            let mut gcols = vec![0.0; rows * hw];
            gemm_tn(wv.data(), gd, &mut gcols, cout, rows, hw);
            let mut gxd = vec![0.0; c * hw];
            let mut god = vec![0.0; 2 * taps * hw];
            for ch in 0..c {
                let plane = &xv.data()[ch * hw..(ch + 1) * hw];
                for tap in 0..taps {
                    let grow = &gcols[(ch * taps + tap) * hw..(ch * taps + tap + 1) * hw];
                    for (p, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let (py, px) = pos[tap * hw + p];
                        if needs[1] {
                            let (_, dy, dx) = bilinear(plane, h, w, py, px);
                            god[2 * tap * hw + p] += gv * dy;
                            god[(2 * tap + 1) * hw + p] += gv * dx;
                        }
                        if needs[0] {
                            bilinear_scatter(&mut gxd[ch * hw..(ch + 1) * hw], h, w, py, px, gv);
                        }
                    }
                }
            }
            gx = needs[0].then(|| Tensor::from_parts(vec![c, h, w], gxd));
            go = needs[1].then(|| Tensor::from_parts(vec![2 * taps, h, w], god));
        }
        let mut out = vec![gx, go, gw];
        if has_bias {
            out.push(needs[3].then(|| {
                Tensor::from_parts(vec![cout], gd.chunks_exact(hw).map(|r| r.iter().sum()).collect())
            }));
        }
        out
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Conv2dGeom, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_match_standard_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::rand_uniform(&[3, 6, 7], -1.0, 1.0, &mut rng));
        let w = tape.constant(Tensor::rand_uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng));
        let off = tape.constant(Tensor::zeros(&[18, 6, 7]));
        let y = deform_conv2d(&x, &off, &w, Some(&b)).unwrap();
        let r = x.conv2d(&w, Some(&b), Conv2dGeom::padded((1, 1))).unwrap();
        assert!(y.value().max_abs_diff(r.value()) < 1e-12);
    }

    #[test]
    fn unit_column_offset_equals_shifted_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let xt = Tensor::rand_uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
        let w = tape.constant(Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng));
        let off = Tensor::from_fn(&[18, 5, 8], |i| if (i / 40) % 2 == 1 { 1.0 } else { 0.0 });
        let y = deform_conv2d(&tape.constant(xt.clone()), &tape.constant(off), &w, None).unwrap();
        // x shifted left by one column: xs[.., j] = x[.., j+1]
        let xs = Tensor::from_fn(&[2, 5, 8], |i| {
            let j = i % 8;
            if j + 1 < 8 { xt.data()[i + 1] } else { 0.0 }
        });
        let r = tape.constant(xs).conv2d(&w, None, Conv2dGeom::padded((1, 1))).unwrap();
        for o in 0..3 {
            for i in 1..4 {
                for j in 1..6 {
                    let idx = (o * 5 + i) * 8 + j;
                    assert!((y.value().data()[idx] - r.value().data()[idx]).abs() < 1e-12);
                }
            }
        }
    }

    fn fractional_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        // keep clear of integer sample positions where bilinear has kinks
        Tensor::from_fn(shape, |_| {
            let base: i32 = rand::Rng::gen_range(rng, -1..=1);
            base as Real + rand::Rng::gen_range(rng, 0.2..0.8)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x0 = Tensor::rand_uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
            let o0 = fractional_offsets(&mut rng, &[18, 4, 5]);
            let w0 = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let m = Tensor::rand_uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
            let f = |x: &Var, o: &Var, w: &Var| -> Result<Var> {
                let t = x.tape();
                let b = t.constant(Tensor::full(&[3], 0.2));
                Ok(deform_conv2d(x, o, w, Some(&b))?.mul(&t.constant(m.clone()))?.sum())
            };
            let c = |v: &Var, t: &Tensor| v.tape().constant(t.clone());
            let rx = grad_check(|x| f(x, &c(x, &o0), &c(x, &w0)), &x0, 1e-6, 1e-4).unwrap();
            assert!(rx.passed(), "seed {seed} x: {rx:?}");
            let ro = grad_check(|o| f(&c(o, &x0), o, &c(o, &w0)), &o0, 1e-6, 1e-3).unwrap();
            assert!(ro.passed(), "seed {seed} offsets: {ro:?}");
            let rw = grad_check(|w| f(&c(w, &x0), &c(w, &o0), w), &w0, 1e-6, 1e-4).unwrap();
            assert!(rw.passed(), "seed {seed} w: {rw:?}");
        }
    }
}
