use super::{numel, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    if rank == 0 {
        return t.clone();
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let src = t.data();
        // odometer over the output index, innermost axis copied in a run
        let last = rank - 1;
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        loop {
            let s = strides[last];
            for j in 0..out_shape[last] {
                out.push(src[offset + j * s]);
            }
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::from_parts(out_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                offset += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn flip_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_at_axis(t.shape(), axis);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..len).rev() {
            let base = (o * len + i) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Source index along the axis for padded position `p`.
fn pad_source(p: isize, len: usize, mode: PadMode) -> Option<usize> {
    let n = len as isize;
    if (0..n).contains(&p) {
        return Some(p as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let period = 2 * (n - 1).max(1);
            let mut q = p.rem_euclid(period);
            if q >= n {
                q = period - q;
            }
            Some(q.clamp(0, n - 1) as usize)
        }
    }
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value().len() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        let in_shape = self.shape().to_vec();
        let out = Tensor::from_parts(shape.to_vec(), self.value().data().to_vec());
        Ok(self.tape().op(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape, g.data().to_vec()))]
        }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let out = permute_tensor(self.value(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape()
            .op(out, &[self], move |g, _| vec![Some(permute_tensor(g, &inverse))]))
    }

    pub fn flip(&self, axis: usize) -> Result<Var> {
        check_axis("flip", self.shape(), axis)?;
        let out = flip_tensor(self.value(), axis);
        Ok(self
            .tape()
            .op(out, &[self], move |g, _| vec![Some(flip_tensor(g, axis))]))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("slice", self.shape(), axis)?;
        let in_shape = self.shape().to_vec();
        let (outer, alen, inner) = split_at_axis(&in_shape, axis);
        if start + len > alen {
            return Err(invalid("slice", format!("{start}+{len} exceeds extent {alen} of axis {axis}")));
        }
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut d = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                let dst = (o * alen + start) * inner;
                let srcg = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[srcg..srcg + len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape, d))]
        }))
    }

    /// Pad `axis` with `before`/`after` entries. Reflection wider than the
    /// extent continues periodically.
    pub fn pad(&self, axis: usize, before: usize, after: usize, mode: PadMode) -> Result<Var> {
        check_axis("pad", self.shape(), axis)?;
        let in_shape = self.shape().to_vec();
        let (outer, len, inner) = split_at_axis(&in_shape, axis);
        let out_len = len + before + after;
        let sources: Vec<Option<usize>> = (0..out_len)
            .map(|p| pad_source(p as isize - before as isize, len, mode))
            .collect();
        let src = self.value().data();
        let mut out = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for (p, s) in sources.iter().enumerate() {
                if let Some(s) = s {
                    let dst = (o * out_len + p) * inner;
                    let from = (o * len + s) * inner;
                    out[dst..dst + inner].copy_from_slice(&src[from..from + inner]);
                }
            }
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = out_len;
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut d = vec![0.0; outer * len * inner];
            let gd = g.data();
            for o in 0..outer {
                for (p, s) in sources.iter().enumerate() {
                    if let Some(s) = s {
                        let from = (o * out_len + p) * inner;
                        let dst = (o * len + s) * inner;
                        for j in 0..inner {
                            d[dst + j] += gd[from + j];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape, d))]
        }))
    }
}

/// Join variables along `axis`; all other extents must agree.
pub fn concat(vars: &[&Var], axis: usize) -> Result<Var> {
    let first = vars.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    let ref_shape = first.shape();
    for v in &vars[1..] {
        let s = v.shape();
        if s.len() != ref_shape.len()
            || s.iter().zip(ref_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err("concat", ref_shape, s));
        }
    }
    let (outer, _, inner) = split_at_axis(ref_shape, axis);
    let lens: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in vars.iter().zip(&lens) {
            let base = o * l * inner;
            out.extend_from_slice(&v.value().data()[base..base + l * inner]);
        }
    }
    let mut out_shape = ref_shape.to_vec();
    out_shape[axis] = total;
    let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().op(Tensor::from_parts(out_shape, out), vars, move |g, needs| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(lens.len());
        for ((&l, shape), &need) in lens.iter().zip(shapes).zip(needs) {
            if need {
                let mut d = Vec::with_capacity(outer * l * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    d.extend_from_slice(&gd[base..base + l * inner]);
                }
                grads.push(Some(Tensor::from_parts(shape, d)));
            } else {
                grads.push(None);
            }
            offset += l;
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Real, Tape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sorted(t: &Tensor) -> Vec<Real> {
        let mut v = t.data().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn flip_is_an_involution() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as Real));
        for axis in 0..3 {
            let back = x.flip(axis).unwrap().flip(axis).unwrap();
            assert_eq!(back.value(), x.value());
        }
        let f = x.flip(1).unwrap();
        assert_eq!(&f.value().data()[..4], &[8., 9., 10., 11.]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as Real));
        let b = tape.constant(Tensor::from_fn(&[2, 2], |i| 10.0 + i as Real));
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 3).unwrap().value(), a.value());
        assert_eq!(c.slice(1, 3, 2).unwrap().value(), b.value());
    }

    #[test]
    fn axis_and_shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(a.flip(2).is_err());
        assert!(concat(&[&a, &b], 1).is_err());
        assert!(concat(&[&a, &b], 0).is_ok());
        assert!(a.permute(&[0, 0]).is_err());
        assert!(a.slice(1, 2, 2).is_err());
    }

    #[test]
    fn reflect_padding_mirrors_without_edge() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4], vec![1., 2., 3., 4.]).unwrap());
        let p = x.pad(0, 2, 3, PadMode::Reflect).unwrap();
        assert_eq!(p.value().data(), &[3., 2., 1., 2., 3., 4., 3., 2., 1.]);
        let z = x.pad(0, 1, 1, PadMode::Zero).unwrap();
        assert_eq!(z.value().data(), &[0., 1., 2., 3., 4., 0.]);
    }

    #[test]
    fn structural_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
            let r = grad_check(
                |v| {
                    let p = v.permute(&[2, 1, 0])?;
                    let weights = v.tape().constant(w.clone());
                    let a = p.mul(&weights)?.square().sum();
                    let b = v.flip(1)?.slice(2, 1, 2)?.pad(2, 1, 1, PadMode::Reflect)?;
                    let c = concat(&[&b, v], 0)?.reshape(&[4, 12])?.silu().sum();
                    Ok(a.add(&c)?)
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn permute_backward_is_inverse_permute() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as Real));
        let upstream = Tensor::from_fn(&[4, 2, 3], |i| (i * i) as Real);
        let p = x.permute(&[2, 0, 1]).unwrap();
        let loss = p.mul(&tape.constant(upstream.clone())).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &permute_tensor(&upstream, &[1, 2, 0]));
    }

    proptest! {
        #[test]
        fn data_movement_preserves_the_multiset(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in 0u64..1000,
            axis_pick in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&dims, -5.0, 5.0, &mut rng);
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            let axis = axis_pick % dims.len();
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            axes.rotate_left(1);
            let expect = sorted(&x);
            prop_assert_eq!(sorted(v.flip(axis).unwrap().value()), expect.clone());
            prop_assert_eq!(sorted(v.permute(&axes).unwrap().value()), expect.clone());
            prop_assert_eq!(sorted(v.reshape(&[x.len()]).unwrap().value()), expect);
        }
    }
}
