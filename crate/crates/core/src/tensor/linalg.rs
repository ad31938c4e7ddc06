use super::{Real, Tensor, Var};
use crate::error::{shape_err, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
        }
    }
}

impl Var {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (m, k) = self.value().dims2()?;
        let (k2, n) = other.value().dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let mut out = vec![0.0; m * n];
        gemm(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.tape().op(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(g.data(), b.data(), &mut d, m, k, n);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(a.data(), g.data(), &mut d, m, k, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            },
        ))
    }

    /// Affine map over the last axis: `x[..., k] · w[k×n] + bias[n]`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (k, n) = weight.value().dims2()?;
        let shape = self.shape();
        if shape.last() != Some(&k) {
            return Err(shape_err("linear", shape, weight.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [n] {
                return Err(shape_err("linear bias", b.shape(), &[n]));
            }
        }
        let rows = self.value().len() / k;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = n;

        let x = self.value_rc();
        let w = weight.value_rc();
        let mut out = Vec::with_capacity(rows * n);
        match bias {
            Some(b) => {
                for _ in 0..rows {
                    out.extend_from_slice(b.value().data());
                }
            }
            None => out.resize(rows * n, 0.0),
        }
        gemm(x.data(), w.data(), &mut out, rows, k, n);

        let in_shape = shape.to_vec();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape().op(
            Tensor::from_parts(out_shape, out),
            &parents,
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; rows * k];
                    gemm_nt(g.data(), w.data(), &mut d, rows, k, n);
                    Tensor::from_parts(in_shape, d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(x.data(), g.data(), &mut d, rows, k, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut d = vec![0.0; n];
                        for row in g.data().chunks_exact(n) {
                            for (o, v) in d.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Tensor::from_parts(vec![n], d)
                    }));
                }
                grads
            },
        ))
    }
}
