use super::{Real, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Exp,
    Softplus,
}

pub fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: Real) -> Real {
    v * sigmoid(v)
}

/// `ln(1 + e^v)` without overflow for large `v`.
pub fn softplus(v: Real) -> Real {
    if v > 20.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn silu_grad(v: Real) -> Real {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

impl Var {
    /// Elementwise map with a derivative expressed in terms of the input.
    fn unary(&self, f: impl Fn(Real) -> Real, df: impl Fn(Real) -> Real + 'static) -> Var {
        let x = self.value_rc();
        let out = x.map(f);
        self.tape().op(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| g * df(v))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(Real, Real) -> Real,
        da: impl Fn(Real, Real) -> Real + 'static,
        db: impl Fn(Real, Real) -> Real + 'static,
    ) -> Result<Var> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let out = a.zip_map(&b, f)?;
        Ok(self.tape().op(out, &[self, other], move |g, needs| {
            let grad = |d: &dyn Fn(Real, Real) -> Real| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&x, &y))| g * d(x, y))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            vec![needs[0].then(|| grad(&da)), needs[1].then(|| grad(&db))]
        }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Two-argument arctangent `atan2(self, other)`, range (−π, π].
    ///
    /// At the origin the value is 0 and the gradient is taken as 0.
    pub fn atan2(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "atan2",
            |p, q| if p == 0.0 && q == 0.0 { 0.0 } else { p.atan2(q) },
            |p, q| {
                let r = p * p + q * q;
                if r == 0.0 { 0.0 } else { q / r }
            },
            |p, q| {
                let r = p * p + q * q;
                if r == 0.0 { 0.0 } else { -p / r }
            },
        )
    }

    pub fn scale(&self, s: Real) -> Var {
        self.unary(|v| v * s, move |_| s)
    }

    pub fn add_scalar(&self, c: Real) -> Var {
        self.unary(|v| v + c, |_| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var {
        self.unary(|v| v * v, |v| 2.0 * v)
    }

    /// Absolute value; subgradient 0 at the origin.
    pub fn abs(&self) -> Var {
        self.unary(|v| v.abs(), |v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
    }

    /// `v^p` for nonnegative inputs. The derivative at 0 is 0 for `p > 1`
    /// and clamped to 0 otherwise, which keeps compressed zeros finite.
    pub fn powf(&self, p: Real) -> Var {
        self.unary(
            move |v| v.max(0.0).powf(p),
            move |v| if v > 0.0 { p * v.powf(p - 1.0) } else { 0.0 },
        )
    }

    pub fn exp(&self) -> Var {
        self.unary(Real::exp, Real::exp)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    pub fn silu(&self) -> Var {
        self.unary(silu, silu_grad)
    }

    pub fn softplus(&self) -> Var {
        self.unary(softplus, sigmoid)
    }

    pub fn sin(&self) -> Var {
        self.unary(Real::sin, Real::cos)
    }

    pub fn cos(&self) -> Var {
        self.unary(Real::cos, |v| -v.sin())
    }

    pub fn activation(&self, kind: Activation) -> Var {
        match kind {
            Activation::Silu => self.silu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Exp => self.exp(),
            Activation::Softplus => self.softplus(),
        }
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        self.tape()
            .op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1) as Real;
        self.sum().scale(1.0 / n)
    }
}

/// Sum of several same-shape variables.
pub fn sum_all(vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars.split_first().expect("sum_all of empty list");
    rest.iter().try_fold(first.clone(), |acc, v| acc.add(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_reference_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - (2.0 as Real).ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_saturates_without_overflow() {
        for v in [-800.0, -40.0, 0.0, 30.0, 800.0] {
            let s = softplus(v);
            assert!(s.is_finite() && s >= 0.0, "softplus({v}) = {s}");
        }
        assert_eq!(softplus(800.0), 800.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn atan2_axis_cases() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap());
        let q = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let phase = p.atan2(&q).unwrap();
        let d = phase.value().data();
        assert!((d[0] - std::f64::consts::FRAC_PI_2 as Real).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&[7], -2.0, 2.0, &mut rng);
            let y = Tensor::rand_uniform(&[7], 0.5, 2.0, &mut rng);
            let report = grad_check(
                |v| {
                    let t = v.tape();
                    let other = t.constant(y.clone());
                    let a = v.silu().mul(&other)?;
                    let b = v.sigmoid().add(&v.softplus())?;
                    let c = v.sin().mul(&v.cos())?.add(&v.exp().scale(0.1))?;
                    let d = other.atan2(&v)?;
                    Ok(a.add(&b)?.add(&c)?.add(&d)?.sum())
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
