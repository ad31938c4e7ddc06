//! Diagonal state-space models: zero-order-hold discretization, the
//! recurrent and global-convolution forms of a time-invariant system, and
//! the input-dependent (selective) scan.

mod selective;

pub use selective::{selective_scan, selective_scan_chunked, selective_scan_raw, SsmParams};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this `|ΔA|` the input matrix uses its series limit.
pub const ZOH_SERIES_THRESHOLD: Real = 1e-6;

/// `(e^a, φ(a))` with `φ(a) = (e^a − 1)/a`, the factor mapping `ΔB` to
/// `B̄`, from a single `expm1`.
#[inline]
pub(crate) fn zoh_terms(a: Real) -> (Real, Real) {
    let em = a.exp_m1();
    let ph = if a.abs() < ZOH_SERIES_THRESHOLD { 1.0 + 0.5 * a } else { em / a };
    (1.0 + em, ph)
}

/// `φ'(a)` given `e^a` and `φ(a)`, with a Taylor expansion where the
/// closed form cancels.
#[inline]
pub(crate) fn phi_prime_from(a: Real, abar: Real, ph: Real) -> Real {
    if a.abs() < 1e-3 {
        0.5 + a * (1.0 / 3.0 + a * (0.125 + a / 30.0))
    } else {
        (abar - ph) / a
    }
}

/// Scalar zero-order hold: `(e^{Δa}, φ(Δa)·Δb)`.
pub fn zoh(a: Real, b: Real, delta: Real) -> Result<(Real, Real)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid("discretize_zoh", format!("step must be positive and finite, got {delta}")));
    }
    let (abar, ph) = zoh_terms(delta * a);
    Ok((abar, delta * ph * b))
}

/// Elementwise zero-order hold over a diagonal system.
///
/// `a`, `b` and `delta` share a shape, or `delta` holds a single step.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(shape_err("discretize_zoh", a.shape(), b.shape()));
    }
    let step = |i: usize| -> Real {
        if delta.len() == 1 {
            delta.data()[0]
        } else {
            delta.data()[i]
        }
    };
    if delta.len() != 1 && delta.shape() != a.shape() {
        return Err(shape_err("discretize_zoh", a.shape(), delta.shape()));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (i, (&av, &bv)) in a.data().iter().zip(b.data()).enumerate() {
        let (x, y) = zoh(av, bv, step(i))?;
        a_bar.push(x);
        b_bar.push(y);
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), a_bar),
        Tensor::from_parts(a.shape().to_vec(), b_bar),
    ))
}

/// Discretized diagonal system with per-step parameters `[S × D × N]`.
///
/// `S = 1` is a time-invariant system; `S = L` gives one parameter set per
/// frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c: Tensor,
}

impl DiscreteSsm {
    pub fn new(a_bar: Tensor, b_bar: Tensor, c: Tensor) -> Result<Self> {
        let as3 = |t: Tensor| -> Result<Tensor> {
            match t.rank() {
                2 => {
                    let s = t.shape().to_vec();
                    t.reshape(&[1, s[0], s[1]])
                }
                3 => Ok(t),
                _ => Err(shape_err("discrete_ssm", t.shape(), &[1, 0, 0])),
            }
        };
        let (a_bar, b_bar, c) = (as3(a_bar)?, as3(b_bar)?, as3(c)?);
        if a_bar.shape() != b_bar.shape() || a_bar.shape() != c.shape() {
            return Err(shape_err("discrete_ssm", a_bar.shape(), c.shape()));
        }
        Ok(Self { a_bar, b_bar, c })
    }

    /// Time-invariant system from continuous `A`, `B`, `C` (all `[D × N]`)
    /// and per-channel steps `delta[D]`.
    pub fn from_continuous(a: &Tensor, b: &Tensor, c: &Tensor, delta: &[Real]) -> Result<Self> {
        let (d, n) = a.dims2()?;
        if delta.len() != d {
            return Err(shape_err("discrete_ssm", &[d], &[delta.len()]));
        }
        let steps = Tensor::from_fn(&[d, n], |i| delta[i / n]);
        let (a_bar, b_bar) = discretize_zoh(a, b, &steps)?;
        Self::new(a_bar, b_bar, c.clone())
    }

    pub fn steps(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a_bar.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.shape()[2]
    }

    pub fn is_time_invariant(&self) -> bool {
        self.steps() == 1
    }

    fn step_offset(&self, t: usize) -> usize {
        let s = if self.is_time_invariant() { 0 } else { t };
        s * self.channels() * self.state_dim()
    }
}

/// Hidden state `[D × N]` at frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Tensor,
    pub t: usize,
}

impl ScanState {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            h: Tensor::zeros(&[d, n]),
            t: 0,
        }
    }

    /// Advance one frame with input `x[D]` and return `y[D]`.
    pub fn step(&mut self, sys: &DiscreteSsm, x: &[Real]) -> Result<Vec<Real>> {
        let (d, n) = (sys.channels(), sys.state_dim());
        if x.len() != d || self.h.shape() != [d, n] {
            return Err(shape_err("scan_step", &[d, n], self.h.shape()));
        }
        if !sys.is_time_invariant() && self.t >= sys.steps() {
            return Err(invalid("scan_step", format!("frame {} beyond {} parameter steps", self.t, sys.steps())));
        }
        let off = sys.step_offset(self.t);
        let (ab, bb, c) = (sys.a_bar.data(), sys.b_bar.data(), sys.c.data());
        let h = self.h.data_mut();
        let mut y = vec![0.0; d];
        for (ch, yv) in y.iter_mut().enumerate() {
            let u = x[ch];
            for k in ch * n..(ch + 1) * n {
                h[k] = ab[off + k] * h[k] + bb[off + k] * u;
                *yv += c[off + k] * h[k];
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "scan state",
                frame: self.t,
            });
        }
        self.t += 1;
        Ok(y)
    }
}

fn check_input(sys: &DiscreteSsm, x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (l, d) = x.dims2()?;
    if d != sys.channels() {
        return Err(shape_err(op, x.shape(), sys.a_bar.shape()));
    }
    if !sys.is_time_invariant() && sys.steps() != l {
        return Err(invalid(op, format!("{} parameter steps for {l} frames", sys.steps())));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "scan input",
            frame: i / d,
        });
    }
    Ok((l, d))
}

/// Sequential recurrence `h(t) = Āh(t−1) + B̄x(t)`, `y(t) = Σₙ C h(t)`,
/// from `h(−1) = 0`. Input and output are `[L × D]`.
pub fn ssm_scan_recurrent(sys: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    let (l, d) = check_input(sys, x, "ssm_scan_recurrent")?;
    let mut state = ScanState::zeros(d, sys.state_dim());
    let mut out = Vec::with_capacity(l * d);
    for t in 0..l {
        out.extend(state.step(sys, &x.data()[t * d..(t + 1) * d])?);
    }
    Ok(Tensor::from_parts(vec![l, d], out))
}

/// Impulse response `K̄[k, d] = Σₙ C Ā^k B̄` for `k < len`, shape `[len × D]`.
pub fn ssm_kernel(sys: &DiscreteSsm, len: usize) -> Result<Tensor> {
    if !sys.is_time_invariant() {
        return Err(invalid(
            "ssm_kernel",
            "global convolution needs time-invariant parameters",
        ));
    }
    let (d, n) = (sys.channels(), sys.state_dim());
    let (ab, bb, c) = (sys.a_bar.data(), sys.b_bar.data(), sys.c.data());
    let mut k = vec![0.0; len * d];
    let mut pow = bb.to_vec();
    for step in 0..len {
        for ch in 0..d {
            let mut acc = 0.0;
            for j in ch * n..(ch + 1) * n {
                acc += c[j] * pow[j];
            }
            k[step * d + ch] = acc;
        }
        for (p, a) in pow.iter_mut().zip(ab) {
            *p *= a;
        }
    }
    Ok(Tensor::from_parts(vec![len, d], k))
}

/// Causal convolution of `x[L × D]` with the system's impulse response.
pub fn ssm_kernel_conv(sys: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    let (l, d) = check_input(sys, x, "ssm_kernel_conv")?;
    let k = ssm_kernel(sys, l)?;
    let (kd, xd) = (k.data(), x.data());
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = 0.0;
            for s in 0..=t {
                acc += kd[s * d + ch] * xd[(t - s) * d + ch];
            }
            y[t * d + ch] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![l, d], y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `exp(M)` for a 2×2 matrix by scaling and squaring a Taylor series.
    fn expm2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let norm = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut s = 0;
        while norm / (1u64 << s) as f64 > 0.25 {
            s += 1;
        }
        let scale = (1u64 << s) as f64;
        let a = [[m[0][0] / scale, m[0][1] / scale], [m[1][0] / scale, m[1][1] / scale]];
        let mul = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
                }
            }
            r
        };
        let mut sum = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = sum;
        for k in 1..30 {
            term = mul(term, a);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= k as f64;
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    sum[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            sum = mul(sum, sum);
        }
        sum
    }

    /// Ā and B̄ read off `exp([[aΔ, bΔ], [0, 0]])`.
    fn zoh_oracle(a: f64, b: f64, delta: f64) -> (f64, f64) {
        let e = expm2([[a * delta, b * delta], [0.0, 0.0]]);
        (e[0][0], e[0][1])
    }

    #[test]
    fn zoh_worked_examples() {
        let (ab, bb) = zoh(-1.0, 1.0, 0.1).unwrap();
        assert!((ab - 0.904837).abs() < 1e-6);
        assert!((bb - 0.0951626).abs() < 1e-7);
        let (ab, bb) = zoh(0.0, 2.0, 0.3).unwrap();
        assert_eq!(ab, 1.0);
        assert!((bb - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(zoh(-1.0, 1.0, 0.0).is_err());
        assert!(zoh(-1.0, 1.0, -0.1).is_err());
        assert!(zoh(-1.0, 1.0, Real::NAN).is_err());
    }

    #[test]
    fn zoh_matches_matrix_exponential_across_step_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let delta = 10f64.powf(rng.gen_range(-8.0..0.0));
            let a = -rng.gen_range(0.01..10.0);
            let b = rng.gen_range(-2.0..2.0);
            let (ab, bb) = zoh(a as Real, b as Real, delta as Real).unwrap();
            let (oa, ob) = zoh_oracle(a, b, delta);
            assert!((ab as f64 - oa).abs() < 1e-9, "Ā at a={a} Δ={delta}");
            assert!((bb as f64 - ob).abs() < 1e-9, "B̄ at a={a} Δ={delta}");
        }
    }

    #[test]
    fn phi_prime_matches_difference_quotient() {
        let exact = |a: Real| a.exp_m1() / a;
        let phi_prime = |a: Real| {
            let (e, p) = zoh_terms(a);
            phi_prime_from(a, e, p)
        };
        assert_eq!(phi_prime(0.0), 0.5);
        for &a in &[-3.0, -0.5, -2e-3, -5e-4, -1e-4, 2e-4, 0.7] {
            let h = 1e-5;
            let num = (exact(a + h) - exact(a - h)) / (2.0 * h);
            assert!((phi_prime(a) - num).abs() < 1e-6, "a={a}");
        }
    }

    #[test]
    fn geometric_impulse_response() {
        let one = |v: Real| Tensor::full(&[1, 1], v);
        let sys = DiscreteSsm::new(one(0.5), one(1.0), one(1.0)).unwrap();
        let x = Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ssm_scan_recurrent(&sys, &x).unwrap().data(), &[1.0, 0.5, 0.25]);
        assert_eq!(ssm_kernel(&sys, 3).unwrap().data(), &[1.0, 0.5, 0.25]);
        let zero = Tensor::zeros(&[4, 1]);
        assert_eq!(ssm_scan_recurrent(&sys, &zero).unwrap(), zero);
        let single = Tensor::full(&[1, 1], 3.0);
        assert_eq!(ssm_kernel_conv(&sys, &single).unwrap().data(), &[3.0]);
    }

    fn random_lti(rng: &mut ChaCha8Rng) -> (DiscreteSsm, Tensor) {
        let l = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let a = Tensor::rand_uniform(&[d, n], -4.0, -0.05, rng);
        let b = Tensor::rand_uniform(&[d, n], -1.0, 1.0, rng);
        let c = Tensor::rand_uniform(&[d, n], -1.0, 1.0, rng);
        let delta: Vec<Real> = (0..d).map(|_| rng.gen_range(0.001..1.0)).collect();
        let x = Tensor::rand_uniform(&[l, d], -1.0, 1.0, rng);
        (DiscreteSsm::from_continuous(&a, &b, &c, &delta).unwrap(), x)
    }

    #[test]
    fn recurrent_and_kernel_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (sys, x) = random_lti(&mut rng);
            let y1 = ssm_scan_recurrent(&sys, &x).unwrap();
            let y2 = ssm_kernel_conv(&sys, &x).unwrap();
            assert!(y1.max_abs_diff(&y2) < 1e-6);
        }
    }

    #[test]
    fn kernel_form_rejects_time_varying_parameters() {
        let t = Tensor::full(&[3, 1, 1], 0.5);
        let sys = DiscreteSsm::new(t.clone(), t.clone(), t).unwrap();
        assert!(ssm_kernel_conv(&sys, &Tensor::zeros(&[3, 1])).is_err());
        assert!(ssm_scan_recurrent(&sys, &Tensor::zeros(&[3, 1])).is_ok());
    }

    #[test]
    fn state_norm_stays_within_geometric_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (sys, x) = random_lti(&mut rng);
            let max_a = sys.a_bar.data().iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
            let bound = sys.b_bar.norm() * x.max_abs() / (1.0 - max_a);
            let (l, d) = x.dims2().unwrap();
            let mut st = ScanState::zeros(d, sys.state_dim());
            for t in 0..l {
                st.step(&sys, &x.data()[t * d..(t + 1) * d]).unwrap();
                assert!(st.h.norm() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn output_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (sys, x) = random_lti(&mut rng);
        let (l, d) = x.dims2().unwrap();
        let y = ssm_scan_recurrent(&sys, &x).unwrap();
        let cut = l / 2;
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[(cut + 1) * d..] {
            *v += 1.0;
        }
        let y2 = ssm_scan_recurrent(&sys, &x2).unwrap();
        assert_eq!(y.data()[..(cut + 1) * d], y2.data()[..(cut + 1) * d]);
    }

    #[test]
    fn non_finite_input_reports_frame() {
        let one = |v: Real| Tensor::full(&[1, 1], v);
        let sys = DiscreteSsm::new(one(0.5), one(1.0), one(1.0)).unwrap();
        let x = Tensor::new(&[3, 1], vec![0.0, 0.0, Real::INFINITY]).unwrap();
        assert!(matches!(ssm_scan_recurrent(&sys, &x), Err(Error::NonFinite { frame: 2, .. })));
    }
}
