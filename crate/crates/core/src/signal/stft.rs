use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{wrap_phase, AudioBuffer, FrameParams, SpectroPair, SAMPLE_RATE};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Below this window-sum-square value a synthesized sample is unrecoverable.
const WSS_FLOOR: Real = 1e-10;

/// Planned STFT/ISTFT pair with a periodic Hann window, reflect center
/// padding of `fft_len/2` and window-sum-square normalized overlap-add.
#[derive(Clone)]
pub struct Stft {
    params: FrameParams,
    /// Window zero-padded and centered to `fft_len`.
    window: Vec<Real>,
    forward: Arc<dyn Fft<Real>>,
    inverse: Arc<dyn Fft<Real>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("params", &self.params).finish()
    }
}

impl Stft {
    pub fn new(params: FrameParams) -> Result<Self> {
        let FrameParams { fft_len, win_len, hop } = params;
        if fft_len < 2 || win_len == 0 || win_len > fft_len || hop == 0 || hop > win_len {
            return Err(invalid("stft", format!("invalid frame parameters {params:?}")));
        }
        let mut window = vec![0.0; fft_len];
        let off = (fft_len - win_len) / 2;
        for n in 0..win_len {
            window[off + n] = (0.5 - 0.5 * (2.0 * PI * n as f64 / win_len as f64).cos()) as Real;
        }
        let mut planner = FftPlanner::<Real>::new();
        Ok(Self {
            params,
            window,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        })
    }

    pub fn params(&self) -> FrameParams {
        self.params
    }

    pub fn window(&self) -> &[Real] {
        &self.window
    }

    fn pad(&self) -> usize {
        self.params.fft_len / 2
    }

    /// Complex analysis: `(re, im)` planes of shape `[T × F]`.
    pub fn analyze(&self, x: &[Real]) -> Result<(Tensor, Tensor)> {
        if x.is_empty() {
            return Err(invalid("stft", "empty input"));
        }
        let FrameParams { fft_len: n, hop, .. } = self.params;
        let pad = self.pad();
        let padded = reflect_pad(x, pad);
        let frames = self.params.frames(x.len());
        let bins = self.params.bins();
        let mut re = Vec::with_capacity(frames * bins);
        let mut im = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for c in &buf[..bins] {
                re.push(c.re);
                im.push(c.im);
            }
        }
        Ok((
            Tensor::new(&[frames, bins], re)?,
            Tensor::new(&[frames, bins], im)?,
        ))
    }

    pub fn stft(&self, x: &AudioBuffer) -> Result<SpectroPair> {
        let (re, im) = self.analyze(&x.samples)?;
        let magnitude = re.zip_map(&im, |a, b| a.hypot(b))?;
        let phase = im.zip_map(&re, |b, a| if a == 0.0 && b == 0.0 { 0.0 } else { wrap_phase(b.atan2(a)) })?;
        Ok(SpectroPair {
            magnitude,
            phase,
            frame: self.params,
        })
    }

    fn window_sum_square(&self, frames: usize) -> Vec<Real> {
        let FrameParams { fft_len: n, hop, .. } = self.params;
        let mut wss = vec![0.0; (frames - 1) * hop + n];
        for t in 0..frames {
            for (i, w) in self.window.iter().enumerate() {
                wss[t * hop + i] += w * w;
            }
        }
        wss
    }

    fn check_synthesis(&self, frames: usize, bins: usize, out_len: usize) -> Result<Vec<Real>> {
        if bins != self.params.bins() || frames == 0 {
            return Err(shape_err("istft", &[frames, bins], &[frames, self.params.bins()]));
        }
        let wss = self.window_sum_square(frames);
        if out_len + self.pad() > wss.len() {
            return Err(invalid(
                "istft",
                format!("{out_len} samples requested from {frames} frames"),
            ));
        }
        let pad = self.pad();
        if let Some(i) = (0..out_len).find(|&i| wss[i + pad] < WSS_FLOOR) {
            return Err(Error::WindowUnderflow(i));
        }
        Ok(wss)
    }

    /// Overlap-add synthesis from complex planes, cropped to `out_len`.
    pub fn synthesize(&self, re: &Tensor, im: &Tensor, out_len: usize) -> Result<Vec<Real>> {
        if re.shape() != im.shape() {
            return Err(shape_err("istft", re.shape(), im.shape()));
        }
        let (frames, bins) = re.dims2()?;
        let wss = self.check_synthesis(frames, bins, out_len)?;
        let FrameParams { fft_len: n, hop, .. } = self.params;
        let mut ola = vec![0.0; wss.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as Real;
        for t in 0..frames {
            let row = t * bins..(t + 1) * bins;
            hermitian_fill(&mut buf, &re.data()[row.clone()], &im.data()[row]);
            self.inverse.process(&mut buf);
            for (i, c) in buf.iter().enumerate() {
                ola[t * hop + i] += c.re * scale * self.window[i];
            }
        }
        let pad = self.pad();
        Ok((0..out_len).map(|i| ola[i + pad] / wss[i + pad]).collect())
    }

    pub fn istft(&self, s: &SpectroPair, out_len: usize) -> Result<AudioBuffer> {
        if s.frame != self.params {
            return Err(invalid("istft", format!("frame parameters {:?} vs {:?}", s.frame, self.params)));
        }
        let (re, im) = s.to_complex();
        AudioBuffer::new(self.synthesize(&re, &im, out_len)?, SAMPLE_RATE)
    }

    /// Differentiable synthesis from complex planes `[T × F]` to `[out_len]`.
    pub fn istft_var(&self, re: &Var, im: &Var, out_len: usize) -> Result<Var> {
        let y = self.synthesize(re.value(), im.value(), out_len)?;
        let (frames, bins) = re.value().dims2()?;
        let wss = self.check_synthesis(frames, bins, out_len)?;
        let this = self.clone();
        Ok(re.tape().op(Tensor::new(&[out_len], y)?, &[re, im], move |g, _| {
            let (gre, gim) = this.synthesis_adjoint(g.data(), &wss, frames);
            vec![Some(gre), Some(gim)]
        }))
    }

    /// Transpose of [`Stft::synthesize`] with respect to the complex planes.
    fn synthesis_adjoint(&self, g: &[Real], wss: &[Real], frames: usize) -> (Tensor, Tensor) {
        let FrameParams { fft_len: n, hop, .. } = self.params;
        let bins = self.params.bins();
        let pad = self.pad();
        let mut gola = vec![0.0; wss.len()];
        for (i, &v) in g.iter().enumerate() {
            gola[i + pad] = v / wss[i + pad];
        }
        let nyquist = (n % 2 == 0).then_some(n / 2);
        let mut gre = Vec::with_capacity(frames * bins);
        let mut gim = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as Real;
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(gola[t * hop + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (k, c) in buf[..bins].iter().enumerate() {
                if k == 0 || Some(k) == nyquist {
                    gre.push(c.re * inv_n);
                    gim.push(0.0);
                } else {
                    gre.push(2.0 * c.re * inv_n);
                    gim.push(2.0 * c.im * inv_n);
                }
            }
        }
        (
            Tensor::from_parts(vec![frames, bins], gre),
            Tensor::from_parts(vec![frames, bins], gim),
        )
    }
}

/// Full-length spectrum from one-sided bins; imaginary parts of the DC and
/// Nyquist bins are ignored.
fn hermitian_fill(buf: &mut [Complex<Real>], re: &[Real], im: &[Real]) {
    let n = buf.len();
    let nyquist = (n % 2 == 0).then_some(n / 2);
    for k in 0..re.len() {
        let imag = if k == 0 || Some(k) == nyquist { 0.0 } else { im[k] };
        buf[k] = Complex::new(re[k], imag);
        if k > 0 && Some(k) != nyquist {
            buf[n - k] = Complex::new(re[k], -imag);
        }
    }
}

fn reflect_pad(x: &[Real], pad: usize) -> Vec<Real> {
    let n = x.len() as isize;
    let period = 2 * (n - 1).max(1);
    (0..x.len() + 2 * pad)
        .map(|i| {
            let mut q = (i as isize - pad as isize).rem_euclid(period);
            if q >= n {
                q = period - q;
            }
            x[q.clamp(0, n - 1) as usize]
        })
        .collect()
}

pub fn stft(x: &AudioBuffer) -> Result<SpectroPair> {
    Stft::new(FrameParams::default())?.stft(x)
}

pub fn istft(s: &SpectroPair, out_len: usize) -> Result<AudioBuffer> {
    Stft::new(s.frame)?.istft(s, out_len)
}

pub fn istft_var(re: &Var, im: &Var, out_len: usize) -> Result<Var> {
    Stft::new(FrameParams::default())?.istft_var(re, im, out_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE).unwrap()
    }

    fn rel_l2(a: &[Real], b: &[Real]) -> Real {
        let num: Real = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: Real = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    /// Direct O(N²) DFT of one windowed frame.
    fn dft_bins(frame: &[Real]) -> Vec<(Real, Real)> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                    let a = -2.0 * PI as Real * (k * i) as Real / n as Real;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn segment_framing() {
        let s = stft(&noise(30600, 1)).unwrap();
        assert_eq!(s.magnitude.shape(), &[256, 256]);
        s.validate().unwrap();
    }

    #[test]
    fn zero_input_zero_magnitude() {
        let s = stft(&AudioBuffer::new(vec![0.0; 1000], SAMPLE_RATE).unwrap()).unwrap();
        assert!(s.magnitude.data().iter().all(|&m| m == 0.0));
        let back = istft(&s, 1000).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frames_match_direct_dft() {
        let x = noise(2000, 4);
        let plan = Stft::new(FrameParams::default()).unwrap();
        let (re, im) = plan.analyze(&x.samples).unwrap();
        let padded = reflect_pad(&x.samples, 255);
        for t in [0usize, 7, 16] {
            let frame: Vec<Real> = (0..510).map(|i| padded[t * 120 + i] * plan.window()[i]).collect();
            for (k, (r, i)) in dft_bins(&frame).into_iter().enumerate() {
                assert!((re.data()[t * 256 + k] - r).abs() < 1e-9);
                assert!((im.data()[t * 256 + k] - i).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bin_centered_sinusoid_peaks_at_its_bin() {
        for k in [5usize, 23, 100] {
            let f = k as f64 * 16000.0 / 510.0;
            let x: Vec<Real> = (0..8000)
                .map(|n| (0.5 * (2.0 * PI * f * n as f64 / 16000.0).sin()) as Real)
                .collect();
            let s = stft(&AudioBuffer::new(x, SAMPLE_RATE).unwrap()).unwrap();
            let t = s.frames();
            let mean: Vec<Real> = (0..256)
                .map(|b| (0..t).map(|r| s.magnitude.data()[r * 256 + b]).sum::<Real>())
                .collect();
            let argmax = (0..256).max_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap()).unwrap();
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        for (len, seed) in [(30600usize, 2u64), (510, 3), (16001, 5)] {
            let x = noise(len, seed);
            let s = stft(&x).unwrap();
            let y = istft(&s, len).unwrap();
            assert!(rel_l2(&y.samples, &x.samples) < 1e-6, "len {len}");
        }
    }

    #[test]
    fn phase_periodicity() {
        let x = noise(3000, 8);
        let s = stft(&x).unwrap();
        let mut shifted = s.clone();
        shifted.phase = s.phase.map(|p| p + 2.0 * PI as Real);
        let a = istft(&s, 3000).unwrap();
        let b = istft(&shifted, 3000).unwrap();
        assert!(rel_l2(&b.samples, &a.samples) < 1e-12);
    }

    #[test]
    fn magnitude_is_lipschitz_in_the_input() {
        // Parseval: ‖mag‖² ≤ N · max(wss) · ‖padded x‖²; mag(αx) = |α|·mag(x)
        let plan = Stft::new(FrameParams::default()).unwrap();
        let max_wss = plan.window_sum_square(10).into_iter().fold(0.0, Real::max);
        for seed in 0..5 {
            let x = noise(4000, 20 + seed);
            let s = plan.stft(&x).unwrap();
            let padded = reflect_pad(&x.samples, 255);
            let bound = (510.0 * max_wss * padded.iter().map(|v| v * v).sum::<Real>()).sqrt();
            assert!(s.magnitude.norm() <= bound);
            let scaled = AudioBuffer::new(x.samples.iter().map(|v| -0.3 * v).collect(), SAMPLE_RATE).unwrap();
            let s2 = plan.stft(&scaled).unwrap();
            assert!(s2.magnitude.max_abs_diff(&s.magnitude.scale(0.3)) < 1e-9);
        }
    }

    #[test]
    fn inconsistent_lengths_are_rejected() {
        let plan = Stft::new(FrameParams::default()).unwrap();
        let (re, im) = plan.analyze(&noise(600, 1).samples).unwrap();
        assert!(plan.synthesize(&re, &im, 100_000).is_err());
        assert!(plan.analyze(&[]).is_err());
    }

    #[test]
    fn istft_gradient_matches_finite_differences() {
        let plan = Stft::new(FrameParams { fft_len: 16, win_len: 16, hop: 4 }).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let re = Tensor::rand_uniform(&[6, 9], -1.0, 1.0, &mut rng);
            let im = Tensor::rand_uniform(&[6, 9], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&[20], -1.0, 1.0, &mut rng);
            let f = |which: usize| {
                let (re, im, w, plan) = (re.clone(), im.clone(), w.clone(), plan.clone());
                move |v: &Var| {
                    let t = v.tape();
                    let (a, b) = if which == 0 { (v.clone(), t.constant(im.clone())) } else { (t.constant(re.clone()), v.clone()) };
                    let y = plan.istft_var(&a, &b, 20)?;
                    Ok(y.mul(&t.constant(w.clone()))?.square().sum())
                }
            };
            let r = grad_check(f(0), &re, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "re seed {seed}: {r:?}");
            let r = grad_check(f(1), &im, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "im seed {seed}: {r:?}");
        }
    }
}
