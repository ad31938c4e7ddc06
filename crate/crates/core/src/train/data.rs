//! Synthetic voiced speech, noise, and mixing at a target SNR.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::signal::{AudioBuffer, SAMPLE_RATE};
use crate::tensor::Real;

const PEAK: f64 = 0.5;
const NOISE_RMS: f64 = 0.1;

fn samples_for(duration_s: f64) -> usize {
    (duration_s * SAMPLE_RATE as f64).round().max(0.0) as usize
}

/// A harmonic source with a slowly drifting fundamental and a syllable-rate
/// amplitude envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub drift_depth: f64,
    pub drift_rate: f64,
    pub drift_phase: f64,
    pub harmonics: Vec<f64>,
    pub env_rate: f64,
    pub env_phase: f64,
}

impl Voice {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(3..=6);
        Self {
            f0: rng.gen_range(120.0..250.0),
            drift_depth: rng.gen_range(0.02..0.15),
            drift_rate: rng.gen_range(0.5..3.0),
            drift_phase: rng.gen_range(0.0..2.0 * PI),
            harmonics: (1..=count).map(|k| rng.gen_range(0.5..1.0) / k as f64).collect(),
            env_rate: rng.gen_range(2.0..5.0),
            env_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Fundamental at `t` seconds; stays within [100, 300] Hz.
    pub fn f0_at(&self, t: f64) -> f64 {
        self.f0 * (1.0 + self.drift_depth * (2.0 * PI * self.drift_rate * t + self.drift_phase).sin())
    }

    fn envelope(&self, t: f64) -> f64 {
        0.55 - 0.45 * (2.0 * PI * self.env_rate * t + self.env_phase).cos()
    }

    /// Unnormalized samples.
    pub fn render_raw(&self, len: usize) -> Vec<f64> {
        let sr = SAMPLE_RATE as f64;
        let mut theta = 0.0;
        (0..len)
            .map(|i| {
                let t = i as f64 / sr;
                let v: f64 = self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * ((k + 1) as f64 * theta).sin())
                    .sum();
                theta = (theta + 2.0 * PI * self.f0_at(t) / sr) % (2.0 * PI);
                v * self.envelope(t)
            })
            .collect()
    }
}

fn scale_peak(x: Vec<f64>, peak: f64) -> Vec<Real> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let s = if m > 0.0 { peak / m } else { 0.0 };
    x.into_iter().map(|v| (v * s) as Real).collect()
}

fn scale_rms(x: Vec<f64>, rms: f64) -> Vec<Real> {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let s = if p > 0.0 { rms / p.sqrt() } else { 0.0 };
    x.into_iter().map(|v| (v * s) as Real).collect()
}

/// Clean stand-in for speech, peak 0.5; identical for identical seeds.
pub fn synth_clean(seed: u64, duration_s: f64) -> AudioBuffer {
    let raw = Voice::from_seed(seed).render_raw(samples_for(duration_s));
    AudioBuffer {
        samples: scale_peak(raw, PEAK),
        sample_rate: SAMPLE_RATE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    /// Several overlapping voices.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

impl FromStr for NoiseKind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "babble" => Ok(Self::Babble),
            _ => Err(()),
        }
    }
}

/// Noise at RMS 0.1.
pub fn synth_noise(seed: u64, kind: NoiseKind, duration_s: f64) -> AudioBuffer {
    let len = samples_for(duration_s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::Pink => {
            // Kellet's economy filter: -3 dB/octave above ~10 Hz
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for _ in 0..6 {
                let v = Voice::from_seed(rng.gen());
                let gain = rng.gen_range(0.5..1.0);
                for (a, s) in acc.iter_mut().zip(v.render_raw(len)) {
                    *a += gain * s;
                }
            }
            acc
        }
    };
    AudioBuffer {
        samples: scale_rms(raw, NOISE_RMS),
        sample_rate: SAMPLE_RATE,
    }
}

/// `(noisy, scaled_noise)` with `noisy = clean + scale·noise` and
/// `scale = √(P_clean / (P_noise·10^{snr/10}))`. `snr_db = +∞` gives no noise.
pub fn mix_at_snr(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: Real) -> Result<(AudioBuffer, AudioBuffer)> {
    if clean.len() != noise.len() {
        return Err(invalid(
            "mix_at_snr",
            format!("length mismatch: clean {} vs noise {}", clean.len(), noise.len()),
        ));
    }
    if snr_db.is_nan() || snr_db == Real::NEG_INFINITY {
        return Err(invalid("mix_at_snr", format!("bad target SNR {snr_db}")));
    }
    let (pc, pn) = (clean.power(), noise.power());
    if !(pc > 0.0) || !(pn > 0.0) {
        return Err(invalid("mix_at_snr", "clean and noise must both have nonzero power"));
    }
    let scale = (pc / (pn * (10.0 as Real).powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<Real> = noise.samples.iter().map(|v| v * scale).collect();
    let noisy = clean.samples.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((
        AudioBuffer::new(noisy, clean.sample_rate)?,
        AudioBuffer::new(scaled, clean.sample_rate)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    Synthetic,
    /// Segments cut from a recording.
    Recording(AudioBuffer),
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSource {
    Synthetic(NoiseKind),
    Recording(AudioBuffer),
}

/// Everything needed to produce one training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub snr_db: Real,
    pub clean: CleanSource,
    pub noise: NoiseSource,
    pub seed: u64,
}

/// `len` samples of `src` from a seeded offset, wrapping around if short.
fn segment(src: &AudioBuffer, len: usize, rng: &mut ChaCha8Rng) -> Result<AudioBuffer> {
    if src.is_empty() {
        return Err(invalid("mix_spec", "empty recording"));
    }
    let start = if src.len() > len { rng.gen_range(0..=src.len() - len) } else { 0 };
    let samples = (0..len).map(|i| src.samples[(start + i) % src.len()]).collect();
    AudioBuffer::new(samples, src.sample_rate)
}

impl MixSpec {
    /// `(clean, noisy)` of `len` samples.
    pub fn render(&self, len: usize) -> Result<(AudioBuffer, AudioBuffer)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let duration = len as f64 / SAMPLE_RATE as f64;
        let clean = match &self.clean {
            CleanSource::Synthetic => {
                let mut c = synth_clean(rng.gen(), duration);
                c.samples.truncate(len);
                c
            }
            CleanSource::Recording(a) => segment(a, len, &mut rng)?,
        };
        let noise = match &self.noise {
            NoiseSource::Synthetic(kind) => {
                let mut n = synth_noise(rng.gen(), *kind, duration);
                n.samples.truncate(len);
                n
            }
            NoiseSource::Recording(a) => segment(a, len, &mut rng)?,
        };
        let (noisy, _) = mix_at_snr(&clean, &noise, self.snr_db)?;
        Ok((clean, noisy))
    }
}
