//! Waveform I/O and the STFT/ISTFT analysis–synthesis pair.

mod stft;
mod wav;

pub use stft::{istft, istft_var, stft, Stft};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono samples in [−1, 1] with their sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("audio", "sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid("audio", format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> Real {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<Real>() / self.samples.len() as Real
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameParams {
    pub fft_len: usize,
    pub win_len: usize,
    pub hop: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            fft_len: 510,
            win_len: 510,
            hop: 120,
        }
    }
}

impl FrameParams {
    /// One-sided bin count.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples with center padding.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Magnitude and phase planes, both `[T × F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroPair {
    pub magnitude: Tensor,
    pub phase: Tensor,
    pub frame: FrameParams,
}

impl SpectroPair {
    pub fn frames(&self) -> usize {
        self.magnitude.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.magnitude.shape()[1]
    }

    /// Real and imaginary planes `m·cos φ`, `m·sin φ`.
    pub fn to_complex(&self) -> (Tensor, Tensor) {
        let re = self
            .magnitude
            .zip_map(&self.phase, |m, p| m * p.cos())
            .expect("magnitude/phase shapes agree");
        let im = self
            .magnitude
            .zip_map(&self.phase, |m, p| m * p.sin())
            .expect("magnitude/phase shapes agree");
        (re, im)
    }

    /// Magnitude nonnegative, phase in (−π, π], F = fft_len/2 + 1.
    pub fn validate(&self) -> Result<()> {
        let f = self.frame.bins();
        if self.magnitude.rank() != 2 || self.magnitude.shape()[1] != f || self.magnitude.shape() != self.phase.shape() {
            return Err(invalid(
                "spectro_pair",
                format!(
                    "magnitude {:?} / phase {:?} inconsistent with {f} bins",
                    self.magnitude.shape(),
                    self.phase.shape()
                ),
            ));
        }
        if self.magnitude.data().iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(invalid("spectro_pair", "magnitude must be finite and nonnegative"));
        }
        let pi = std::f64::consts::PI as Real;
        if self.phase.data().iter().any(|&p| !(p > -pi && p <= pi)) {
            return Err(invalid("spectro_pair", "phase outside (−π, π]"));
        }
        Ok(())
    }
}

/// Wrap an angle into (−π, π].
pub fn wrap_phase(p: Real) -> Real {
    let pi = std::f64::consts::PI as Real;
    let tau = 2.0 * pi;
    let mut q = p - tau * ((p + pi) / tau).floor();
    // q in [−π, π)
    if q <= -pi {
        q += tau;
    }
    q
}
