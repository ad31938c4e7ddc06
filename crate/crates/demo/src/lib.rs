//! Browser bindings for `www/index.html`: the impulse response of a
//! discretized state-space channel, a synthetic noisy mixture with its
//! spectrogram, and perceptual contrast stretching of that spectrogram.

use mseunet::signal::{stft, SpectroPair, SAMPLE_RATE};
use mseunet::ssm::{ssm_kernel, DiscreteSsm};
use mseunet::tensor::{Real, Tensor};
use mseunet::train::{mix_at_snr, pcs_stretch, si_sdr, synth_clean, synth_noise, NoiseKind, PcsBands};
use wasm_bindgen::prelude::*;

fn js_err(e: mseunet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Impulse response `C·Āᵏ·B̄` of a single-pole system with pole `a < 0`,
/// input gain `b`, output gain `c` and step `delta`, for `k < len`.
#[wasm_bindgen]
pub fn ssm_impulse_response(a: f64, b: f64, c: f64, delta: f64, len: usize) -> Result<Vec<f64>, JsError> {
    impulse_response(a, b, c, delta, len).map_err(js_err)
}

pub fn impulse_response(a: f64, b: f64, c: f64, delta: f64, len: usize) -> mseunet::Result<Vec<f64>> {
    let t = |v: f64| Tensor::full(&[1, 1], v as Real);
    let sys = DiscreteSsm::from_continuous(&t(a), &t(b), &t(c), &[delta as Real])?;
    Ok(ssm_kernel(&sys, len)?.data().iter().map(|&v| v as f64).collect())
}

/// One second of synthetic speech mixed with noise at a chosen SNR.
#[wasm_bindgen]
pub struct Mixture {
    clean: Vec<Real>,
    noisy: Vec<Real>,
    spec: SpectroPair,
}

#[wasm_bindgen]
impl Mixture {
    /// `noise` is one of `white`, `pink`, `babble`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, snr_db: f64, noise: &str) -> Result<Mixture, JsError> {
        let kind: NoiseKind = noise
            .parse()
            .map_err(|_| JsError::new(&format!("unknown noise kind {noise:?}")))?;
        Self::build(seed, snr_db, kind).map_err(js_err)
    }

    pub fn frames(&self) -> usize {
        self.spec.frames()
    }

    pub fn bins(&self) -> usize {
        self.spec.bins()
    }

    /// SI-SDR of the mixture against the clean signal, in dB.
    pub fn si_sdr_db(&self) -> Result<f64, JsError> {
        self.noisy_si_sdr().map_err(js_err)
    }

    /// Noisy waveform as 32-bit floats for Web Audio playback.
    pub fn samples(&self) -> Vec<f32> {
        self.noisy.iter().map(|&v| v as f32).collect()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// `20·log10(|X| + 1e-5)`, frame-major `[frames × bins]`.
    pub fn log_magnitude(&self) -> Vec<f32> {
        log_db(&self.spec)
    }

    /// Log magnitude after contrast stretching with one exponent below
    /// `split_hz` and another above it.
    pub fn stretched(&self, split_hz: f64, gamma_low: f64, gamma_high: f64) -> Result<Vec<f32>, JsError> {
        self.stretch_db(split_hz, gamma_low, gamma_high).map_err(js_err)
    }
}

impl Mixture {
    pub fn build(seed: u64, snr_db: f64, kind: NoiseKind) -> mseunet::Result<Mixture> {
        let clean = synth_clean(seed, 1.0);
        let n = synth_noise(seed.wrapping_add(1), kind, 1.0);
        let (noisy, _) = mix_at_snr(&clean, &n, snr_db as Real)?;
        let spec = stft(&noisy)?;
        Ok(Self {
            clean: clean.samples,
            noisy: noisy.samples,
            spec,
        })
    }

    pub fn noisy_si_sdr(&self) -> mseunet::Result<f64> {
        si_sdr(&self.noisy, &self.clean)
    }

    pub fn stretch_db(&self, split_hz: f64, gamma_low: f64, gamma_high: f64) -> mseunet::Result<Vec<f32>> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let bands = if split_hz > 0.0 && split_hz < nyquist {
            PcsBands {
                edges_hz: vec![0.0, split_hz, nyquist],
                gammas: vec![gamma_low as Real, gamma_high as Real],
            }
        } else {
            PcsBands::uniform(gamma_low as Real)
        };
        Ok(log_db(&pcs_stretch(&self.spec, &bands, SAMPLE_RATE)?))
    }
}

fn log_db(s: &SpectroPair) -> Vec<f32> {
    s.magnitude.data().iter().map(|&m| (20.0 * (m as f64 + 1e-5).log10()) as f32).collect()
}
