//! SI-SDR and perceptual contrast stretching.

use crate::error::{invalid, Result};
use crate::signal::SpectroPair;
use crate::tensor::Real;

pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant SDR of `estimate` against `reference`, in dB, clamped
/// to ±100.
pub fn si_sdr(estimate: &[Real], reference: &[Real]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(invalid(
            "si_sdr",
            format!("length mismatch: {} vs {}", estimate.len(), reference.len()),
        ));
    }
    let ss: f64 = reference.iter().map(|&s| (s as f64).powi(2)).sum();
    if !(ss > 0.0) {
        return Err(invalid("si_sdr", "reference has zero energy"));
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(&e, &s)| e as f64 * s as f64).sum();
    let alpha = dot / ss;
    let (mut target, mut resid) = (0.0, 0.0);
    for (&e, &s) in estimate.iter().zip(reference) {
        let t = alpha * s as f64;
        target += t * t;
        resid += (e as f64 - t).powi(2);
    }
    let db = if target == 0.0 {
        -SI_SDR_CAP_DB
    } else if resid == 0.0 {
        SI_SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Frequency bands with one exponent each.
#[derive(Clone, Debug, PartialEq)]
pub struct PcsBands {
    /// Increasing edges in Hz from 0 to the Nyquist frequency.
    pub edges_hz: Vec<f64>,
    pub gammas: Vec<Real>,
}

impl PcsBands {
    /// One band over the whole spectrum.
    pub fn uniform(gamma: Real) -> Self {
        Self {
            edges_hz: vec![0.0, 8000.0],
            gammas: vec![gamma],
        }
    }

    /// Parse `gammas` and `edges_hz` from comma-separated lists.
    pub fn parse(edges: &str, gammas: &str) -> Result<Self> {
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| invalid("pcs_bands", format!("bad number {v:?}"))))
                .collect()
        };
        let b = Self {
            edges_hz: nums(edges)?,
            gammas: nums(gammas)?.into_iter().map(|g| g as Real).collect(),
        };
        b.validate(8000.0)?;
        Ok(b)
    }

    fn validate(&self, nyquist: f64) -> Result<()> {
        let e = &self.edges_hz;
        if e.len() < 2 || e.len() != self.gammas.len() + 1 {
            return Err(invalid("pcs_stretch", "need one gamma per band and at least one band"));
        }
        if e[0] != 0.0 || (e[e.len() - 1] - nyquist).abs() > 1e-9 {
            return Err(invalid("pcs_stretch", format!("band edges must span 0..{nyquist} Hz")));
        }
        if e.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("pcs_stretch", "band edges must increase"));
        }
        if self.gammas.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(invalid("pcs_stretch", "exponents must be positive"));
        }
        Ok(())
    }

    fn gamma_for(&self, hz: f64) -> Real {
        let b = self.edges_hz[1..].iter().position(|&hi| hz < hi).unwrap_or(self.gammas.len() - 1);
        self.gammas[b]
    }
}

/// Raise each magnitude to its band's exponent, then rescale so the total
/// spectral energy is unchanged. Phase is passed through.
pub fn pcs_stretch(s: &SpectroPair, bands: &PcsBands, sample_rate: u32) -> Result<SpectroPair> {
    let nyquist = sample_rate as f64 / 2.0;
    bands.validate(nyquist)?;
    let (t, f) = s.magnitude.dims2()?;
    let bin_hz = sample_rate as f64 / s.frame.fft_len as f64;
    let gammas: Vec<Real> = (0..f).map(|k| bands.gamma_for(k as f64 * bin_hz)).collect();
    let mut mag = s.magnitude.clone();
    for row in mag.data_mut().chunks_exact_mut(f) {
        for (m, &g) in row.iter_mut().zip(&gammas) {
            *m = m.powf(g);
        }
    }
    let energy = |x: &[Real]| x.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    let (e_in, e_out) = (energy(s.magnitude.data()), energy(mag.data()));
    if e_out > 0.0 && e_in != e_out {
        let k = (e_in / e_out).sqrt() as Real;
        mag.data_mut().iter_mut().for_each(|m| *m *= k);
    }
    debug_assert_eq!(mag.len(), t * f);
    Ok(SpectroPair {
        magnitude: mag,
        phase: s.phase.clone(),
        frame: s.frame,
    })
}
