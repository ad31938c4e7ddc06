//! Invariant suites runnable from the command line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, Network};
use crate::nn::{Ctx, Init, ParamStore};
use crate::signal::{istft, stft, AudioBuffer, SAMPLE_RATE};
use crate::ssm::{selective_scan, selective_scan_chunked, ssm_kernel_conv, ssm_scan_recurrent, zoh, DiscreteSsm, SsmParams};
use crate::tensor::{grad_check, Real, Tape, Tensor};
use crate::train::{mix_at_snr, pcs_stretch, si_sdr, synth_clean, synth_noise, NoiseKind, PcsBands};

type Check = fn() -> Result<(), String>;

pub const SUITES: [&str; 5] = ["ssm", "grad", "signal", "metrics", "model"];

fn suite(name: &str) -> Option<Vec<(&'static str, Check)>> {
    let checks: Vec<(&'static str, Check)> = match name {
        "ssm" => vec![
            ("zoh_worked_example", zoh_worked_example),
            ("recurrent_equals_convolution", recurrent_equals_convolution),
            ("chunked_equals_sequential", chunked_equals_sequential),
        ],
        "grad" => vec![("selective_scan_gradient", selective_scan_gradient)],
        "signal" => vec![("stft_round_trip", stft_round_trip), ("stft_frame_count", stft_frame_count)],
        "metrics" => vec![
            ("mix_hits_target_snr", mix_hits_target_snr),
            ("si_sdr_scale_invariance", si_sdr_scale_invariance),
            ("pcs_unit_identity", pcs_unit_identity),
        ],
        "model" => vec![("forward_preserves_length", forward_preserves_length)],
        _ => return None,
    };
    Some(checks)
}

/// Run one suite, or all of them. Returns the names of failed checks, or
/// `None` for an unknown suite.
pub fn run(name: Option<&str>, mut report: impl FnMut(&str, &Result<(), String>)) -> Option<Vec<String>> {
    let names: Vec<&str> = match name {
        Some(n) => vec![n],
        None => SUITES.to_vec(),
    };
    let mut failed = vec![];
    for s in names {
        for (check, f) in suite(s)? {
            let r = f();
            let full = format!("{s}::{check}");
            report(&full, &r);
            if r.is_err() {
                failed.push(full);
            }
        }
    }
    Some(failed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn zoh_worked_example() -> Result<(), String> {
    let (a, b) = zoh(-1.0, 1.0, 0.1).map_err(err)?;
    ensure((a - 0.904837).abs() < 1e-6 && (b - 0.0951626).abs() < 1e-7, || format!("got ({a}, {b})"))
}

fn random_ssm(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<DiscreteSsm, String> {
    let a = Tensor::rand_uniform(&[d, n], -2.0, -0.1, rng);
    let b = Tensor::rand_uniform(&[d, n], -1.0, 1.0, rng);
    let c = Tensor::rand_uniform(&[d, n], -1.0, 1.0, rng);
    let delta: Vec<Real> = Tensor::rand_uniform(&[d], 0.01, 0.5, rng).into_data();
    DiscreteSsm::from_continuous(&a, &b, &c, &delta).map_err(err)
}

fn recurrent_equals_convolution() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sys = random_ssm(3, 4, &mut rng)?;
    let x = Tensor::rand_uniform(&[64, 3], -1.0, 1.0, &mut rng);
    let r = ssm_scan_recurrent(&sys, &x).map_err(err)?;
    let k = ssm_kernel_conv(&sys, &x).map_err(err)?;
    let e = r.max_abs_diff(&k) / r.max_abs().max(1e-300);
    ensure(e < 1e-10, || format!("relative difference {e:e}"))
}

fn scan_pair(chunk: usize) -> Result<(Tensor, Tensor), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = SsmParams::new(&mut Init::new(&mut store, &mut rng), 4, 8).map_err(err)?;
    let x = Tensor::rand_uniform(&[50, 4], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&store, &tape, false);
    let xv = tape.constant(x);
    let a = selective_scan(&p, &ctx, &xv).map_err(err)?.value().clone();
    let b = selective_scan_chunked(&p, &ctx, &xv, chunk).map_err(err)?.value().clone();
    Ok((a, b))
}

fn chunked_equals_sequential() -> Result<(), String> {
    for chunk in [1, 7, 16, 50, 64] {
        let (a, b) = scan_pair(chunk)?;
        let e = a.max_abs_diff(&b);
        ensure(e < 1e-10, || format!("chunk {chunk}: max difference {e:e}"))?;
    }
    Ok(())
}

fn selective_scan_gradient() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = SsmParams::new(&mut Init::new(&mut store, &mut rng), 2, 4).map_err(err)?;
    let x0 = Tensor::rand_uniform(&[6, 2], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(&[6, 2], -1.0, 1.0, &mut rng);
    let rep = grad_check(
        |x| {
            let ctx = Ctx::new(&store, x.tape(), false);
            Ok(selective_scan(&p, &ctx, x)?.mul(&x.tape().constant(w.clone()))?.sum())
        },
        &x0,
        1e-6,
        1e-4,
    )
    .map_err(err)?;
    ensure(rep.passed(), || format!("max relative error {:e}", rep.max_rel_err))
}

fn stft_round_trip() -> Result<(), String> {
    let x = synth_noise(5, NoiseKind::White, 30600.0 / SAMPLE_RATE as f64);
    let s = stft(&x).map_err(err)?;
    let y = istft(&s, x.len()).map_err(err)?;
    let num: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2) as f64).sum();
    let den: f64 = x.samples.iter().map(|a| (a * a) as f64).sum();
    let e = (num / den).sqrt();
    ensure(e < 1e-6, || format!("relative error {e:e}"))
}

fn stft_frame_count() -> Result<(), String> {
    let x = AudioBuffer::new(vec![0.0; 30600], SAMPLE_RATE).map_err(err)?;
    let s = stft(&x).map_err(err)?;
    ensure(s.frames() == 256 && s.bins() == 256, || format!("{} frames × {} bins", s.frames(), s.bins()))
}

fn mix_hits_target_snr() -> Result<(), String> {
    let c = synth_clean(1, 0.5);
    let n = synth_noise(2, NoiseKind::Pink, 0.5);
    for snr in [-5.0, 0.0, 2.5, 15.0, 17.5] {
        let (noisy, scaled) = mix_at_snr(&c, &n, snr).map_err(err)?;
        let got = 10.0 * (c.power() as f64 / scaled.power() as f64).log10();
        ensure((got - snr as f64).abs() < 1e-6, || format!("target {snr} dB, got {got}"))?;
        ensure(noisy.len() == c.len(), || "length changed".into())?;
    }
    Ok(())
}

fn si_sdr_scale_invariance() -> Result<(), String> {
    let s = synth_clean(3, 0.2).samples;
    let n = synth_noise(4, NoiseKind::White, 0.2).samples;
    let e: Vec<Real> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
    let base = si_sdr(&e, &s).map_err(err)?;
    for alpha in [0.01, 0.5, 3.0, 100.0] {
        let scaled: Vec<Real> = e.iter().map(|v| v * alpha).collect();
        let d = (si_sdr(&scaled, &s).map_err(err)? - base).abs();
        ensure(d < 1e-10, || format!("alpha {alpha}: drift {d:e}"))?;
    }
    Ok(())
}

fn pcs_unit_identity() -> Result<(), String> {
    let s = stft(&synth_clean(6, 0.3)).map_err(err)?;
    let bands = PcsBands::parse("0, 1000, 4000, 8000", "1, 1, 1").map_err(err)?;
    let out = pcs_stretch(&s, &bands, SAMPLE_RATE).map_err(err)?;
    ensure(out == s, || "spectrum changed".into())
}

fn forward_preserves_length() -> Result<(), String> {
    let cfg = ModelConfig {
        c1: 4,
        blocks: 1,
        state_dim: 4,
        dense_depth: 1,
        ..ModelConfig::xs()
    };
    let net = Network::new(cfg, 0).map_err(err)?;
    for len in [510, 1234] {
        let x = synth_noise(len as u64, NoiseKind::White, len as f64 / SAMPLE_RATE as f64);
        let (y, _) = net.enhance(&x).map_err(err)?;
        ensure(y.len() == x.len(), || format!("{len} samples in, {} out", y.len()))?;
    }
    Ok(())
}
