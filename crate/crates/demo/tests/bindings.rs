use mseunet::train::NoiseKind;
use mseunet_demo::{impulse_response, Mixture};

#[test]
fn impulse_response_is_a_geometric_sequence() {
    let (a, b, c, delta) = (-2.0, 1.0, 0.5, 0.1);
    let k = impulse_response(a, b, c, delta, 16).unwrap();
    let abar = (a * delta).exp();
    let bbar = (abar - 1.0) / a * b;
    for (i, v) in k.iter().enumerate() {
        let expect = c * abar.powi(i as i32) * bbar;
        assert!((v - expect).abs() < 1e-12, "k[{i}] = {v}, expected {expect}");
    }
    assert!(impulse_response(a, b, c, 0.0, 4).is_err());
}

#[test]
fn mixture_reports_its_snr_and_spectrogram() {
    let m = Mixture::build(3, 5.0, NoiseKind::Pink).unwrap();
    assert_eq!(m.bins(), 256);
    assert_eq!(m.frames(), 16000 / 120 + 1);
    assert_eq!(m.log_magnitude().len(), m.frames() * m.bins());
    assert_eq!(m.samples().len(), 16000);
    // white-ish noise is nearly orthogonal to the voice, so SI-SDR sits near the SNR
    let s = m.noisy_si_sdr().unwrap();
    assert!((s - 5.0).abs() < 1.0, "{s}");
}

#[test]
fn unit_stretch_leaves_the_spectrogram_alone() {
    let m = Mixture::build(4, 0.0, NoiseKind::White).unwrap();
    let base = m.log_magnitude();
    let same = m.stretch_db(2000.0, 1.0, 1.0).unwrap();
    let max = base.iter().zip(&same).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max < 1e-3, "{max}");
    let sharper = m.stretch_db(0.0, 1.5, 1.5).unwrap();
    assert_ne!(sharper, base);
    assert!(m.stretch_db(1000.0, -1.0, 1.0).is_err());
}
