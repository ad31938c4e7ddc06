//! Parameter and FLOP accounting, with the reference variant figures for
//! comparison.

use super::{Network, T_MULTIPLE};
use crate::mamba::TsMamba;

/// Reference size and cost of one model variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceVariant {
    pub name: &'static str,
    pub c1: usize,
    pub blocks: usize,
    /// Millions of parameters.
    pub params_m: f64,
    /// GFLOPs on a 2 s, 16 kHz input.
    pub gflops: f64,
}

// 6.28 is a parameter count, not 2π
#[allow(clippy::approx_constant)]
pub const REFERENCE_VARIANTS: [ReferenceVariant; 4] = [
    ReferenceVariant { name: "XS", c1: 16, blocks: 2, params_m: 0.99, gflops: 4.16 },
    ReferenceVariant { name: "S", c1: 16, blocks: 4, params_m: 1.88, gflops: 4.62 },
    ReferenceVariant { name: "M", c1: 24, blocks: 4, params_m: 3.78, gflops: 10.28 },
    ReferenceVariant { name: "L", c1: 32, blocks: 4, params_m: 6.28, gflops: 18.17 },
];

impl ReferenceVariant {
    pub fn lookup(c1: usize, blocks: usize) -> Option<&'static Self> {
        REFERENCE_VARIANTS.iter().find(|v| v.c1 == c1 && v.blocks == blocks)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    /// Per top-level module, in construction order.
    pub modules: Vec<(String, usize)>,
}

fn stage_params(s: &[TsMamba]) -> usize {
    s.iter().map(TsMamba::param_count).sum()
}

/// Counts derived from layer shapes, grouped by top-level module.
pub fn count_params(net: &Network) -> ParamReport {
    let a = &net.arch;
    let modules: Vec<(String, usize)> = [
        ("encoder", a.encoder.param_count()),
        ("enc1", stage_params(&a.enc1)),
        ("down1", a.down1.param_count()),
        ("embed2", a.embed2.param_count()),
        ("enc2", stage_params(&a.enc2)),
        ("down2", a.down2.param_count()),
        ("embed3", a.embed3.param_count()),
        ("bottleneck", stage_params(&a.bottleneck)),
        ("up2", a.up2.param_count()),
        ("fuse2", a.fuse2.param_count()),
        ("dec2", stage_params(&a.dec2)),
        ("up1", a.up1.param_count()),
        ("fuse1", a.fuse1.param_count()),
        ("dec1", stage_params(&a.dec1)),
        ("mag_decoder", a.magnitude.param_count()),
        ("pha_decoder", a.phase.param_count()),
    ]
    .into_iter()
    .map(|(n, c)| (n.to_string(), c))
    .collect();
    ParamReport {
        total: modules.iter().map(|(_, c)| c).sum(),
        modules,
    }
}

fn stage_flops(s: &[TsMamba], t: usize, f: usize) -> f64 {
    s.iter().map(|b| b.flops(t, f)).sum()
}

/// Analytic multiply-add count ×2 for one forward pass over `duration_s`
/// seconds of 16 kHz audio. Elementwise work outside the SSM is ignored.
pub fn estimate_flops(net: &Network, duration_s: f64) -> f64 {
    let frame = net.stft().params();
    let samples = (duration_s * crate::signal::SAMPLE_RATE as f64).round() as usize;
    let t = frame.frames(samples.max(frame.win_len));
    let tp = t.div_ceil(T_MULTIPLE) * T_MULTIPLE;
    let f = frame.bins();
    let (f1, f2, f3) = (f / 2, f / 4, f / 8);
    let (t2, t3) = (tp / 2, tp / 4);
    let a = &net.arch;
    a.encoder.flops(tp, f)
        + stage_flops(&a.enc1, tp, f1)
        + a.down1.flops(t2, f2)
        + a.embed2.flops(t2, f2)
        + stage_flops(&a.enc2, t2, f2)
        + a.down2.flops(t3, f3)
        + a.embed3.flops(t3, f3)
        + stage_flops(&a.bottleneck, t3, f3)
        + a.up2.flops(t3, f3)
        + a.fuse2.flops(t2, f2)
        + stage_flops(&a.dec2, t2, f2)
        + a.up1.flops(t2, f2)
        + a.fuse1.flops(tp, f1)
        + stage_flops(&a.dec1, tp, f1)
        + a.magnitude.flops(t, f1)
        + a.phase.flops(t, f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn flops_scale_linearly_with_duration() {
        let net = Network::new(ModelConfig::xs(), 0).unwrap();
        let r = estimate_flops(&net, 4.0) / estimate_flops(&net, 2.0);
        assert!((1.9..=2.1).contains(&r), "ratio {r}");
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(ReferenceVariant::lookup(16, 2).unwrap().name, "XS");
        assert_eq!(ReferenceVariant::lookup(32, 4).unwrap().name, "L");
        assert!(ReferenceVariant::lookup(8, 1).is_none());
    }
}
