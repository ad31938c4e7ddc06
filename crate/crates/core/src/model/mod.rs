//! The full enhancement network: feature encoder, a three-level U-Net of
//! TS-Mamba stages and the magnitude and phase decoders.

mod accounting;
mod checkpoint;
mod config;
mod deform;
pub mod layers;

pub use accounting::{count_params, estimate_flops, ParamReport, ReferenceVariant, REFERENCE_VARIANTS};
pub use checkpoint::{config_path, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, WidthMode};
pub(crate) use config::{parse_kv, parse_value};
pub use deform::deform_conv2d;
pub use layers::{
    learnable_sigmoid, Conv2d, ConvT2d, DenseNet, FeatureEncoder, MagnitudeDecoder, PatchEmbed, PhaseDecoder,
    LSIGMOID_KAPPA,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::mamba::{MambaConfig, TsMamba};
use crate::nn::{Ctx, Init, ParamStore};
use crate::signal::{wrap_phase, AudioBuffer, FrameParams, SpectroPair, Stft, SAMPLE_RATE};
use crate::tensor::{concat, Conv2dGeom, PadMode, Tape, Tensor, Var};

/// The U-Net is entered at this time granularity.
const T_MULTIPLE: usize = 4;

fn stage(init: &mut Init<'_>, name: &str, dim: usize, blocks: usize, m: &MambaConfig) -> Result<Vec<TsMamba>> {
    let mut s = init.pp(name);
    (0..blocks).map(|i| TsMamba::new(&mut s.pp(i.to_string()), dim, m)).collect()
}

/// Module layout; parameter values live in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Arch {
    pub encoder: FeatureEncoder,
    pub enc1: Vec<TsMamba>,
    pub down1: Conv2d,
    pub embed2: PatchEmbed,
    pub enc2: Vec<TsMamba>,
    pub down2: Conv2d,
    pub embed3: PatchEmbed,
    pub bottleneck: Vec<TsMamba>,
    pub up2: ConvT2d,
    pub fuse2: Conv2d,
    pub dec2: Vec<TsMamba>,
    pub up1: ConvT2d,
    pub fuse1: Conv2d,
    pub dec1: Vec<TsMamba>,
    pub magnitude: MagnitudeDecoder,
    pub phase: PhaseDecoder,
}

impl Arch {
    fn new(init: &mut Init<'_>, cfg: &ModelConfig, bins: usize) -> Result<Self> {
        let [w1, w2, w3] = cfg.widths();
        let (n, m, dd) = (cfg.blocks, cfg.mamba(), cfg.dense_depth);
        let down = Conv2dGeom::default().with_stride((2, 2));
        Ok(Self {
            encoder: FeatureEncoder::new(&mut init.pp("encoder"), w1, dd)?,
            enc1: stage(init, "enc1", w1, n, &m)?,
            down1: Conv2d::new(init, "down1", w1, w2, (2, 2), down)?,
            embed2: PatchEmbed::new(&mut init.pp("embed2"), w2, w2, cfg.deformable)?,
            enc2: stage(init, "enc2", w2, n, &m)?,
            down2: Conv2d::new(init, "down2", w2, w3, (2, 2), down)?,
            embed3: PatchEmbed::new(&mut init.pp("embed3"), w3, w3, cfg.deformable)?,
            bottleneck: stage(init, "bottleneck", w3, n, &m)?,
            up2: ConvT2d::new(init, "up2", w3, w2, (2, 2), (2, 2))?,
            fuse2: Conv2d::new(init, "fuse2", 2 * w2, w2, (1, 1), Conv2dGeom::default())?,
            dec2: stage(init, "dec2", w2, n, &m)?,
            up1: ConvT2d::new(init, "up1", w2, w1, (2, 2), (2, 2))?,
            fuse1: Conv2d::new(init, "fuse1", 2 * w1, w1, (1, 1), Conv2dGeom::default())?,
            dec1: stage(init, "dec1", w1, n, &m)?,
            magnitude: MagnitudeDecoder::new(&mut init.pp("mag_decoder"), w1, dd, bins)?,
            phase: PhaseDecoder::new(&mut init.pp("pha_decoder"), w1, dd)?,
        })
    }
}

/// Decoded spectrum planes, `[T × F]` each.
pub struct SpecOut {
    /// Mask times compressed noisy magnitude.
    pub magnitude_c: Var,
    /// `magnitude_c^{1/compress_exp}`, nonnegative.
    pub magnitude: Var,
    /// In [−π, π].
    pub phase: Var,
}

/// Enhanced spectrum planes and waveform, all on the tape.
pub struct ForwardOut {
    /// Compressed decoded magnitude `[T × F]`.
    pub magnitude_c: Var,
    /// `[T × F]`, nonnegative.
    pub magnitude: Var,
    /// `[T × F]`, in [−π, π].
    pub phase: Var,
    /// Same length as the input.
    pub audio: Var,
}

/// Configuration, parameters and module layout of one model instance.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub arch: Arch,
    pub seed: u64,
    stft: Stft,
}

impl Network {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let frame = FrameParams::default();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Arch::new(&mut Init::new(&mut params, &mut rng), &cfg, frame.bins())?;
        Ok(Self {
            cfg,
            params,
            arch,
            seed,
            stft: Stft::new(frame)?,
        })
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn mamba_config(&self) -> MambaConfig {
        self.cfg.mamba()
    }

    fn run_stage(&self, ctx: &Ctx, blocks: &[TsMamba], x: &Var) -> Result<Var> {
        // [C, T, F] -> [T, F, C] for the sequence models and back
        let m = self.mamba_config();
        let mut h = x.permute(&[1, 2, 0])?;
        for b in blocks {
            h = b.forward(ctx, &h, &m)?;
        }
        h.permute(&[2, 0, 1])
    }

    /// Noisy `magnitude`, `phase` (`[T × F]`) to decoded magnitude and phase.
    pub fn forward_spec(&self, ctx: &Ctx, magnitude: &Var, phase: &Var) -> Result<SpecOut> {
        let (t, f) = magnitude.value().dims2()?;
        if phase.shape() != [t, f] || f != self.arch.magnitude.bins {
            return Err(crate::error::shape_err("model_forward", magnitude.shape(), &[t, self.arch.magnitude.bins]));
        }
        let a = &self.arch;
        let c = self.cfg.compress_exp;
        let mag_c = magnitude.powf(c);
        let planes = concat(&[&mag_c.reshape(&[1, t, f])?, &phase.reshape(&[1, t, f])?], 0)?;
        let pad = (T_MULTIPLE - t % T_MULTIPLE) % T_MULTIPLE;
        let mode = if t > pad { PadMode::Reflect } else { PadMode::Zero };
        let planes = planes.pad(1, 0, pad, mode)?;

        let x = a.encoder.forward(ctx, &planes)?;
        let skip1 = self.run_stage(ctx, &a.enc1, &x)?;
        let h = a.down1.forward(ctx, &skip1)?;
        let h = a.embed2.forward(ctx, &h)?;
        let skip2 = self.run_stage(ctx, &a.enc2, &h)?;
        let h = a.down2.forward(ctx, &skip2)?;
        let h = a.embed3.forward(ctx, &h)?;
        let h = self.run_stage(ctx, &a.bottleneck, &h)?;
        let h = a.up2.forward(ctx, &h)?;
        let h = a.fuse2.forward(ctx, &concat(&[&h, &skip2], 0)?)?;
        let h = self.run_stage(ctx, &a.dec2, &h)?;
        let h = a.up1.forward(ctx, &h)?;
        let h = a.fuse1.forward(ctx, &concat(&[&h, &skip1], 0)?)?;
        let h = self.run_stage(ctx, &a.dec1, &h)?;
        let h = h.slice(1, 0, t)?;

        let magnitude_c = a.magnitude.mask(ctx, &h)?.mul(&mag_c)?;
        Ok(SpecOut {
            magnitude: magnitude_c.powf(1.0 / c),
            magnitude_c,
            phase: a.phase.forward(ctx, &h)?,
        })
    }

    /// Waveform `[L]` in, decoded spectrum and resynthesized waveform out.
    pub fn forward(&self, ctx: &Ctx, noisy: &[crate::tensor::Real]) -> Result<ForwardOut> {
        let frame = self.stft.params();
        if noisy.len() < frame.win_len {
            return Err(invalid(
                "model_forward",
                format!("input of {} samples is shorter than one window ({})", noisy.len(), frame.win_len),
            ));
        }
        let buf = AudioBuffer::new(noisy.to_vec(), SAMPLE_RATE)?;
        let spec = self.stft.stft(&buf)?;
        let mag_in = ctx.constant(spec.magnitude);
        let pha_in = ctx.constant(spec.phase);
        let SpecOut {
            magnitude_c,
            magnitude,
            phase,
        } = self.forward_spec(ctx, &mag_in, &pha_in)?;
        let re = magnitude.mul(&phase.cos())?;
        let im = magnitude.mul(&phase.sin())?;
        let audio = self.stft.istft_var(&re, &im, noisy.len())?;
        Ok(ForwardOut {
            magnitude_c,
            magnitude,
            phase,
            audio,
        })
    }

    /// Inference without gradients.
    pub fn enhance(&self, noisy: &AudioBuffer) -> Result<(AudioBuffer, SpectroPair)> {
        let spec = self.enhance_spec(noisy)?;
        let audio = self.stft.istft(&spec, noisy.len())?;
        Ok((AudioBuffer::new(audio.samples, noisy.sample_rate)?, spec))
    }

    /// Decoded spectrum of `noisy`, phase wrapped to (−π, π].
    pub fn enhance_spec(&self, noisy: &AudioBuffer) -> Result<SpectroPair> {
        let tape = Tape::new();
        let ctx = Ctx::new(&self.params, &tape, false);
        let out = self.forward(&ctx, &noisy.samples)?;
        let phase = out.phase.value().map(wrap_phase);
        Ok(SpectroPair {
            magnitude: out.magnitude.value().clone(),
            phase,
            frame: self.stft.params(),
        })
    }

    /// All-parameter gradients of `loss_fn` applied to one forward pass.
    pub fn gradients(
        &self,
        noisy: &[crate::tensor::Real],
        loss_fn: impl FnOnce(&Ctx, &ForwardOut) -> Result<Var>,
    ) -> Result<(crate::tensor::Real, Vec<Tensor>)> {
        let tape = Tape::new();
        let ctx = Ctx::new(&self.params, &tape, true);
        let out = self.forward(&ctx, noisy)?;
        let loss = loss_fn(&ctx, &out)?;
        let grads = tape.backward(&loss)?;
        Ok((loss.item(), ctx.collect_grads(&grads)))
    }
}

/// One-shot inference: `(enhanced, enhanced_spec)` for `noisy`.
pub fn model_forward(net: &Network, noisy: &AudioBuffer) -> Result<(AudioBuffer, SpectroPair)> {
    net.enhance(noisy)
}
