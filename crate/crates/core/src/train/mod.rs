//! Training on synthetic or recorded mixtures, evaluation metrics and the
//! overfit probe.

mod data;
mod loss;
mod metrics;
mod optim;

pub use data::{mix_at_snr, synth_clean, synth_noise, CleanSource, MixSpec, NoiseKind, NoiseSource, Voice};
pub use loss::{composite_loss, LossTarget, LossWeights};
pub use metrics::{pcs_stretch, si_sdr, PcsBands, SI_SDR_CAP_DB};
pub use optim::{adamw_update, lr_at, AdamW, AdamWConfig};

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{parse_kv, parse_value, ModelConfig, Network};
use crate::signal::read_wav;
use crate::tensor::{Real, Tensor};

/// Which noise the synthetic mixtures use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseChoice {
    /// Cycle through every kind.
    Mixed,
    Only(NoiseKind),
}

impl std::str::FromStr for NoiseChoice {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        if s == "mixed" {
            Ok(Self::Mixed)
        } else {
            s.parse().map(Self::Only)
        }
    }
}

impl fmt::Display for NoiseChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mixed => "mixed",
            Self::Only(NoiseKind::White) => "white",
            Self::Only(NoiseKind::Pink) => "pink",
            Self::Only(NoiseKind::Babble) => "babble",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: Real,
    /// Multiplier applied once per epoch.
    pub lr_decay: Real,
    /// Optimizer steps per epoch.
    pub epoch_steps: u64,
    pub segment_len: usize,
    pub batch: usize,
    /// Total optimizer steps.
    pub steps: u64,
    pub weights: LossWeights,
    pub weight_decay: Real,
    pub seed: u64,
    pub snr_lo: Real,
    pub snr_hi: Real,
    pub noise: NoiseChoice,
    /// Recording to cut clean segments from instead of synthesizing them.
    pub clean_wav: Option<PathBuf>,
    /// Recording to cut noise segments from.
    pub noise_wav: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            lr_decay: 0.99,
            epoch_steps: 100,
            segment_len: 30600,
            batch: 1,
            steps: 100,
            weights: LossWeights::default(),
            weight_decay: 0.01,
            seed: 0,
            snr_lo: 0.0,
            snr_hi: 15.0,
            noise: NoiseChoice::Mixed,
            clean_wav: None,
            noise_wav: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.segment_len < crate::signal::FrameParams::default().win_len {
            return bad(format!("segment_len {} is shorter than one window", self.segment_len));
        }
        if self.batch == 0 || self.epoch_steps == 0 {
            return bad("batch and epoch_steps must be at least 1".into());
        }
        if !(self.snr_lo <= self.snr_hi) || !self.snr_lo.is_finite() || !self.snr_hi.is_finite() {
            return bad(format!("bad SNR range {}..{}", self.snr_lo, self.snr_hi));
        }
        Ok(())
    }

    /// Apply one setting; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr0" => self.lr0 = parse_value(line, key, v)?,
            "lr_decay" => self.lr_decay = parse_value(line, key, v)?,
            "epoch_steps" => self.epoch_steps = parse_value(line, key, v)?,
            "segment_len" => self.segment_len = parse_value(line, key, v)?,
            "batch" => self.batch = parse_value(line, key, v)?,
            "steps" => self.steps = parse_value(line, key, v)?,
            "w_mag" => self.weights.mag = parse_value(line, key, v)?,
            "w_cplx" => self.weights.cplx = parse_value(line, key, v)?,
            "w_time" => self.weights.time = parse_value(line, key, v)?,
            "w_phase" => self.weights.phase = parse_value(line, key, v)?,
            "weight_decay" => self.weight_decay = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "snr_lo" => self.snr_lo = parse_value(line, key, v)?,
            "snr_hi" => self.snr_hi = parse_value(line, key, v)?,
            "noise" => self.noise = parse_value(line, key, v)?,
            "clean_wav" => self.clean_wav = Some(PathBuf::from(v)),
            "noise_wav" => self.noise_wav = Some(PathBuf::from(v)),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// A file may mix model and training keys.
    pub fn parse_with_model(text: &str) -> Result<(ModelConfig, TrainConfig)> {
        let mut mc = ModelConfig::default();
        let mut tc = TrainConfig::default();
        for (line, k, v) in parse_kv(text)? {
            if !tc.set(line, &k, &v)? && !mc.set(line, &k, &v)? {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
        mc.validate()?;
        tc.validate()?;
        Ok((mc, tc))
    }

    /// The mixture drawn for batch item `item` of optimizer step `step`.
    pub fn mix_spec(&self, step: u64, item: usize, clean: &CleanSource, noise_rec: Option<&NoiseSource>) -> MixSpec {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step.wrapping_mul(self.batch as u64) + item as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snr_db = if self.snr_hi > self.snr_lo {
            rng.gen_range(self.snr_lo..self.snr_hi)
        } else {
            self.snr_lo
        };
        let noise = match (noise_rec, self.noise) {
            (Some(n), _) => n.clone(),
            (None, NoiseChoice::Only(k)) => NoiseSource::Synthetic(k),
            (None, NoiseChoice::Mixed) => NoiseSource::Synthetic(NoiseKind::ALL[rng.gen_range(0..3)]),
        };
        MixSpec {
            snr_db,
            clean: clean.clone(),
            noise,
            seed: rng.gen(),
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lr0 = {}", self.lr0)?;
        writeln!(f, "lr_decay = {}", self.lr_decay)?;
        writeln!(f, "epoch_steps = {}", self.epoch_steps)?;
        writeln!(f, "segment_len = {}", self.segment_len)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "w_mag = {}", self.weights.mag)?;
        writeln!(f, "w_cplx = {}", self.weights.cplx)?;
        writeln!(f, "w_time = {}", self.weights.time)?;
        writeln!(f, "w_phase = {}", self.weights.phase)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "snr_lo = {}", self.snr_lo)?;
        writeln!(f, "snr_hi = {}", self.snr_hi)?;
        writeln!(f, "noise = {}", self.noise)?;
        if let Some(p) = &self.clean_wav {
            writeln!(f, "clean_wav = {}", p.display())?;
        }
        if let Some(p) = &self.noise_wav {
            writeln!(f, "noise_wav = {}", p.display())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: Real,
    pub lr: Real,
}

/// Loss and gradients of `net` on one `(clean, noisy)` pair.
pub fn loss_and_grads(net: &Network, noisy: &[Real], target: &LossTarget, w: &LossWeights) -> Result<(Real, Vec<Tensor>)> {
    net.gradients(noisy, |_, out| composite_loss(out, target, w))
}

/// [`loss_and_grads`] with non-finite values anywhere reported as divergence at `step`.
fn checked_step(
    net: &Network,
    noisy: &[Real],
    target: &LossTarget,
    w: &LossWeights,
    step: u64,
) -> Result<(Real, Vec<Tensor>)> {
    let diverged = |loss: f64| Error::Divergence {
        step: step as usize,
        loss,
    };
    match loss_and_grads(net, noisy, target, w) {
        Ok((loss, _)) if !loss.is_finite() => Err(diverged(loss as f64)),
        Ok(r) => Ok(r),
        Err(Error::NonFinite { .. }) => Err(diverged(f64::NAN)),
        Err(e) => Err(e),
    }
}

/// Train `net` from `start_step` up to `tc.steps`, calling `on_step` after
/// every update. Aborts on a non-finite loss.
pub fn train_loop(
    net: &mut Network,
    tc: &TrainConfig,
    start_step: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    tc.validate()?;
    let clean = match &tc.clean_wav {
        Some(p) => CleanSource::Recording(read_wav(p)?),
        None => CleanSource::Synthetic,
    };
    let noise_rec = match &tc.noise_wav {
        Some(p) => Some(NoiseSource::Recording(read_wav(p)?)),
        None => None,
    };
    let mut opt = AdamW::new(
        &net.params,
        AdamWConfig {
            weight_decay: tc.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut records = vec![];
    for step in start_step..tc.steps {
        let lr = lr_at(tc.lr0, tc.lr_decay, step / tc.epoch_steps);
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for item in 0..tc.batch {
            let (c, noisy) = tc.mix_spec(step, item, &clean, noise_rec.as_ref()).render(tc.segment_len)?;
            let target = LossTarget::new(&c, net.stft(), net.cfg.compress_exp)?;
            let (loss, grads) = checked_step(net, &noisy.samples, &target, &tc.weights, step)?;
            total += loss;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        x.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x += g);
                    }
                    a
                }
            });
        }
        let inv = 1.0 / tc.batch as Real;
        let grads: Vec<Tensor> = acc.unwrap_or_default().iter().map(|g| g.scale(inv)).collect();
        opt.step(&mut net.params, &grads, lr)?;
        let rec = StepRecord {
            step,
            loss: total * inv,
            lr,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Loss trajectory as CSV with header `step,loss,lr`.
pub fn records_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    s
}

/// Settings of the single-pair overfitting check.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub samples: usize,
    pub snr_db: Real,
    pub noise: NoiseKind,
    pub lr: Real,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                c1: 8,
                blocks: 1,
                state_dim: 8,
                ..ModelConfig::xs()
            },
            steps: 200,
            samples: 1000,
            snr_db: 5.0,
            noise: NoiseKind::White,
            lr: 3e-3,
            weights: LossWeights::default(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub initial_loss: Real,
    pub final_loss: Real,
    pub si_sdr_noisy_db: f64,
    pub si_sdr_enhanced_db: f64,
    pub losses: Vec<Real>,
}

impl ProbeReport {
    pub fn improvement_db(&self) -> f64 {
        self.si_sdr_enhanced_db - self.si_sdr_noisy_db
    }

    pub fn loss_ratio(&self) -> Real {
        self.final_loss / self.initial_loss
    }
}

/// Fit a small model to one fixed mixture and report how far it got.
pub fn overfit_probe(pc: &ProbeConfig) -> Result<ProbeReport> {
    let mut net = Network::new(pc.model, pc.seed)?;
    let spec = MixSpec {
        snr_db: pc.snr_db,
        clean: CleanSource::Synthetic,
        noise: NoiseSource::Synthetic(pc.noise),
        seed: pc.seed,
    };
    let (clean, noisy) = spec.render(pc.samples)?;
    let target = LossTarget::new(&clean, net.stft(), net.cfg.compress_exp)?;
    let mut opt = AdamW::new(&net.params, AdamWConfig::default());
    let mut losses = Vec::with_capacity(pc.steps as usize + 1);
    for step in 0..pc.steps {
        let (loss, grads) = checked_step(&net, &noisy.samples, &target, &pc.weights, step)?;
        losses.push(loss);
        opt.step(&mut net.params, &grads, pc.lr)?;
    }
    let (final_loss, _) = checked_step(&net, &noisy.samples, &target, &pc.weights, pc.steps)?;
    losses.push(final_loss);
    let (enhanced, _) = net.enhance(&noisy)?;
    Ok(ProbeReport {
        initial_loss: losses[0],
        final_loss,
        si_sdr_noisy_db: si_sdr(&noisy.samples, &clean.samples)?,
        si_sdr_enhanced_db: si_sdr(&enhanced.samples, &clean.samples)?,
        losses,
    })
}
