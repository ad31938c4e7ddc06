//! Composite spectral and waveform training objective.

use crate::error::{shape_err, Result};
use crate::model::ForwardOut;
use crate::signal::{AudioBuffer, Stft};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Compressed magnitude MSE.
    pub mag: Real,
    /// Compressed complex (real and imaginary planes) MSE.
    pub cplx: Real,
    /// Waveform L1.
    pub time: Real,
    /// Anti-wrapping phase distance `mean(1 − cos Δφ)`.
    pub phase: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mag: 1.0,
            cplx: 0.5,
            time: 1.0,
            phase: 0.5,
        }
    }
}

/// Clean-side quantities the prediction is compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    /// Compressed magnitude `[T × F]`.
    pub magnitude_c: Tensor,
    pub phase: Tensor,
    pub audio: Tensor,
}

impl LossTarget {
    pub fn new(clean: &AudioBuffer, stft: &Stft, compress_exp: Real) -> Result<Self> {
        let spec = stft.stft(clean)?;
        Ok(Self {
            magnitude_c: spec.magnitude.map(|m| m.powf(compress_exp)),
            phase: spec.phase,
            audio: Tensor::new(&[clean.len()], clean.samples.clone())?,
        })
    }
}

fn mse(a: &Var, b: &Var) -> Result<Var> {
    Ok(a.sub(b)?.square().mean())
}

/// Weighted sum of the four terms; zero when prediction and target agree.
pub fn composite_loss(pred: &ForwardOut, target: &LossTarget, w: &LossWeights) -> Result<Var> {
    let tape = pred.audio.tape();
    if pred.magnitude_c.shape() != target.magnitude_c.shape() || pred.phase.shape() != target.phase.shape() {
        return Err(shape_err("composite_loss", pred.magnitude_c.shape(), target.magnitude_c.shape()));
    }
    if pred.audio.shape() != target.audio.shape() {
        return Err(shape_err("composite_loss", pred.audio.shape(), target.audio.shape()));
    }
    let tm = tape.constant(target.magnitude_c.clone());
    let tp = tape.constant(target.phase.clone());
    let ta = tape.constant(target.audio.clone());

    let mag = mse(&pred.magnitude_c, &tm)?;
    let re = pred.magnitude_c.mul(&pred.phase.cos())?;
    let im = pred.magnitude_c.mul(&pred.phase.sin())?;
    let t_re = tape.constant(target.magnitude_c.zip_map(&target.phase, |m, p| m * p.cos())?);
    let t_im = tape.constant(target.magnitude_c.zip_map(&target.phase, |m, p| m * p.sin())?);
    let cplx = mse(&re, &t_re)?.add(&mse(&im, &t_im)?)?.scale(0.5);
    let time = pred.audio.sub(&ta)?.abs().mean();
    let phase = pred.phase.sub(&tp)?.cos().neg().add_scalar(1.0).mean();

    mag.scale(w.mag)
        .add(&cplx.scale(w.cplx))?
        .add(&time.scale(w.time))?
        .add(&phase.scale(w.phase))
}
