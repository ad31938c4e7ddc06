//! The `mseunet` command line: enhance, train, eval, inspect and selftest.
//!
//! Exit status is 0 on success, 1 on runtime failure (I/O, numerics, a
//! failed selftest) and 2 on usage errors (bad flags, unknown config keys).

pub mod selftest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{count_params, estimate_flops, load_checkpoint, save_checkpoint, ModelConfig, Network, ReferenceVariant};
use crate::signal::{read_wav, write_wav, AudioBuffer};
use crate::tensor::Real;
use crate::train::{pcs_stretch, records_csv, si_sdr, train_loop, PcsBands, TrainConfig};

/// Exponent applied across the whole band by `enhance --pcs` when no bands are given.
pub const DEFAULT_PCS_GAMMA: Real = 1.2;

#[derive(Debug, Parser)]
#[command(name = "mseunet", version, about = "Mamba U-Net speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one 16 kHz mono WAV file.
    Enhance(EnhanceArgs),
    /// Train a model on synthetic or recorded mixtures.
    Train(TrainArgs),
    /// SI-SDR of noisy and enhanced audio against clean references.
    Eval(EvalArgs),
    /// Parameter and FLOP table for a model configuration.
    Inspect(InspectArgs),
    /// Run built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Apply perceptual contrast stretching before resynthesis.
    #[arg(long)]
    pub pcs: bool,
    /// Comma-separated band edges in Hz, from 0 to 8000.
    #[arg(long, requires = "pcs_gammas")]
    pub pcs_edges: Option<String>,
    /// Comma-separated exponents, one per band.
    #[arg(long, requires = "pcs_edges")]
    pub pcs_gammas: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint's step counter and weights.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write; the loss log goes next to it with a `.csv` extension.
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Override a config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Clean references, paired in order with `--noisy`.
    #[arg(long, required = true, num_args = 1..)]
    pub clean: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub noisy: Vec<PathBuf>,
    /// Write the JSON lines here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Config file; the XS preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (xs, s, m, l) instead of a file.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Audio duration for the FLOP estimate, in seconds.
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// One of ssm, grad, signal, metrics, model; all when omitted.
    #[arg(long)]
    pub suite: Option<String>,
}

/// One line of the `eval` report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub file: String,
    pub si_sdr_noisy_db: f64,
    pub si_sdr_enhanced_db: f64,
    pub delta_db: f64,
}

/// Parse `args` (program name first) and run the command; returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

pub fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Enhance(a) => enhance(a).map(|_| 0),
        Command::Train(a) => train(a).map(|_| 0),
        Command::Eval(a) => {
            let records = eval(a)?;
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r).expect("plain record serializes"));
                lines.push('\n');
            }
            match &a.report {
                Some(p) => {
                    fs::write(p, lines)?;
                    for r in &records {
                        println!(
                            "{}: noisy {:.2} dB, enhanced {:.2} dB, delta {:+.2} dB",
                            r.file, r.si_sdr_noisy_db, r.si_sdr_enhanced_db, r.delta_db
                        );
                    }
                }
                None => print!("{lines}"),
            }
            Ok(0)
        }
        Command::Inspect(a) => {
            print!("{}", inspect(a)?);
            Ok(0)
        }
        Command::Selftest(a) => {
            let failed = selftest::run(a.suite.as_deref(), |name, r| match r {
                Ok(()) => println!("ok    {name}"),
                Err(msg) => println!("FAIL  {name}: {msg}"),
            });
            match failed {
                None => Err(Error::Config {
                    line: 0,
                    msg: format!("unknown suite {:?}; expected one of {}", a.suite.as_deref().unwrap_or(""), selftest::SUITES.join(", ")),
                }),
                Some(f) if f.is_empty() => Ok(0),
                Some(f) => {
                    eprintln!("failed: {}", f.join(", "));
                    Ok(1)
                }
            }
        }
    }
}

/// Enhance `a.input` into `a.out`, samples clamped to [−1, 1].
pub fn enhance(a: &EnhanceArgs) -> Result<()> {
    let (net, _) = load_checkpoint(&a.ckpt)?;
    let noisy = read_wav(&a.input)?;
    let mut spec = net.enhance_spec(&noisy)?;
    if a.pcs {
        let bands = match (&a.pcs_edges, &a.pcs_gammas) {
            (Some(e), Some(g)) => PcsBands::parse(e, g)?,
            _ => PcsBands::uniform(DEFAULT_PCS_GAMMA),
        };
        spec = pcs_stretch(&spec, &bands, noisy.sample_rate)?;
    }
    let mut out = net.stft().istft(&spec, noisy.len())?;
    out.samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    write_wav(&a.out, &AudioBuffer::new(out.samples, noisy.sample_rate)?)
}

fn apply_overrides(mc: &mut ModelConfig, tc: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let bad = |msg: String| Error::Config { line: 0, msg };
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| bad(format!("override {o:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        if !tc.set(0, k, v)? && !mc.set(0, k, v)? {
            return Err(bad(format!("unknown override key {k:?}")));
        }
    }
    mc.validate()?;
    tc.validate()
}

fn read_configs(path: &Path, overrides: &[String]) -> Result<(ModelConfig, TrainConfig)> {
    let (mut mc, mut tc) = TrainConfig::parse_with_model(&fs::read_to_string(path)?)?;
    apply_overrides(&mut mc, &mut tc, overrides)?;
    Ok((mc, tc))
}

/// Loss log path for a checkpoint path.
pub fn csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (mc, mut tc) = read_configs(&a.config, &a.overrides)?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let (mut net, start) = match &a.resume {
        Some(p) => {
            let (net, step) = load_checkpoint(p)?;
            if net.cfg != mc {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("checkpoint {} was trained with a different model config", p.display()),
                });
            }
            (net, step)
        }
        None => (Network::new(mc, tc.seed)?, 0),
    };
    let records = train_loop(&mut net, &tc, start, |r| {
        eprintln!("step {:>6}  loss {:.6}  lr {:.3e}", r.step, r.loss, r.lr);
    })?;
    let last = records.last().map_or(start, |r| r.step + 1);
    save_checkpoint(&net, last, &a.out)?;
    fs::write(csv_path(&a.out), records_csv(&records))?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<Vec<EvalRecord>> {
    if a.clean.len() != a.noisy.len() {
        return Err(Error::Config {
            line: 0,
            msg: format!("{} clean files but {} noisy files", a.clean.len(), a.noisy.len()),
        });
    }
    let (net, _) = load_checkpoint(&a.ckpt)?;
    let mut out = vec![];
    for (c, n) in a.clean.iter().zip(&a.noisy) {
        let clean = read_wav(c)?;
        let noisy = read_wav(n)?;
        if clean.len() != noisy.len() {
            return Err(crate::error::invalid(
                "eval",
                format!("{} and {} differ in length", c.display(), n.display()),
            ));
        }
        let (enhanced, _) = net.enhance(&noisy)?;
        let before = si_sdr(&noisy.samples, &clean.samples)?;
        let after = si_sdr(&enhanced.samples, &clean.samples)?;
        out.push(EvalRecord {
            file: n.display().to_string(),
            si_sdr_noisy_db: before,
            si_sdr_enhanced_db: after,
            delta_db: after - before,
        });
    }
    Ok(out)
}

/// The table printed by `inspect`.
pub fn inspect(a: &InspectArgs) -> Result<String> {
    let (mut mc, mut tc) = match (&a.config, &a.preset) {
        (Some(p), _) => TrainConfig::parse_with_model(&fs::read_to_string(p)?)?,
        (None, Some(name)) => {
            let mc = ModelConfig::named(name).ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("unknown preset {name:?}"),
            })?;
            (mc, TrainConfig::default())
        }
        (None, None) => (ModelConfig::default(), TrainConfig::default()),
    };
    apply_overrides(&mut mc, &mut tc, &a.overrides)?;
    if !(a.duration > 0.0) {
        return Err(Error::Config {
            line: 0,
            msg: "duration must be positive".into(),
        });
    }
    Ok(inspect_table(&Network::new(mc, 0)?, a.duration))
}

/// Per-module parameter counts, the total and the FLOP estimate, each
/// beside the reference figure when the configuration is a known variant.
pub fn inspect_table(net: &Network, duration_s: f64) -> String {
    let cfg = &net.cfg;
    let rep = count_params(net);
    let flops = estimate_flops(net, duration_s);
    let reference = ReferenceVariant::lookup(cfg.c1, cfg.blocks);
    let mut s = String::new();
    let w = cfg.widths();
    let _ = writeln!(
        s,
        "config: C1 = {}, N = {}, state_dim = {}, widths = {}/{}/{} ({})",
        cfg.c1, cfg.blocks, cfg.state_dim, w[0], w[1], w[2], cfg.width_mode
    );
    let _ = writeln!(s, "{:<14}{:>12}{:>9}", "module", "params", "share");
    for (name, n) in &rep.modules {
        let _ = writeln!(s, "{:<14}{:>12}{:>8.1}%", name, n, 100.0 * *n as f64 / rep.total as f64);
    }
    let total_m = rep.total as f64 / 1e6;
    let gflops = flops / 1e9;
    let _ = write!(s, "{:<14}{:>12}  ({:.3}M)", "total", rep.total, total_m);
    match reference {
        Some(r) => {
            let _ = writeln!(
                s,
                "  reference {} {:.2}M, deviation {:+.1}%",
                r.name,
                r.params_m,
                100.0 * (total_m / r.params_m - 1.0)
            );
        }
        None => s.push('\n'),
    }
    let _ = write!(s, "{:<14}{:>11.2}G  ({duration_s} s input)", "flops", gflops);
    match reference {
        Some(r) if (duration_s - 2.0).abs() < 1e-9 => {
            let _ = writeln!(s, "  reference {} {:.2}G (report only)", r.name, r.gflops);
        }
        _ => s.push('\n'),
    }
    s
}

/// Flush standard output before exiting so piped output is complete.
pub fn flush() {
    let _ = std::io::stdout().flush();
}
