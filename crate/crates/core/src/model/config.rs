//! Flat `key = value` configuration files.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::tensor::Real;

/// `(line number, key, value)` for each non-blank, non-comment line.
pub(crate) fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

/// How the second and third stage widths follow from `c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthMode {
    /// `[C1, 2·C1, 4·C1]`.
    Expand,
    /// `[C1, ⌊C1/2⌋, ⌊C1/3⌋]`, each at least 1.
    Shrink,
}

impl FromStr for WidthMode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "expand" => Ok(Self::Expand),
            "shrink" => Ok(Self::Shrink),
            _ => Err(()),
        }
    }
}

impl fmt::Display for WidthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Expand => "expand",
            Self::Shrink => "shrink",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Base channel width.
    pub c1: usize,
    /// TS-Mamba blocks per stage.
    pub blocks: usize,
    pub state_dim: usize,
    pub compress_exp: Real,
    pub deformable: bool,
    pub flip_back: bool,
    pub width_mode: WidthMode,
    pub dense_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::xs()
    }
}

impl ModelConfig {
    fn preset(c1: usize, blocks: usize) -> Self {
        Self {
            c1,
            blocks,
            state_dim: 16,
            compress_exp: 0.3,
            deformable: true,
            flip_back: true,
            width_mode: WidthMode::Expand,
            dense_depth: 4,
        }
    }

    pub fn xs() -> Self {
        Self::preset(16, 2)
    }

    pub fn s() -> Self {
        Self::preset(16, 4)
    }

    pub fn m() -> Self {
        Self::preset(24, 4)
    }

    pub fn l() -> Self {
        Self::preset(32, 4)
    }

    /// Named preset: `xs`, `s`, `m`, `l`.
    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "xs" => Some(Self::xs()),
            "s" => Some(Self::s()),
            "m" => Some(Self::m()),
            "l" => Some(Self::l()),
            _ => None,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        match self.width_mode {
            WidthMode::Expand => [self.c1, 2 * self.c1, 4 * self.c1],
            WidthMode::Shrink => [self.c1, (self.c1 / 2).max(1), (self.c1 / 3).max(1)],
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            state_dim: self.state_dim,
            flip_back: self.flip_back,
            scan_chunk: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.c1 < 3 {
            return bad(format!("c1 must be at least 3, got {}", self.c1));
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.state_dim == 0 {
            return bad("state_dim must be at least 1".into());
        }
        if !(self.compress_exp > 0.0 && self.compress_exp <= 1.0) {
            return bad(format!("compress_exp must lie in (0, 1], got {}", self.compress_exp));
        }
        Ok(())
    }

    /// Apply one `key = value` setting; `Ok(false)` when the key is not a
    /// model key.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<bool> {
        match key {
            "c1" | "C1" => self.c1 = parse_value(line, key, v)?,
            "blocks" | "N" => self.blocks = parse_value(line, key, v)?,
            "state_dim" => self.state_dim = parse_value(line, key, v)?,
            "compress_exp" => self.compress_exp = parse_value(line, key, v)?,
            "deformable" => self.deformable = parse_value(line, key, v)?,
            "flip_back" => self.flip_back = parse_value(line, key, v)?,
            "width_mode" => self.width_mode = parse_value(line, key, v)?,
            "dense_depth" => self.dense_depth = parse_value(line, key, v)?,
            "levels" => {
                let n: usize = parse_value(line, key, v)?;
                if n != 3 {
                    return Err(Error::Config {
                        line,
                        msg: format!("levels is fixed at 3, got {n}"),
                    });
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Start from defaults and apply each `key = value` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_kv(text)? {
            if !cfg.set(line, &k, &v)? {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "c1 = {}", self.c1)?;
        writeln!(f, "blocks = {}", self.blocks)?;
        writeln!(f, "state_dim = {}", self.state_dim)?;
        writeln!(f, "compress_exp = {}", self.compress_exp)?;
        writeln!(f, "deformable = {}", self.deformable)?;
        writeln!(f, "flip_back = {}", self.flip_back)?;
        writeln!(f, "width_mode = {}", self.width_mode)?;
        writeln!(f, "dense_depth = {}", self.dense_depth)
    }
}
