//! Binary checkpoints.
//!
//! Layout (little-endian): `"MSEU"`, u32 version, u32 tensor count, then per
//! tensor u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data; finally
//! u64 step and u64 seed. The model configuration is written next to the
//! checkpoint as `<path>.cfg`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"MSEU";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub seed: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn from_network(net: &Network, step: u64) -> Self {
        Self {
            tensors: net.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            step,
            seed: net.seed,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank too large: {name}")))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad(format!("dimension too large: {name}")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_array::<4>(r)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_array::<1>(r)?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(read_array(r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data for {name}: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        let step = u64::from_le_bytes(read_array(r)?);
        let seed = u64::from_le_bytes(read_array(r)?);
        Ok(Self { tensors, step, seed })
    }

    /// Copy every tensor into `net` by name; names and shapes must match exactly.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        if self.tensors.len() != net.params.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                net.params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = net.params.find(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let slot = net.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(bad(format!("{name}: shape {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        net.seed = self.seed;
        Ok(())
    }
}

/// Sidecar path holding the model configuration.
pub fn config_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".cfg");
    PathBuf::from(p)
}

/// Write `net` to `path` and its configuration to `<path>.cfg`.
pub fn save_checkpoint(net: &Network, step: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = vec![];
    Checkpoint::from_network(net, step).write_to(&mut buf)?;
    fs::write(path, buf)?;
    fs::write(config_path(path), net.cfg.to_string())?;
    Ok(())
}

/// Rebuild the network saved at `path`, returning it with its step counter.
/// Without a `<path>.cfg` sidecar the XS configuration is assumed.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, u64)> {
    let path = path.as_ref();
    let ckpt = Checkpoint::read_from(&mut fs::File::open(path)?)?;
    let cfg_file = config_path(path);
    let cfg = if cfg_file.exists() {
        ModelConfig::parse(&fs::read_to_string(cfg_file)?)?
    } else {
        ModelConfig::xs()
    };
    let mut net = Network::new(cfg, ckpt.seed)?;
    ckpt.apply(&mut net)?;
    Ok((net, ckpt.step))
}
