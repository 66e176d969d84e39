//! Binary model checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "UTSCKPT1"
//! n_flags    u32
//! n_flags ×  key_len u32, key (UTF-8), value u8 (0 or 1)
//! n_params   u32
//! n_params × name_len u32, name (UTF-8), ndim u32, ndim × extent u64,
//!            product(extents) × f64
//! ```
//!
//! Flags are the [`LVitConfig`] switches by name. Parameters appear in the
//! model's own order.

use std::path::Path;

use uts_core::lvit::{LVitConfig, LVitParams};
use uts_core::tape::ParamSet;
use uts_core::Tensor;

pub const MAGIC: &[u8; 8] = b"UTSCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] uts_core::Error),
}

pub fn to_bytes(config: &LVitConfig, params: &LVitParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let flags = config.flags();
    out.extend((flags.len() as u32).to_le_bytes());
    for (key, value) in flags {
        out.extend((key.len() as u32).to_le_bytes());
        out.extend(key.as_bytes());
        out.push(value as u8);
    }
    out.extend((params.params.len() as u32).to_le_bytes());
    for (name, t) in params.params.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("extent {v} too large")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(LVitConfig, LVitParams), CheckpointError> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut config = LVitConfig::default();
    for _ in 0..c.u32()? {
        let key = c.string()?;
        let value = match c.take(1)?[0] {
            0 => false,
            1 => true,
            v => return Err(CheckpointError::Malformed(format!("flag {key} has value {v}"))),
        };
        config.set_flag(&key, value)?;
    }
    let mut set = ParamSet::new();
    for _ in 0..c.u32()? {
        let name = c.string()?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let raw = c.take(len.checked_mul(8).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if set.find(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate parameter {name}")));
        }
        set.add(name, Tensor::new(shape, data)?);
    }
    if c.at != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let params = LVitParams::from_param_set(&config, set)?;
    Ok((config, params))
}

pub fn save(path: &Path, config: &LVitConfig, params: &LVitParams) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(config, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(LVitConfig, LVitParams), CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
