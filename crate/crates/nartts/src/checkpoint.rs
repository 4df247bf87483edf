//! Parameter checkpoints.
//!
//! Layout, little-endian: `"NRTC"`, `u32` version (1), `u32` entry count, then
//! entries in name order. A tensor entry is `u16` name length, UTF-8 name,
//! `u8` rank, `rank × u32` dims and `f64` values. The configuration text is
//! one entry named `config` whose rank byte is `0xFF`, followed by a `u32`
//! byte length and the UTF-8 text.

use std::collections::BTreeMap;
use std::path::Path;

use nartts_core::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRTC";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "config";
const TEXT_RANK: u8 = 0xFF;
const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: String,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: String) -> Self {
        let tensors = store
            .sorted_ids()
            .into_iter()
            .map(|id| (store.name(id).to_owned(), store.get(id).clone()))
            .collect();
        Self { tensors, config }
    }

    /// Copies every tensor into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Usage(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            store
                .assign(name, t.clone())
                .map_err(|e| Error::Usage(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: BTreeMap<&str, Option<&Tensor>> = BTreeMap::new();
        entries.insert(CONFIG_ENTRY, None);
        for (name, t) in &self.tensors {
            if entries.insert(name, Some(t)).is_some() {
                return Err(Error::format(WHAT, 0, format!("duplicate entry `{name}`")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::format(WHAT, out.len() as u64, format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            match t {
                None => {
                    out.push(TEXT_RANK);
                    out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
                    out.extend_from_slice(self.config.as_bytes());
                }
                Some(t) => {
                    out.push(t.shape().len() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(WHAT, 0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut seen = BTreeMap::new();
        let mut config = None;
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(WHAT, at, "name is not UTF-8"))?
                .to_owned();
            if seen.contains_key(&name) || (name == CONFIG_ENTRY && config.is_some()) {
                return Err(Error::format(WHAT, at, format!("duplicate entry `{name}`")));
            }
            let rank = r.u8()?;
            if rank == TEXT_RANK {
                if name != CONFIG_ENTRY {
                    return Err(Error::format(WHAT, at, format!("text entry `{name}`")));
                }
                let n = r.u32()? as usize;
                let text =
                    std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(WHAT, at, "config is not UTF-8"))?;
                config = Some(text.to_owned());
                continue;
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data_at = r.pos as u64;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format(WHAT, data_at, "shape overflows"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(WHAT, at, e.to_string()))?;
            seen.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(WHAT, r.pos as u64, "trailing bytes"));
        }
        let config = config.ok_or_else(|| Error::format(WHAT, r.pos as u64, "missing config entry"))?;
        Ok(Self {
            tensors: seen.into_iter().collect(),
            config,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(WHAT, self.bytes.len() as u64, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
