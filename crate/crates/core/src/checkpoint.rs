//! Binary model checkpoints.
//!
//! Layout, all integers little-endian: 4-byte magic, `u32` format version,
//! `u32` config length and the UTF-8 config text, `u32` entry count, then per
//! entry `u32` name length, name, `u8` kind, `u32` rank, `u32` dims and a
//! `u64` element offset into the blob; finally the blob of `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Skeleton network alone.
    Msgg,
    /// Silhouette encoder alone.
    Silhouette,
    /// Complete two-modality model.
    BiFusion,
}

impl CheckpointKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            CheckpointKind::Msgg => b"MSGG",
            CheckpointKind::Silhouette => b"SILP",
            CheckpointKind::BiFusion => b"BFUS",
        }
    }

    fn from_magic(m: &[u8]) -> Option<Self> {
        [CheckpointKind::Msgg, CheckpointKind::Silhouette, CheckpointKind::BiFusion]
            .into_iter()
            .find(|k| k.magic() == m)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Resolved configuration the parameters were trained with.
    pub config: String,
    pub entries: Vec<ParamEntry>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::NoDecay => 1,
        ParamKind::Buffer => 2,
    }
}

fn code_kind(c: u8) -> Result<ParamKind> {
    match c {
        0 => Ok(ParamKind::Weight),
        1 => Ok(ParamKind::NoDecay),
        2 => Ok(ParamKind::Buffer),
        _ => Err(Error::Format(format!("unknown parameter kind {c}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

impl Checkpoint {
    /// Entries of `store` whose names start with any of `prefixes`, in store order.
    pub fn from_store(kind: CheckpointKind, config: &str, store: &ParamStore, prefixes: &[&str]) -> Self {
        let entries = store
            .entries()
            .iter()
            .filter(|e| prefixes.iter().any(|p| e.name.starts_with(p)))
            .cloned()
            .collect();
        Self { kind, config: config.to_string(), entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(kind_code(e.kind));
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.value.len() as u64;
        }
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let kind = CheckpointKind::from_magic(r.take(4)?).ok_or_else(|| Error::Format("not a checkpoint file".into()))?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let kind = code_kind(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, kind, shape, offset));
        }
        let blob = &bytes[r.pos..];
        if blob.len() % 8 != 0 {
            return Err(Error::Format("checkpoint blob is not a whole number of f64 values".into()));
        }
        let values = blob.len() / 8;
        let mut entries = Vec::with_capacity(count);
        for (name, kind, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset.checked_add(n).map_or(true, |end| end > values) {
                return Err(Error::Format(format!("parameter {name} lies outside the checkpoint blob")));
            }
            let data = blob[offset * 8..(offset + n) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entries.push(ParamEntry { name, kind, value: Tensor::new(&shape, data)? });
        }
        Ok(Self { kind, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every entry into the same-named parameter of `store`. Unknown
    /// names and shape mismatches are load errors.
    pub fn apply(&self, store: &mut ParamStore) -> Result<usize> {
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| Error::Load(format!("model has no parameter {}", e.name)))?;
            store.set(id, e.value.clone())?;
        }
        Ok(self.entries.len())
    }

    /// Requires the checkpoint to be of `kind`.
    pub fn expect_kind(self, kind: CheckpointKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Load(format!("expected a {:?} checkpoint, found {:?}", kind, self.kind)));
        }
        Ok(self)
    }
}
