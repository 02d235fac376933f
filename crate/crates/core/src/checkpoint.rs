//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `CLVS`, `u32` version, `u64` step, then
//! records until end of file, each `u16` name length, name bytes, `u8`
//! dtype (0 = f32), `u8` rank, `u32` per dimension, payload.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CloveError, Result};

pub const MAGIC: &[u8; 4] = b"CLVS";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let bad = |why: &str| CloveError::Contract(format!("record `{}`: {why}", r.name));
            let len = u16::try_from(name.len()).map_err(|_| bad("name too long"))?;
            let rank = u8::try_from(r.shape.len()).map_err(|_| bad("too many dimensions"))?;
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(bad("shape does not match payload"));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in &r.shape {
                let d = u32::try_from(d).map_err(|_| bad("dimension too large"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |reason: String| CloveError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(err("bad magic".into()));
        }
        match r.u32() {
            Some(VERSION) => {}
            Some(v) => return Err(err(format!("unsupported version {v}"))),
            None => return Err(err("truncated header".into())),
        }
        let step = r.u64().ok_or_else(|| err("truncated header".into()))?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let index = records.len();
            let trunc = |name: &str| err(format!("record {index} `{name}` is truncated"));
            let len = r.u16().ok_or_else(|| trunc("?"))? as usize;
            let name_bytes = r.take(len).ok_or_else(|| trunc("?"))?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| err(format!("record {index} has a non-UTF-8 name")))?;
            let dtype = r.u8().ok_or_else(|| trunc(&name))?;
            if dtype != DTYPE_F32 {
                return Err(err(format!("record {index} `{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u8().ok_or_else(|| trunc(&name))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| trunc(&name))? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let payload = numel
                .and_then(|n| n.checked_mul(4))
                .and_then(|n| r.take(n))
                .ok_or_else(|| trunc(&name))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        Ok(Self { step, records })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| CloveError::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CloveError::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}
