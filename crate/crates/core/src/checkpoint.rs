//! Flat binary checkpoint of named parameters.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GMCK" | version: u8 | entries: u32
//! per entry: name_len: u32 | name: utf-8 | rank: u32 | dims: u32 × rank | values: f32 × ∏dims
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GMCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor<f32>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.write_u32::<LittleEndian>(store.len() as u32).unwrap();
    for p in store.iter() {
        out.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        out.extend_from_slice(p.name.as_bytes());
        out.write_u32::<LittleEndian>(p.value.rank() as u32).unwrap();
        for &d in p.value.shape() {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in p.value.data() {
            out.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN)).unwrap();
        }
    }
    out
}

fn truncated(cur: &Cursor<&[u8]>, what: &str) -> Error {
    Error::Format {
        offset: cur.position(),
        msg: format!("truncated while reading {what}"),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated(&cur, "magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"GMCK\"", String::from_utf8_lossy(&magic)),
        });
    }
    let version = cur.read_u8().map_err(|_| truncated(&cur, "version"))?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur, "entry count"))?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur, "name length"))? as usize;
        let remaining = bytes.len() - cur.position() as usize;
        if len > remaining {
            return Err(truncated(&cur, "name"));
        }
        let mut name = vec![0u8; len];
        cur.read_exact(&mut name).map_err(|_| truncated(&cur, "name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: cur.position(),
            msg: "entry name is not utf-8".into(),
        })?;
        let rank = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur, "rank"))? as usize;
        if rank * 4 > bytes.len() - cur.position() as usize {
            return Err(truncated(&cur, "dims"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur, "dims"))? as usize);
        }
        let n = numel(&shape);
        let remaining = bytes.len() - cur.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(Error::Format {
                offset: cur.position(),
                msg: format!("entry {name}: expected {} value bytes, found {remaining}", n * 4),
            });
        }
        let mut data = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| truncated(&cur, "values"))?;
        entries.push(Entry {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format {
            offset: cur.position(),
            msg: "trailing bytes after last entry".into(),
        });
    }
    Ok(entries)
}

/// Copies checkpoint values into a store whose names and shapes must match.
pub fn load_into<T: Scalar>(entries: &[Entry], store: &mut ParamStore<T>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::Config(format!("checkpoint entry {} not in model", e.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != e.value.shape() {
            return Err(Error::Dimension {
                op: "load checkpoint",
                lhs: p.value.shape().to_vec(),
                rhs: e.value.shape().to_vec(),
            });
        }
        p.value = e.value.cast();
    }
    Ok(())
}

pub fn write<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
