//! `H4DC` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "H4DC"
//! version  u32
//! count    u32
//! count × record:
//!     name_len u32, name (UTF-8)
//!     dtype    u8   (0 = f32, 1 = f64, 2 = u64, 3 = u8)
//!     ndim     u32, dims ndim × u64
//!     data     product(dims) little-endian elements
//! ```
//!
//! Parameters and Adam moments are stored as f64 so a resumed run continues
//! bit for bit. JSON metadata travels as u8 records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ParamStore};

const MAGIC: &[u8; 4] = b"H4DC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Data {
    fn code(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::U64(_) => 2,
            Data::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::U64(v) => v.len(),
            Data::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Data,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, data: Data) -> Result<()> {
        let name = name.into();
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(Error::Shape(format!(
                "record `{name}` has dims {dims:?} but {} elements",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate checkpoint record `{name}`")));
        }
        self.records.push(Record { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no record `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.require(name)?.data {
            Data::F64(v) => Ok(v),
            _ => Err(Error::Config(format!("record `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            Data::U64(v) => Ok(v),
            _ => Err(Error::Config(format!("record `{name}` is not u64"))),
        }
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        self.push(name, vec![bytes.len() as u64], Data::U8(bytes))
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        match &self.require(name)?.data {
            Data::U8(v) => Ok(serde_json::from_slice(v)?),
            _ => Err(Error::Config(format!("record `{name}` is not a byte record"))),
        }
    }

    /// Every parameter of `store` as `{prefix}{name}`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (_, e) in store.entries() {
            let dims = e.shape.iter().map(|&d| d as u64).collect();
            self.push(format!("{prefix}{}", e.name), dims, Data::F64(e.value.clone()))?;
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from `{prefix}{name}` records.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.entries().map(|(_, e)| e.name.clone()).collect();
        for name in names {
            let v = self.f64s(&format!("{prefix}{name}"))?.to_vec();
            store.replace_value(&name, v)?;
        }
        Ok(())
    }

    /// Adam moments as `{prefix}m.{name}` / `{prefix}v.{name}` plus step and config.
    pub fn put_adam(&mut self, prefix: &str, store: &ParamStore, adam: &AdamState) -> Result<()> {
        for ((_, e), (m, v)) in store.entries().zip(adam.m.iter().zip(&adam.v)) {
            let dims: Vec<u64> = e.shape.iter().map(|&d| d as u64).collect();
            self.push(format!("{prefix}m.{}", e.name), dims.clone(), Data::F64(m.clone()))?;
            self.push(format!("{prefix}v.{}", e.name), dims, Data::F64(v.clone()))?;
        }
        self.push(format!("{prefix}step"), vec![1], Data::U64(vec![adam.step]))?;
        self.put_json(&format!("{prefix}config"), &adam.config)
    }

    pub fn load_adam(&self, prefix: &str, store: &ParamStore) -> Result<AdamState> {
        let config: AdamConfig = self.json(&format!("{prefix}config"))?;
        let mut adam = AdamState::new(config, store);
        for (i, (_, e)) in store.entries().enumerate() {
            adam.m[i] = self.f64s(&format!("{prefix}m.{}", e.name))?.to_vec();
            adam.v[i] = self.f64s(&format!("{prefix}v.{}", e.name))?.to_vec();
            if adam.m[i].len() != e.value.len() || adam.v[i].len() != e.value.len() {
                return Err(Error::Shape(format!("adam moments of `{}` have the wrong size", e.name)));
            }
        }
        adam.step = self.u64s(&format!("{prefix}step"))?[0];
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.code());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.data {
                Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(4)? != MAGIC {
            return Err(Error::format(path, "missing H4DC magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?;
            let code = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let dims = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().product::<u64>() as usize;
            let data = match code {
                0 => Data::F32(cur.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Data::F64(cur.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => Data::U64(cur.take(8 * n)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => Data::U8(cur.take(n)?.to_vec()),
                other => return Err(Error::format(path, format!("unknown dtype {other}"))),
            };
            ck.push(name, dims, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
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
}
