//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"LMTC"`, `u32` version, `u32` entry count, then per entry `u32` name
//! length, UTF-8 name, `u8` dtype code, `u32` rank, `u64` dims, payload;
//! finally a `u32` CRC-32 of every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"LMTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_tensor<F: Float>(name: &str, t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            DType::F32 => EntryData::F32(t.data().iter().map(|v| v.f64() as f32).collect()),
            _ => EntryData::F64(t.data().iter().map(|v| v.f64()).collect()),
        };
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn int(name: &str, values: Vec<i64>) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![values.len()],
            data: EntryData::I64(values),
        }
    }

    /// Converts a floating entry to a tensor of precision `F`; the
    /// conversion is exact when the stored dtype matches `F`.
    pub fn to_tensor<F: Float>(&self) -> Result<Tensor<F>> {
        let values: Vec<F> = match &self.data {
            EntryData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            EntryData::I64(_) => return Err(Error::Malformed(format!("entry `{}` is not floating point", self.name))),
        };
        Tensor::new(values, &self.shape)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, u32::try_from(entries.len()).map_err(|_| Error::Malformed("too many entries".into()))?);
    for e in entries {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Malformed(format!("entry `{}` shape {:?} holds {} values", e.name, e.shape, e.data.len())));
        }
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype().code());
        put_u32(&mut out, e.shape.len() as u32);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Malformed(format!("unexpected end of data reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint, keeping entries whose name starts with `prefix`.
pub fn from_bytes(bytes: &[u8], prefix: Option<&str>) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Malformed(format!("unknown dtype code {code} for `{name}`")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("entry `{name}` has an overflowing size")))?;
        let nbytes = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Malformed(format!("entry `{name}` has an overflowing size")))?;
        let payload = r.take(nbytes, "payload")?;
        if prefix.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let data = match dtype {
            DType::F32 => EntryData::F32(payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
            DType::F64 => EntryData::F64(payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
            DType::I64 => EntryData::I64(payload.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
        };
        out.push(Entry { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after the last entry", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, prefix: Option<&str>) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, prefix)
}

/// Every parameter of a store, in name order.
pub fn store_entries<F: Float>(store: &ParamStore<F>) -> Vec<Entry> {
    store.iter().map(|(name, t)| Entry::from_tensor(name, t)).collect()
}

/// Floating entries (optionally restricted to a prefix) as a parameter store.
pub fn entries_to_store<F: Float>(entries: &[Entry], prefix: Option<&str>) -> Result<ParamStore<F>> {
    let mut store = ParamStore::new();
    for e in entries {
        if matches!(e.data, EntryData::I64(_)) || prefix.is_some_and(|p| !e.name.starts_with(p)) {
            continue;
        }
        store.insert(&e.name, &e.to_tensor()?);
    }
    Ok(store)
}

/// Overwrites the values of every store parameter from `entries`; shapes
/// must match and every parameter must be present.
pub fn restore_into<F: Float>(store: &mut ParamStore<F>, entries: &[Entry]) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingEntry(name.clone()))?;
        let t = e.to_tensor::<F>()?;
        let current = store.leaf(&name).expect("listed name");
        if current.shape() != t.shape() {
            return Err(Error::Malformed(format!(
                "entry `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                current.shape()
            )));
        }
        store.set_data(&name, t.to_vec())?;
    }
    Ok(())
}

/// Looks up an integer entry.
pub fn int_entry(entries: &[Entry], name: &str) -> Result<Vec<i64>> {
    match entries.iter().find(|e| e.name == name).map(|e| &e.data) {
        Some(EntryData::I64(v)) => Ok(v.clone()),
        Some(_) => Err(Error::Malformed(format!("entry `{name}` is not an integer entry"))),
        None => Err(Error::MissingEntry(name.to_string())),
    }
}
