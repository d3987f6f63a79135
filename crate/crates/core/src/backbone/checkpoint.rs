//! Weight checkpoint container.
//!
//! Layout (little-endian): magic `SPXC`, u16 version, u32 entry count, then
//! per entry u8 kind (0 parameter, 1 buffer), u16 name length, UTF-8 name,
//! u8 rank, u32 per dimension, u8 frozen flag, f32 values; finally a u32
//! CRC-32 of every preceding byte.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, FormatError, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SPXC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Parameter = 0,
    Buffer = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub kind: EntryKind,
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub values: Vec<f32>,
}

fn push_entry(out: &mut Vec<u8>, kind: EntryKind, name: &str, shape: &[usize], frozen: bool, values: &[f64]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
    out.push(kind as u8);
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(frozen as u8);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serializes every parameter and buffer of a materialized store.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    if store.is_dry() {
        return Err(Error::InvalidArgument("cannot checkpoint a shape-only store".into()));
    }
    let count = store.len() + store.buffers().count();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (_, p) in store.iter() {
        push_entry(&mut out, EntryKind::Parameter, &p.name, &p.shape, p.frozen, p.tensor.data())?;
    }
    for (name, t) in store.buffers() {
        push_entry(&mut out, EntryKind::Buffer, name, t.shape(), false, t.data())?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> core::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> core::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> core::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> core::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < 14 {
        return Err(FormatError::Truncated.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed }.into());
    }
    let mut r = Reader { buf: body, pos: 6 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => EntryKind::Parameter,
            1 => EntryKind::Buffer,
            k => return Err(FormatError::Invalid(format!("entry kind {k}")).into()),
        };
        let len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Invalid("entry name is not UTF-8".into()))?
            .into();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<core::result::Result<Vec<_>, _>>()?;
        let frozen = r.u8()? != 0;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        entries.push(Entry { kind, name, shape, frozen, values });
    }
    if r.pos != body.len() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    Ok(entries)
}

/// Copies entries into same-named, same-shaped slots of `store` for which
/// `select` holds. Frozen flags are left to the caller's policy. Returns the
/// number of tensors loaded.
pub fn load(store: &mut ParamStore, entries: &[Entry], select: impl Fn(&str) -> bool) -> Result<usize> {
    let mut n = 0;
    for e in entries.iter().filter(|e| select(&e.name)) {
        let values: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
        let tensor = Tensor::new(&e.shape, values)?;
        match e.kind {
            EntryKind::Parameter => {
                let Some(id) = store.find(&e.name) else { continue };
                let p = store.get_mut(id);
                if p.shape != e.shape {
                    return Err(Error::Shape(format!("{}: checkpoint {:?}, model {:?}", e.name, e.shape, p.shape)));
                }
                p.tensor = tensor;
            }
            EntryKind::Buffer => {
                let Some(id) = store.find_buffer(&e.name) else { continue };
                let b = store.buffer_mut(id);
                if b.shape() != e.shape.as_slice() {
                    return Err(Error::Shape(format!("{}: checkpoint {:?}, model {:?}", e.name, e.shape, b.shape())));
                }
                *b = tensor;
            }
        }
        n += 1;
    }
    Ok(n)
}
