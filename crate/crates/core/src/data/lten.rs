//! `LTEN` tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "LTEN" | version u32 = 1 | entry count u32
//! per entry: name_len u16 | name bytes | dtype u8 | rank u8 | extents u64[rank] | payload
//! ```
//!
//! dtype codes are 0 = f64, 1 = f32, 2 = u8. Payloads are row-major.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LTEN";
pub const VERSION: u32 = 1;
pub const MAX_NAME_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum LtenError {
    #[error("bad magic: expected \"LTEN\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload while reading {0}")]
    Truncated(String),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("invalid entry name {0:?}: names must be non-empty ASCII of at most 64 bytes")]
    InvalidName(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("entry {name:?}: shape {shape:?} needs {expected} elements, payload has {got}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {0:?} has the wrong dtype")]
    WrongDtype(String),
    #[error("trailing bytes after last entry")]
    TrailingBytes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Entry {
            name: name.into(),
            shape,
            data: TensorData::U8(data),
        }
    }

    /// UTF-8 text stored as a rank-1 `u8` entry.
    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        Entry::u8(name, vec![bytes.len()], bytes)
    }

    fn validate(&self) -> Result<(), LtenError> {
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN || !self.name.is_ascii() {
            return Err(LtenError::InvalidName(self.name.clone()));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(LtenError::RankTooLarge(self.shape.len()));
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(LtenError::ShapeMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(())
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, LtenError> {
    let mut seen = HashSet::new();
    for e in entries {
        e.validate()?;
        if !seen.insert(e.name.as_str()) {
            return Err(LtenError::DuplicateName(e.name.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.code());
        out.push(e.shape.len() as u8);
        for &s in &e.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        match &e.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LtenError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| LtenError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, LtenError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, LtenError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, LtenError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, LtenError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>, LtenError> {
    if buf.len() < 4 {
        return Err(LtenError::Truncated("magic".into()));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(LtenError::BadMagic(magic));
    }
    let mut c = Cursor { buf, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(LtenError::UnsupportedVersion(version));
    }
    let count = c.u32("entry count")?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = String::from_utf8_lossy(c.take(name_len, "name")?).into_owned();
        if !seen.insert(name.clone()) {
            return Err(LtenError::DuplicateName(name));
        }
        let dtype = c.u8("dtype")?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extents")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, s| a.checked_mul(*s))
            .ok_or_else(|| LtenError::Truncated(format!("{name} extents")))?;
        let what = format!("{name} payload");
        let data = match dtype {
            0 => TensorData::F64(
                c.take(n.saturating_mul(8), &what)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F32(
                c.take(n.saturating_mul(4), &what)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::U8(c.take(n, &what)?.to_vec()),
            other => return Err(LtenError::UnknownDtype(other)),
        };
        entries.push(Entry { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(LtenError::TrailingBytes);
    }
    Ok(entries)
}

pub fn save_tensor_file(path: impl AsRef<Path>, entries: &[Entry]) -> Result<(), LtenError> {
    let bytes = encode(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Vec<Entry>, LtenError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Lookup helpers over a decoded entry list.
pub trait EntryList {
    fn entry(&self, name: &str) -> Result<&Entry, LtenError>;

    fn f64_entry(&self, name: &str) -> Result<(&[usize], &[f64]), LtenError> {
        let e = self.entry(name)?;
        match &e.data {
            TensorData::F64(v) => Ok((&e.shape, v)),
            _ => Err(LtenError::WrongDtype(name.to_string())),
        }
    }

    fn u8_entry(&self, name: &str) -> Result<(&[usize], &[u8]), LtenError> {
        let e = self.entry(name)?;
        match &e.data {
            TensorData::U8(v) => Ok((&e.shape, v)),
            _ => Err(LtenError::WrongDtype(name.to_string())),
        }
    }

    fn text_entry(&self, name: &str) -> Result<String, LtenError> {
        let (_, bytes) = self.u8_entry(name)?;
        Ok(String::from_utf8_lossy(bytes).into_owned())
    }
}

impl EntryList for [Entry] {
    fn entry(&self, name: &str) -> Result<&Entry, LtenError> {
        self.iter()
            .find(|e| e.name == name)
            .ok_or_else(|| LtenError::MissingEntry(name.to_string()))
    }
}

impl EntryList for Vec<Entry> {
    fn entry(&self, name: &str) -> Result<&Entry, LtenError> {
        self.as_slice().entry(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip_bit_exact() {
        let data: Vec<f64> = (0..15).map(|i| (i as f64).sin() * 1e-3 + 1.0 / 3.0).collect();
        let e = vec![Entry::f64("w", vec![3, 5], data)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lten");
        save_tensor_file(&p, &e).unwrap();
        assert_eq!(load_tensor_file(&p).unwrap(), e);
    }

    #[test]
    fn scalar_entry_round_trips() {
        let e = vec![Entry::f64("s", vec![], vec![-0.0]), Entry::text("meta", "a=1")];
        let back = decode(&encode(&e).unwrap()).unwrap();
        match &back[0].data {
            TensorData::F64(v) => assert_eq!(v[0].to_bits(), (-0.0f64).to_bits()),
            _ => panic!(),
        }
        assert_eq!(back.text_entry("meta").unwrap(), "a=1");
    }

    #[test]
    fn distinct_load_errors() {
        let good = encode(&[Entry::f64("a", vec![2], vec![1.0, 2.0])]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(LtenError::BadMagic(_))));

        let short = &good[..good.len() - 3];
        assert!(matches!(decode(short), Err(LtenError::Truncated(_))));

        let dup = [
            Entry::f64("a", vec![1], vec![1.0]),
            Entry::f64("a", vec![1], vec![2.0]),
        ];
        assert!(matches!(encode(&dup), Err(LtenError::DuplicateName(_))));

        // hand-built duplicate on the read side
        let mut twice = encode(&dup[..1]).unwrap();
        let body = twice[12..].to_vec();
        twice[8..12].copy_from_slice(&2u32.to_le_bytes());
        twice.extend_from_slice(&body);
        assert!(matches!(decode(&twice), Err(LtenError::DuplicateName(_))));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&[Entry::u8("b", vec![2], vec![7, 9])]).unwrap();
        let expected: Vec<u8> = [
            b"LTEN".as_slice(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"b",
            &[2u8, 1u8],
            &2u64.to_le_bytes(),
            &[7, 9],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn names_are_validated() {
        let long = "x".repeat(65);
        assert!(matches!(
            encode(&[Entry::f64(long, vec![], vec![0.0])]),
            Err(LtenError::InvalidName(_))
        ));
        assert!(matches!(
            encode(&[Entry::f64("é", vec![], vec![0.0])]),
            Err(LtenError::InvalidName(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_any_rank(
            shape in prop::collection::vec(1usize..4, 0..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            }).collect();
            let f32s: Vec<f32> = data.iter().map(|v| *v as f32).collect();
            let e = vec![
                Entry::f64("x", shape.clone(), data),
                Entry { name: "y".into(), shape: shape.clone(), data: TensorData::F32(f32s) },
            ];
            let back = decode(&encode(&e).unwrap()).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), encode(&e).unwrap());
        }
    }
}
