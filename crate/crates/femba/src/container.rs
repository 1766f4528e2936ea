//! The `FMBC` tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FMBC"  version:u16  entries:u32
//! per entry:
//!     name_len:u16 name:utf8
//!     dtype:u8 rank:u8 dims:u64*rank
//!     scale:u8 (0 none | 1 per-channel: n:u32 f32*n | 2 pow2: i8)
//!     offset:u64 length:u64
//! payloads, contiguous, in entry order
//! crc32 of the payload bytes:u32
//! ```
//!
//! Offsets are absolute file positions. Readers reject anything that a
//! writer would not have produced, so write, read, write is byte-identical.

use std::path::Path;

use femba_core::quant::{packed_words, TernaryPacked};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMBC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    /// Ternary values packed 16 per `u32`.
    T2 = 2,
    /// `i16` in Q15 or any other 16-bit fixed-point scale.
    Q15 = 3,
    I32 = 4,
}

impl DType {
    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::T2,
            3 => DType::Q15,
            4 => DType::I32,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::T2 => "t2",
            DType::Q15 => "q15",
            DType::I32 => "i32",
        }
    }

    /// Payload bytes for `count` elements.
    pub fn payload_len(self, count: usize) -> usize {
        match self {
            DType::F32 | DType::I32 => 4 * count,
            DType::I8 => count,
            DType::Q15 => 2 * count,
            DType::T2 => 4 * packed_words(count),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scale {
    None,
    PerChannel(Vec<f32>),
    Pow2(i8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub scale: Scale,
    payload: Vec<u8>,
}

fn le_bytes<T, const N: usize>(v: &[T], f: impl Fn(&T) -> [u8; N]) -> Vec<u8> {
    v.iter().flat_map(f).collect()
}

impl Entry {
    fn new(name: &str, dtype: DType, dims: &[usize], payload: Vec<u8>) -> Self {
        let e = Self { name: name.into(), dtype, dims: dims.iter().map(|&d| d as u64).collect(), scale: Scale::None, payload };
        debug_assert_eq!(e.payload.len(), dtype.payload_len(e.count()));
        e
    }

    pub fn f32(name: &str, dims: &[usize], v: &[f32]) -> Self {
        Self::new(name, DType::F32, dims, le_bytes(v, |x| x.to_le_bytes()))
    }

    pub fn i8(name: &str, dims: &[usize], v: &[i8]) -> Self {
        Self::new(name, DType::I8, dims, v.iter().map(|&x| x as u8).collect())
    }

    pub fn q15(name: &str, dims: &[usize], v: &[i16]) -> Self {
        Self::new(name, DType::Q15, dims, le_bytes(v, |x| x.to_le_bytes()))
    }

    pub fn i32(name: &str, dims: &[usize], v: &[i32]) -> Self {
        Self::new(name, DType::I32, dims, le_bytes(v, |x| x.to_le_bytes()))
    }

    pub fn t2(name: &str, dims: &[usize], p: &TernaryPacked) -> Self {
        assert_eq!(dims.iter().product::<usize>(), p.count);
        Self::new(name, DType::T2, dims, le_bytes(&p.words, |x| x.to_le_bytes()))
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Config(format!("{} is {}, expected {}", self.name, self.dtype.name(), dtype.name())));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.expect(DType::F32)?;
        Ok(self.payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        Ok(self.to_f32()?.into_iter().map(f64::from).collect())
    }

    pub fn to_i8(&self) -> Result<Vec<i8>> {
        self.expect(DType::I8)?;
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }

    pub fn to_q15(&self) -> Result<Vec<i16>> {
        self.expect(DType::Q15)?;
        Ok(self.payload.chunks_exact(2).map(|b| i16::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        self.expect(DType::I32)?;
        Ok(self.payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub fn to_t2(&self) -> Result<TernaryPacked> {
        self.expect(DType::T2)?;
        let words = self.payload.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(TernaryPacked { words, count: self.count() })
    }

    /// Checks that the entry has the given dims.
    pub fn expect_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims.len() != dims.len() || self.dims.iter().zip(dims).any(|(&a, &b)| a != b as u64) {
            return Err(Error::Config(format!("{} has dims {:?}, expected {:?}", self.name, self.dims, dims)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.find(name).ok_or_else(|| Error::Config(format!("container has no entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let table_len: usize = self.entries.iter().map(table_entry_len).sum();
        let mut offset = (head.len() + table_len) as u64;
        for e in &self.entries {
            head.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            head.extend_from_slice(e.name.as_bytes());
            head.push(e.dtype as u8);
            head.push(e.dims.len() as u8);
            for d in &e.dims {
                head.extend_from_slice(&d.to_le_bytes());
            }
            match &e.scale {
                Scale::None => head.push(0),
                Scale::PerChannel(s) => {
                    head.push(1);
                    head.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    for v in s {
                        head.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Scale::Pow2(n) => {
                    head.push(2);
                    head.push(*n as u8);
                }
            }
            head.extend_from_slice(&offset.to_le_bytes());
            head.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            offset += e.payload.len() as u64;
        }
        let mut crc = crc32fast::Hasher::new();
        for e in &self.entries {
            head.extend_from_slice(&e.payload);
            crc.update(&e.payload);
        }
        head.extend_from_slice(&crc.finalize().to_le_bytes());
        head
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected FMBC"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = r.pos as u64;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at + 2, "entry name is not UTF-8"))?.to_owned();
            let tag_at = r.pos as u64;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::format(tag_at, "unknown dtype tag"))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let scale_at = r.pos as u64;
            let scale = match r.u8()? {
                0 => Scale::None,
                1 => {
                    let k = r.u32()? as usize;
                    Scale::PerChannel((0..k).map(|_| r.u32().map(f32::from_bits)).collect::<Result<_>>()?)
                }
                2 => Scale::Pow2(r.u8()? as i8),
                _ => return Err(Error::format(scale_at, "unknown scale tag")),
            };
            let off_at = r.pos as u64;
            let offset = r.u64()?;
            let length = r.u64()?;
            let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(tag_at, "dims overflow"))?;
            if count > b.len() as u64 * 16 || dtype.payload_len(count as usize) as u64 != length {
                return Err(Error::format(off_at, format!("{name}: payload length {length} does not match dims {dims:?}")));
            }
            table.push((name, dtype, dims, scale, offset, length, off_at));
        }
        let mut expected = r.pos as u64;
        let mut entries = Vec::with_capacity(table.len());
        let mut crc = crc32fast::Hasher::new();
        for (name, dtype, dims, scale, offset, length, off_at) in table {
            if offset != expected {
                return Err(Error::format(off_at, format!("{name}: payload at {offset}, expected {expected}")));
            }
            r.pos = offset as usize;
            let payload = r.take(length as usize)?.to_vec();
            crc.update(&payload);
            expected += length;
            entries.push(Entry { name, dtype, dims, scale, payload });
        }
        let crc_at = r.pos as u64;
        let stored = r.u32()?;
        if stored != crc.finalize() {
            return Err(Error::format(crc_at, "CRC32 mismatch"));
        }
        if r.pos != b.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after CRC"));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let b = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&b)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(&path, e))
    }
}

fn table_entry_len(e: &Entry) -> usize {
    let scale = match &e.scale {
        Scale::None => 1,
        Scale::PerChannel(s) => 5 + 4 * s.len(),
        Scale::Pow2(_) => 2,
    };
    2 + e.name.len() + 2 + 8 * e.dims.len() + scale + 16
}

/// Little-endian cursor whose errors name the failing offset.
pub(crate) struct Reader<'a> {
    pub b: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated: need {n} bytes, {} left", self.b.len() - self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use femba_core::quant::pack_ternary;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push(Entry::f32("w", &[2, 3], &[1.0, -2.5, 3.0, 0.0, 1e-3, f32::MAX]).with_scale(Scale::PerChannel(vec![0.5, 0.25])));
        c.push(Entry::i8("q", &[4], &[-127, 0, 5, 127]).with_scale(Scale::Pow2(7)));
        c.push(Entry::t2("t", &[17], &pack_ternary(&[1, -1, 0, 1, 1, 0, 0, 0, -1, 1, 1, 1, 0, 0, 0, 1, -1]).unwrap()));
        c.push(Entry::q15("h", &[2], &[-32768, 32767]));
        c.push(Entry::i32("b", &[0], &[]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let b = c.to_bytes();
        let back = Container::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.get("t").unwrap().to_t2().unwrap().count, 17);
        assert_eq!(back.get("t").unwrap().payload().len(), 8);
    }

    #[test]
    fn empty_container() {
        let b = Container::new().to_bytes();
        assert_eq!(b.len(), 4 + 2 + 4 + 4);
        assert!(Container::from_bytes(&b).unwrap().entries.is_empty());
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = b.clone();
        let last = bad.len() - 5;
        bad[last] ^= 1;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
    }

    #[test]
    fn wrong_dtype_is_config_error() {
        let c = sample();
        assert!(matches!(c.get("q").unwrap().to_f32(), Err(Error::Config(_))));
        assert!(c.get("missing").is_err());
    }

    proptest! {
        #[test]
        fn random_containers_round_trip(
            vals in proptest::collection::vec(any::<i32>(), 0..64),
            names in proptest::collection::vec("[a-z.]{1,12}", 1..5),
            exp in any::<i8>(),
        ) {
            let mut c = Container::new();
            for (i, n) in names.iter().enumerate() {
                let v: Vec<i32> = vals.iter().map(|x| x.wrapping_add(i as i32)).collect();
                c.push(Entry::i32(n, &[v.len()], &v).with_scale(Scale::Pow2(exp)));
                let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                c.push(Entry::f32(n, &[1, f.len()], &f));
            }
            let b = c.to_bytes();
            let back = Container::from_bytes(&b).unwrap();
            prop_assert_eq!(back.to_bytes(), b);
        }
    }
}
