//! `AVW1` weight checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "AVW1"
//! u32 metadata length, UTF-8 metadata (flat `key = value` lines)
//! u32 entry count
//! per entry:
//!   u32 name length, UTF-8 name
//!   u8  flags (bit 0 frozen, bit 1 buffer)
//!   u8  group tag (0 AE, 1 VE, 2 SC, 3 auxiliary)
//!   u8  dtype (0 f32, 1 f64)
//!   u32 rank, rank x u64 dims
//!   payload, row-major
//! u64 FNV-1a hash of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::nn::params::{Group, Param, ParamStore};
use crate::nn::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"AVW1";

const FLAG_FROZEN: u8 = 1;
const FLAG_BUFFER: u8 = 2;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode<T: Real>(ps: &ParamStore<T>, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for p in ps.entries() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let flags = if p.frozen { FLAG_FROZEN } else { 0 } | if p.buffer { FLAG_BUFFER } else { 0 };
        out.push(flags);
        out.push(p.group.tag());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let hash = fnv1a64(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

/// Bounds-checked little-endian cursor reporting byte offsets on failure.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }

    pub(crate) fn dims(&mut self, max_rank: u32) -> Result<Vec<usize>> {
        let at = self.pos;
        let rank = self.u32("rank")?;
        if rank > max_rank {
            return Err(Error::format(at as u64, format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = self.u64("dimension")?;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= (self.bytes.len() as u64))
                .ok_or_else(|| Error::format(at as u64, "dimensions exceed file size"))?;
            dims.push(d as usize);
        }
        Ok(dims)
    }

    pub(crate) fn reals<T: Real>(&mut self, dtype: DType, count: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(count * dtype.size(), what)?;
        Ok(match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        })
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Decode a checkpoint, converting payloads to `T` if needed.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(String, ParamStore<T>)> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected AVW1"));
    }
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file too short"));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let metadata = c.string("metadata")?;
    let count = c.u32("entry count")?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let name = c.string("entry name")?;
        let at = c.pos();
        let flags = c.u8("flags")?;
        if flags & !(FLAG_FROZEN | FLAG_BUFFER) != 0 {
            return Err(Error::format(at as u64, format!("unknown flags {flags:#x}")));
        }
        let at = c.pos();
        let group = Group::from_tag(c.u8("group")?)
            .ok_or_else(|| Error::format(at as u64, "unknown group tag"))?;
        let at = c.pos();
        let dtype = DType::from_code(c.u8("dtype")?)
            .ok_or_else(|| Error::format(at as u64, "unknown dtype"))?;
        let dims = c.dims(8)?;
        let n: usize = dims.iter().product();
        let data = c.reals::<T>(dtype, n, "payload")?;
        let value = Tensor::from_vec(&dims, data)?;
        ps.push_raw(Param {
            name,
            group,
            frozen: flags & FLAG_FROZEN != 0,
            buffer: flags & FLAG_BUFFER != 0,
            grad: Tensor::zeros(&dims),
            value,
        });
    }
    if c.pos() != body_end {
        return Err(Error::format(
            c.pos() as u64,
            format!("expected checksum at byte {}, found {} unparsed bytes", c.pos(), body_end as i64 - c.pos() as i64),
        ));
    }
    let actual = fnv1a64(&bytes[..body_end]);
    if actual != stored {
        return Err(Error::format(body_end as u64, "checksum mismatch"));
    }
    Ok((metadata, ps))
}

pub fn save<T: Real>(ps: &ParamStore<T>, metadata: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, encode(ps, metadata)).at(path)
}

pub fn load<T: Real>(path: &Path) -> Result<(String, ParamStore<T>)> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        ps.add("ae.w", Group::Ae, Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        ps.add_buffer("ae.rm", Group::Ae, Tensor::full(&[3], 0.25));
        ps.add("ve.w", Group::Ve, Tensor::from_fn(&[4], |i| i as f32));
        ps.set_frozen(Group::Ve, true);
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = store();
        let bytes = encode(&ps, "mode = av_joint\n");
        let (meta, back) = decode::<f32>(&bytes).unwrap();
        assert_eq!(meta, "mode = av_joint\n");
        assert_eq!(back, ps);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&store(), "m");
        for cut in 0..bytes.len() {
            let err = decode::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_bytes_are_rejected() {
        let bytes = encode(&store(), "m");
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(matches!(decode::<f32>(&b), Err(Error::Format { .. })), "byte {i}");
        }
    }
}
