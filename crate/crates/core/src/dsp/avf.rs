//! `AVF1` feature files: one clip's acoustic frames.
//!
//! Little-endian layout:
//!
//! ```text
//! "AVF1"
//! u8  dtype (0 = f32)
//! u32 rank (3), rank x u64 dims = [frames, 2, bins]
//! u32 clip-id length, UTF-8 clip id
//! frames x f64 frame centre times (seconds)
//! row-major f32 payload
//! ```

use std::path::Path;

use crate::dsp::features::FeatureMatrix;
use crate::error::{Error, IoContext, Result};
use crate::nn::checkpoint::Cursor;
use crate::nn::tensor::DType;

pub const MAGIC: &[u8; 4] = b"AVF1";

pub fn encode(clip_id: &str, frames: &[FeatureMatrix]) -> Result<Vec<u8>> {
    let bins = frames.first().map(|f| f.bins).unwrap_or(0);
    if frames.iter().any(|f| f.bins != bins || f.clip_id != clip_id) {
        return Err(Error::input("frames of one AVF1 file must share clip id and width"));
    }
    let mut out = Vec::with_capacity(64 + frames.len() * (8 + 8 * bins));
    out.extend_from_slice(MAGIC);
    out.push(DType::F32.code());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [frames.len(), 2, bins] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(clip_id.len() as u32).to_le_bytes());
    out.extend_from_slice(clip_id.as_bytes());
    for f in frames {
        out.extend_from_slice(&f.frame_center_time.to_le_bytes());
    }
    for f in frames {
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<FeatureMatrix>)> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected AVF1"));
    }
    let at = c.pos();
    if c.u8("dtype")? != DType::F32.code() {
        return Err(Error::format(at as u64, "only f32 payloads are supported"));
    }
    let at = c.pos();
    let dims = c.dims(3)?;
    let [frames, two, bins] = dims[..] else {
        return Err(Error::format(at as u64, format!("expected rank 3, got {dims:?}")));
    };
    if two != 2 {
        return Err(Error::format(at as u64, format!("expected 2 channels, got {two}")));
    }
    let clip_id = c.string("clip id")?;
    let times = c.reals::<f64>(DType::F64, frames, "frame centre times")?;
    let payload = c.reals::<f32>(DType::F32, frames * 2 * bins, "payload")?;
    c.expect_end()?;
    let out = times
        .iter()
        .enumerate()
        .map(|(t, &time)| {
            FeatureMatrix::new(payload[t * 2 * bins..(t + 1) * 2 * bins].to_vec(), bins, clip_id.clone(), t, time)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clip_id, out))
}

pub fn write(path: &Path, clip_id: &str, frames: &[FeatureMatrix]) -> Result<()> {
    std::fs::write(path, encode(clip_id, frames)?).at(path)
}

pub fn read(path: &Path) -> Result<(String, Vec<FeatureMatrix>)> {
    decode(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames() -> Vec<FeatureMatrix> {
        (0..3)
            .map(|t| FeatureMatrix::new((0..8).map(|i| (t * 8 + i) as f32 * 0.25 - 1.0).collect(), 4, "clip-α", t, 0.256 + 0.171 * t as f64).unwrap())
            .collect()
    }

    #[test]
    fn round_trip() {
        let f = frames();
        let bytes = encode("clip-α", &f).unwrap();
        let (id, back) = decode(&bytes).unwrap();
        assert_eq!(id, "clip-α");
        assert_eq!(back, f);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = encode("clip-α", &frames()).unwrap();
        for cut in [0, 3, 5, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Format { .. })));
    }
}
