//! RGB images in `[0, 1]` and 8-bit binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub const CHANNELS: usize = 3;

/// `3 x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    height: usize,
    width: usize,
    pub clip_id: String,
    pub second_index: usize,
}

impl ImageTensor {
    pub fn new(data: Vec<f32>, height: usize, width: usize, clip_id: impl Into<String>, second_index: usize) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::input(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("image values must lie in [0, 1]"));
        }
        Ok(Self {
            data,
            height,
            width,
            clip_id: clip_id.into(),
            second_index,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Keeps metadata, replaces pixels. Values are clamped to `[0, 1]`.
    pub(crate) fn with_pixels(&self, mut data: Vec<f32>, height: usize, width: usize) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self {
            data,
            height,
            width,
            clip_id: self.clip_id.clone(),
            second_index: self.second_index,
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        for p in 0..plane {
            for c in 0..CHANNELS {
                out.push((self.data[c * plane + p] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8], clip_id: impl Into<String>, second_index: usize) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos as u64, "truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P6" {
            return Err(Error::format(0, "expected binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad PPM header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::format(0, format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        pos += 1;
        let plane = width * height;
        let payload = bytes
            .get(pos..pos + CHANNELS * plane)
            .ok_or_else(|| Error::format(pos as u64, "truncated PPM payload"))?;
        let mut data = vec![0.0f32; CHANNELS * plane];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[c * plane + p] = payload[p * CHANNELS + c] as f32 / 255.0;
            }
        }
        Self::new(data, height, width, clip_id, second_index)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).at(path)
    }

    pub fn read_ppm(path: &Path, clip_id: impl Into<String>, second_index: usize) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_ppm(&bytes, clip_id, second_index).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(offset, format!("{}: {message}", path.display())),
            other => other,
        })
    }
}

/// Keeps the first frame of every whole second of a `src_fps` stream.
pub fn downsample_video(frames: &[ImageTensor], src_fps: f64) -> Result<Vec<ImageTensor>> {
    if frames.is_empty() {
        return Err(Error::input("no video frames"));
    }
    if !(src_fps >= 1.0) {
        return Err(Error::input(format!("source frame rate must be >= 1, got {src_fps}")));
    }
    let mut out: Vec<ImageTensor> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let second = (i as f64 / src_fps + 1e-9).floor() as usize;
        if out.last().is_none_or(|l| l.second_index < second) {
            let mut f = f.clone();
            f.second_index = second;
            out.push(f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32, i: usize) -> ImageTensor {
        ImageTensor::new(vec![v; 12], 2, 2, "c", i).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let frames: Vec<_> = (0..100).map(|i| img(i as f32 / 100.0, i)).collect();
        let out = downsample_video(&frames, 10.0).unwrap();
        assert_eq!(out.len(), 10);
        for (s, f) in out.iter().enumerate() {
            assert_eq!(f.second_index, s);
            assert_eq!(f.data()[0], (s * 10) as f32 / 100.0);
        }
        assert_eq!(downsample_video(&frames[..25], 10.0).unwrap().len(), 3);
        let one = downsample_video(&frames[..1], 1.0).unwrap();
        assert_eq!(one[0].data(), frames[0].data());
        assert!(matches!(downsample_video(&[], 10.0), Err(Error::InvalidInput(_))));
        assert!(matches!(downsample_video(&frames, 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let im = ImageTensor::new(data, 5, 4, "x", 3).unwrap();
        let back = ImageTensor::from_ppm(&im.to_ppm(), "x", 3).unwrap();
        assert_eq!(back, im);
        assert_eq!(back.get(1, 2, 3), im.get(1, 2, 3));
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(matches!(ImageTensor::from_ppm(b"P5\n1 1\n255\n\0", "x", 0), Err(Error::Format { .. })));
        assert!(matches!(ImageTensor::from_ppm(b"P6\n2 2\n255\n\0\0", "x", 0), Err(Error::Format { .. })));
        assert!(matches!(ImageTensor::from_ppm(b"P6\n2", "x", 0), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageTensor::new(vec![1.5; 3], 1, 1, "c", 0).is_err());
    }
}
