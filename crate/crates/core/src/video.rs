//! In-memory video representation and the raw `CVQV` bundle format.
//!
//! Bundle layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CVQV"
//! 4       4     u32 version (= 1)
//! 8       4     u32 width
//! 12      4     u32 height
//! 16      4     u32 num_frames
//! 20      4     u32 fps_num
//! 24      4     u32 fps_den
//! 28      1     u8 pixel_format (0 = rgb24 interleaved)
//! 29      ...   width*height*num_frames*3 bytes, (frame, row, col, channel) order
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CVQV";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_HEADER_LEN: usize = 29;
pub const CHANNELS: usize = 3;

/// Frame rate as an exact rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidVideo(format!("fps {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn integer(fps: u32) -> Self {
        Self { num: fps, den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// The rate as a whole number of frames per second, if it is one.
    pub fn as_integer(self) -> Option<u32> {
        (self.den != 0 && self.num % self.den == 0).then(|| self.num / self.den)
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Dense RGB video, samples indexed `(frame, row, col, channel)`.
///
/// Loaded videos hold values in `[0, 1]`. Intermediate products such as
/// temporal subband stacks reuse this type and may hold any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    width: usize,
    height: usize,
    num_frames: usize,
    fps: Fps,
    samples: Vec<f32>,
}

impl VideoTensor {
    pub fn new(width: usize, height: usize, num_frames: usize, fps: Fps, samples: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || num_frames == 0 {
            return Err(Error::InvalidVideo(format!(
                "dimensions {width}x{height}x{num_frames} must all be at least 1"
            )));
        }
        if fps.num == 0 || fps.den == 0 {
            return Err(Error::InvalidVideo(format!("fps {fps} must be positive")));
        }
        let expected = width * height * num_frames * CHANNELS;
        if samples.len() != expected {
            return Err(Error::InvalidVideo(format!(
                "expected {expected} samples, got {}",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVideo(format!("non-finite sample at index {bad}")));
        }
        Ok(Self { width, height, num_frames, fps, samples })
    }

    pub fn filled(width: usize, height: usize, num_frames: usize, fps: Fps, value: f32) -> Result<Self> {
        Self::new(width, height, num_frames, fps, vec![value; width * height * num_frames * CHANNELS])
    }

    /// Builds a video from a per-sample generator `f(frame, row, col, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        num_frames: usize,
        fps: Fps,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * num_frames * CHANNELS);
        for t in 0..num_frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..CHANNELS {
                        samples.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(width, height, num_frames, fps, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.height * CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.samples[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.samples[self.index(t, y, x, c)]
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, indices: &[usize], fps: Fps) -> Result<Self> {
        let n = self.frame_len();
        let mut samples = Vec::with_capacity(indices.len() * n);
        for &t in indices {
            samples.extend_from_slice(self.frame(t));
        }
        Self::new(self.width, self.height, indices.len(), fps, samples)
    }

    /// Spatial crop of every frame.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidVideo("crop window exceeds frame".into()));
        }
        Self::from_fn(width, height, self.num_frames, self.fps, |t, y, x, c| self.at(t, y0 + y, x0 + x, c))
    }

    pub fn with_fps(mut self, fps: Fps) -> Self {
        self.fps = fps;
        self
    }

    /// Rescales samples affinely so the global range maps onto `[0, 1]`.
    /// A constant video maps to all zeros.
    pub fn normalize_unit_range(&self) -> Self {
        let (lo, hi) = self
            .samples
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let samples = if span > 0.0 {
            self.samples.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.samples.len()]
        };
        Self { samples, ..*self }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Decodes a bundle held in memory.
pub fn decode_bundle(bytes: &[u8]) -> Result<VideoTensor> {
    if bytes.len() < BUNDLE_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: BUNDLE_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if found != BUNDLE_MAGIC {
        return Err(Error::BadMagic { expected: BUNDLE_MAGIC, found });
    }
    let version = read_u32(bytes, 4);
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let width = read_u32(bytes, 8) as usize;
    let height = read_u32(bytes, 12) as usize;
    let num_frames = read_u32(bytes, 16) as usize;
    let fps = Fps::new(read_u32(bytes, 20), read_u32(bytes, 24))?;
    let pixel_format = bytes[28];
    if pixel_format != 0 {
        return Err(Error::UnsupportedPixelFormat(pixel_format));
    }
    let expected = (width as u64) * (height as u64) * (num_frames as u64) * CHANNELS as u64;
    let actual = (bytes.len() - BUNDLE_HEADER_LEN) as u64;
    if expected != actual {
        return Err(Error::TruncatedPayload { expected, actual });
    }
    let samples = bytes[BUNDLE_HEADER_LEN..].iter().map(|&b| b as f32 / 255.0).collect();
    VideoTensor::new(width, height, num_frames, fps, samples)
}

/// Encodes a video as bundle bytes, quantizing samples to 8 bits.
pub fn encode_bundle(video: &VideoTensor) -> Result<Vec<u8>> {
    let dims = [video.width, video.height, video.num_frames];
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::InvalidVideo("dimension exceeds u32".into()));
    }
    let mut out = Vec::with_capacity(BUNDLE_HEADER_LEN + video.samples.len());
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&video.fps.num.to_le_bytes());
    out.extend_from_slice(&video.fps.den.to_le_bytes());
    out.push(0);
    out.extend(video.samples.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from_open(e, path))?;
    decode_bundle(&bytes)
}

pub fn save_bundle(video: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(video)?;
    let mut file = fs::File::create(path).map_err(|e| Error::from_write(e, path))?;
    file.write_all(&bytes).map_err(|e| Error::from_write(e, path))?;
    Ok(())
}
