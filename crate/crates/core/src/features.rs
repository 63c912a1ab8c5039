//! Frozen per-frame spatial features.
//!
//! Features either come from files written by an external extractor or from
//! the built-in MSCN statistics extractor. `CVQF` file layout, little-endian:
//! magic "CVQF", u32 version (= 1), u32 frames, u32 dim, then frames*dim
//! f32 values, row-major by frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{VideoTensor, CHANNELS};

pub const FEATURE_MAGIC: [u8; 4] = *b"CVQF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Half,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Half => "half",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "half" => Ok(Scale::Half),
            _ => Err(Error::InvalidConfig(format!("unknown scale {s:?}"))),
        }
    }
}

/// Per-frame feature vectors, `frames x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    values: Vec<f32>,
    pub scale: Scale,
}

impl FeatureSequence {
    pub fn new(dim: usize, values: Vec<f32>, scale: Scale) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot form frames of dimension {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite feature value".into()));
        }
        Ok(Self { dim, values, scale })
    }

    pub fn from_rows(rows: &[Vec<f32>], scale: Scale) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        Self::new(dim, rows.concat(), scale)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::TooFewFrames { needed: start + len, available: self.frames() });
        }
        Self::new(self.dim, self.values[start * self.dim..(start + len) * self.dim].to_vec(), self.scale)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], scale: Scale) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::TruncatedPayload { expected: FEATURE_HEADER_LEN as u64, actual: bytes.len() as u64 });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != FEATURE_MAGIC {
            return Err(Error::BadMagic { expected: FEATURE_MAGIC, found });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (frames, dim) = (word(8) as u64, word(12) as u64);
        if frames == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!("feature file declares {frames} frames of dim {dim}")));
        }
        let expected = frames * dim * 4;
        let actual = (bytes.len() - FEATURE_HEADER_LEN) as u64;
        if expected != actual {
            return Err(Error::TruncatedPayload { expected, actual });
        }
        let values = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dim as usize, values, scale)
    }
}

pub fn save_features(features: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::from_write(e, path))?;
    file.write_all(&features.to_bytes()).map_err(|e| Error::from_write(e, path))
}

pub fn load_features(path: impl AsRef<Path>, scale: Scale) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from_open(e, path))?;
    FeatureSequence::from_bytes(&bytes, scale)
}

/// Fails unless every sequence shares one feature dimension.
pub fn check_dataset_dims<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Option<usize>> {
    let mut dim = None;
    for s in seqs {
        match dim {
            None => dim = Some(s.dim()),
            Some(d) if d != s.dim() => {
                return Err(Error::DimensionMismatch(format!("dataset mixes feature dims {d} and {}", s.dim())))
            }
            _ => {}
        }
    }
    Ok(dim)
}

/// Frozen frame-level feature extractor.
pub trait SpatialEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode_frame(&self, frame: &[f32], width: usize, height: usize) -> Result<Vec<f32>>;
}

/// One feature row per frame, in frame order.
pub fn encode_video(video: &VideoTensor, encoder: &dyn SpatialEncoder, scale: Scale) -> Result<FeatureSequence> {
    let rows = (0..video.num_frames())
        .into_par_iter()
        .map(|t| encoder.encode_frame(video.frame(t), video.width(), video.height()))
        .collect::<Result<Vec<_>>>()?;
    FeatureSequence::from_rows(&rows, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MscnConfig {
    pub window: usize,
    pub sigma: f64,
    /// Stabilizer added to the local deviation, relative to the frame's global
    /// luma deviation, which keeps coefficients invariant to contrast gain.
    pub relative_stabilizer: f64,
    pub scales: usize,
}

impl Default for MscnConfig {
    fn default() -> Self {
        Self { window: 7, sigma: 7.0 / 6.0, relative_stabilizer: 1e-2, scales: 2 }
    }
}

/// Moments of MSCN coefficients and their four directional neighbour
/// products, at each dyadic scale.
#[derive(Debug, Clone, Default)]
pub struct MscnEncoder {
    pub config: MscnConfig,
}

pub const MSCN_MIN_SIDE: usize = 16;
const MOMENTS: usize = 4;
const MAPS_PER_SCALE: usize = 5;

impl MscnEncoder {
    pub fn new(config: MscnConfig) -> Self {
        Self { config }
    }
}

impl SpatialEncoder for MscnEncoder {
    fn dim(&self) -> usize {
        self.config.scales * MAPS_PER_SCALE * MOMENTS
    }

    fn encode_frame(&self, frame: &[f32], width: usize, height: usize) -> Result<Vec<f32>> {
        mscn_extract(frame, width, height, &self.config).map(|v| v.into_iter().map(|x| x as f32).collect())
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering with border replication.
fn blur(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        padded[..r].fill(row[0]);
        padded[r..r + w].copy_from_slice(row);
        padded[r + w..].fill(row[w - 1]);
        for (x, out) in tmp[y * w..(y + 1) * w].iter_mut().enumerate() {
            *out = kernel.iter().zip(&padded[x..x + kernel.len()]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (i, k) in kernel.iter().enumerate() {
            let sy = (y + i).saturating_sub(r).min(h - 1);
            for (d, v) in dst.iter_mut().zip(&tmp[sy * w..(sy + 1) * w]) {
                *d += k * v;
            }
        }
    }
    out
}

/// Mean, variance, skewness and kurtosis of `f(0..n)`.
fn moments(n: usize, f: impl Fn(usize) -> f64) -> [f64; MOMENTS] {
    let nf = n as f64;
    let mean = (0..n).map(&f).sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let d = f(i) - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    if m2 <= 1e-20 {
        return [mean, m2, 0.0, 0.0];
    }
    [mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2)]
}

/// Rec.709 luma of an interleaved RGB frame.
pub fn luma(frame: &[f32], width: usize, height: usize) -> Vec<f64> {
    (0..width * height)
        .map(|i| {
            let p = &frame[i * CHANNELS..i * CHANNELS + 3];
            0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
        })
        .collect()
}

/// Mean-subtracted contrast-normalized coefficients of a luma plane.
pub fn mscn_map(img: &[f64], w: usize, h: usize, config: &MscnConfig) -> Vec<f64> {
    let kernel = gaussian_kernel(config.window, config.sigma);
    let mu = blur(img, w, h, &kernel);
    let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
    let mu_sq = blur(&sq, w, h, &kernel);
    let n = img.len() as f64;
    let gmean = img.iter().sum::<f64>() / n;
    let gstd = (img.iter().map(|v| (v - gmean).powi(2)).sum::<f64>() / n).sqrt();
    let c = config.relative_stabilizer * gstd + 1e-12;
    img.iter()
        .zip(mu.iter().zip(&mu_sq))
        .map(|(&v, (&m, &m2))| (v - m) / ((m2 - m * m).abs().sqrt() + c))
        .collect()
}

/// 2x2 box downsampling.
fn halve(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (hw, hh) = (w / 2, h / 2);
    let out = (0..hh)
        .flat_map(|y| {
            (0..hw).map(move |x| {
                0.25 * (img[2 * y * w + 2 * x] + img[2 * y * w + 2 * x + 1] + img[(2 * y + 1) * w + 2 * x] + img[(2 * y + 1) * w + 2 * x + 1])
            })
        })
        .collect();
    (out, hw, hh)
}

/// Feature vector of one interleaved RGB frame.
pub fn mscn_extract(frame: &[f32], width: usize, height: usize, config: &MscnConfig) -> Result<Vec<f64>> {
    if width < MSCN_MIN_SIDE || height < MSCN_MIN_SIDE {
        return Err(Error::FrameTooSmall { width, height });
    }
    if frame.len() != width * height * CHANNELS {
        return Err(Error::DimensionMismatch("frame buffer does not match its geometry".into()));
    }
    let mut img = luma(frame, width, height);
    let (mut w, mut h) = (width, height);
    let mut out = Vec::with_capacity(config.scales * MAPS_PER_SCALE * MOMENTS);
    for s in 0..config.scales {
        if s > 0 {
            (img, w, h) = halve(&img, w, h);
        }
        let m = mscn_map(&img, w, h, config);
        out.extend(moments(m.len(), |i| m[i]));
        // horizontal, vertical, main diagonal, anti-diagonal neighbours:
        // (dy, x offset of the first pixel, x offset of its neighbour)
        let shifts: [(usize, usize, usize); 4] = [(0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0)];
        for (dy, x0, x1) in shifts {
            let cols = w - 1 + (x0 == x1) as usize;
            let m = &m;
            out.extend(moments((h - dy) * cols, |i| {
                let (y, x) = (i / cols, i % cols);
                m[y * w + x + x0] * m[(y + dy) * w + x + x1]
            }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::video::Fps;

    fn noise_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
        (0..w * h * 3).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn dim_is_forty() {
        assert_eq!(MscnEncoder::default().dim(), 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = noise_frame(&mut rng, 32, 24);
        assert_eq!(mscn_extract(&f, 32, 24, &MscnConfig::default()).unwrap().len(), 40);
    }

    #[test]
    fn constant_frame_has_zero_variance() {
        let f = vec![0.6f32; 20 * 18 * 3];
        let v = mscn_extract(&f, 20, 18, &MscnConfig::default()).unwrap();
        assert!(v[0].abs() <= 1e-6);
        assert!(v[1].abs() <= 1e-6);
    }

    #[test]
    fn contrast_gain_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = noise_frame(&mut rng, 40, 32);
        let g: Vec<f32> = f.iter().map(|v| 2.0 * v).collect();
        let cfg = MscnConfig::default();
        let a = mscn_extract(&f, 40, 32, &cfg).unwrap();
        let b = mscn_extract(&g, 40, 32, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn uniform_noise_variance_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = MscnConfig::default();
        let mean_var: f64 = (0..100)
            .map(|_| mscn_extract(&noise_frame(&mut rng, 32, 32), 32, 32, &cfg).unwrap()[1])
            .sum::<f64>()
            / 100.0;
        assert!((0.5..=1.5).contains(&mean_var), "{mean_var}");
    }

    #[test]
    fn frame_too_small() {
        let f = vec![0.0f32; 15 * 20 * 3];
        assert!(matches!(mscn_extract(&f, 15, 20, &MscnConfig::default()), Err(Error::FrameTooSmall { .. })));
    }

    #[test]
    fn encode_video_is_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Vec<f32>> = (0..4).map(|_| noise_frame(&mut rng, 16, 16)).collect();
        let mut samples = frames.concat();
        samples.extend_from_slice(&frames[1]);
        let v = VideoTensor::new(16, 16, 5, Fps::integer(30), samples).unwrap();
        let enc = MscnEncoder::default();
        let seq = encode_video(&v, &enc, Scale::Full).unwrap();
        assert_eq!(seq.frames(), 5);
        assert_eq!(seq.row(1), seq.row(4));

        let rev: Vec<usize> = (0..5).rev().collect();
        let rv = v.select_frames(&rev, v.fps()).unwrap();
        let rseq = encode_video(&rv, &enc, Scale::Full).unwrap();
        for t in 0..5 {
            assert_eq!(rseq.row(t), seq.row(4 - t));
        }
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FeatureSequence::new(3, vec![0.1, -2.5, 1e-30, 7.0, 0.0, -0.0], Scale::Half).unwrap();
        let p = dir.path().join("a.cvqf");
        save_features(&seq, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = load_features(&p, Scale::Half).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.frames(), 2);
    }

    #[test]
    fn zero_frames_rejected() {
        let mut bytes = FeatureSequence::new(2, vec![1.0, 2.0], Scale::Full).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(FEATURE_HEADER_LEN);
        assert!(matches!(FeatureSequence::from_bytes(&bytes, Scale::Full), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn mixed_dims_rejected() {
        let a = FeatureSequence::new(64, vec![0.0; 64], Scale::Full).unwrap();
        let b = FeatureSequence::new(128, vec![0.0; 128], Scale::Full).unwrap();
        assert!(matches!(check_dataset_dims([&a, &b]), Err(Error::DimensionMismatch(_))));
        assert_eq!(check_dataset_dims([&a, &a]).unwrap(), Some(64));
    }

    #[test]
    fn every_header_byte_corruption_rejected() {
        let base = FeatureSequence::new(3, (0..12).map(|i| i as f32).collect(), Scale::Full).unwrap().to_bytes();
        for pos in 0..FEATURE_HEADER_LEN {
            for flip in 1..=255u8 {
                let mut b = base.clone();
                b[pos] ^= flip;
                assert!(FeatureSequence::from_bytes(&b, Scale::Full).is_err(), "pos {pos} flip {flip}");
            }
        }
    }
}
