//! Three-level temporal wavelet packet decomposition.
//!
//! Each level splits every node into a low and a high band and decimates
//! both by two, with periodic wrap-around inside the (padded) signal. Signals
//! whose length is not a multiple of 8 are first padded at the end by
//! half-sample symmetric reflection, so every leaf holds `ceil(T / 8)`
//! samples. Leaves are numbered by filter path, most significant bit first:
//! leaf 0 is low-low-low and leaf 7 is high-high-high.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Fps, VideoTensor, CHANNELS};

pub const LEVELS: usize = 3;
pub const NUM_LEAVES: usize = 1 << LEVELS;
pub const MIN_SIGNAL_LEN: usize = NUM_LEAVES;

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    Db2,
    Bior22,
}

impl WaveletFamily {
    pub const ALL: [WaveletFamily; 3] = [WaveletFamily::Haar, WaveletFamily::Db2, WaveletFamily::Bior22];

    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Db2 => "db2",
            WaveletFamily::Bior22 => "bior22",
        }
    }

    /// Orthonormal families preserve signal energy across the leaves.
    pub fn is_orthonormal(self) -> bool {
        !matches!(self, WaveletFamily::Bior22)
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(WaveletFamily::Haar),
            "db2" => Ok(WaveletFamily::Db2),
            "bior22" | "bior2.2" => Ok(WaveletFamily::Bior22),
            _ => Err(Error::InvalidConfig(format!("unknown wavelet family {s:?}"))),
        }
    }
}

/// Daubechies-2 analysis low-pass, orthonormal.
pub fn db2_lowpass() -> [f64; 4] {
    let s3 = 3f64.sqrt();
    let n = 4.0 * SQRT2;
    [(1.0 + s3) / n, (3.0 + s3) / n, (3.0 - s3) / n, (1.0 - s3) / n]
}

/// Quadrature mirror high-pass of `db2_lowpass`.
pub fn db2_highpass() -> [f64; 4] {
    let h = db2_lowpass();
    [h[3], -h[2], h[1], -h[0]]
}

/// Biorthogonal 2.2 analysis filters as correlation kernels:
/// the low-pass is centred on even samples, the high-pass on odd ones.
pub const BIOR22_LOWPASS: [f64; 5] = [
    -0.125 * SQRT2,
    0.25 * SQRT2,
    0.75 * SQRT2,
    0.25 * SQRT2,
    -0.125 * SQRT2,
];
pub const BIOR22_HIGHPASS: [f64; 3] = [-0.5 / SQRT2, 1.0 / SQRT2, -0.5 / SQRT2];

/// One analysis level. `x.len()` must be even.
fn split(x: &[f64], family: WaveletFamily) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    match family {
        WaveletFamily::Haar => (0..half)
            .map(|k| ((x[2 * k] + x[2 * k + 1]) / SQRT2, (x[2 * k] - x[2 * k + 1]) / SQRT2))
            .unzip(),
        WaveletFamily::Db2 => {
            let (h, g) = (db2_lowpass(), db2_highpass());
            (0..half)
                .map(|k| {
                    let mut lo = 0.0;
                    let mut hi = 0.0;
                    for i in 0..4 {
                        let v = x[(2 * k + i) % n];
                        lo += h[i] * v;
                        hi += g[i] * v;
                    }
                    (lo, hi)
                })
                .unzip()
        }
        WaveletFamily::Bior22 => {
            // CDF 5/3 lifting: predict odd samples, update even ones
            let d: Vec<f64> = (0..half).map(|k| x[2 * k + 1] - 0.5 * (x[2 * k] + x[(2 * k + 2) % n])).collect();
            let lo = (0..half)
                .map(|k| SQRT2 * (x[2 * k] + 0.25 * (d[(k + half - 1) % half] + d[k])))
                .collect();
            let hi = d.iter().map(|v| v / SQRT2).collect();
            (lo, hi)
        }
    }
}

/// Inverse of `split`.
fn merge(lo: &[f64], hi: &[f64], family: WaveletFamily) -> Vec<f64> {
    let half = lo.len();
    let n = 2 * half;
    let mut x = vec![0.0; n];
    match family {
        WaveletFamily::Haar => {
            for k in 0..half {
                x[2 * k] = (lo[k] + hi[k]) / SQRT2;
                x[2 * k + 1] = (lo[k] - hi[k]) / SQRT2;
            }
        }
        WaveletFamily::Db2 => {
            let (h, g) = (db2_lowpass(), db2_highpass());
            for k in 0..half {
                for i in 0..4 {
                    x[(2 * k + i) % n] += h[i] * lo[k] + g[i] * hi[k];
                }
            }
        }
        WaveletFamily::Bior22 => {
            let d: Vec<f64> = hi.iter().map(|v| v * SQRT2).collect();
            for k in 0..half {
                x[2 * k] = lo[k] / SQRT2 - 0.25 * (d[(k + half - 1) % half] + d[k]);
            }
            for k in 0..half {
                x[2 * k + 1] = d[k] + 0.5 * (x[2 * k] + x[(2 * k + 2) % n]);
            }
        }
    }
    x
}

fn padded(signal: &[f64]) -> Vec<f64> {
    let len = signal.len().div_ceil(NUM_LEAVES) * NUM_LEAVES;
    let mut out = signal.to_vec();
    let t = signal.len();
    for k in 0..len - t {
        out.push(signal[t - 1 - k]);
    }
    out
}

fn check_len(len: usize) -> Result<()> {
    if len < MIN_SIGNAL_LEN {
        return Err(Error::SignalTooShort { len, min: MIN_SIGNAL_LEN });
    }
    Ok(())
}

/// Full packet tree; returns the eight leaves in natural order.
pub fn wpt_forward(signal: &[f64], family: WaveletFamily) -> Result<Vec<Vec<f64>>> {
    check_len(signal.len())?;
    let mut nodes = vec![padded(signal)];
    for _ in 0..LEVELS {
        nodes = nodes
            .iter()
            .flat_map(|node| {
                let (lo, hi) = split(node, family);
                [lo, hi]
            })
            .collect();
    }
    Ok(nodes)
}

/// Reconstructs a signal of length `len` from its eight leaves.
pub fn wpt_inverse(leaves: &[Vec<f64>], family: WaveletFamily, len: usize) -> Result<Vec<f64>> {
    if leaves.len() != NUM_LEAVES {
        return Err(Error::DimensionMismatch(format!("expected {NUM_LEAVES} leaves, got {}", leaves.len())));
    }
    let leaf_len = leaves[0].len();
    if leaves.iter().any(|l| l.len() != leaf_len) || leaf_len * NUM_LEAVES < len || leaf_len == 0 {
        return Err(Error::DimensionMismatch("leaf lengths inconsistent with signal length".into()));
    }
    let mut nodes: Vec<Vec<f64>> = leaves.to_vec();
    for _ in 0..LEVELS {
        nodes = nodes.chunks(2).map(|pair| merge(&pair[0], &pair[1], family)).collect();
    }
    let mut x = nodes.pop().expect("single root");
    x.truncate(len);
    Ok(x)
}

/// A single leaf, computing only the nodes on its filter path.
pub fn wpt_leaf(signal: &[f64], family: WaveletFamily, leaf: usize) -> Result<Vec<f64>> {
    check_len(signal.len())?;
    if leaf >= NUM_LEAVES {
        return Err(Error::InvalidConfig(format!("leaf index {leaf} out of range")));
    }
    let mut node = padded(signal);
    for level in (0..LEVELS).rev() {
        let (lo, hi) = split(&node, family);
        node = if (leaf >> level) & 1 == 0 { lo } else { hi };
    }
    Ok(node)
}

/// Family and band-pass leaf used to augment one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WaveletBand {
    pub family: WaveletFamily,
    pub subband: usize,
}

impl WaveletBand {
    pub fn new(family: WaveletFamily, subband: usize) -> Result<Self> {
        if !(1..NUM_LEAVES).contains(&subband) {
            return Err(Error::InvalidConfig(format!("subband {subband} must lie in [1, {NUM_LEAVES})")));
        }
        Ok(Self { family, subband })
    }

    /// All 21 band-pass leaves, family-major.
    pub fn all() -> Vec<Self> {
        WaveletFamily::ALL
            .iter()
            .flat_map(|&family| (1..NUM_LEAVES).map(move |subband| Self { family, subband }))
            .collect()
    }

    /// Short tag used in file names, e.g. `db2_s5`.
    pub fn tag(&self) -> String {
        format!("{}_s{}", self.family, self.subband)
    }
}

/// Draws uniformly over the 21 (family, band-pass leaf) pairs.
pub fn sample_band<R: Rng + ?Sized>(rng: &mut R) -> WaveletBand {
    let all = WaveletBand::all();
    all[rng.random_range(0..all.len())]
}

/// Applies the selected packet leaf along time at every pixel and channel.
/// The output has `ceil(T / 8)` frames at one eighth of the input rate.
pub fn wpt_subband_video(video: &VideoTensor, band: WaveletBand) -> Result<VideoTensor> {
    let t_in = video.num_frames();
    check_len(t_in)?;
    let t_out = t_in.div_ceil(NUM_LEAVES);
    let plane = video.width() * video.height() * CHANNELS;
    let samples = video.samples();
    let mut out = vec![0.0f32; t_out * plane];
    let mut series = vec![0.0f64; t_in];
    for p in 0..plane {
        for (t, s) in series.iter_mut().enumerate() {
            *s = samples[t * plane + p] as f64;
        }
        let leaf = wpt_leaf(&series, band.family, band.subband)?;
        for (t, v) in leaf.iter().enumerate() {
            out[t * plane + p] = *v as f32;
        }
    }
    let fps = video.fps();
    let fps = Fps::new(fps.num, fps.den.saturating_mul(NUM_LEAVES as u32))?;
    VideoTensor::new(video.width(), video.height(), t_out, fps, out)
}
