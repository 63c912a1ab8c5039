//! Separable Lanczos resampling with fused anti-aliasing on downscale.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::video::{VideoTensor, CHANNELS};

/// Number of lobes of the Lanczos window.
pub const LANCZOS_TAPS: f64 = 3.0;

pub fn lanczos(x: f64, a: f64) -> f64 {
    let ax = x.abs();
    if ax == 0.0 {
        return 1.0;
    }
    if ax >= a || ax.fract() == 0.0 {
        // zero crossings of sinc(x) are exact at the integers
        return 0.0;
    }
    let px = PI * x;
    a * px.sin() * (px / a).sin() / (px * px)
}

/// Contribution of input samples to one output sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Normalized per-output weights for resizing an axis of `in_len` samples to
/// `out_len`. Pixel centres are aligned (`(i + 0.5) * in/out - 0.5`); when
/// shrinking, the kernel is stretched by the scale factor. Taps falling off
/// the edge are clamped to the border sample.
pub fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = LANCZOS_TAPS * stretch;
    (0..out_len)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale - 0.5;
            let lo = (centre - support).floor() as isize;
            let hi = (centre + support).ceil() as isize;
            let mut weights = vec![0.0; in_len];
            let mut first = in_len;
            let mut last = 0;
            for j in lo..=hi {
                let w = lanczos((j as f64 - centre) / stretch, LANCZOS_TAPS);
                if w == 0.0 {
                    continue;
                }
                let k = j.clamp(0, in_len as isize - 1) as usize;
                weights[k] += w;
                first = first.min(k);
                last = last.max(k);
            }
            if first > last {
                // cannot happen for a positive scale; keep nearest sample
                let k = (centre.round().max(0.0) as usize).min(in_len - 1);
                return Taps { start: k, weights: vec![1.0] };
            }
            let mut weights = weights[first..=last].to_vec();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Taps { start: first, weights }
        })
        .collect()
}

/// Resamples every frame to `out_width` x `out_height`, clamping to `[0, 1]`.
pub fn resample_spatial(video: &VideoTensor, out_width: usize, out_height: usize) -> Result<VideoTensor> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::ZeroDimension);
    }
    let (w, h, frames) = (video.width(), video.height(), video.num_frames());
    if out_width == w && out_height == h {
        return Ok(video.clone());
    }
    let col_taps = (out_width != w).then(|| axis_taps(w, out_width));
    let row_taps = (out_height != h).then(|| axis_taps(h, out_height));

    let mut out = Vec::with_capacity(out_width * out_height * frames * CHANNELS);
    let mut horizontal = vec![0.0f64; out_width * h * CHANNELS];
    for t in 0..frames {
        let frame = video.frame(t);
        for y in 0..h {
            for ox in 0..out_width {
                for c in 0..CHANNELS {
                    horizontal[(y * out_width + ox) * CHANNELS + c] = match &col_taps {
                        None => frame[(y * w + ox) * CHANNELS + c] as f64,
                        Some(taps) => {
                            let tap = &taps[ox];
                            tap.weights
                                .iter()
                                .enumerate()
                                .map(|(k, wt)| wt * frame[(y * w + tap.start + k) * CHANNELS + c] as f64)
                                .sum()
                        }
                    };
                }
            }
        }
        for oy in 0..out_height {
            for ox in 0..out_width {
                for c in 0..CHANNELS {
                    let v = match &row_taps {
                        None => horizontal[(oy * out_width + ox) * CHANNELS + c],
                        Some(taps) => {
                            let tap = &taps[oy];
                            tap.weights
                                .iter()
                                .enumerate()
                                .map(|(k, wt)| wt * horizontal[((tap.start + k) * out_width + ox) * CHANNELS + c])
                                .sum()
                        }
                    };
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    VideoTensor::new(out_width, out_height, frames, video.fps(), out)
}
